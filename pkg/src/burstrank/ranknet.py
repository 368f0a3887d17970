"""Scoring heads and the residual generator.

Three head variants map a feature map to one scalar goodness score:

* head A: 1x1 conv down to a single map, then global average pooling;
* head B: global average pooling, then a fully connected layer;
* head C: 1x1 conv projection into a low-dimensional attribute space
  (ReLU after the projection), pooled into the attribute vector x, then a
  linear layer W.x + b. The scoring layer never has a nonlinearity.

The generator is a small MLP taking (x, gaussian noise) and emitting a
residual e so that x' = x + e acts as a synthetic improved sample during
training; its final layer starts at zero so training begins from e = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .errors import FormatError, InputError
from .featstore import FeatureMap
from .numkernel import Parameter, Tape, Tensor

HEAD_KINDS = ("a", "b", "c")
PROJECT_THEN_POOL = "project_then_pool"
POOL_THEN_PROJECT = "pool_then_project"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


@dataclass
class RankerModel:
    head_kind: str
    channels: int
    attrs: int = 0
    head_c_order: str = PROJECT_THEN_POOL
    params: dict[str, Parameter] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def config(self) -> dict:
        return {
            "head_kind": self.head_kind,
            "channels": self.channels,
            "attrs": self.attrs,
            "head_c_order": self.head_c_order,
        }


def init_ranker(head_kind: str, channels: int, attrs: int = 0,
                rng: np.random.Generator | None = None,
                head_c_order: str = PROJECT_THEN_POOL) -> RankerModel:
    """Fan-in-scaled uniform weights, zero biases."""
    if head_kind not in HEAD_KINDS:
        raise InputError(f"head_kind must be one of {HEAD_KINDS}, got {head_kind!r}")
    if channels < 1:
        raise InputError(f"channels must be >= 1, got {channels}")
    if head_kind == "c" and attrs < 1:
        raise InputError("head c needs attrs >= 1")
    if head_kind != "c":
        attrs = 0
    if head_c_order not in (PROJECT_THEN_POOL, POOL_THEN_PROJECT):
        raise InputError(f"unknown head_c_order {head_c_order!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    params: dict[str, Parameter] = {}
    if head_kind == "c":
        params["proj_w"] = Parameter("proj_w", _uniform(rng, (attrs, channels), channels))
        params["proj_b"] = Parameter("proj_b", np.zeros(attrs))
        params["score_w"] = Parameter("score_w", _uniform(rng, (1, attrs), attrs))
        params["score_b"] = Parameter("score_b", np.zeros(1))
    else:
        params["score_w"] = Parameter("score_w", _uniform(rng, (1, channels), channels))
        params["score_b"] = Parameter("score_b", np.zeros(1))
    return RankerModel(head_kind, channels, attrs, head_c_order, params)


def _feature_data(model: RankerModel, f) -> np.ndarray:
    data = f.data if isinstance(f, FeatureMap) else np.asarray(f)
    if data.ndim != 3:
        raise InputError(f"feature map must be (C,H,W), got shape {data.shape}")
    if data.shape[0] != model.channels:
        raise InputError(
            f"feature map has {data.shape[0]} channels, model expects {model.channels}")
    return data.astype(np.float64)


def attribute_vector(model: RankerModel, f, tape: Tape | None = None) -> Tensor:
    """The intermediate attribute vector x of head C (nonnegative, post-ReLU)."""
    if model.head_kind != "c":
        raise InputError(f"attribute vectors exist only for head c, not {model.head_kind!r}")
    data = _feature_data(model, f)
    p = model.params
    if model.head_c_order == PROJECT_THEN_POOL:
        maps = nk.pointwise_conv(tape, data, p["proj_w"], p["proj_b"])
        return nk.global_avg_pool(tape, nk.relu(tape, maps))
    pooled = nk.global_avg_pool(tape, data)
    return nk.relu(tape, nk.dense(tape, pooled, p["proj_w"], p["proj_b"]))


def score_attributes(model: RankerModel, x, tape: Tape | None = None) -> Tensor:
    """Linear ranker over the attribute space: W.x + b, shape (1,)."""
    if model.head_kind != "c":
        raise InputError(f"score_attributes needs head c, not {model.head_kind!r}")
    return nk.dense(tape, x, model.params["score_w"], model.params["score_b"])


def score(model: RankerModel, f, tape: Tape | None = None) -> Tensor:
    """Scalar goodness score of one feature map, shape (1,)."""
    p = model.params
    if model.head_kind == "a":
        data = _feature_data(model, f)
        maps = nk.pointwise_conv(tape, data, p["score_w"], p["score_b"])
        return nk.global_avg_pool(tape, maps)
    if model.head_kind == "b":
        data = _feature_data(model, f)
        pooled = nk.global_avg_pool(tape, data)
        return nk.dense(tape, pooled, p["score_w"], p["score_b"])
    return score_attributes(model, attribute_vector(model, f, tape), tape)


@dataclass
class GeneratorModel:
    attrs: int
    noise_dim: int
    hidden: int
    params: dict[str, Parameter] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def config(self) -> dict:
        return {"attrs": self.attrs, "noise_dim": self.noise_dim, "hidden": self.hidden}


def init_generator(attrs: int, noise_dim: int | None = None,
                   rng: np.random.Generator | None = None) -> GeneratorModel:
    """Two hidden layers of width 4*attrs; zero-initialized output layer."""
    if attrs < 1:
        raise InputError(f"generator attrs must be >= 1, got {attrs}")
    noise_dim = attrs if noise_dim is None else noise_dim
    if noise_dim < 1:
        raise InputError(f"noise_dim must be >= 1, got {noise_dim}")
    rng = rng if rng is not None else np.random.default_rng(0)
    hidden = 4 * attrs
    in_dim = attrs + noise_dim
    params = {
        "l1_w": Parameter("l1_w", _uniform(rng, (hidden, in_dim), in_dim)),
        "l1_b": Parameter("l1_b", np.zeros(hidden)),
        "l2_w": Parameter("l2_w", _uniform(rng, (hidden, hidden), hidden)),
        "l2_b": Parameter("l2_b", np.zeros(hidden)),
        "l3_w": Parameter("l3_w", np.zeros((attrs, hidden))),
        "l3_b": Parameter("l3_b", np.zeros(attrs)),
    }
    return GeneratorModel(attrs, noise_dim, hidden, params)


def generate_residual(g: GeneratorModel, x, z, tape: Tape | None = None) -> Tensor:
    """Residual e = MLP(concat(x, z)); the caller forms x' = x + e."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    zd = np.asarray(z, dtype=np.float64)
    if xd.shape != (g.attrs,):
        raise InputError(f"attribute vector has shape {xd.shape}, expected ({g.attrs},)")
    if zd.shape != (g.noise_dim,):
        raise InputError(f"noise vector has shape {zd.shape}, expected ({g.noise_dim},)")
    p = g.params
    h = nk.concat(tape, x if isinstance(x, Tensor) else xd, zd)
    h = nk.relu(tape, nk.dense(tape, h, p["l1_w"], p["l1_b"]))
    h = nk.relu(tape, nk.dense(tape, h, p["l2_w"], p["l2_b"]))
    return nk.dense(tape, h, p["l3_w"], p["l3_b"])


# ---------------------------------------------------------------------------
# Checkpoints: BRK1 parameter table plus a JSON sidecar
# ---------------------------------------------------------------------------

def sidecar_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_suffix(p.suffix + ".json") if p.suffix != ".json" else p


def save_models(ckpt_path, ranker: RankerModel,
                generator: GeneratorModel | None = None) -> None:
    named: dict[str, np.ndarray] = {}
    for key in sorted(ranker.params):
        named[f"ranker/{key}"] = ranker.params[key].value
    if generator is not None:
        for key in sorted(generator.params):
            named[f"g/{key}"] = generator.params[key].value
    nk.save_checkpoint(ckpt_path, named)
    meta = {"ranker": ranker.config(),
            "generator": generator.config() if generator is not None else None}
    with open(sidecar_path(ckpt_path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def load_models(ckpt_path) -> tuple[RankerModel, GeneratorModel | None]:
    named = nk.load_checkpoint(ckpt_path)
    side = sidecar_path(ckpt_path)
    try:
        with open(side, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"missing model sidecar {side}") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{side}: invalid JSON: {e}") from None
    rc = meta.get("ranker") or {}
    ranker = init_ranker(rc.get("head_kind", "a"), rc.get("channels", 1),
                         rc.get("attrs", 0),
                         head_c_order=rc.get("head_c_order", PROJECT_THEN_POOL))
    _load_into(ranker.params, named, "ranker/", ckpt_path)
    generator = None
    gc = meta.get("generator")
    if gc is not None:
        generator = init_generator(gc["attrs"], gc["noise_dim"])
        _load_into(generator.params, named, "g/", ckpt_path)
    return ranker, generator


def _load_into(params: dict[str, Parameter], named: dict[str, np.ndarray],
               prefix: str, path) -> None:
    for key, param in params.items():
        stored = named.get(prefix + key)
        if stored is None:
            raise FormatError(f"{path}: missing parameter {prefix + key!r}")
        if stored.shape != param.value.shape:
            raise FormatError(
                f"{path}: parameter {prefix + key!r} has shape {stored.shape}, "
                f"expected {param.value.shape}")
        param.value[...] = stored
