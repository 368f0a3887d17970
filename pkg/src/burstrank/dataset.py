"""Bursts, pairwise labels, dataset files, sampling, and the synthetic oracle.

A burst is an ordered set of frames from one capture session; ranking is only
defined within a burst. Pair labels carry a relative-goodness margin
delta_y in {0,1,2} and are kept in canonical orientation: `better` is the
not-worse frame, and ties are ordered lexicographically so serialized
datasets are byte-stable.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .featstore import FeatureMap

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
VALID_VOTES = (-2, -1, 0, 1, 2)


@dataclass(frozen=True)
class Frame:
    frame_id: str
    feature_ref: str


@dataclass
class Burst:
    burst_id: str
    frames: list[Frame]

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InputError(f"burst {self.burst_id!r} has {len(self.frames)} frames; need >= 2")
        seen = set()
        for f in self.frames:
            if f.frame_id in seen:
                raise InputError(f"burst {self.burst_id!r}: duplicate frame_id {f.frame_id!r}")
            seen.add(f.frame_id)

    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]


@dataclass(frozen=True)
class VoteSet:
    """Raw votes for one pair; positive means frame_a is better, magnitude 2
    means significantly better."""

    burst_id: str
    frame_a: str
    frame_b: str
    votes: tuple[int, ...]


@dataclass(frozen=True)
class PairLabel:
    """Canonically oriented pair: `better` is not worse than `other`.

    delta_y in {0,1,2}; when delta_y == 0 the orientation is lexicographic.
    """

    burst_id: str
    better: str
    other: str
    delta_y: int


@dataclass
class LabeledDataset:
    bursts: dict[str, Burst]
    splits: dict[str, str]
    pairs: list[PairLabel]
    pairs_by_burst: dict[str, list[PairLabel]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.pairs_by_burst:
            by: dict[str, list[PairLabel]] = {}
            for p in self.pairs:
                by.setdefault(p.burst_id, []).append(p)
            self.pairs_by_burst = by

    def burst_ids(self, split: str | None = None) -> list[str]:
        ids = sorted(self.bursts)
        if split is None:
            return ids
        return [b for b in ids if self.splits[b] == split]

    def tie_fraction(self) -> float:
        if not self.pairs:
            return 0.0
        return sum(1 for p in self.pairs if p.delta_y == 0) / len(self.pairs)

    def summary(self) -> dict:
        counts = {s: len(self.burst_ids(s)) for s in SPLITS}
        return {
            "bursts": len(self.bursts),
            "splits": counts,
            "pairs": len(self.pairs),
            "tie_fraction": self.tie_fraction(),
        }


def consolidate_votes(v: VoteSet) -> PairLabel:
    """Average the signed votes and round half away from zero.

    Orientation is flipped so the mean is >= 0; an all-round tie is ordered
    lexicographically. Exact integer arithmetic, so orientation equivariance
    holds bit-for-bit.
    """
    if not v.votes:
        raise InputError(f"pair ({v.frame_a},{v.frame_b}) in burst {v.burst_id!r}: empty vote list")
    if v.frame_a == v.frame_b:
        raise InputError(f"burst {v.burst_id!r}: vote pair references frame {v.frame_a!r} twice")
    for x in v.votes:
        if x not in VALID_VOTES:
            raise InputError(f"vote {x} out of range {VALID_VOTES}")
    a, b = v.frame_a, v.frame_b
    score = sum(v.votes)
    if score < 0:
        a, b = b, a
        score = -score
    n = len(v.votes)
    delta = (2 * score + n) // (2 * n)  # round(|mean|), half away from zero
    if delta == 0:
        a, b = sorted((a, b))
    return PairLabel(v.burst_id, a, b, delta)


def canonical_pair(burst_id: str, better: str, other: str, delta_y: int) -> PairLabel:
    if better == other:
        raise InputError(f"burst {burst_id!r}: pair references frame {better!r} twice")
    if delta_y not in (0, 1, 2):
        raise InputError(f"delta_y must be 0, 1, or 2, got {delta_y}")
    if delta_y == 0:
        better, other = sorted((better, other))
    return PairLabel(burst_id, better, other, delta_y)


# ---------------------------------------------------------------------------
# Manifest / pairs files
# ---------------------------------------------------------------------------

def load_manifest(path, pairs_path=None) -> LabeledDataset:
    """Load a JSON burst manifest, optionally attaching a pairs CSV.

    Every validation failure names the offending record. Without a pairs
    file the dataset is valid with zero pairs (warned).
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("bursts"), list):
        raise InputError(f"{path}: manifest must be an object with a 'bursts' list")

    bursts: dict[str, Burst] = {}
    splits: dict[str, str] = {}
    for i, rec in enumerate(doc["bursts"]):
        ctx = f"{path}: bursts[{i}]"
        if not isinstance(rec, dict):
            raise InputError(f"{ctx}: not an object")
        burst_id = rec.get("burst_id")
        split = rec.get("split")
        frames = rec.get("frames")
        if not isinstance(burst_id, str) or not burst_id:
            raise InputError(f"{ctx}: missing or empty burst_id")
        if burst_id in bursts:
            raise InputError(f"{ctx}: duplicate burst_id {burst_id!r}")
        if split not in SPLITS:
            raise InputError(f"{ctx} ({burst_id!r}): split must be one of {SPLITS}, got {split!r}")
        if not isinstance(frames, list):
            raise InputError(f"{ctx} ({burst_id!r}): missing 'frames' list")
        parsed = []
        for j, fr in enumerate(frames):
            fctx = f"{ctx}.frames[{j}]"
            if not isinstance(fr, dict) or not isinstance(fr.get("frame_id"), str) \
                    or not isinstance(fr.get("feature_ref"), str):
                raise InputError(f"{fctx}: frame needs string frame_id and feature_ref")
            parsed.append(Frame(fr["frame_id"], fr["feature_ref"]))
        try:
            bursts[burst_id] = Burst(burst_id, parsed)
        except InputError as e:
            raise InputError(f"{ctx}: {e}") from None
        splits[burst_id] = split

    pairs: list[PairLabel] = []
    if pairs_path is not None:
        pairs = load_pairs(pairs_path, bursts)
    ds = LabeledDataset(bursts, splits, pairs)
    if not pairs:
        log.warning("%s: dataset has zero pairs", path)
    else:
        log.info("%s: %d bursts, %d pairs, tie fraction %.3f",
                 path, len(bursts), len(pairs), ds.tie_fraction())
    return ds


RAW_HEADER = ["burst_id", "frame_a", "frame_b", "v1", "v2", "v3", "v4", "v5"]
CONSOLIDATED_HEADER = ["burst_id", "frame_a", "frame_b", "delta_y"]


def load_pairs(path, bursts: dict[str, Burst]) -> list[PairLabel]:
    """Load a pairs CSV; the header decides raw-votes vs consolidated form."""
    path = Path(path)
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except FileNotFoundError:
        raise InputError(f"pairs file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty pairs file (missing header)") from None
        header = [h.strip() for h in header]
        if header == RAW_HEADER:
            raw = True
        elif header == CONSOLIDATED_HEADER:
            raw = False
        else:
            raise InputError(
                f"{path}:1: unrecognized header {header}; expected "
                f"{','.join(RAW_HEADER)} or {','.join(CONSOLIDATED_HEADER)}")

        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            ctx = f"{path}:{lineno}"
            if len(row) != len(header):
                raise InputError(f"{ctx}: expected {len(header)} fields, got {len(row)}")
            burst_id, fa, fb = row[0], row[1], row[2]
            burst = bursts.get(burst_id)
            if burst is None:
                raise InputError(f"{ctx}: pair references unknown burst {burst_id!r}")
            known = set(burst.frame_ids())
            for f in (fa, fb):
                if f not in known:
                    raise InputError(
                        f"{ctx}: frame {f!r} not in burst {burst_id!r}")
            try:
                if raw:
                    votes = tuple(int(x) for x in row[3:])
                    pair = consolidate_votes(VoteSet(burst_id, fa, fb, votes))
                else:
                    pair = canonical_pair(burst_id, fa, fb, int(row[3]))
            except (ValueError, InputError) as e:
                raise InputError(f"{ctx}: {e}") from None
            pairs.append(pair)
    return pairs


def save_manifest(ds: LabeledDataset, path) -> None:
    doc = {"bursts": [
        {
            "burst_id": b.burst_id,
            "split": ds.splits[b.burst_id],
            "frames": [{"frame_id": f.frame_id, "feature_ref": f.feature_ref}
                       for f in b.frames],
        }
        for b in (ds.bursts[k] for k in sorted(ds.bursts))
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def save_pairs(pairs: list[PairLabel], path) -> None:
    """Write consolidated-form pairs, sorted for byte-stable output."""
    rows = sorted(pairs, key=lambda p: (p.burst_id, p.better, p.other))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CONSOLIDATED_HEADER)
        for p in rows:
            writer.writerow([p.burst_id, p.better, p.other, p.delta_y])


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_minibatch(ds: LabeledDataset, size: int,
                     rng: np.random.Generator) -> list[PairLabel]:
    """Draw `size` pairs from `size` distinct train bursts.

    Uniform over eligible bursts, then uniform over that burst's pairs.
    Deterministic given the generator state.
    """
    eligible = [b for b in ds.burst_ids("train") if ds.pairs_by_burst.get(b)]
    if size < 1:
        raise InputError(f"batch size must be >= 1, got {size}")
    if len(eligible) < size:
        raise InputError(
            f"only {len(eligible)} train bursts with pairs; "
            f"lower the batch size to at most {len(eligible)}")
    chosen = rng.choice(len(eligible), size=size, replace=False)
    batch = []
    for idx in chosen:
        pool = ds.pairs_by_burst[eligible[int(idx)]]
        batch.append(pool[int(rng.integers(len(pool)))])
    return batch


# ---------------------------------------------------------------------------
# Synthetic oracle
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    attrs: int = 5
    channels: int = 8
    height: int = 8
    width: int = 8
    tie_threshold: float = 0.3
    strong_threshold: float = 0.9
    noise: float = 0.01
    amplitude: float = 3.0  # scale of the attribute embedding in the maps


@dataclass
class SyntheticOracle:
    """Planted ground truth: score of a frame is planted_weights . attributes."""

    planted_weights: np.ndarray
    thresholds: tuple[float, float]
    embed: np.ndarray  # (channels, attrs), orthonormal columns, scaled
    attributes: dict[tuple[str, str], np.ndarray]

    def planted_score(self, burst_id: str, frame_id: str) -> float:
        return float(self.planted_weights @ self.attributes[(burst_id, frame_id)])

    def label_for(self, burst_id: str, fa: str, fb: str) -> PairLabel:
        d = self.planted_score(burst_id, fa) - self.planted_score(burst_id, fb)
        t0, t1 = self.thresholds
        if abs(d) < t0:
            return canonical_pair(burst_id, fa, fb, 0)
        delta = 1 if abs(d) < t1 else 2
        better, other = (fa, fb) if d > 0 else (fb, fa)
        return PairLabel(burst_id, better, other, delta)

    def to_json(self) -> dict:
        return {
            "planted_weights": self.planted_weights.tolist(),
            "thresholds": list(self.thresholds),
            "embed": self.embed.tolist(),
            "attributes": {f"{b}/{f}": a.tolist()
                           for (b, f), a in sorted(self.attributes.items())},
        }


@dataclass
class SynthResult:
    dataset: LabeledDataset
    oracle: SyntheticOracle
    features: dict[str, FeatureMap]


def synth_generate(cfg: SynthConfig, n_bursts: int, frames_per_burst: int,
                   rng: np.random.Generator,
                   n_val: int = 0, n_test: int = 0) -> SynthResult:
    """Generate a planted-oracle dataset with all intra-burst pairs labeled.

    Attribute vectors are embedded into feature maps through a fixed random
    orthonormal linear map (per-run, seeded) plus bounded uniform noise, so
    labels are exactly reproducible from the planted scores.
    """
    if cfg.attrs < 1:
        raise InputError(f"attrs must be >= 1, got {cfg.attrs}")
    if cfg.channels < cfg.attrs:
        raise InputError(
            f"channels ({cfg.channels}) must be >= attrs ({cfg.attrs}) "
            "for an orthonormal embedding")
    if not (0.0 <= cfg.tie_threshold < cfg.strong_threshold):
        raise InputError(
            f"need 0 <= tie_threshold < strong_threshold, got "
            f"({cfg.tie_threshold}, {cfg.strong_threshold})")
    if frames_per_burst < 2:
        raise InputError(f"frames_per_burst must be >= 2, got {frames_per_burst}")
    if n_val + n_test >= n_bursts:
        raise InputError(
            f"n_val + n_test ({n_val}+{n_test}) must leave at least one train burst "
            f"out of {n_bursts}")

    q, _ = np.linalg.qr(rng.standard_normal((cfg.channels, cfg.channels)))
    embed = q[:, :cfg.attrs] * cfg.amplitude
    weights = rng.uniform(0.5, 1.5, cfg.attrs)

    b_width = max(4, len(str(n_bursts - 1)))
    f_width = max(2, len(str(frames_per_burst - 1)))

    bursts: dict[str, Burst] = {}
    splits: dict[str, str] = {}
    attributes: dict[tuple[str, str], np.ndarray] = {}
    features: dict[str, FeatureMap] = {}
    pairs: list[PairLabel] = []
    oracle = SyntheticOracle(weights, (cfg.tie_threshold, cfg.strong_threshold),
                             embed, attributes)

    for bi in range(n_bursts):
        burst_id = f"b{bi:0{b_width}d}"
        frames = []
        for fi in range(frames_per_burst):
            frame_id = f"f{fi:0{f_width}d}"
            ref = f"features/{burst_id}_{frame_id}.brf"
            attr = rng.uniform(0.0, 1.0, cfg.attrs)
            base = embed @ attr
            noise = rng.uniform(-cfg.noise, cfg.noise,
                                (cfg.channels, cfg.height, cfg.width))
            data = base[:, None, None] + noise
            attributes[(burst_id, frame_id)] = attr
            features[ref] = FeatureMap(data.astype(np.float32))
            frames.append(Frame(frame_id, ref))
        bursts[burst_id] = Burst(burst_id, frames)
        if bi < n_bursts - n_val - n_test:
            splits[burst_id] = "train"
        elif bi < n_bursts - n_test:
            splits[burst_id] = "val"
        else:
            splits[burst_id] = "test"
        ids = [f.frame_id for f in frames]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                pairs.append(oracle.label_for(burst_id, ids[i], ids[j]))

    ds = LabeledDataset(bursts, splits, pairs)
    return SynthResult(ds, oracle, features)
