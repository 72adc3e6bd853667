"""Synthetic ordinal-feature benchmark with a controllable domain shift.

Class means sit on a line through feature space at evenly spaced positions,
so grade order is geometric. The target domain is a fresh draw from the same
class-conditional distribution pushed through a rotation plus a bias, which
breaks an encoder fitted on the source domain without destroying the
ordinal structure itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

# integer tags for deriving independent RNG substreams from one seed
_SUB_SOURCE = 0
_SUB_TARGET = 1
_SUB_SHIFT = 2
_SUB_SPLIT = 3


@dataclass
class Dataset:
    features: np.ndarray  # n x d_in
    labels: np.ndarray  # n ints in [0, k)
    k: int
    domain_tag: str
    seed: int

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[idx].copy(),
            labels=self.labels[idx].copy(),
            k=self.k,
            domain_tag=self.domain_tag,
            seed=self.seed,
        )


@dataclass
class SyntheticConfig:
    n: int = 3662
    d_in: int = 64
    k: int = 5
    seed: int = 42
    proportions: tuple[float, ...] = (0.50, 0.10, 0.27, 0.05, 0.08)
    separation: float = 4.0
    noise: float = 1.0
    shift_angle: float = 0.5
    shift_bias: float = 0.5

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError("need at least two grades")
        if len(self.proportions) != self.k:
            raise ConfigError("proportions length must equal k")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ConfigError("proportions must sum to 1")
        if any(p < 0 for p in self.proportions):
            raise ConfigError("proportions must be nonnegative")
        if self.noise <= 0:
            raise ConfigError("noise sigma must be positive")
        if self.n < self.k:
            raise ConfigError("need n >= k samples")
        if self.d_in < 2:
            raise ConfigError("need d_in >= 2")


def apportion(n: int, proportions: tuple[float, ...]) -> list[int]:
    """Largest-remainder allocation of n slots; ties go to the smaller index."""
    quotas = [n * p for p in proportions]
    counts = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    remainders = sorted(
        range(len(proportions)), key=lambda j: (-(quotas[j] - counts[j]), j)
    )
    for j in remainders[:leftover]:
        counts[j] += 1
    return counts


def class_means(cfg: SyntheticConfig) -> np.ndarray:
    """k x d_in matrix of class means along the first axis."""
    means = np.zeros((cfg.k, cfg.d_in))
    for j in range(cfg.k):
        means[j, 0] = (j / (cfg.k - 1)) * cfg.separation
    return means


def _draw(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    counts = apportion(cfg.n, cfg.proportions)
    means = class_means(cfg)
    feats = np.empty((cfg.n, cfg.d_in))
    labels = np.empty(cfg.n, dtype=np.int64)
    pos = 0
    for j, c in enumerate(counts):
        feats[pos : pos + c] = means[j] + cfg.noise * rng.standard_normal((c, cfg.d_in))
        labels[pos : pos + c] = j
        pos += c
    return feats, labels


def apply_domain_shift(
    features: np.ndarray, shift_angle: float, shift_bias: float, seed: int
) -> np.ndarray:
    """Rotate in the plane of axes (0,1), rotate by the same angle in a seeded
    random 2-plane disjoint from those axes, then add a bias along axis 0."""
    d = features.shape[1]
    if d < 2:
        raise ConfigError("domain shift requires d_in >= 2")
    out = features.copy()

    c, s = np.cos(shift_angle), np.sin(shift_angle)
    x0, x1 = out[:, 0].copy(), out[:, 1].copy()
    out[:, 0] = c * x0 - s * x1
    out[:, 1] = s * x0 + c * x1

    if d >= 4:
        rng = np.random.default_rng(np.random.SeedSequence((seed, _SUB_SHIFT)))
        basis = rng.standard_normal((d - 2, 2))
        q, _ = np.linalg.qr(basis)
        sub = out[:, 2:]
        coords = sub @ q  # n x 2 coordinates in the random plane
        r0 = c * coords[:, 0] - s * coords[:, 1]
        r1 = s * coords[:, 0] + c * coords[:, 1]
        rotated = np.stack([r0, r1], axis=1)
        out[:, 2:] = sub + (rotated - coords) @ q.T

    out[:, 0] += shift_bias
    return out


def gen_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Source dataset plus an independently redrawn, shifted target dataset."""
    src_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _SUB_SOURCE)))
    tgt_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _SUB_TARGET)))
    src_feats, src_labels = _draw(cfg, src_rng)
    tgt_feats, tgt_labels = _draw(cfg, tgt_rng)
    tgt_feats = apply_domain_shift(tgt_feats, cfg.shift_angle, cfg.shift_bias, cfg.seed)
    source = Dataset(src_feats, src_labels, cfg.k, "source", cfg.seed)
    target = Dataset(tgt_feats, tgt_labels, cfg.k, "target", cfg.seed)
    return source, target


def stratified_split(
    ds: Dataset, train_fraction: float = 0.7, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Per-class split: floor(count * fraction) to train, leftovers by largest
    fractional remainder (ties toward the smaller class index)."""
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError("train_fraction must be in (0, 1)")
    counts = np.bincount(ds.labels, minlength=ds.k)
    if np.any(counts == 0):
        empty = int(np.argmin(counts))
        raise DataError(f"class {empty} has no samples; cannot stratify")

    quotas = counts * train_fraction
    takes = np.floor(quotas).astype(int)
    total_train = int(np.floor(ds.n * train_fraction))
    leftover = total_train - int(takes.sum())
    order = sorted(range(ds.k), key=lambda j: (-(quotas[j] - takes[j]), j))
    for j in order[:leftover]:
        takes[j] += 1

    rng = np.random.default_rng(np.random.SeedSequence((seed, _SUB_SPLIT)))
    train_idx: list[int] = []
    test_idx: list[int] = []
    for j in range(ds.k):
        members = np.flatnonzero(ds.labels == j)
        perm = rng.permutation(members)
        train_idx.extend(perm[: takes[j]].tolist())
        test_idx.extend(perm[takes[j] :].tolist())
    train_idx.sort()
    test_idx.sort()
    return ds.subset(np.array(train_idx, dtype=np.intp)), ds.subset(
        np.array(test_idx, dtype=np.intp)
    )


# ---------------------------------------------------------------------------
# file I/O: CSV of label,f0..f{d-1} plus a JSON metadata sidecar


def write_dataset(path: str | Path, ds: Dataset) -> None:
    path = Path(path)
    header = "label," + ",".join(f"f{i}" for i in range(ds.d_in))
    lines = [header]
    for lab, row in zip(ds.labels, ds.features):
        lines.append(str(int(lab)) + "," + ",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    meta = {
        "n": int(ds.n),
        "d_in": int(ds.d_in),
        "k": int(ds.k),
        "domain_tag": ds.domain_tag,
        "seed": int(ds.seed),
    }
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8", newline="\n"
    )


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise ParseError(f"metadata not found: {meta_path}")
    if not path.exists():
        raise ParseError(f"dataset file not found: {path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    n, d_in, k = meta["n"], meta["d_in"], meta["k"]

    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    expected_header = "label," + ",".join(f"f{i}" for i in range(d_in))
    if not lines or lines[0] != expected_header:
        raise ParseError(f"header mismatch at line 1: expected '{expected_header}'")
    rows = lines[1:]
    if len(rows) != n:
        raise ParseError(f"expected {n} data rows, found {len(rows)}")

    feats = np.empty((n, d_in))
    labels = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows):
        lineno = i + 2
        parts = row.split(",")
        if len(parts) != d_in + 1:
            raise ParseError(
                f"row length mismatch at line {lineno}: "
                f"expected {d_in + 1} fields, got {len(parts)}"
            )
        try:
            lab = int(parts[0])
        except ValueError:
            raise ParseError(f"non-integer label '{parts[0]}' at line {lineno}")
        if not (0 <= lab < k):
            raise ParseError(f"label {lab} out of range [0,{k}) at line {lineno}")
        labels[i] = lab
        try:
            feats[i] = [float(v) for v in parts[1:]]
        except ValueError:
            raise ParseError(f"non-numeric feature at line {lineno}")
    return Dataset(feats, labels, k, meta["domain_tag"], meta["seed"])
