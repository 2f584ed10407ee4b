"""Synthetic two-domain datasets with controllable marginal and
conditional shift, plus a plain-CSV interchange format for externally
computed features.

Class layouts keep inter-class distances uniform (orthogonal axes when
K <= d_in, otherwise a circle in the first two dims). The target domain
is the source layout pushed through scale/rotation/translation, then
perturbed per class by vectors of equal norm that sum to zero, so a
pure conditional shift leaves the pooled mean in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeds import rng_for


class FeatureFileError(ValueError):
    """Malformed feature CSV (carries the offending line number)."""


@dataclass
class MarginalShift:
    translation: tuple[float, ...] = ()
    rotation: float = 0.0
    scale: float = 1.0


@dataclass
class SyntheticSpec:
    k: int
    d_in: int
    n_source: int
    n_target: int
    separation: float = 3.0
    noise: float = 1.0
    marginal_shift: MarginalShift = field(default_factory=MarginalShift)
    conditional_shift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least 2 classes")
        if min(self.n_source, self.n_target) < self.k:
            raise ValueError("need at least one sample per class")
        if self.noise <= 0:
            raise ValueError("noise sigma must be positive")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if isinstance(self.marginal_shift, dict):
            self.marginal_shift = MarginalShift(**self.marginal_shift)
        t = self.marginal_shift.translation
        if t and len(t) != self.d_in:
            raise ValueError(f"translation has {len(t)} entries, expected {self.d_in}")


@dataclass
class DomainBatch:
    x: np.ndarray
    y: np.ndarray | None
    domain: str  # "s" or "t"

    def __post_init__(self):
        if self.domain not in ("s", "t"):
            raise ValueError(f"domain must be 's' or 't', got {self.domain!r}")
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=int)
            if self.y.shape[0] != self.x.shape[0]:
                raise ValueError("label count does not match row count")

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _class_layout(k: int, d_in: int, separation: float) -> np.ndarray:
    """Class centers with uniform inter-class spacing."""
    centers = np.zeros((k, d_in))
    if k <= d_in:
        for c in range(k):
            centers[c, c] = separation
    else:
        if d_in < 2:
            raise ValueError("circle layout needs d_in >= 2")
        angles = 2.0 * math.pi * np.arange(k) / k
        centers[:, 0] = separation * np.cos(angles)
        centers[:, 1] = separation * np.sin(angles)
    return centers


def _rotation_matrix(d_in: int, angle: float) -> np.ndarray:
    rot = np.eye(d_in)
    if angle != 0.0:
        if d_in < 2:
            raise ValueError("rotation needs d_in >= 2")
        c, s = math.cos(angle), math.sin(angle)
        rot[0, 0], rot[0, 1] = c, -s
        rot[1, 0], rot[1, 1] = s, c
    return rot


def _conditional_offsets(k: int, d_in: int, magnitude: float,
                         rng: np.random.Generator) -> np.ndarray:
    """K perturbations of equal norm summing to zero: equally spaced
    points on a circle inside a random 2-D subspace."""
    if magnitude == 0.0:
        return np.zeros((k, d_in))
    if d_in < 2:
        raise ValueError("conditional shift needs d_in >= 2")
    basis, _ = np.linalg.qr(rng.normal(size=(d_in, 2)))
    phase = rng.uniform(0.0, 2.0 * math.pi)
    angles = 2.0 * math.pi * np.arange(k) / k + phase
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return magnitude * circle @ basis.T


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def _apply_marginal(points: np.ndarray, shift: MarginalShift) -> np.ndarray:
    d_in = points.shape[1]
    out = points * shift.scale
    out = out @ _rotation_matrix(d_in, shift.rotation).T
    if shift.translation:
        out = out + np.asarray(shift.translation, dtype=np.float64)
    return out


def gen_gaussian_domains(spec: SyntheticSpec) -> tuple[DomainBatch, DomainBatch, np.ndarray]:
    """Gaussian blobs per class; returns (source, target, hidden target labels)."""
    rng = rng_for(spec.seed, "gaussian-domains")
    centers_s = _class_layout(spec.k, spec.d_in, spec.separation)
    centers_t = _apply_marginal(centers_s, spec.marginal_shift)
    centers_t = centers_t + _conditional_offsets(spec.k, spec.d_in,
                                                 spec.conditional_shift, rng)
    y_s = _balanced_labels(spec.n_source, spec.k, rng)
    y_t = _balanced_labels(spec.n_target, spec.k, rng)
    x_s = centers_s[y_s] + spec.noise * rng.normal(size=(spec.n_source, spec.d_in))
    x_t = centers_t[y_t] + spec.noise * rng.normal(size=(spec.n_target, spec.d_in))
    return (DomainBatch(x_s, y_s, "s"), DomainBatch(x_t, None, "t"), y_t)


def _moon_points(labels: np.ndarray, separation: float,
                 rng: np.random.Generator, d_in: int) -> np.ndarray:
    """Two interleaved half-circles, antipodal about the origin so a
    half-turn maps each moon onto the other's region."""
    t = rng.uniform(0.0, math.pi, size=labels.shape[0])
    base = np.stack([np.cos(t) - 0.5, np.sin(t) - 0.25], axis=1)
    base[labels == 1] *= -1.0
    points = np.zeros((labels.shape[0], d_in))
    points[:, :2] = separation * base
    return points


def gen_two_moons_shift(spec: SyntheticSpec) -> tuple[DomainBatch, DomainBatch, np.ndarray]:
    """Two-moons variant with a nonlinear boundary; same contract as the
    Gaussian generator. The marginal rotation acts about the layout center."""
    if spec.k != 2:
        raise ValueError("two-moons is a 2-class layout")
    if spec.d_in < 2:
        raise ValueError("two-moons needs d_in >= 2")
    rng = rng_for(spec.seed, "two-moons")
    y_s = _balanced_labels(spec.n_source, 2, rng)
    y_t = _balanced_labels(spec.n_target, 2, rng)
    x_s = _moon_points(y_s, spec.separation, rng, spec.d_in)
    x_t = _moon_points(y_t, spec.separation, rng, spec.d_in)
    x_t = _apply_marginal(x_t, spec.marginal_shift)
    offsets = _conditional_offsets(2, spec.d_in, spec.conditional_shift, rng)
    x_t = x_t + offsets[y_t]
    x_s = x_s + spec.noise * rng.normal(size=x_s.shape)
    x_t = x_t + spec.noise * rng.normal(size=x_t.shape)
    return (DomainBatch(x_s, y_s, "s"), DomainBatch(x_t, None, "t"), y_t)


GENERATORS = {
    "gaussian": gen_gaussian_domains,
    "moons": gen_two_moons_shift,
}


# ---------------------------------------------------------------------------
# CSV interchange: header `dim=<d>,domain=<s|t>,labeled=<0|1>`, then
# `x_1,...,x_d[,label]` rows; decimal floats, UTF-8, LF endings.


def save_domain_csv(path, batch: DomainBatch) -> None:
    labeled = batch.y is not None
    lines = [f"dim={batch.x.shape[1]},domain={batch.domain},labeled={int(labeled)}"]
    for i in range(batch.n):
        row = ",".join(repr(float(v)) for v in batch.x[i])
        if labeled:
            row += f",{int(batch.y[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_feature_file(path) -> DomainBatch:
    """Parse a feature CSV; malformed rows raise with their line number."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise FeatureFileError(f"{path}: empty file")
    header = lines[0].strip()
    fields = {}
    for part in header.split(","):
        if "=" not in part:
            raise FeatureFileError(f"{path}:1: bad header field {part!r}")
        key, _, value = part.partition("=")
        fields[key.strip()] = value.strip()
    try:
        dim = int(fields["dim"])
        domain = fields["domain"]
        labeled = bool(int(fields["labeled"]))
    except (KeyError, ValueError) as exc:
        raise FeatureFileError(f"{path}:1: bad header {header!r}") from exc
    if domain not in ("s", "t"):
        raise FeatureFileError(f"{path}:1: domain must be s or t, got {domain!r}")
    rows, labels = [], []
    width = dim + (1 if labeled else 0)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise FeatureFileError(
                f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[:dim]])
            if labeled:
                labels.append(int(parts[dim]))
        except ValueError as exc:
            raise FeatureFileError(f"{path}:{lineno}: unparseable value") from exc
    if not rows:
        raise FeatureFileError(f"{path}: no data rows")
    x = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=int) if labeled else None
    return DomainBatch(x, y, domain)


def save_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=int).ravel()
    Path(path).write_text("\n".join(str(int(v)) for v in labels) + "\n",
                          encoding="utf-8", newline="\n")


def load_labels(path) -> np.ndarray:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    try:
        return np.asarray([int(ln) for ln in lines], dtype=int)
    except ValueError as exc:
        raise FeatureFileError(f"{path}: labels must be integers") from exc
