"""Runnable discrepancy diagnostics: marginal gap via a proxy A-distance
probe, conditional gap via class-prototype distances, their additive
decomposition with the error-bound pieces, and 2-D PCA projections for
figures.

The optimal-joint-error term of the bound is not estimable here and is
always reported as the string "unknown"; the additive total is
definitional (built as the exact sum of the two measured parts), not an
independent estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import marginal, model
from .seeds import derive_seed


class DiagnosticError(ValueError):
    """Diagnostic preconditions violated (too few samples, no matched classes)."""


@dataclass
class DiscrepancyReport:
    d_h_proxy: float
    d_c_empirical: float
    epsilon_s: float
    lambda_status: str = "unknown"
    skipped_classes: int = 0
    epsilon_t: float | None = None
    d_j: float = field(init=False)
    bound_partial: float = field(init=False)

    def __post_init__(self):
        self.d_j = self.d_h_proxy + self.d_c_empirical
        self.bound_partial = self.epsilon_s + self.d_j

    def as_dict(self) -> dict:
        return {
            "d_h_proxy": self.d_h_proxy,
            "d_c_empirical": self.d_c_empirical,
            "d_j": self.d_j,
            "epsilon_s": self.epsilon_s,
            "bound_partial": self.bound_partial,
            "lambda": self.lambda_status,
            "skipped_classes": self.skipped_classes,
            "epsilon_t": self.epsilon_t,
        }


def proxy_a_distance(feats_s: np.ndarray, feats_t: np.ndarray, seed: int,
                     hidden: int = 16, steps: int = 200, lr: float = 0.5) -> float:
    """Train a fresh domain probe on a 50/50 split and return
    max(0, 2(1 - 2 * held-out error)). Deterministic given the seed."""
    feats_s = np.asarray(feats_s, dtype=np.float64)
    feats_t = np.asarray(feats_t, dtype=np.float64)
    if min(feats_s.shape[0], feats_t.shape[0]) < 20:
        raise DiagnosticError("proxy A-distance needs >= 20 samples per domain")
    rng = np.random.default_rng(seed)

    def split(x):
        perm = rng.permutation(x.shape[0])
        half = x.shape[0] // 2
        return x[perm[:half]], x[perm[half:]]

    s_train, s_test = split(feats_s)
    t_train, t_test = split(feats_t)
    disc = marginal.init_discriminator(feats_s.shape[1], hidden,
                                       int(rng.integers(2 ** 31)), tag="proxy-a")
    xs = ad.Tensor(s_train)
    xt = ad.Tensor(t_train)
    for _ in range(steps):
        with ad.Tape():
            loss = marginal.domain_loss(disc, xs, xt)
        grads = ad.backward(loss)
        ad.sgd_step(disc.params(), grads, lr)
    p_s = marginal.discriminate(disc, ad.Tensor(s_test)).data[:, 0]
    p_t = marginal.discriminate(disc, ad.Tensor(t_test)).data[:, 0]
    errors = np.concatenate([(p_s < 0.5), (p_t >= 0.5)])
    eps = float(errors.mean())
    return max(0.0, 2.0 * (1.0 - 2.0 * eps))


def _class_mean_gaps(feats_s, labels_s, feats_t, labels_t):
    labels_s = np.asarray(labels_s).ravel()
    labels_t = np.asarray(labels_t).ravel()
    classes = np.union1d(np.unique(labels_s), np.unique(labels_t))
    gaps, skipped = [], 0
    for c in classes:
        in_s = labels_s == c
        in_t = labels_t == c
        if not in_s.any() or not in_t.any():
            skipped += 1
            continue
        gap = feats_s[in_s].mean(axis=0) - feats_t[in_t].mean(axis=0)
        gaps.append(float(np.linalg.norm(gap)))
    return gaps, skipped


def conditional_discrepancy(feats_s: np.ndarray, labels_s, feats_t: np.ndarray,
                            labels_t) -> float:
    """Mean Euclidean distance between class-conditional feature means,
    over classes present in both domains."""
    gaps, _ = _class_mean_gaps(np.asarray(feats_s, dtype=np.float64), labels_s,
                               np.asarray(feats_t, dtype=np.float64), labels_t)
    if not gaps:
        raise DiagnosticError("no class present in both domains")
    return float(np.mean(gaps))


def make_report(mdl: model.PromptModel, source_batch, target_batch,
                hidden_target_labels=None, seed: int = 0,
                proxy_hidden: int = 16, proxy_steps: int = 200) -> DiscrepancyReport:
    """Full decomposition report on encoded features. Hidden target labels
    are optional and feed only the epsilon_t evaluation field."""
    if source_batch.y is None:
        raise ValueError("source batch must be labeled")
    enc, prompt = mdl.encoders, mdl.prompt
    feats_s = model.encode_image(enc, prompt, ad.Tensor(source_batch.x)).data
    feats_t = model.encode_image(enc, prompt, ad.Tensor(target_batch.x)).data
    text = model.encode_text_all(enc, prompt)
    probs_s = model.class_probs(ad.Tensor(feats_s), text, enc.tau).data
    probs_t = model.class_probs(ad.Tensor(feats_t), text, enc.tau).data
    pred_s = probs_s.argmax(axis=1)
    pseudo_t = probs_t.argmax(axis=1)

    eps_s = float((pred_s != source_batch.y).mean())
    d_h = proxy_a_distance(feats_s, feats_t, derive_seed(seed, "proxy-a"),
                           hidden=proxy_hidden, steps=proxy_steps)
    gaps, skipped = _class_mean_gaps(feats_s, source_batch.y, feats_t, pseudo_t)
    if not gaps:
        raise DiagnosticError("no class present in both domains")
    d_c = float(np.mean(gaps))
    eps_t = None
    if hidden_target_labels is not None:
        eps_t = float((pseudo_t != np.asarray(hidden_target_labels)).mean())
    return DiscrepancyReport(d_h_proxy=d_h, d_c_empirical=d_c, epsilon_s=eps_s,
                             skipped_classes=skipped, epsilon_t=eps_t)


def pca_project(feats: np.ndarray, dims: int = 2) -> np.ndarray:
    """Project onto the top principal components of the covariance.

    Component signs are fixed (first nonzero loading positive) so the
    output is deterministic.
    """
    feats = np.asarray(feats, dtype=np.float64)
    n, d = feats.shape
    if n < 2:
        raise DiagnosticError("PCA needs at least 2 samples")
    if d < dims:
        raise DiagnosticError(f"PCA to {dims} dims needs feature width >= {dims}")
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[-1] <= 1e-30:
        raise DiagnosticError("degenerate data: zero covariance")
    order = np.argsort(eigvals)[::-1][:dims]
    components = eigvecs[:, order]
    for j in range(components.shape[1]):
        col = components[:, j]
        nonzero = np.flatnonzero(np.abs(col) > 1e-12)
        if nonzero.size and col[nonzero[0]] < 0:
            components[:, j] = -col
    return centered @ components


def pca_eigenvalues(feats: np.ndarray) -> np.ndarray:
    """Descending covariance eigenvalues (diagnostic companion to pca_project)."""
    feats = np.asarray(feats, dtype=np.float64)
    centered = feats - feats.mean(axis=0)
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return np.sort(np.linalg.eigvalsh(cov))[::-1]
