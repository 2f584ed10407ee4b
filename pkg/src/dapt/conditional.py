"""Conditional alignment branch: cross-domain feature banks, the
attention-based class mapping over them, and its supervision loss.

Banks hold one center per class and domain: the mean of the C most
confident unit-norm features of that class. The mapping treats image
features as queries, source centers as keys and target centers as
values, scaled by sqrt(d), with a residual connection; a linear head
then produces class logits. Banks are constants: no gradient ever
flows into them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seeds import rng_for


@dataclass
class FeatureBank:
    source_centers: ad.Tensor      # K x d, constants
    target_centers: ad.Tensor      # K x d, constants
    top_c: int
    epoch_built: int
    source_counts: np.ndarray      # samples available per class
    target_counts: np.ndarray
    fallback_count: int            # classes whose center was substituted


@dataclass
class CMMHead:
    w: ad.Tensor                   # d x K
    b: ad.Tensor                   # 1 x K

    def params(self) -> list[ad.Tensor]:
        return [self.w, self.b]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"cmm_w": self.w.data, "cmm_b": self.b.data}


def init_cmm_head(d: int, k: int, seed: int) -> CMMHead:
    rng = rng_for(seed, "cmm-head")
    bound = 1.0 / np.sqrt(d)
    return CMMHead(
        w=ad.Tensor(rng.uniform(-bound, bound, (d, k)), requires_grad=True),
        b=ad.Tensor(np.zeros((1, k)), requires_grad=True),
    )


def _top_c_center(feats: np.ndarray, conf: np.ndarray, members: np.ndarray,
                  top_c: int) -> np.ndarray | None:
    if members.size == 0:
        return None
    # stable sort on -conf keeps ties in ascending sample order
    order = np.argsort(-conf[members], kind="stable")
    chosen = members[order[:top_c]]
    return feats[chosen].mean(axis=0)


def build_banks(source_feats: np.ndarray, source_labels: np.ndarray,
                source_conf: np.ndarray, target_feats: np.ndarray,
                target_labels: np.ndarray, target_conf: np.ndarray,
                top_c: int, k: int, epoch: int = 0) -> FeatureBank:
    """Per class and domain, average the C most confident features.

    A class empty on the target side copies the source center (and vice
    versa); both-empty classes get a zero row. Every substitution is
    counted in ``fallback_count`` so degraded banks stay visible.
    """
    if top_c < 1:
        raise ValueError("top_c must be >= 1")
    source_labels = np.asarray(source_labels)
    target_labels = np.asarray(target_labels)
    for name, labels in (("source", source_labels), ("target", target_labels)):
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise IndexError(f"{name} label outside [0, {k})")
    d = source_feats.shape[1]
    src = np.zeros((k, d))
    tgt = np.zeros((k, d))
    src_counts = np.zeros(k, dtype=int)
    tgt_counts = np.zeros(k, dtype=int)
    fallbacks = 0
    for c in range(k):
        members_s = np.flatnonzero(source_labels == c)
        members_t = np.flatnonzero(target_labels == c)
        src_counts[c] = members_s.size
        tgt_counts[c] = members_t.size
        center_s = _top_c_center(source_feats, source_conf, members_s, top_c)
        center_t = _top_c_center(target_feats, target_conf, members_t, top_c)
        if center_s is None and center_t is None:
            fallbacks += 2
        elif center_s is None:
            center_s = center_t
            fallbacks += 1
        elif center_t is None:
            center_t = center_s
            fallbacks += 1
        if center_s is not None:
            src[c] = center_s
        if center_t is not None:
            tgt[c] = center_t
    return FeatureBank(
        source_centers=ad.Tensor(src),
        target_centers=ad.Tensor(tgt),
        top_c=top_c,
        epoch_built=epoch,
        source_counts=src_counts,
        target_counts=tgt_counts,
        fallback_count=fallbacks,
    )


def cmm_enhance(image_feats: ad.Tensor, bank: FeatureBank) -> ad.Tensor:
    """Attention over the banks plus residual:
    softmax(I @ f_s^T / sqrt(d)) @ f_t + I."""
    d = image_feats.shape[1]
    if bank.source_centers.shape[1] != d:
        raise ad.ShapeError(
            f"bank width {bank.source_centers.shape[1]} does not match features {d}")
    scores = ad.scale(ad.matmul(image_feats, ad.transpose(bank.source_centers)),
                      1.0 / math.sqrt(d))
    attn = ad.softmax_rows(scores)
    return ad.add(ad.matmul(attn, bank.target_centers), image_feats)


def class_logits(head: CMMHead, enhanced: ad.Tensor) -> ad.Tensor:
    """Affine map of enhanced features to class logits."""
    if enhanced.shape[1] != head.w.shape[0]:
        raise ad.ShapeError(
            f"feature width {enhanced.shape[1]} does not match head input "
            f"{head.w.shape[0]}")
    return ad.linear(enhanced, head.w, head.b)


def cal_loss(logits_s: ad.Tensor, labels_s, logits_t: ad.Tensor,
             pseudo_labels_t, conf_t, threshold: float) -> ad.Tensor:
    """Cross-entropy on source labels plus cross-entropy on target rows
    whose pseudo-label confidence clears the threshold (zero when none do)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    loss = ad.cross_entropy_rows(logits_s, labels_s)
    conf_t = np.asarray(conf_t, dtype=np.float64).ravel()
    accepted = np.flatnonzero(conf_t >= threshold)
    if accepted.size:
        picked = ad.gather_rows(logits_t, accepted)
        labels = np.asarray(pseudo_labels_t).ravel()[accepted]
        loss = ad.add(loss, ad.cross_entropy_rows(picked, labels))
    return loss
