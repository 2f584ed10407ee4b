"""Marginal alignment branch: domain discriminator, its loss, and the
adversarial loss realized through gradient reversal.

The discriminator is a two-layer MLP with a single sigmoid logit
(source = 1, target = 0). The adversarial loss is the discriminator
loss evaluated on gradient-reversed features, so one backward pass
descends the discriminator on its own loss while the prompt receives
the negated gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .seeds import rng_for


@dataclass
class DomainDiscriminator:
    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor

    def params(self) -> list[ad.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {"disc_w1": self.w1.data, "disc_b1": self.b1.data,
                "disc_w2": self.w2.data, "disc_b2": self.b2.data}


def init_discriminator(d: int, hidden: int, seed: int, tag: str = "discriminator",
                       init_scale: float = 1.0) -> DomainDiscriminator:
    """Two-layer MLP discriminator. ``init_scale`` shrinks the starting
    weights; a near-uniform start keeps early adversarial gradients alive
    instead of letting the discriminator saturate before the prompt moves."""
    rng = rng_for(seed, tag)
    bound1 = init_scale / np.sqrt(d)
    bound2 = init_scale / np.sqrt(hidden)
    return DomainDiscriminator(
        w1=ad.Tensor(rng.uniform(-bound1, bound1, (d, hidden)), requires_grad=True),
        b1=ad.Tensor(np.zeros((1, hidden)), requires_grad=True),
        w2=ad.Tensor(rng.uniform(-bound2, bound2, (hidden, 1)), requires_grad=True),
        b2=ad.Tensor(np.zeros((1, 1)), requires_grad=True),
    )


def discriminate(disc: DomainDiscriminator, feats: ad.Tensor) -> ad.Tensor:
    """Per-row probability of source origin, strictly inside (0, 1)."""
    if feats.shape[1] != disc.w1.shape[0]:
        raise ad.ShapeError(
            f"feature width {feats.shape[1]} does not match discriminator "
            f"input {disc.w1.shape[0]}")
    h = ad.relu(ad.linear(feats, disc.w1, disc.b1))
    return ad.sigmoid(ad.linear(h, disc.w2, disc.b2))


def domain_loss(disc: DomainDiscriminator, feats_s: ad.Tensor,
                feats_t: ad.Tensor) -> ad.Tensor:
    """Binary NLL of domain origin:
    -mean log P(source|I_s) - mean log(1 - P(source|I_t))."""
    if feats_s.shape[0] < 1 or feats_t.shape[0] < 1:
        raise ValueError("domain_loss needs at least one sample per domain")
    p_s = discriminate(disc, feats_s)
    p_t = discriminate(disc, feats_t)
    term_s = ad.scale(ad.mean_all(ad.log(p_s)), -1.0)
    term_t = ad.scale(ad.mean_all(ad.log(ad.add_scalar(ad.scale(p_t, -1.0), 1.0))), -1.0)
    return ad.add(term_s, term_t)


def mal_loss(disc: DomainDiscriminator, feats_s: ad.Tensor, feats_t: ad.Tensor,
             coefficient: float = 1.0) -> ad.Tensor:
    """Adversarial marginal-alignment loss: the domain loss on
    gradient-reversed features. Forward value equals domain_loss; the
    backward pass negates gradients toward whatever produced the
    features while leaving discriminator gradients untouched."""
    return domain_loss(disc, ad.grl(feats_s, coefficient), ad.grl(feats_t, coefficient))


def discriminator_accuracy(disc: DomainDiscriminator, feats_s: np.ndarray,
                           feats_t: np.ndarray) -> float:
    """Balanced domain-classification accuracy at threshold 0.5."""
    p_s = discriminate(disc, ad.Tensor(feats_s)).data[:, 0]
    p_t = discriminate(disc, ad.Tensor(feats_t)).data[:, 0]
    acc_s = float((p_s >= 0.5).mean())
    acc_t = float((p_t < 0.5).mean())
    return 0.5 * (acc_s + acc_t)
