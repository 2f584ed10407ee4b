"""Pseudo-labeling, the three-term objective, cosine-annealed SGD, and
the end-to-end fit loop.

Each epoch refreshes pseudo-labels and feature banks from the current
model, then walks paired source/target mini-batches: one tape records
the classification, adversarial, and conditional losses; one backward
pass yields every gradient; the prompt, the discriminator, and the
mapping head step with their own learning rates under a shared cosine
schedule. A seeded fraction of each domain is held out of training and
used only for the held-out discriminator-accuracy diagnostic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import conditional, diagnostics, marginal, model
from .seeds import derive_seed, rng_for


class DivergenceError(RuntimeError):
    """Training produced a non-finite or runaway loss."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    gamma_mal: float = 1.0
    gamma_cal: float = 1.0
    lr0: float = 0.003
    epochs: int = 30
    batch_size: int = 32
    top_c: int = 5
    confidence_threshold: float = 0.6
    tau: float = 0.01
    seed: int = 0
    mal_on: bool = True
    cal_on: bool = True
    mode: str = "multimodal"
    disc_lr0: float = 0.05
    cmm_lr0: float = 0.05
    disc_hidden: int = 16
    disc_init_scale: float = 0.1
    grl_coefficient: float = 1.0
    holdout_frac: float = 0.25
    proxy_hidden: int = 16
    proxy_steps: int = 200
    divergence_limit: float = 1e6
    eval_only: bool = False
    calibrate: bool = True

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gamma_mal < 0 or self.gamma_cal < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if self.mode not in ("multimodal", "text-only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ValueError("holdout_frac must lie in [0, 1)")


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    confidence: np.ndarray
    accepted: np.ndarray
    threshold: float

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else 0.0


@dataclass
class RunReport:
    config: dict
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def write_jsonl(self, path) -> None:
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary, indent=1, sort_keys=True) + "\n",
                              encoding="utf-8", newline="\n")


def pseudo_label(mdl: model.PromptModel, target_x: np.ndarray,
                 threshold: float) -> PseudoLabelSet:
    """Argmax pseudo-labels with max-probability confidence; ties break
    toward the lowest class index."""
    feats = model.encode_image(mdl.encoders, mdl.prompt, ad.Tensor(target_x))
    text = model.encode_text_all(mdl.encoders, mdl.prompt)
    probs = model.class_probs(feats, text, mdl.encoders.tau).data
    labels = probs.argmax(axis=1)
    confidence = probs.max(axis=1)
    return PseudoLabelSet(labels=labels, confidence=confidence,
                          accepted=confidence >= threshold, threshold=threshold)


def _cls_from_feats(text_feats: ad.Tensor, feats_s: ad.Tensor, labels_s,
                    feats_t: ad.Tensor, pseudo_labels, accepted_idx,
                    tau: float) -> ad.Tensor:
    logits_s = model.class_logits_zeroshot(feats_s, text_feats, tau)
    loss = ad.cross_entropy_rows(logits_s, labels_s)
    accepted_idx = np.asarray(accepted_idx, dtype=np.intp).ravel()
    if accepted_idx.size:
        logits_t = model.class_logits_zeroshot(feats_t, text_feats, tau)
        picked = ad.gather_rows(logits_t, accepted_idx)
        labels = np.asarray(pseudo_labels).ravel()[accepted_idx]
        loss = ad.add(loss, ad.cross_entropy_rows(picked, labels))
    return loss


def cls_loss(mdl: model.PromptModel, source_batch, target_batch,
             pseudo: PseudoLabelSet) -> ad.Tensor:
    """Source cross-entropy plus cross-entropy on accepted pseudo-labels."""
    if source_batch.y is None:
        raise ValueError("source batch must be labeled")
    enc, prompt = mdl.encoders, mdl.prompt
    text = model.encode_text_all(enc, prompt)
    feats_s = model.encode_image(enc, prompt, ad.Tensor(source_batch.x))
    feats_t = model.encode_image(enc, prompt, ad.Tensor(target_batch.x))
    return _cls_from_feats(text, feats_s, source_batch.y, feats_t,
                           pseudo.labels, np.flatnonzero(pseudo.accepted), enc.tau)


def total_loss(l_cls, l_cal, l_mal, gamma_mal: float, gamma_cal: float):
    """Combined objective L_cls + gamma_cal*L_cal + gamma_mal*L_mal.

    Accepts tensors (building the graph) or plain floats; missing parts
    may be None and contribute nothing.
    """
    if isinstance(l_cls, ad.Tensor):
        out = l_cls
        if l_cal is not None:
            out = ad.add(out, ad.scale(l_cal, gamma_cal))
        if l_mal is not None:
            out = ad.add(out, ad.scale(l_mal, gamma_mal))
        return out
    total = float(l_cls)
    if l_cal is not None:
        total = total + gamma_cal * float(l_cal)
    if l_mal is not None:
        total = total + gamma_mal * float(l_mal)
    return total


def cosine_lr(t: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing: lr0 * (1 + cos(pi * t / T)) / 2."""
    if total_steps == 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * t / total_steps)) / 2.0


def _split_holdout(n: int, frac: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_hold = int(round(frac * n))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def _encode_all(mdl: model.PromptModel, x: np.ndarray) -> np.ndarray:
    return model.encode_image(mdl.encoders, mdl.prompt, ad.Tensor(x)).data


def fit(config: TrainConfig, source_batch, target_batch, mdl: model.PromptModel,
        disc: marginal.DomainDiscriminator, cmm: conditional.CMMHead,
        hidden_target_labels=None) -> tuple[model.PromptParams, RunReport]:
    """End-to-end training. Returns the trained prompt and the report.

    ``hidden_target_labels`` feed evaluation fields only; the target
    batch itself must be label-free, and a labeled one is rejected.
    """
    if target_batch.y is not None:
        raise ValueError("target batch must be label-free; hidden labels travel "
                         "separately and feed evaluation only")
    if source_batch.y is None:
        raise ValueError("source batch must be labeled")
    k = mdl.config.k
    if source_batch.y.min() < 0 or source_batch.y.max() >= k:
        raise IndexError(f"source label outside [0, {k})")

    x_s, y_s = source_batch.x, source_batch.y
    x_t = target_batch.x
    hidden = None if hidden_target_labels is None else np.asarray(hidden_target_labels)

    rng_hold = rng_for(config.seed, "holdout")
    train_s, hold_s = _split_holdout(x_s.shape[0], config.holdout_frac, rng_hold)
    train_t, hold_t = _split_holdout(x_t.shape[0], config.holdout_frac, rng_hold)
    steps_per_epoch = min(train_s.size, train_t.size) // config.batch_size
    if not config.eval_only and steps_per_epoch < 1:
        raise ValueError("batch_size exceeds the per-domain training fold")
    total_steps = config.epochs * steps_per_epoch

    banks = None
    fallback_total = 0

    def refresh(epoch: int):
        pseudo = pseudo_label(mdl, x_t[train_t], config.confidence_threshold)
        new_banks = None
        if config.cal_on:
            feats_s_tr = _encode_all(mdl, x_s[train_s])
            feats_t_tr = _encode_all(mdl, x_t[train_t])
            text = model.encode_text_all(mdl.encoders, mdl.prompt)
            conf_s = model.class_probs(ad.Tensor(feats_s_tr), text,
                                       mdl.encoders.tau).data.max(axis=1)
            new_banks = conditional.build_banks(
                feats_s_tr, y_s[train_s], conf_s, feats_t_tr, pseudo.labels,
                pseudo.confidence, config.top_c, k, epoch=epoch)
        return pseudo, new_banks

    def epoch_metrics(epoch: int, losses: dict, lr_step: int) -> dict:
        feats_s_all = _encode_all(mdl, x_s)
        feats_t_all = _encode_all(mdl, x_t)
        text = model.encode_text_all(mdl.encoders, mdl.prompt)
        probs_s = model.class_probs(ad.Tensor(feats_s_all), text, mdl.encoders.tau).data
        probs_t = model.class_probs(ad.Tensor(feats_t_all), text, mdl.encoders.tau).data
        pred_s = probs_s.argmax(axis=1)
        pseudo_all = probs_t.argmax(axis=1)
        conf_all = probs_t.max(axis=1)
        proxy = diagnostics.proxy_a_distance(
            feats_s_all, feats_t_all, derive_seed(config.seed, "proxy-a"),
            hidden=config.proxy_hidden, steps=config.proxy_steps)
        d_c = diagnostics.conditional_discrepancy(feats_s_all, y_s,
                                                  feats_t_all, pseudo_all)
        disc_acc = None
        if hold_s.size and hold_t.size:
            disc_acc = marginal.discriminator_accuracy(
                disc, feats_s_all[hold_s], feats_t_all[hold_t])
        cmm_acc = None
        if banks is not None and hidden is not None:
            enhanced = conditional.cmm_enhance(ad.Tensor(feats_t_all), banks)
            cmm_pred = conditional.class_logits(cmm, enhanced).data.argmax(axis=1)
            cmm_acc = float((cmm_pred == hidden).mean())
        record = {
            "epoch": epoch,
            "l_cls": losses["cls"],
            "l_cal": losses["cal"],
            "l_mal": losses["mal"],
            "l_d": losses["mal"],
            "total": total_loss(losses["cls"], losses["cal"], losses["mal"],
                                config.gamma_mal, config.gamma_cal),
            "lr": cosine_lr(lr_step, max(total_steps, 1), config.lr0),
            "lr_step": lr_step,
            "source_accuracy": float((pred_s == y_s).mean()),
            "target_accuracy": None if hidden is None
                               else float((pseudo_all == hidden).mean()),
            "proxy_a_distance": proxy,
            "conditional_discrepancy": d_c,
            "pseudo_label_acceptance_rate":
                float((conf_all >= config.confidence_threshold).mean()),
            "empty_class_fallbacks": 0 if banks is None else banks.fallback_count,
            "disc_holdout_accuracy": disc_acc,
            "cmm_target_accuracy": cmm_acc,
        }
        return record

    def forward_losses(s_idx, t_idx, pseudo: PseudoLabelSet):
        """Loss tensors for one paired batch; recording happens only when
        a tape is active, and the op order is the same either way."""
        xb_s = ad.Tensor(x_s[train_s][s_idx])
        xb_t = ad.Tensor(x_t[train_t][t_idx])
        text = model.encode_text_all(mdl.encoders, mdl.prompt)
        feats_s = model.encode_image(mdl.encoders, mdl.prompt, xb_s)
        feats_t = model.encode_image(mdl.encoders, mdl.prompt, xb_t)
        conf_b = pseudo.confidence[t_idx]
        labels_b = pseudo.labels[t_idx]
        accepted_b = np.flatnonzero(conf_b >= config.confidence_threshold)
        l_cls = _cls_from_feats(text, feats_s, y_s[train_s][s_idx], feats_t,
                                labels_b, accepted_b, config.tau)
        l_cal = None
        if config.cal_on:
            enh_s = conditional.cmm_enhance(feats_s, banks)
            enh_t = conditional.cmm_enhance(feats_t, banks)
            l_cal = conditional.cal_loss(
                conditional.class_logits(cmm, enh_s), y_s[train_s][s_idx],
                conditional.class_logits(cmm, enh_t), labels_b, conf_b,
                config.confidence_threshold)
        l_mal = None
        if config.mal_on:
            l_mal = marginal.mal_loss(disc, feats_s, feats_t,
                                      coefficient=config.grl_coefficient)
        return l_cls, l_cal, l_mal

    def loss_floats(l_cls, l_cal, l_mal) -> dict:
        return {"cls": l_cls.item(),
                "cal": 0.0 if l_cal is None else l_cal.item(),
                "mal": 0.0 if l_mal is None else l_mal.item()}

    # step-0 record: full-fold forward pass, no updates
    pseudo, banks = refresh(epoch=0)
    if banks is not None:
        fallback_total += banks.fallback_count
    all_s = np.arange(train_s.size)
    all_t = np.arange(train_t.size)
    step0 = loss_floats(*forward_losses(all_s, all_t, pseudo))
    report = RunReport(config=asdict(config))
    report.records.append(epoch_metrics(0, step0, lr_step=0))

    if not config.eval_only:
        params = mdl.prompt.as_list(config.mode)
        global_step = 0
        for epoch in range(1, config.epochs + 1):
            pseudo, banks = refresh(epoch)
            if banks is not None:
                fallback_total += banks.fallback_count
            rng_epoch = rng_for(config.seed, f"batches-{epoch}")
            perm_s = rng_epoch.permutation(train_s.size)
            perm_t = rng_epoch.permutation(train_t.size)
            sums = {"cls": 0.0, "cal": 0.0, "mal": 0.0}
            epoch_first_step = global_step
            for step in range(steps_per_epoch):
                sl = slice(step * config.batch_size, (step + 1) * config.batch_size)
                with ad.Tape():
                    l_cls, l_cal, l_mal = forward_losses(perm_s[sl], perm_t[sl], pseudo)
                    loss = total_loss(l_cls, l_cal, l_mal,
                                      config.gamma_mal, config.gamma_cal)
                vals = loss_floats(l_cls, l_cal, l_mal)
                vals["total"] = loss.item()
                if any(not math.isfinite(v) or abs(v) > config.divergence_limit
                       for v in vals.values()):
                    raise DivergenceError(
                        "non-finite or runaway loss",
                        {"epoch": epoch, "step": step, "losses": vals,
                         "lr": cosine_lr(global_step, total_steps, config.lr0)})
                grads = ad.backward(loss)
                lr_t = cosine_lr(global_step, total_steps, config.lr0)
                factor = cosine_lr(global_step, total_steps, 1.0)
                ad.sgd_step(params, grads, lr_t)
                # the combined loss hands the auxiliary players gamma-scaled
                # gradients; their own objectives are weight-free, so undo
                # the scaling before applying their learning rates
                if config.mal_on and config.gamma_mal > 0:
                    ad.sgd_step(disc.params(), grads,
                                config.disc_lr0 * factor / config.gamma_mal)
                if config.cal_on and config.gamma_cal > 0:
                    ad.sgd_step(cmm.params(), grads,
                                config.cmm_lr0 * factor / config.gamma_cal)
                for key in sums:
                    sums[key] += vals[key]
                global_step += 1
            means = {key: sums[key] / steps_per_epoch for key in sums}
            report.records.append(epoch_metrics(epoch, means, lr_step=epoch_first_step))

    final = report.records[-1]
    report.summary = {
        "config": asdict(config),
        "model_config": asdict(mdl.config),
        "steps_per_epoch": steps_per_epoch,
        "total_steps": total_steps,
        "train_sizes": [int(train_s.size), int(train_t.size)],
        "holdout_sizes": [int(hold_s.size), int(hold_t.size)],
        "empty_class_fallbacks_total": fallback_total,
        "final": final,
    }
    return mdl.prompt, report


def run_training(config: TrainConfig, model_config: model.ModelConfig,
                 source_batch, target_batch, hidden_target_labels=None):
    """Build model/discriminator/head from the config seeds and fit.

    Returns (model, discriminator, cmm head, report).
    """
    model_config = replace(model_config, tau=config.tau)
    mdl = model.build_model(model_config)
    if config.calibrate:
        model.calibrate_to_source(mdl, source_batch.x, source_batch.y)
    disc = marginal.init_discriminator(model_config.d, config.disc_hidden, config.seed,
                                       init_scale=config.disc_init_scale)
    cmm = conditional.init_cmm_head(model_config.d, model_config.k, config.seed)
    _, report = fit(config, source_batch, target_batch, mdl, disc, cmm,
                    hidden_target_labels=hidden_target_labels)
    return mdl, disc, cmm, report
