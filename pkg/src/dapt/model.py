"""Frozen synthetic encoders plus learnable prompt parameters.

Stands in for a frozen pretrained backbone: images go through a fixed
random two-layer MLP, text classes through a fixed linear map over
frozen class embeddings. The only trainable pieces are the text context
tokens and a single additive visual prompt in feature space, so step-0
behaviour equals the frozen zero-shot baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .seeds import rng_for


@dataclass
class ModelConfig:
    d_in: int
    k: int
    d_e: int = 32
    d: int = 16
    context_length: int = 16
    tau: float = 0.01
    hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        for name in ("d_in", "k", "d_e", "d", "context_length", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class FrozenEncoders:
    """Fixed random weights; never touched by any optimizer step."""

    w_txt: ad.Tensor
    img_w1: ad.Tensor
    img_b1: ad.Tensor
    img_w2: ad.Tensor
    img_b2: ad.Tensor
    class_embeddings: ad.Tensor
    tau: float


@dataclass
class PromptParams:
    """The trainable parameters: context tokens and a visual offset."""

    context: ad.Tensor
    visual_prompt: ad.Tensor

    def as_list(self, mode: str = "multimodal") -> list[ad.Tensor]:
        if mode == "text-only":
            return [self.context]
        return [self.context, self.visual_prompt]


@dataclass
class PromptModel:
    config: ModelConfig
    encoders: FrozenEncoders
    prompt: PromptParams


def _uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_frozen(config: ModelConfig) -> FrozenEncoders:
    """Deterministic frozen weights: uniform(+-1/sqrt(fan_in)) maps and
    standard-normal class embeddings, all seeded from config.seed."""
    rng = rng_for(config.seed, "frozen-encoders")
    return FrozenEncoders(
        w_txt=ad.Tensor(_uniform_fan_in(rng, config.d_e, (config.d_e, config.d))),
        img_w1=ad.Tensor(_uniform_fan_in(rng, config.d_in, (config.d_in, config.hidden))),
        # positive biases keep typical inputs inside the active relu region;
        # far-out inputs still clip, matching a backbone probed off-center
        img_b1=ad.Tensor(rng.uniform(0.5, 1.5, (1, config.hidden))),
        img_w2=ad.Tensor(_uniform_fan_in(rng, config.hidden, (config.hidden, config.d))),
        img_b2=ad.Tensor(np.zeros((1, config.d))),
        class_embeddings=ad.Tensor(rng.normal(0.0, 1.0, (config.k, config.d_e))),
        tau=config.tau,
    )


def init_prompt(config: ModelConfig) -> PromptParams:
    """Small-init context (N(0, 0.02^2)); visual prompt starts at zero so
    the untrained model reproduces the frozen baseline."""
    rng = rng_for(config.seed, "prompt-init")
    context = rng.normal(0.0, 0.02, (config.context_length, config.d_e))
    return PromptParams(
        context=ad.Tensor(context, requires_grad=True),
        visual_prompt=ad.Tensor(np.zeros((1, config.d)), requires_grad=True),
    )


def build_model(config: ModelConfig) -> PromptModel:
    return PromptModel(config, init_frozen(config), init_prompt(config))


def encode_text_all(enc: FrozenEncoders, prompt: PromptParams) -> ad.Tensor:
    """Unit-norm text features for every class, (K x d)."""
    ctx_mean = ad.mean_rows(prompt.context)
    mixed = ad.add(enc.class_embeddings, ctx_mean)
    return ad.l2_normalize_rows(ad.matmul(mixed, enc.w_txt))


def encode_text(enc: FrozenEncoders, prompt: PromptParams, k: int) -> ad.Tensor:
    """Unit-norm text feature of class ``k``, (1 x d)."""
    n_classes = enc.class_embeddings.shape[0]
    if not 0 <= k < n_classes:
        raise IndexError(f"class index {k} outside [0, {n_classes})")
    ctx_mean = ad.mean_rows(prompt.context)
    e_k = ad.gather_rows(enc.class_embeddings, [k])
    mixed = ad.add(e_k, ctx_mean)
    return ad.l2_normalize_rows(ad.matmul(mixed, enc.w_txt))


def encode_image(enc: FrozenEncoders, prompt: PromptParams, x: ad.Tensor) -> ad.Tensor:
    """Unit-norm image features: frozen MLP plus the visual offset, (n x d)."""
    if x.shape[1] != enc.img_w1.shape[0]:
        raise ad.ShapeError(
            f"input width {x.shape[1]} does not match encoder d_in {enc.img_w1.shape[0]}")
    h = ad.relu(ad.linear(x, enc.img_w1, enc.img_b1))
    f = ad.linear(h, enc.img_w2, enc.img_b2)
    return ad.l2_normalize_rows(ad.add(f, prompt.visual_prompt))


def class_probs(image_feats: ad.Tensor, text_feats: ad.Tensor, tau: float) -> ad.Tensor:
    """Softmax over cosine similarities at temperature tau, (n x K)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    sims = ad.matmul(image_feats, ad.transpose(text_feats))
    return ad.softmax_rows(ad.scale(sims, 1.0 / tau))


def class_logits_zeroshot(image_feats: ad.Tensor, text_feats: ad.Tensor, tau: float) -> ad.Tensor:
    """Temperature-scaled cosine logits (the argument of class_probs)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return ad.scale(ad.matmul(image_feats, ad.transpose(text_feats)), 1.0 / tau)


def calibrate_to_source(mdl: PromptModel, source_x: np.ndarray,
                        source_y: np.ndarray) -> None:
    """Stand-in for encoder co-pretraining: solve (least squares through
    the frozen text map) for class embeddings whose zero-prompt text
    features hit the labeled source class prototypes.

    Without this, independently random text and image encoders give
    chance-level zero-shot and pseudo-labels carry no signal; real
    contrastively pretrained encoder pairs start aligned. Runs once
    before training; the embeddings stay frozen afterwards.
    """
    k = mdl.config.k
    source_y = np.asarray(source_y).ravel()
    if source_y.min() < 0 or source_y.max() >= k:
        raise IndexError(f"source label outside [0, {k})")
    feats = encode_image(mdl.encoders, mdl.prompt, ad.Tensor(source_x)).data
    prototypes = np.zeros((k, mdl.config.d))
    for c in range(k):
        members = source_y == c
        if not members.any():
            raise ValueError(f"calibration needs at least one sample of class {c}")
        prototypes[c] = feats[members].mean(axis=0)
    # min-norm embeddings with e_c @ w_txt = prototype_c
    solution, *_ = np.linalg.lstsq(mdl.encoders.w_txt.data.T, prototypes.T, rcond=None)
    mdl.encoders.class_embeddings = ad.Tensor(solution.T)


# ---------------------------------------------------------------------------
# checkpoint I/O: JSON map of named arrays; decimal repr round-trips bitwise

_FORMAT = "dapt-checkpoint-v1"

_PARAM_NAMES = ("context", "visual_prompt", "w_txt", "img_w1", "img_b1",
                "img_w2", "img_b2", "class_embeddings")


def _model_arrays(model: PromptModel) -> dict[str, np.ndarray]:
    enc, pr = model.encoders, model.prompt
    return {
        "context": pr.context.data,
        "visual_prompt": pr.visual_prompt.data,
        "w_txt": enc.w_txt.data,
        "img_w1": enc.img_w1.data,
        "img_b1": enc.img_b1.data,
        "img_w2": enc.img_w2.data,
        "img_b2": enc.img_b2.data,
        "class_embeddings": enc.class_embeddings.data,
    }


def save_checkpoint(path, model: PromptModel,
                    extras: dict[str, np.ndarray] | None = None) -> None:
    """Write model (and optional extra arrays such as discriminator or
    bank matrices) as JSON. Floats are serialized via repr and parse back
    to the identical doubles."""
    arrays = _model_arrays(model)
    if extras:
        overlap = set(extras) & set(arrays)
        if overlap:
            raise ValueError(f"extras shadow model params: {sorted(overlap)}")
        arrays.update({k: np.asarray(v, dtype=np.float64) for k, v in extras.items()})
    doc = {
        "format": _FORMAT,
        "seed": model.config.seed,
        "config": asdict(model.config),
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in arrays.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[PromptModel, dict[str, np.ndarray]]:
    """Rebuild a PromptModel from a checkpoint; returns (model, extras)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != _FORMAT:
        raise ValueError(f"not a {_FORMAT} file: {path}")
    config = ModelConfig(**doc["config"])
    arrays = {}
    for name, entry in doc["params"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        arrays[name] = arr
    missing = [n for n in _PARAM_NAMES if n not in arrays]
    if missing:
        raise ValueError(f"checkpoint missing arrays: {missing}")
    enc = FrozenEncoders(
        w_txt=ad.Tensor(arrays["w_txt"]),
        img_w1=ad.Tensor(arrays["img_w1"]),
        img_b1=ad.Tensor(arrays["img_b1"]),
        img_w2=ad.Tensor(arrays["img_w2"]),
        img_b2=ad.Tensor(arrays["img_b2"]),
        class_embeddings=ad.Tensor(arrays["class_embeddings"]),
        tau=config.tau,
    )
    prompt = PromptParams(
        context=ad.Tensor(arrays["context"], requires_grad=True),
        visual_prompt=ad.Tensor(arrays["visual_prompt"], requires_grad=True),
    )
    extras = {n: a for n, a in arrays.items() if n not in _PARAM_NAMES}
    return PromptModel(config, enc, prompt), extras
