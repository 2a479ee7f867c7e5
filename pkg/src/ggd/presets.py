"""Declarative model specs (as found in run configs) and named bias presets."""
from __future__ import annotations

import numpy as np

from .datakit import BiasedDataset
from .diffcore import ContractError
from .modelzoo import (
    Model,
    ModelKind,
    build_background_model,
    build_mlp,
    build_simplenet,
    build_static_distribution,
    clone_architecture,
)

# Greedy orderings for multi-bias runs; distribution bias goes first.
BIAS_PRESETS: dict[str, list[dict]] = {
    "1k": [{"type": "simplenet", "kernel": 1, "channels": [8, 16]}],
    "bg": [{"type": "background", "hidden": 16}],
    "se": [{"type": "self_ensemble"}],
    "d": [{"type": "static", "epsilon": 1.0, "global": True}],
    "d->se": [{"type": "static", "epsilon": 1.0, "global": True}, {"type": "self_ensemble"}],
}


def expand_biased(specs) -> list[dict]:
    """Accept a preset name or an explicit list of model specs."""
    if isinstance(specs, str):
        if specs not in BIAS_PRESETS:
            raise ContractError(f"unknown bias preset {specs!r}; known: {sorted(BIAS_PRESETS)}")
        return [dict(s) for s in BIAS_PRESETS[specs]]
    return [dict(s) for s in specs]


def build_model(spec: dict, seed: int, train_set: BiasedDataset, base: Model | None = None) -> Model:
    t = spec.get("type")
    C = train_set.num_classes
    in_ch = train_set.images.shape[1]
    flat = int(np.prod(train_set.images.shape[1:]))
    if t == "simplenet":
        return build_simplenet(spec.get("kernel", 1), spec.get("channels", [16, 32, 64, 128]), C, seed,
                               in_channels=in_ch, strides=spec.get("strides"))
    if t == "convnet":
        return build_simplenet(spec.get("kernel", 3), spec["channels"], C, seed,
                               in_channels=in_ch, strides=spec.get("strides"))
    if t == "mlp":
        selector = spec.get("selector", "flat")
        extra = {}
        d_in = flat
        if selector == "bias_block":
            extra["bias_start"] = int(spec["bias_start"])
            d_in = flat - extra["bias_start"]
        kind = ModelKind(spec.get("kind", "base"))
        return build_mlp(d_in, spec.get("hidden", []), C, seed, selector=selector, kind=kind, **extra)
    if t == "background":
        return build_background_model(C, spec.get("hidden", 16), seed)
    if t == "static":
        return build_static_distribution(train_set.labels, train_set.bias_attr, spec.get("epsilon", 1.0), C,
                                         global_group=spec.get("global", False))
    if t == "self_ensemble":
        if base is None:
            raise ContractError("self_ensemble spec needs the base model")
        return clone_architecture(base, seed)
    raise ContractError(f"unknown model type {t!r}")
