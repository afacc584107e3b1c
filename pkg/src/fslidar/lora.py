"""Low-rank adapters on convolution weights and the fine-tuning strategies."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import NoAdaptersAttached, NoSuchLayer, RankTooLarge, ShapeMismatch
from .network import BACKBONE, DECODER, ENCODER, Conv2d, Parameter, SegmentationModel

STRATEGIES = ("freeze", "dynamic", "lora")
# every decoder conv plus every other encoder block
DEFAULT_LORA_LAYERS = tuple(ENCODER[::2]) + tuple(DECODER)
A_INIT_STD = 0.01


class LoraAdapter:
    """``delta_W = B @ A`` with ``A: r x k`` and ``B: d x r``."""

    def __init__(self, target: str, d: int, k: int, rank: int, rng: np.random.Generator,
                 dtype=np.float64, was_frozen: bool = False):
        if rank < 1 or rank > min(d, k):
            raise RankTooLarge(f"rank {rank} outside 1..{min(d, k)} for a {d}x{k} weight")
        self.target, self.rank, self.was_frozen = target, rank, was_frozen
        self.A = Parameter(rng.normal(0.0, A_INIT_STD, (rank, k)).astype(dtype))
        self.B = Parameter(np.zeros((d, rank), dtype=dtype))

    def parameters(self) -> dict[str, Parameter]:
        return {f"lora.{self.target}.A": self.A, f"lora.{self.target}.B": self.B}

    @property
    def delta(self) -> np.ndarray:
        return self.B.value @ self.A.value

    @property
    def size(self) -> int:
        return self.A.size + self.B.size


def quarter_rank(d: int, k: int, divisor: int = 4, hidden: str = "min") -> int:
    """``max(1, floor(h / divisor))`` with h = min(d, k) or the output width d."""
    h = min(d, k) if hidden == "min" else d
    return max(1, h // divisor)


def adapters(model: SegmentationModel) -> dict[str, LoraAdapter]:
    return {n: l.adapter for n, l in model.layers.items() if l.adapter is not None}


def wrap_with_lora(model: SegmentationModel, layers: Iterable[str] = DEFAULT_LORA_LAYERS,
                   rank_rule: Callable[[int, int], int] | int | None = None,
                   seed: int | None = None) -> SegmentationModel:
    """Freeze each selected weight and attach a zero-delta adapter (in place)."""
    layers = list(layers)
    for name in layers:
        if name not in model.layers:
            raise NoSuchLayer(name)
    rng = np.random.default_rng(model.seed + 2 if seed is None else seed)
    for name in layers:
        layer: Conv2d = model.layers[name]
        if layer.adapter is not None:
            continue
        d, k = layer.weight.value.shape
        if rank_rule is None:
            r = quarter_rank(d, k)
        elif callable(rank_rule):
            r = int(rank_rule(d, k))
        else:
            r = int(rank_rule)
        layer.adapter = LoraAdapter(name, d, k, r, rng, model.dtype, layer.weight.frozen)
        layer.weight.frozen = True
    return model


def lora_forward(W, adapter: LoraAdapter, x) -> np.ndarray:
    """``W x + B (A x)`` for a vector or a (k, n) matrix of column inputs."""
    W, x = np.asarray(W), np.asarray(x)
    if W.shape != (adapter.B.value.shape[0], adapter.A.value.shape[1]) or x.shape[0] != W.shape[1]:
        raise ShapeMismatch(f"W {W.shape}, adapter {adapter.B.value.shape}x{adapter.A.value.shape}, x {x.shape}")
    return W @ x + adapter.B.value @ (adapter.A.value @ x)


def merge_lora(model: SegmentationModel) -> SegmentationModel:
    """Fold every adapter into its weight and drop it (in place)."""
    attached = adapters(model)
    if not attached:
        raise NoAdaptersAttached("model has no adapters to merge")
    for name, ad in attached.items():
        layer = model.layers[name]
        layer.weight.value = layer.weight.value + ad.delta
        layer.weight.grad = np.zeros_like(layer.weight.value)
        layer.weight.frozen = ad.was_frozen
        layer.adapter = None
    return model


def apply_strategy(model: SegmentationModel, strategy: str, lora_layers=DEFAULT_LORA_LAYERS,
                   rank_rule=None, train_wrapped_bias: bool = False, seed: int | None = None) -> SegmentationModel:
    """Set frozen flags for a fine-tuning strategy (in place).

    freeze: only the heads train.  dynamic: everything trains.  lora: the
    heads and adapters train, plus the biases of wrapped layers when
    ``train_wrapped_bias``; all other backbone parameters stay fixed.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    for name, layer in model.layers.items():
        is_head = name.startswith("head_")
        trainable = is_head or strategy == "dynamic"
        layer.weight.frozen = not trainable
        layer.bias.frozen = not trainable
    if strategy == "lora":
        wrap_with_lora(model, lora_layers, rank_rule, seed)
        for name in lora_layers:
            model.layers[name].bias.frozen = not train_wrapped_bias
    return model


def trainable_parameter_count(model: SegmentationModel, strategy: str, **kwargs) -> int:
    """Number of scalars that receive updates under ``strategy``; ``model`` is not modified."""
    m = model.copy()
    if strategy != "lora" and adapters(m):
        merge_lora(m)
    apply_strategy(m, strategy, **kwargs)
    return sum(p.size for p in m.parameters().values() if not p.frozen)


def parameter_breakdown(model: SegmentationModel) -> dict[str, int]:
    """Scalar counts per layer for the backbone, heads and adapters."""
    out = {}
    for name, layer in model.layers.items():
        out[name] = layer.weight.size + layer.bias.size
        if layer.adapter is not None:
            out[f"lora.{name}"] = layer.adapter.size
    return out


__all__ = ["LoraAdapter", "wrap_with_lora", "lora_forward", "merge_lora", "apply_strategy",
           "trainable_parameter_count", "quarter_rank", "adapters", "STRATEGIES",
           "DEFAULT_LORA_LAYERS", "BACKBONE"]
