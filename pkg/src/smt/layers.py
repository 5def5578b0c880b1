"""Dense and low-rank-adapted linear layers with instrumentation counters."""

from __future__ import annotations

from enum import Enum

import numpy as np

from .tensor import ShapeError, Tensor, custom_op


class LayerRole(str, Enum):
    ATTN_Q = "AttnQ"
    ATTN_K = "AttnK"
    ATTN_V = "AttnV"
    ATTN_O = "AttnO"
    MLP_IN = "MlpIn"
    MLP_OUT = "MlpOut"
    EMBED = "Embed"
    HEAD = "Head"


class DenseLinear:
    """``z = x @ W.T`` with a weight that is either fully trainable or frozen.

    The input is kept for backward only when the weight needs a gradient; a
    frozen layer still passes the input gradient through.
    """

    def __init__(self, weight, role: LayerRole | str, name: str = "", trainable: bool = True):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        self.weight.requires_grad = trainable
        self.weight.name = name
        self.role = LayerRole(role)
        self.name = name
        self.dw_flops = 0
        self.last_cache_floats = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    @property
    def trainable_params(self) -> int:
        return self.weight.size if self.weight.requires_grad else 0

    def __call__(self, x: Tensor) -> Tensor:
        d, k = self.weight.shape
        if x.data.ndim != 2 or x.shape[1] != k:
            raise ShapeError(f"{self.name or 'linear'}: input {x.shape} vs weight {self.weight.shape}")
        w = self.weight
        saved = x.data if w.requires_grad else None
        self.last_cache_floats = 0 if saved is None else saved.size

        def bw(g):
            dx = g @ w.data if x.requires_grad else None
            dw = None
            if saved is not None:
                dw = g.T @ saved
                self.dw_flops += 2 * g.shape[0] * d * k
            return dx, dw

        return custom_op(x.data @ w.data.T, (x, w), bw)

    def __repr__(self) -> str:
        return f"DenseLinear({self.name!r}, {self.shape}, role={self.role.value})"


class LoRALinear:
    """Frozen base weight plus a trainable rank-``r`` update ``scale * B @ A``."""

    def __init__(self, base, rank: int, scale: float = 1.0, role: LayerRole | str = LayerRole.ATTN_V,
                 name: str = "", rng: np.random.Generator | None = None):
        w0 = base.data if isinstance(base, Tensor) else np.asarray(base, dtype=np.float64)
        d, k = w0.shape
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base = Tensor(w0.copy(), name=name)
        self.A = Tensor(rng.normal(0.0, 1.0 / np.sqrt(k), size=(rank, k)), requires_grad=True, name=f"{name}.A")
        self.B = Tensor(np.zeros((d, rank)), requires_grad=True, name=f"{name}.B")
        self.rank = rank
        self.scale = float(scale)
        self.role = LayerRole(role)
        self.name = name
        self.dw_flops = 0
        self.last_cache_floats = 0

    @property
    def weight(self) -> Tensor:
        return self.base

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape

    @property
    def trainable_params(self) -> int:
        return self.A.size + self.B.size

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def merged_weight(self) -> np.ndarray:
        return self.base.data + self.scale * (self.B.data @ self.A.data)

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(self, x)

    def __repr__(self) -> str:
        return f"LoRALinear({self.name!r}, {self.shape}, r={self.rank})"


def lora_forward(layer: LoRALinear, x: Tensor) -> Tensor:
    d, k = layer.base.shape
    if x.data.ndim != 2 or x.shape[1] != k:
        raise ShapeError(f"{layer.name or 'lora'}: input {x.shape} vs weight {layer.base.shape}")
    A, B, W0, s = layer.A, layer.B, layer.base, layer.scale
    r = layer.rank
    h = x.data @ A.data.T  # (n, r)
    out = x.data @ W0.data.T + s * (h @ B.data.T)
    layer.last_cache_floats = x.data.size + h.size

    def bw(g):
        n = g.shape[0]
        gb = s * (g.T @ h)  # (d, r)
        gh = s * (g @ B.data)  # (n, r)
        ga = gh.T @ x.data  # (r, k)
        layer.dw_flops += 2 * n * r * (d + k)
        dx = g @ W0.data + gh @ A.data if x.requires_grad else None
        return dx, ga, gb

    return custom_op(out, (x, A, B), bw)


def lora_forward_flops(n_tokens: int, d: int, k: int, rank: int) -> int:
    """Base product, both adapter products and the final add."""
    return 2 * n_tokens * d * k + 2 * n_tokens * rank * (k + d) + n_tokens * d
