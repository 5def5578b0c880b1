"""Adam with state living only on packed selected blocks, plus a dense reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse_linear import SparseBlockPack, SparseLinearLayer, gather, scatter


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m_moment: np.ndarray
    v_moment: np.ndarray
    index_map: list
    hyper: AdamHyper
    step_t: int = 0

    @property
    def floats(self) -> int:
        return int(self.m_moment.size + self.v_moment.size)


def adam_update(w, g, m, v, t, hyper: AdamHyper):
    """One bias-corrected Adam update in place on ``w``, ``m`` and ``v``."""
    m *= hyper.beta1
    m += (1.0 - hyper.beta1) * g
    v *= hyper.beta2
    v += (1.0 - hyper.beta2) * (g * g)
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    if hyper.weight_decay:
        w -= hyper.lr * hyper.weight_decay * w
    w -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


def init_state(layer: SparseLinearLayer, hyper: AdamHyper = AdamHyper()) -> AdamState:
    l = layer.grid.side_l
    shape = (layer.m, l, l)
    return AdamState(np.zeros(shape), np.zeros(shape), list(layer.selection), hyper)


def step(layer: SparseLinearLayer, dw_pack: SparseBlockPack, state: AdamState) -> None:
    """Apply one Adam step to the selected blocks of ``layer``.

    Entries outside the selection are never read or written.
    """
    if list(dw_pack.index_map) != state.index_map or list(layer.selection) != state.index_map:
        raise ValueError("gradient pack, layer selection and optimizer state disagree on block layout")
    state.step_t += 1
    if not state.index_map:
        return
    params = gather(layer)
    adam_update(params.values, dw_pack.values, state.m_moment, state.v_moment, state.step_t, state.hyper)
    scatter(layer, params)


class SparseAdam:
    """Steps every sparse layer of a model from its accumulated ``pack_grad``."""

    def __init__(self, layers: dict[str, SparseLinearLayer], hyper: AdamHyper = AdamHyper()):
        self.layers = layers
        self.hyper = hyper
        self.states = {name: init_state(layer, hyper) for name, layer in layers.items()}

    @property
    def state_floats(self) -> int:
        return sum(s.floats for s in self.states.values())

    def step(self) -> None:
        for name, layer in self.layers.items():
            pack = SparseBlockPack(layer.pack_grad, list(layer.selection))
            step(layer, pack, self.states[name])

    def zero_grad(self) -> None:
        for layer in self.layers.values():
            layer.zero_grad()


class DenseAdam:
    """Plain Adam over a list of tensors; reference for the sparse variant."""

    def __init__(self, params, hyper: AdamHyper = AdamHyper()):
        self.params = list(params)
        self.hyper = hyper
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    @property
    def state_floats(self) -> int:
        return sum(a.size for a in self.m) + sum(a.size for a in self.v)

    def step(self) -> None:
        h = self.hyper
        self.t += 1
        step_size = h.lr / (1.0 - h.beta1 ** self.t)
        root_bc2 = np.sqrt(1.0 - h.beta2 ** self.t)
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g**2
            if h.weight_decay:
                p.data *= 1.0 - h.lr * h.weight_decay
            p.data -= step_size * self.m[i] / (np.sqrt(self.v[i]) / root_bc2 + h.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
