"""Toy models used to exercise sparse matrix tuning end to end."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import DenseLinear, LayerRole, LoRALinear
from .tensor import Tensor


@dataclass(frozen=True)
class ToyTransformerConfig:
    vocab: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_mlp: int = 128
    seq_len: int = 32
    seed: int = 0

    def validate(self, side: int | None = None) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if side is not None:
            for name in ("d_model", "d_mlp"):
                if getattr(self, name) % side:
                    raise ValueError(f"{name}={getattr(self, name)} is not a multiple of block side {side}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ToyMLPConfig:
    d_in: int = 32
    d_hidden: int = 64
    d_out: int = 16
    seed: int = 0

    def validate(self, side: int | None = None) -> None:
        if side is not None:
            for name in ("d_in", "d_hidden", "d_out"):
                if getattr(self, name) % side:
                    raise ValueError(f"{name}={getattr(self, name)} is not a multiple of block side {side}")

    def to_dict(self) -> dict:
        return asdict(self)


def _init_weight(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(k), size=(d, k))


class Model:
    """Common bookkeeping: named linear layers plus non-linear parameter tables."""

    def __init__(self):
        self.linears: dict[str, DenseLinear] = {}
        self.tables: dict[str, Tensor] = {}

    def roles(self) -> dict[str, LayerRole]:
        return {name: layer.role for name, layer in self.linears.items()}

    def num_params(self) -> int:
        total = sum(t.size for t in self.tables.values())
        for layer in self.linears.values():
            total += layer.weight.size
        return total

    def linear_params(self) -> int:
        return sum(layer.weight.size for layer in self.linears.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tables.values():
            t.requires_grad = flag
        for layer in self.linears.values():
            layer.weight.requires_grad = flag

    def dense_parameters(self) -> list[Tensor]:
        params = [t for t in self.tables.values() if t.requires_grad]
        for layer in self.linears.values():
            if isinstance(layer, LoRALinear):
                params.extend(layer.parameters())
            elif layer.weight.requires_grad:
                params.append(layer.weight)
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.tables.items()}
        for name, layer in self.linears.items():
            out[name] = layer.weight.data.copy()
            if isinstance(layer, LoRALinear):
                out[f"{name}.A"] = layer.A.data.copy()
                out[f"{name}.B"] = layer.B.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.tables.items():
            t.data[...] = state[name]
        for name, layer in self.linears.items():
            layer.weight.data[...] = state[name]
            if isinstance(layer, LoRALinear):
                layer.A.data[...] = state[f"{name}.A"]
                layer.B.data[...] = state[f"{name}.B"]

    def counters(self) -> dict[str, tuple[int, int]]:
        """Per-layer (cumulative dW FLOPs, floats cached by the last forward)."""
        return {name: (layer.dw_flops, layer.last_cache_floats) for name, layer in self.linears.items()}

    def reset_counters(self) -> None:
        for layer in self.linears.values():
            layer.dw_flops = 0
            layer.last_cache_floats = 0

    def tokens_per_batch(self, batch) -> int:
        raise NotImplementedError

    def loss(self, batch) -> Tensor:
        raise NotImplementedError


class ToyTransformer(Model):
    """Pre-norm decoder with Q/K/V/O projections, ReLU MLPs and a linear head."""

    def __init__(self, cfg: ToyTransformerConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, f = cfg.d_model, cfg.d_mlp
        self.tables["embed"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.vocab, d)), name="embed")
        self.tables["pos"] = Tensor(rng.normal(0.0, 1.0, size=(cfg.seq_len, d)), name="pos")
        shapes = [
            ("q", LayerRole.ATTN_Q, d, d),
            ("k", LayerRole.ATTN_K, d, d),
            ("v", LayerRole.ATTN_V, d, d),
            ("o", LayerRole.ATTN_O, d, d),
            ("mlp_in", LayerRole.MLP_IN, f, d),
            ("mlp_out", LayerRole.MLP_OUT, d, f),
        ]
        for i in range(cfg.n_layers):
            for short, role, rows, cols in shapes:
                name = f"layers.{i}.{short}"
                self.linears[name] = DenseLinear(_init_weight(rng, rows, cols), role, name)
        self.linears["head"] = DenseLinear(_init_weight(rng, cfg.vocab, d), LayerRole.HEAD, "head")
        self.set_trainable(True)
        mask = np.triu(np.full((cfg.seq_len, cfg.seq_len), -1e9), k=1)
        self._mask = Tensor(mask)

    def tokens_per_batch(self, batch) -> int:
        return int(np.asarray(batch.inputs).size)

    def logits(self, tokens: np.ndarray) -> Tensor:
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        b, t = tokens.shape
        if t > cfg.seq_len:
            raise ValueError(f"sequence length {t} exceeds configured {cfg.seq_len}")
        d, h = cfg.d_model, cfg.n_heads
        dh = d // h
        x = T.add(T.embedding(self.tables["embed"], tokens), T.embedding(self.tables["pos"], np.arange(t)))
        x = T.reshape(x, (b * t, d))
        mask = self._mask if t == cfg.seq_len else Tensor(self._mask.data[:t, :t])
        for i in range(cfg.n_layers):
            L = lambda s: self.linears[f"layers.{i}.{s}"]
            a = T.rms_norm(x)

            def heads(z):
                return T.transpose(T.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

            q, k, v = heads(L("q")(a)), heads(L("k")(a)), heads(L("v")(a))
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = T.softmax_rows(T.add(scores, mask))
            o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b * t, d))
            x = T.add(x, L("o")(o))
            x = T.add(x, L("mlp_out")(T.relu(L("mlp_in")(T.rms_norm(x)))))
        return self.linears["head"](T.rms_norm(x))

    def loss(self, batch) -> Tensor:
        logits = self.logits(batch.inputs)
        return T.cross_entropy(logits, np.asarray(batch.targets).reshape(-1), np.asarray(batch.weights).reshape(-1))

    def accuracy(self, batch) -> float:
        pred = self.logits(batch.inputs).data.argmax(axis=1)
        w = np.asarray(batch.weights).reshape(-1)
        hit = pred == np.asarray(batch.targets).reshape(-1)
        return float((hit * w).sum() / w.sum())


class ToyMLP(Model):
    """Two-layer ReLU regressor without biases."""

    def __init__(self, cfg: ToyMLPConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.linears["fc_in"] = DenseLinear(_init_weight(rng, cfg.d_hidden, cfg.d_in), LayerRole.MLP_IN, "fc_in")
        self.linears["fc_out"] = DenseLinear(_init_weight(rng, cfg.d_out, cfg.d_hidden), LayerRole.MLP_OUT, "fc_out")

    def tokens_per_batch(self, batch) -> int:
        return int(np.asarray(batch.inputs).shape[0])

    def predict(self, x: np.ndarray) -> Tensor:
        h = T.relu(self.linears["fc_in"](Tensor(x)))
        return self.linears["fc_out"](h)

    def loss(self, batch) -> Tensor:
        return T.mse(self.predict(batch.inputs), batch.targets)


def build_toy_transformer(cfg: ToyTransformerConfig, side: int | None = None) -> ToyTransformer:
    cfg.validate(side)
    return ToyTransformer(cfg)


def build_toy_mlp(cfg: ToyMLPConfig, side: int | None = None) -> ToyMLP:
    cfg.validate(side)
    return ToyMLP(cfg)
