"""Three-phase training loop (warm-up, select, fine-tune) and its baselines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .blockmap import make_grid
from .layers import LayerRole, LoRALinear
from .optim import AdamHyper, AdamState, DenseAdam, SparseAdam
from .selection import ATTN_QKV, AllocationPolicy, BlockSelection, run_warmup
from .sparse_linear import SparseLinearLayer
from .tensor import Tape, backward

MODES = ("full_ft", "smt", "lora")
DTYPE_BYTES = 8


class EmptySelectionError(RuntimeError):
    """SMT was asked to fine-tune with nothing selected."""

    status = "empty-selection"


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    trainable_params: int
    cache_bytes: int
    opt_bytes: int
    dw_flops: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class MetricsLog:
    mode: str
    records: list[StepRecord] = field(default_factory=list)
    selection: BlockSelection | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    def to_lines(self) -> list[str]:
        return [r.to_json() for r in self.records]


def apply_smt(model, selection: BlockSelection) -> dict[str, SparseLinearLayer]:
    """Freeze the model and swap selected layers for sparse layers in place."""
    model.set_trainable(False)
    sparse = {}
    for name in selection.selected_layers():
        if name not in model.linears:
            raise KeyError(f"selection names unknown layer {name!r}")
        layer = model.linears[name]
        d, k = layer.weight.shape
        grid = selection.grids.get(name)
        if grid is None:
            grid = make_grid(d, k, selection.provenance["side"])
        elif (grid.rows_d, grid.cols_k) != (d, k):
            raise ValueError(f"selection grid {grid.rows_d}x{grid.cols_k} does not match layer {name!r} of shape {d}x{k}")
        sparse[name] = SparseLinearLayer(layer.weight.data, grid, selection.for_layer(name), layer.role.value, name)
        model.linears[name] = sparse[name]
    return sparse


def apply_lora(model, rank: int, scale: float = 1.0, roles=ATTN_QKV, seed: int = 0) -> dict[str, LoRALinear]:
    """Freeze the model and wrap every layer with an eligible role in an adapter."""
    model.set_trainable(False)
    roles = {LayerRole(r) for r in roles}
    adapted = {}
    for i, (name, layer) in enumerate(list(model.linears.items())):
        if layer.role not in roles:
            continue
        rng = np.random.default_rng([seed, i])
        adapted[name] = LoRALinear(layer.weight.data, rank, scale, layer.role, name, rng)
        model.linears[name] = adapted[name]
    return adapted


class Trainer:
    """Owns the optimizer and step counter for one training run."""

    def __init__(self, model, mode: str, hyper: AdamHyper = AdamHyper(), *, selection: BlockSelection | None = None,
                 rank: int = 8, lora_scale: float = 1.0, lora_roles=ATTN_QKV, seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown training mode {mode!r}")
        self.model = model
        self.mode = mode
        self.hyper = hyper
        self.selection = selection
        self.step_count = 0
        if mode == "full_ft":
            model.set_trainable(True)
            self.optimizer = DenseAdam(model.dense_parameters(), hyper)
        elif mode == "smt":
            if selection is None or selection.is_empty:
                raise EmptySelectionError("SMT fine-tuning needs a non-empty block selection")
            self.sparse_layers = apply_smt(model, selection)
            self.optimizer = SparseAdam(self.sparse_layers, hyper)
        else:
            self.adapters = apply_lora(model, rank, lora_scale, lora_roles, seed)
            self.optimizer = DenseAdam(model.dense_parameters(), hyper)

    @property
    def trainable_params(self) -> int:
        if self.mode == "smt":
            return sum(layer.trainable_params for layer in self.sparse_layers.values())
        return sum(p.size for p in self.optimizer.params)

    def _dw_total(self) -> int:
        return sum(layer.dw_flops for layer in self.model.linears.values())

    def train_step(self, batch) -> StepRecord:
        before = self._dw_total()
        self.optimizer.zero_grad()
        with Tape() as tape:
            loss = self.model.loss(batch)
        backward(tape, loss)
        self.optimizer.step()
        self.step_count += 1
        cache = sum(layer.last_cache_floats for layer in self.model.linears.values())
        return StepRecord(
            step=self.step_count,
            loss=loss.item(),
            lr=self.hyper.lr,
            trainable_params=self.trainable_params,
            cache_bytes=cache * DTYPE_BYTES,
            opt_bytes=self.optimizer.state_floats * DTYPE_BYTES,
            dw_flops=self._dw_total() - before,
        )

    def run(self, data, steps: int, log: MetricsLog | None = None, on_step=None) -> MetricsLog:
        """Train until ``steps`` total steps have run, resuming from ``step_count``."""
        log = log if log is not None else MetricsLog(self.mode, selection=self.selection)
        while self.step_count < steps:
            rec = self.train_step(data.batch_at(self.step_count))
            log.records.append(rec)
            if on_step is not None:
                on_step(rec)
        return log

    def optimizer_state(self) -> dict:
        opt = self.optimizer
        if isinstance(opt, SparseAdam):
            return {
                "kind": "sparse",
                "layers": {
                    name: {"m": s.m_moment, "v": s.v_moment, "t": s.step_t}
                    for name, s in opt.states.items()
                },
            }
        return {"kind": "dense", "t": opt.t, "m": list(opt.m), "v": list(opt.v)}

    def load_optimizer_state(self, state: dict) -> None:
        opt = self.optimizer
        if isinstance(opt, SparseAdam):
            for name, s in state["layers"].items():
                cur: AdamState = opt.states[name]
                cur.m_moment = np.array(s["m"], dtype=np.float64).reshape(cur.m_moment.shape)
                cur.v_moment = np.array(s["v"], dtype=np.float64).reshape(cur.v_moment.shape)
                cur.step_t = int(s["t"])
        else:
            opt.t = int(state["t"])
            opt.m = [np.array(a, dtype=np.float64).reshape(p.shape) for a, p in zip(state["m"], opt.params)]
            opt.v = [np.array(a, dtype=np.float64).reshape(p.shape) for a, p in zip(state["v"], opt.params)]


def train(model, mode: str, data, steps: int, hyper: AdamHyper = AdamHyper(), *,
          policy: AllocationPolicy | None = None, side: int = 16, warmup_iters: int = 100,
          score_mode: str = "sum_then_abs", selection: BlockSelection | None = None,
          rank: int = 8, lora_scale: float = 1.0, lora_roles=ATTN_QKV, seed: int = 0, on_step=None) -> MetricsLog:
    """Run ``steps`` optimisation steps in one of the three modes.

    In ``smt`` mode without an explicit ``selection`` a warm-up over the head
    of ``data`` selects blocks first; fine-tuning then restarts from the head
    of the same stream.
    """
    if mode == "smt" and selection is None:
        policy = policy or AllocationPolicy()
        _, selection = run_warmup(model, data.batches(epochs=None), warmup_iters, policy, side, score_mode, seed)
    trainer = Trainer(model, mode, hyper, selection=selection, rank=rank, lora_scale=lora_scale,
                      lora_roles=lora_roles, seed=seed)
    return trainer.run(data, steps, on_step=on_step)


def evaluate(model, heldout) -> dict[str, float]:
    """Loss (and accuracy where defined) on a held-out dataset or batch."""
    batch = heldout.full() if hasattr(heldout, "full") else heldout
    if len(batch) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    saved = {name: (layer.dw_flops, layer.last_cache_floats) for name, layer in model.linears.items()}
    try:
        out = {"loss": model.loss(batch).item()}
        if hasattr(model, "accuracy"):
            out["accuracy"] = model.accuracy(batch)
    finally:
        for name, layer in model.linears.items():
            layer.dw_flops, layer.last_cache_floats = saved[name]
    return out
