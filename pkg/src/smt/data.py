"""Seeded synthetic datasets: a sequence copy task and teacher-network regression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return int(np.asarray(self.inputs).shape[0])


class Dataset:
    """Fixed set of examples served in seeded, per-epoch shuffled batches.

    ``batch_at(step)`` is a pure function of the seed and step, so a resumed
    run sees exactly the batches the uninterrupted run would have.
    """

    def __init__(self, arrays: dict[str, np.ndarray], batch_size: int, seed: int = 0):
        lengths = {len(a) for a in arrays.values()}
        if len(lengths) != 1:
            raise ValueError("dataset arrays differ in length")
        self.arrays = arrays
        self.n_examples = lengths.pop()
        if self.n_examples == 0:
            raise ValueError("empty dataset")
        self.batch_size = min(batch_size, self.n_examples)
        self.seed = seed

    @property
    def batches_per_epoch(self) -> int:
        return self.n_examples // self.batch_size

    def __len__(self) -> int:
        return self.batches_per_epoch

    def _order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n_examples)

    def batch_at(self, step: int) -> Batch:
        epoch, pos = divmod(step, self.batches_per_epoch)
        idx = self._order(epoch)[pos * self.batch_size:(pos + 1) * self.batch_size]
        return self._make(idx)

    def _make(self, idx) -> Batch:
        a = self.arrays
        return Batch(a["inputs"][idx], a["targets"][idx], a["weights"][idx] if "weights" in a else None)

    def batches(self, epochs: int | None = 1, start: int = 0) -> Iterator[Batch]:
        """Iterate batches from ``start``; ``epochs=None`` never stops."""
        step = start
        stop = None if epochs is None else epochs * self.batches_per_epoch
        while stop is None or step < stop:
            yield self.batch_at(step)
            step += 1

    def __iter__(self) -> Iterator[Batch]:
        return self.batches(epochs=None)

    def full(self) -> Batch:
        return self._make(np.arange(self.n_examples))


def copy_task(vocab: int, seq_len: int, n_examples: int, batch_size: int, seed: int = 0,
              period: int | None = None, noise: float = 0.0) -> Dataset:
    """Sequences that keep repeating a random prefix of length ``period``.

    ``period`` defaults to ``seq_len // 2`` (the prefix is copied once). Only
    positions whose next token is determined by the prefix carry loss
    weight, so a perfect model reaches zero loss and chance accuracy is
    ``1 / vocab``. ``noise`` replaces each repeated token by a uniform random
    token with that probability, which puts a nonzero floor under the loss.
    """
    period = seq_len // 2 if period is None else period
    if not 1 <= period < seq_len:
        raise ValueError(f"copy period must be in [1, {seq_len}), got {period}")
    rng = np.random.default_rng(seed)
    prefix = rng.integers(0, vocab, size=(n_examples, period))
    reps = -(-(seq_len + 1) // period)
    periodic = np.tile(prefix, (1, reps))[:, :seq_len + 1]
    if noise > 0:
        flip = rng.random(periodic.shape) < noise
        flip[:, :period] = False
        periodic = np.where(flip, rng.integers(0, vocab, size=periodic.shape), periodic)
    weights = np.zeros((n_examples, seq_len))
    weights[:, period - 1:] = 1.0
    arrays = {"inputs": periodic[:, :-1], "targets": periodic[:, 1:], "weights": weights}
    return Dataset(arrays, batch_size, seed)


def teacher_regression(d_in: int, d_hidden: int, d_out: int, n_examples: int, batch_size: int,
                       seed: int = 0, teacher_seed: int = 1234) -> Dataset:
    """Targets produced by a fixed random two-layer ReLU teacher."""
    t = np.random.default_rng(teacher_seed)
    w1 = t.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_hidden, d_in))
    w2 = t.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_out, d_hidden))
    x = np.random.default_rng(seed).normal(size=(n_examples, d_in))
    y = np.maximum(x @ w1.T, 0.0) @ w2.T
    return Dataset({"inputs": x, "targets": y}, batch_size, seed)
