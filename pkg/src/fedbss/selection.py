"""Bias-aware sample selection.

A client scores every local sample under the freshly received global model,
sorts the samples by loss, and splits them at the most uncertain sample:
everything up to and including that point is *unbiased*, the rest *biased*.
During local training the biased samples are then admitted in ascending-loss
order following a cosine ramp over the local epochs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from .data import Dataset
from .errors import ConfigError, ScheduleError
from .nn import Model, forward, log_softmax

Variant = Literal["filter", "linear", "cosine"]
VARIANTS = ("filter", "linear", "cosine")

# absorbs float error in alpha * n, e.g. cos(pi/2) != 0 exactly
_FLOOR_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class SampleScoreTable:
    """Loss-sorted per-sample scores for one client.

    ``indices`` are whatever sample ids were scored (by default positions in the
    client's data), reordered by ascending loss with ties kept in input order.
    """

    indices: np.ndarray
    losses: np.ndarray
    uncertainties: np.ndarray
    split_pos: int

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def unbiased(self) -> np.ndarray:
        return self.indices[: self.split_pos + 1]

    @property
    def biased(self) -> np.ndarray:
        return self.indices[self.split_pos + 1:]

    @property
    def split_fraction(self) -> float:
        return (self.split_pos + 1) / len(self)


@dataclass(frozen=True, eq=False)
class EpochTrainingSet:
    indices: np.ndarray
    epoch: int
    epoch_total: int
    alpha: float


def uncertainty(probs: np.ndarray) -> np.ndarray:
    """1 - (max p - min p) along the last axis; 1 for uniform, ~0 for one-hot."""
    probs = np.asarray(probs, dtype=np.float64)
    spread = probs.max(axis=-1) - probs.min(axis=-1)
    return np.clip(1.0 - spread, 0.0, 1.0)


def split_point(uncertainties: np.ndarray) -> int:
    """Position of the most uncertain entry in loss order; ties go to the lowest loss."""
    uncertainties = np.asarray(uncertainties)
    if uncertainties.size == 0:
        raise ValueError("cannot split an empty score table")
    return int(np.argmax(uncertainties))


def score_samples(model: Model, data: Dataset, indices: np.ndarray | None = None,
                  chunk: int = 2048) -> SampleScoreTable:
    """Evaluate loss and uncertainty of every sample; read-only on ``model``."""
    n = len(data)
    if indices is None:
        indices = np.arange(n)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (n,):
        raise ValueError(f"need one index per sample ({n}), got shape {indices.shape}")
    losses = np.empty(n, dtype=np.float64)
    unc = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        logits = forward(model, data.samples[start:stop]).astype(np.float64)
        logp = log_softmax(logits)
        y = data.labels[start:stop]
        losses[start:stop] = -logp[np.arange(stop - start), y]
        unc[start:stop] = uncertainty(np.exp(logp))
    order = np.argsort(losses, kind="stable")
    sorted_unc = unc[order]
    return SampleScoreTable(indices[order], losses[order], sorted_unc, split_point(sorted_unc))


def schedule_alpha(e: float, e_total: float) -> float:
    """Cosine ramp (1 - cos(pi * e / e_total)) / 2, rising from 0 to 1."""
    if e_total < 1:
        raise ScheduleError(f"e_total must be >= 1, got {e_total}")
    if not 0 <= e <= e_total:
        raise ScheduleError(f"epoch {e} outside [0, {e_total}]")
    return (1.0 - math.cos(e / e_total * math.pi)) / 2.0


def _epoch_alpha(e: int, e_total: int) -> float:
    if not 1 <= e <= e_total:
        raise ScheduleError(f"epoch {e} outside [1, {e_total}]")
    if e_total == 1:
        return 1.0
    return schedule_alpha(e - 1, e_total - 1)


def epoch_training_set(table: SampleScoreTable, e: int, e_total: int) -> EpochTrainingSet:
    """All unbiased samples plus the floor(alpha * |biased|) lowest-loss biased ones.

    Epochs run 1..e_total: the first admits no biased samples, the last admits all.
    """
    alpha = _epoch_alpha(e, e_total)
    biased = table.biased
    k = math.floor(alpha * biased.size + _FLOOR_EPS)
    return EpochTrainingSet(np.concatenate([table.unbiased, biased[:k]]), e, e_total, alpha)


def strategy_variant(table: SampleScoreTable, e: int, e_total: int, variant: str) -> EpochTrainingSet:
    if variant == "cosine":
        return epoch_training_set(table, e, e_total)
    if variant not in VARIANTS:
        raise ConfigError(f"unknown selection variant {variant!r}; expected one of {VARIANTS}")
    if not 1 <= e <= e_total:
        raise ScheduleError(f"epoch {e} outside [1, {e_total}]")
    biased = table.biased
    if variant == "filter":
        return EpochTrainingSet(table.unbiased.copy(), e, e_total, 0.0)
    if e_total == 1:
        k, alpha = biased.size, 1.0
    else:
        k, alpha = (e - 1) * biased.size // (e_total - 1), (e - 1) / (e_total - 1)
    return EpochTrainingSet(np.concatenate([table.unbiased, biased[:k]]), e, e_total, alpha)


def score_records(table: SampleScoreTable, round_index: int, client_id: int,
                  id_map: np.ndarray | None = None) -> Iterator[dict]:
    """One dump record per scored sample, in loss order.

    ``id_map`` translates table indices (client positions) into dataset indices.
    """
    ids = table.indices if id_map is None else np.asarray(id_map)[table.indices]
    for pos in range(len(table)):
        yield {
            "round": round_index,
            "client": client_id,
            "index": int(ids[pos]),
            "loss": float(table.losses[pos]),
            "uncertainty": float(table.uncertainties[pos]),
            "biased": pos > table.split_pos,
        }
