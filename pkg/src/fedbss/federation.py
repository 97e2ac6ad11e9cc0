"""Server/client orchestration for simulated federated training.

Randomness is drawn from counter-keyed streams of one master seed, so a
client's mini-batch order depends only on (seed, round, client, epoch) and
not on which other clients were sampled or in which order they ran.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Literal, Sequence

import numpy as np

from .data import ClientPartition, Dataset
from .errors import ConfigError
from .nn import Model, OptimizerState, ParamVector, forward, loss_and_grad, sgd_step
from .selection import VARIANTS, SampleScoreTable, score_records, score_samples, strategy_variant

Algorithm = Literal["fedavg", "fedprox", "fedbss"]
ALGORITHMS = ("fedavg", "fedprox", "fedbss")


class Stream(IntEnum):
    INIT = 0
    PARTITION = 1
    NOISE = 2
    SAMPLING = 3
    SHUFFLE = 4
    DATA = 5


def stream_rng(seed: int, stream: Stream, *counters: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(stream), *counters)))


def stream_seed(seed: int, stream: Stream, *counters: int) -> int:
    """A 32-bit integer seed for APIs that take plain ints."""
    ss = np.random.SeedSequence(seed, spawn_key=(int(stream), *counters))
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 100
    participation_fraction: float = 0.1
    rounds_stage1: int = 50
    rounds_stage2: int = 150
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 1e-4
    weight_decay: float = 1e-5
    algorithm: Algorithm = "fedbss"
    mu: float = 0.01
    variant: str = "cosine"
    weighting: Literal["uniform", "samples"] = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if not 0 < self.participation_fraction <= 1:
            raise ConfigError("participation_fraction must lie in (0, 1]")
        if self.rounds_stage1 < 0 or self.rounds_stage2 < 0 or self.total_rounds < 1:
            raise ConfigError("stage round counts must be >= 0 and sum to >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.weighting not in ("uniform", "samples"):
            raise ConfigError("weighting must be 'uniform' or 'samples'")

    @property
    def total_rounds(self) -> int:
        return self.rounds_stage1 + self.rounds_stage2

    @property
    def clients_per_round(self) -> int:
        return participants(self.n_clients, self.participation_fraction)


@dataclass
class RoundReport:
    round: int
    stage: Literal["warmup", "progressive"]
    client_ids: list[int]
    test_accuracy: float
    mean_train_loss: float
    mean_split_fraction: float | None = None
    wall_ms: float = field(default=0.0, compare=False)

    def to_record(self) -> dict:
        return {
            "type": "round",
            "round": self.round,
            "stage": self.stage,
            "clients": self.client_ids,
            "accuracy": self.test_accuracy,
            "mean_train_loss": self.mean_train_loss,
            "mean_split_fraction": self.mean_split_fraction,
            "wall_ms": self.wall_ms,
        }

    @classmethod
    def from_record(cls, rec: dict) -> RoundReport:
        return cls(rec["round"], rec["stage"], list(rec["clients"]), rec["accuracy"],
                   rec["mean_train_loss"], rec["mean_split_fraction"], rec.get("wall_ms", 0.0))


def participants(n: int, fraction: float) -> int:
    # guard against 0.7 * 10 == 7.000000000000001
    return min(n, max(1, math.ceil(fraction * n - 1e-9)))


def sample_clients(n: int, fraction: float, seed: int, round_index: int) -> list[int]:
    """ceil(fraction * n) distinct client ids, uniform without replacement."""
    m = participants(n, fraction)
    if m == n:
        return list(range(n))
    rng = stream_rng(seed, Stream.SAMPLING, round_index)
    return sorted(int(i) for i in rng.choice(n, size=m, replace=False))


# ---------------------------------------------------------------------------
# local training


@dataclass
class LocalResult:
    params: ParamVector
    train_loss: float
    table: SampleScoreTable | None = None
    epoch_sizes: list[int] = field(default_factory=list)


def _run_epochs(model: Model, global_params: ParamVector, data: Dataset, config: FederationConfig,
                key: Sequence[int], epoch_positions: Callable[[int], np.ndarray],
                mu: float = 0.0) -> LocalResult:
    params = global_params.copy()
    state = OptimizerState(config.lr, config.momentum, config.weight_decay)
    center = global_params.flat
    epoch_loss = float("nan")
    sizes = []
    for e in range(1, config.local_epochs + 1):
        # sorting first makes an all-sample epoch shuffle exactly like plain training
        pos = np.sort(epoch_positions(e))
        sizes.append(int(pos.size))
        rng = stream_rng(config.seed, Stream.SHUFFLE, *key, e)
        order = pos[rng.permutation(pos.size)]
        total = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = loss_and_grad(model, data.samples[batch], data.labels[batch], params)
            if mu:
                grad = ParamVector(grad.flat + np.float32(mu) * (params.flat - center), grad.layout)
            params = sgd_step(params, grad, state)
            total += loss * batch.size
        epoch_loss = total / max(order.size, 1)
    return LocalResult(params, epoch_loss, epoch_sizes=sizes)


def _all_positions(data: Dataset) -> Callable[[int], np.ndarray]:
    everything = np.arange(len(data))
    return lambda e: everything


def train_plain(model, global_params, data, config, key=(0, 0)) -> LocalResult:
    return _run_epochs(model, global_params, data, config, key, _all_positions(data))


def train_fedprox(model, global_params, data, mu, config, key=(0, 0)) -> LocalResult:
    if mu < 0:
        raise ConfigError("mu must be >= 0")
    return _run_epochs(model, global_params, data, config, key, _all_positions(data), mu=mu)


def train_fedbss(model, global_params, data, config, key=(0, 0)) -> LocalResult:
    table = score_samples(model.with_params(global_params), data)
    result = _run_epochs(
        model, global_params, data, config, key,
        lambda e: strategy_variant(table, e, config.local_epochs, config.variant).indices,
    )
    result.table = table
    return result


def local_train_plain(model: Model, global_params: ParamVector, client_data: Dataset,
                      config: FederationConfig, key: Sequence[int] = (0, 0)) -> ParamVector:
    """``local_epochs`` passes of shuffled mini-batch SGD over every client sample.

    ``key`` (normally ``(round, client_id)``) selects the shuffle stream.
    """
    return train_plain(model, global_params, client_data, config, key).params


def local_train_fedprox(model: Model, global_params: ParamVector, client_data: Dataset, mu: float,
                        config: FederationConfig, key: Sequence[int] = (0, 0)) -> ParamVector:
    """Plain local training with mu * (w - w_global) added to every gradient."""
    return train_fedprox(model, global_params, client_data, mu, config, key).params


def local_train_fedbss(model: Model, global_params: ParamVector, client_data: Dataset,
                       config: FederationConfig, key: Sequence[int] = (0, 0)) -> ParamVector:
    """Score once under the global model, then train epoch by epoch on the scheduled subset."""
    return train_fedbss(model, global_params, client_data, config, key).params


def aggregate_mean(local_params: Sequence[ParamVector], weights: Sequence[float] | None = None) -> ParamVector:
    """Unweighted element-wise mean of the participants (float64 accumulation)."""
    return ParamVector.mean(local_params, weights)


def evaluate(model: Model, params: ParamVector, test_set: Dataset, chunk: int = 4096) -> float:
    """Top-1 accuracy; logit ties resolve to the lowest class index."""
    m = model.with_params(params)
    correct = 0
    for start in range(0, len(test_set), chunk):
        logits = forward(m, test_set.samples[start:start + chunk])
        correct += int((logits.argmax(axis=1) == test_set.labels[start:start + chunk]).sum())
    return correct / len(test_set)


# ---------------------------------------------------------------------------
# experiment loop


def run_experiment(config: FederationConfig, model: Model, dataset: Dataset,
                   partitions: Sequence[ClientPartition], test_set: Dataset, *,
                   start_round: int = 1,
                   on_round: Callable[[RoundReport, ParamVector], None] | None = None,
                   score_sink: Callable[[dict], None] | None = None) -> list[RoundReport]:
    """Run rounds ``start_round..total_rounds`` starting from ``model.params``.

    Rounds up to ``rounds_stage1`` are the warm-up stage (plain training for
    FedBSS); later rounds use the configured algorithm. FedProx applies its
    penalty in every round and FedAvg is plain throughout.
    """
    if len(partitions) != config.n_clients:
        raise ConfigError(f"{len(partitions)} partitions for n_clients={config.n_clients}")
    if tuple(dataset.feature_shape) != model.input_shape or tuple(test_set.feature_shape) != model.input_shape:
        raise ConfigError(f"model input {model.input_shape} does not match data {dataset.feature_shape}")
    if not 1 <= start_round <= config.total_rounds + 1:
        raise ConfigError(f"start_round {start_round} outside 1..{config.total_rounds + 1}")

    client_data = {}
    params = model.params
    reports = []
    for t in range(start_round, config.total_rounds + 1):
        tic = time.perf_counter()
        stage = "warmup" if t <= config.rounds_stage1 else "progressive"
        chosen = sample_clients(config.n_clients, config.participation_fraction, config.seed, t)
        results = []
        for cid in chosen:
            if cid not in client_data:
                client_data[cid] = dataset.subset(partitions[cid].indices)
            data = client_data[cid]
            key = (t, cid)
            if config.algorithm == "fedprox":
                res = train_fedprox(model, params, data, config.mu, config, key)
            elif config.algorithm == "fedbss" and stage == "progressive":
                res = train_fedbss(model, params, data, config, key)
                if score_sink is not None:
                    for rec in score_records(res.table, t, cid, partitions[cid].indices):
                        score_sink(rec)
            else:
                res = train_plain(model, params, data, config, key)
            results.append(res)
        weights = [len(partitions[c]) for c in chosen] if config.weighting == "samples" else None
        params = aggregate_mean([r.params for r in results], weights)
        splits = [r.table.split_fraction for r in results if r.table is not None]
        report = RoundReport(
            round=t,
            stage=stage,
            client_ids=chosen,
            test_accuracy=evaluate(model, params, test_set),
            mean_train_loss=float(np.mean([r.train_loss for r in results])),
            mean_split_fraction=float(np.mean(splits)) if splits else None,
            wall_ms=(time.perf_counter() - tic) * 1000.0,
        )
        reports.append(report)
        if on_round is not None:
            on_round(report, params)
    return reports
