"""Federated training with bias-aware, progressively scheduled sample selection."""
from .data import ClientPartition, Dataset, PartitionSpec, inject_label_noise, load_idx, partition, synth_gaussian_mixture
from .federation import FederationConfig, RoundReport, aggregate_mean, evaluate, run_experiment, sample_clients
from .nn import Model, ParamVector, backward, cross_entropy, forward, sgd_step, softmax
from .selection import SampleScoreTable, epoch_training_set, schedule_alpha, score_samples, split_point

__version__ = "0.1.0"
