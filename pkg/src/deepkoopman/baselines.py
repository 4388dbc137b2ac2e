"""Comparison models: raw-state DMD and the single-step-trained Koopman variant."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import koopman
from .envs import Dataset
from .numerics import lstsq_min_norm


@dataclass
class DmdModel:
    A: np.ndarray
    window: int

    def forecast(self, warm_states, warm_inputs, future_inputs, horizon: int) -> np.ndarray:
        """Evaluation-harness signature: propagate the last warmup state."""
        x = np.asarray(warm_states, dtype=float)[:, -1]
        return np.stack(_propagate(self.A, x, horizon), axis=1)


def _propagate(A, x, horizon):
    out = []
    for _ in range(horizon):
        x = x @ A.T
        out.append(x)
    return out


def dmd_fit(sequences) -> DmdModel:
    """``A_raw = Y X^+`` over the (X, Y) pairs of every sequence.

    ``sequences`` is a :class:`Dataset` or an iterable of state arrays.
    """
    if isinstance(sequences, Dataset):
        seqs = list(sequences.states)
    else:
        seqs = [np.asarray(getattr(s, "states", s), dtype=float) for s in sequences]
    if not seqs:
        raise ValueError("no sequences to fit")
    n = seqs[0].shape[1]
    if any(s.shape[1] != n for s in seqs):
        raise ValueError("sequences have different state dimensions")
    X = np.concatenate([s[:-1] for s in seqs]).T
    Y = np.concatenate([s[1:] for s in seqs]).T
    return DmdModel(lstsq_min_norm(X, Y), seqs[0].shape[0] - 1)


def dmd_predict(model: DmdModel, x1, horizon: int) -> np.ndarray:
    """States ``x_2 .. x_{horizon+1}`` from repeated application of ``A_raw``."""
    return np.array(_propagate(model.A, np.asarray(x1, dtype=float), horizon))


def single_step_config(config: koopman.TrainingConfig) -> koopman.TrainingConfig:
    """Same settings, but one-step targets ``A X~`` with ``A`` fitted on all ``T`` pairs."""
    return replace(config, recursive=False, fit_window=config.T)


def train_single_step_variant(config: koopman.TrainingConfig, dataset: Dataset, model=None, callback=None):
    """Train the single-step variant; returns ``(model, history)``.

    Passing ``model`` continues training it instead of starting fresh.
    """
    cfg = single_step_config(config)
    if model is None:
        return koopman.fit_model(dataset, cfg, callback)
    return koopman.train(model, dataset, cfg, callback)
