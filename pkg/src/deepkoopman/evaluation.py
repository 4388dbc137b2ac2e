"""Shared forecasting harness for the Deep Koopman model and the baselines.

A forecaster is any callable
``f(warm_states (S, w+1, n), warm_inputs (S, w, p), future_inputs (S, H, p), horizon) -> (S, H, n)``.
"""

from __future__ import annotations

import numpy as np

from . import envs, koopman
from .envs import Dataset


def koopman_forecaster(model: koopman.KoopmanModel):
    def f(warm_states, warm_inputs, future_inputs, horizon):
        return koopman.predict_batch(model, warm_states, warm_inputs, future_inputs, horizon)
    return f


def forecast_errors(forecaster, dataset: Dataset, warmup: int, horizon: int) -> np.ndarray:
    """Relative L1 errors ``(S, horizon)`` after a ``warmup``-pair warm start."""
    if dataset.states.shape[1] < warmup + 1 + horizon:
        raise ValueError(f"sequences of {dataset.states.shape[1]} states are too short for "
                         f"warmup {warmup} + horizon {horizon}")
    warm = dataset.states[:, :warmup + 1]
    pred = forecaster(warm, dataset.inputs[:, :warmup], dataset.inputs[:, warmup:], horizon)
    return koopman.relative_l1_error(pred, dataset.states[:, warmup + 1:warmup + 1 + horizon])


def heldout_dataset(env, n_sequences: int, length: int, rng: np.random.Generator,
                    schedule: envs.ChirpSchedule | None = None) -> Dataset:
    """Test sequences of ``length`` steps, independent of the training draw.

    Oracle sequences start from random states; wake sequences are windows
    of a fresh chirp-driven run whose jitter comes from ``rng``.
    """
    if isinstance(env, envs.OracleSystem):
        return envs.oracle_dataset(env, n_sequences, length, rng)
    base = schedule or envs.ChirpSchedule()
    sched = envs.ChirpSchedule(base.amplitude, base.f0, base.f1, base.sweep_steps, base.rest_steps,
                               None, int(rng.integers(0, 2**31 - 1)))
    total = max(4 * (length + 1), 2 * (base.sweep_steps + base.rest_steps))
    return envs.generate_training_data(env, sched, total, length, n_sequences, rng=rng)
