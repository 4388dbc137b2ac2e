"""File formats: dataset CSV, checkpoint bundles, metrics and run logs.

Floats are written with ``repr`` (shortest round-trip form, at most 17
significant digits), so every file reads back bit-exactly in float64.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .control import ControlRun
from .envs import Dataset
from .koopman import KoopmanModel, TrainingConfig
from .nets import DenseNetSpec, NetParams

CHECKPOINT_FORMAT = "deepkoopman-checkpoint"
CHECKPOINT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file."""


def fmt(v) -> str:
    v = float(v)
    return "" if np.isnan(v) else repr(v)


# -- datasets -----------------------------------------------------------------

def write_dataset(dataset: Dataset, path, meta: dict | None = None) -> None:
    """CSV with header ``seq,step,u,x0,x1,...`` and one row per state.

    ``u`` sits on the row of the state it acts from; the last state of each
    sequence has an empty ``u``. Multi-input data uses ``u0,u1,...``. A JSON
    sidecar ``<path>.json`` records ``dt`` and any extra ``meta``.
    """
    path = Path(path)
    N, T1, n = dataset.states.shape
    p = dataset.inputs.shape[-1]
    ucols = ["u"] if p <= 1 else [f"u{j}" for j in range(p)]
    header = ["seq", "step", *ucols, *[f"x{i}" for i in range(n)]]
    lines = [",".join(header)]
    for s in range(N):
        for t in range(T1):
            if t < T1 - 1 and p:
                us = [fmt(v) for v in dataset.inputs[s, t]]
            else:
                us = [""] * len(ucols)
            lines.append(",".join([str(s), str(t), *us, *(fmt(v) for v in dataset.states[s, t])]))
    path.write_text("\n".join(lines) + "\n")
    side = {"dt": dataset.dt, "n_sequences": N, "T": T1 - 1, "n_state": n, "n_input": p}
    side.update(meta or {})
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_dataset(path, dt: float | None = None) -> Dataset:
    """Inverse of :func:`write_dataset`.

    Raises
    ------
    ParseError
        On a missing column, a ragged sequence or an unparsable value; the
        message names the column or the line number.
    """
    path = Path(path)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if dt is None:
        dt = meta.get("dt", float("nan"))
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        for col in ("seq", "step", "x0"):
            if col not in header:
                raise ParseError(f"{path}: missing column '{col}'")
        if "u" not in header and "u0" not in header:
            raise ParseError(f"{path}: missing column 'u'")
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        ucols = [i for i, h in enumerate(header) if h == "u" or (h.startswith("u") and h[1:].isdigit())]
        i_seq, i_step = header.index("seq"), header.index("step")
        seqs: dict[int, list] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                s, t = int(row[i_seq]), int(row[i_step])
                x = [float(row[i]) for i in xcols]
                u = [float(row[i]) if row[i] != "" else None for i in ucols]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows = seqs.setdefault(s, [])
            if t != len(rows):
                raise ParseError(f"{path}:{lineno}: step {t} out of order in sequence {s}")
            rows.append((x, u))
    if not seqs:
        raise ParseError(f"{path}: no data rows")
    lengths = {len(r) for r in seqs.values()}
    if len(lengths) != 1:
        raise ParseError(f"{path}: sequences have different lengths {sorted(lengths)}")
    keys = sorted(seqs)
    states = np.array([[x for x, _ in seqs[k]] for k in keys])
    all_u = [[u for _, u in seqs[k][:-1]] for k in keys]
    has_u = any(v is not None for seq in all_u for u in seq for v in u)
    if has_u:
        try:
            inputs = np.array(all_u, dtype=float)
        except TypeError:
            raise ParseError(f"{path}: missing input value inside a sequence") from None
    else:
        inputs = np.zeros((len(keys), states.shape[1] - 1, 0))
    return Dataset(states, inputs, dt)


# -- checkpoints --------------------------------------------------------------

def _write_array(path: Path, a: np.ndarray) -> None:
    a2 = np.atleast_2d(a) if a.ndim < 2 else a
    if a.ndim == 1:
        a2 = a[None, :]
    lines = [",".join(fmt(v) for v in row) for row in a2]
    path.write_text("\n".join(lines) + "\n")


def _read_array(path: Path, shape) -> np.ndarray:
    text = path.read_text().strip()
    if not text:
        return np.zeros(shape)
    vals = [float(v) for line in text.splitlines() for v in line.split(",") if v != ""]
    return np.array(vals, dtype=float).reshape(shape)


def save_checkpoint(model: KoopmanModel, directory, extra: dict | None = None) -> None:
    """Directory bundle: ``manifest.json`` plus one CSV per parameter array."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for prefix, params in (("enc", model.encoder), ("dec", model.decoder)):
        for k, (W, b) in enumerate(zip(params.weights, params.biases)):
            arrays[f"{prefix}_W{k}"] = W
            arrays[f"{prefix}_b{k}"] = b
    arrays["B"] = model.B
    arrays["norm_mean"] = model.mean
    arrays["norm_std"] = model.std
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "precision": "float64",
        "encoder": model.encoder_spec.to_dict(),
        "decoder": model.decoder_spec.to_dict(),
        "latent_dim": model.latent_dim,
        "n_input": model.n_input,
        "config": model.config.to_dict(),
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
    }
    if extra:
        manifest["extra"] = extra
    for name, a in arrays.items():
        _write_array(d / f"{name}.csv", a)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> KoopmanModel:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise ParseError(f"{d}: no manifest.json") from None
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{d}: unsupported checkpoint format/version")
    arrays = {k: _read_array(d / f"{k}.csv", tuple(s)) for k, s in manifest["arrays"].items()}

    def net(prefix, spec):
        n = spec.n_layers
        p = NetParams([arrays[f"{prefix}_W{k}"] for k in range(n)], [arrays[f"{prefix}_b{k}"] for k in range(n)])
        p.check(spec)
        return p

    enc_spec = DenseNetSpec(**{**manifest["encoder"], "layer_sizes": tuple(manifest["encoder"]["layer_sizes"])})
    dec_spec = DenseNetSpec(**{**manifest["decoder"], "layer_sizes": tuple(manifest["decoder"]["layer_sizes"])})
    config = TrainingConfig(**manifest["config"])
    return KoopmanModel(enc_spec, net("enc", enc_spec), dec_spec, net("dec", dec_spec), arrays["B"],
                        arrays["norm_mean"], arrays["norm_std"], config)


# -- tables -------------------------------------------------------------------

def write_table(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) if isinstance(v, float) else str(v)
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [[] for _ in header]
        for row in reader:
            for c, v in zip(cols, row):
                c.append(float(v) if v != "" else np.nan)
    return {h: np.array(c) for h, c in zip(header, cols)}


def write_metrics(path, mean, std) -> None:
    """Per-step metrics: ``step, mean_rel_l1, std_rel_l1`` (step counts from 1)."""
    write_table(path, ["step", "mean_rel_l1", "std_rel_l1"],
                [(i + 1, float(m), float(s)) for i, (m, s) in enumerate(zip(mean, std))])


def write_loss_history(path, history) -> None:
    write_table(path, ["epoch", "loss"], [(i, float(v)) for i, v in enumerate(history)])


def write_run_log(path, run: ControlRun) -> None:
    """Run log ``step, t, u, residual, latent_cost, sensor``; the final state has no input."""
    rows = []
    for k in range(run.states.shape[0]):
        u = float(run.inputs[k]) if k < run.steps else float("nan")
        rows.append((k, k * run.dt, u, float(run.residuals[k]), float(run.latent_cost[k]), float(run.sensor[k])))
    write_table(path, ["step", "t", "u", "residual", "latent_cost", "sensor"], rows)
