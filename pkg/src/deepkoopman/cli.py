"""Command-line experiment driver.

Subcommands ``gen-data``, ``train``, ``eval``, ``mpc``, ``pctl`` and
``report``. Every command writes its outputs plus a ``manifest.json`` into
``--out`` and is a pure function of (config, input files, seed). Manifest
timestamps come from ``SOURCE_DATE_EPOCH`` when it is set, which makes the
whole output directory byte-reproducible.

Exit codes: 0 success, 1 runtime failure (divergence, NaN, missing input),
2 invalid usage or config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, baselines, control, envs, evaluation, io, koopman
from .config import ConfigError, RunConfig, load_config, stream

log = logging.getLogger("deepkoopman")

DEFAULT_HORIZONS = (32, 64, 128)


class CommandError(RuntimeError):
    """Runtime failure of a command (reported with exit code 1)."""


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, started: str, outputs, extra=None) -> None:
    files = {}
    for p in outputs:
        p = Path(p)
        targets = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for q in targets:
            files[str(q.relative_to(out))] = _sha256(q)
    manifest = {
        "command": command,
        "started": started,
        "finished": _now(),
        "seed": cfg.seed if cfg else None,
        "config_sha256": cfg.digest() if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "versions": {"deepkoopman": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "outputs": files,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(np.asarray(a, dtype=float))):
            raise CommandError(f"{name}: NaN or infinite values detected")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} not found: {path}")
    return path


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    env = cfg.make_env()
    d = cfg.data
    T = int(d.get("T", 32))
    rng = stream(cfg.seed, "data")
    if isinstance(env, envs.OracleSystem):
        n = int(d.get("n_sequences", 512))
        kw = {k: tuple(d[k]) for k in ("x1_range", "x2_range") if k in d}
        ds = envs.oracle_dataset(env, n, T, rng, **kw)
        counts = {"n_sequences": n, "T": T, "snapshots": n * (T + 1)}
    else:
        total = int(d.get("total_snapshots", 4238))
        n = d.get("n_sequences", 1600)
        ds = envs.generate_training_data(env, cfg.chirp(), total, T, n, x0=tuple(d.get("x0", (0.01, 0.0))), rng=rng)
        counts = {"total_snapshots": total, "T": T, "n_windows": total - T, "n_sequences": len(ds)}
    _check_finite("generated data", ds.states, ds.inputs)
    path = out / "dataset.csv"
    io.write_dataset(ds, path, meta={"env": env.to_dict(), "seed": cfg.seed})
    log.info("wrote %d sequences of %d steps to %s", len(ds), ds.T, path)
    return [path, Path(str(path) + ".json")], {"counts": counts, "env": env.to_dict()}


def cmd_train(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    ds = io.read_dataset(_require(cfg.path("dataset"), "dataset"))
    tcfg = cfg.training_config()
    if ds.T < tcfg.T:
        raise CommandError(f"dataset sequences have T={ds.T}, training needs T={tcfg.T}")
    if ds.T > tcfg.T:
        ds = envs.Dataset(ds.states[:, :tcfg.T + 1], ds.inputs[:, :tcfg.T], ds.dt)

    def cb(epoch, loss, model):
        log.info("epoch %d loss %.6e", epoch, loss)

    ckpt = out / "checkpoint"
    hist_path = out / "loss_history.csv"
    try:
        model, history = koopman.fit_model(ds, tcfg, cb)
    except koopman.TrainingDivergedError as exc:
        if exc.model is not None:
            io.save_checkpoint(exc.model, ckpt, extra={"diverged": True})
            io.write_loss_history(hist_path, exc.history or [])
        raise CommandError(f"training diverged: {exc}") from None
    io.save_checkpoint(model, ckpt)
    io.write_loss_history(hist_path, history)
    return [ckpt, hist_path], {"final_loss": float(history[-1]) if history else None}


def _test_set(cfg: RunConfig, env, length: int) -> envs.Dataset:
    if "test_dataset" in cfg.paths:
        return io.read_dataset(_require(cfg.path("test_dataset"), "test dataset"))
    n = int(cfg.eval.get("n_sequences", 20))
    sched = cfg.chirp() if isinstance(env, envs.MeanFieldWake) else None
    return evaluation.heldout_dataset(env, n, length, stream(cfg.seed, "eval"), sched)


def cmd_eval(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    env = cfg.make_env()
    kind = cfg.eval.get("model", "koopman")
    horizons = [int(h) for h in cfg.eval.get("horizons", DEFAULT_HORIZONS)]
    if kind == "koopman":
        model = io.load_checkpoint(_require(cfg.path("checkpoint"), "checkpoint"))
        fc = evaluation.koopman_forecaster(model)
        default_warmup = model.config.fit_window
    elif kind == "dmd":
        dmd = baselines.dmd_fit(io.read_dataset(_require(cfg.path("dataset"), "dataset")))
        fc = dmd.forecast
        default_warmup = 16
    else:
        raise ConfigError(f"eval.model must be 'koopman' or 'dmd', got {kind!r}")
    warmup = int(cfg.eval.get("warmup", default_warmup))
    test = _test_set(cfg, env, warmup + max(horizons))
    outputs, summary = [], {}
    for h in horizons:
        err = evaluation.forecast_errors(fc, test, warmup, h)
        mean, std = koopman.aggregate_errors(err)
        _check_finite(f"metrics for horizon {h}", mean, std)
        path = out / f"metrics_h{h}.csv"
        io.write_metrics(path, mean, std)
        outputs.append(path)
        summary[f"h{h}_mean_rel_l1"] = float(mean.mean())
    return outputs, {"summary": summary, "n_test_sequences": len(test), "warmup": warmup}


def _x0(section: dict):
    if "x0" in section:
        return np.asarray(section["x0"], dtype=float)
    return None


def _finish_run(run: control.ControlRun, out: Path, sidecar: dict, steps: int) -> tuple[list, dict]:
    log_path = out / "run_log.csv"
    io.write_run_log(log_path, run)
    side_path = out / "run_config.json"
    side_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    if run.steps < steps:
        raise CommandError(f"environment diverged after {run.steps} of {steps} steps (partial log written)")
    return [log_path, side_path], {"final_residual": float(run.residuals[-1])}


def cmd_mpc(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    env = cfg.make_env()
    if not isinstance(env, envs.MeanFieldWake):
        raise ConfigError("mpc needs a forced environment (env.kind = 'wake')")
    model = io.load_checkpoint(_require(cfg.path("checkpoint"), "checkpoint"))
    mcfg = cfg.mpc_config()
    steps = int(cfg.mpc.get("steps", 1000))
    sensor = envs.Sensor(float(cfg.mpc.get("sensor_phase", 0.0)))
    run = control.run_mpc_loop(env, model, mcfg, steps, _x0(cfg.mpc), sensor)
    sidecar = {"controller": "mpc", "env": env.to_dict(), "mpc": mcfg.to_dict(), "steps": steps,
               "sensor_phase": sensor.phase, "R": run.R, "unconverged_steps": run.unconverged_steps,
               "seed": cfg.seed}
    return _finish_run(run, out, sidecar, steps)


def cmd_pctl(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    env = cfg.make_env()
    if not isinstance(env, envs.MeanFieldWake):
        raise ConfigError("pctl needs a forced environment (env.kind = 'wake')")
    pcfg = cfg.pcontrol_config()
    steps = int(cfg.pcontrol.get("steps", 2000))
    run = control.run_pcontrol_loop(env, pcfg, steps, _x0(cfg.pcontrol))
    sidecar = {"controller": "pctl", "env": env.to_dict(), "gain": pcfg.gain,
               "sensor_phase": pcfg.sensor.phase, "steps": steps, "seed": cfg.seed}
    return _finish_run(run, out, sidecar, steps)


def summarize_run(log: dict, sidecar: dict, gain: float = 0.4) -> dict:
    """Scalar summary of a run log: residual levels and input/sensor correlation.

    The correlation compares ``u`` with the scaled sensor ``-gain * s`` over
    the controlled window (after the MPC warmup, where inputs are nonzero).
    """
    u, res, s = log["u"], log["residual"], log["sensor"]
    start = int(sidecar.get("mpc", {}).get("warmup", 0)) if sidecar.get("controller") == "mpc" else 0
    valid = np.isfinite(u)
    uu, ss = u[valid][start:], s[valid][start:]
    try:
        corr = control.correlation(uu, -gain * ss)
    except ValueError:
        corr = float("nan")
    n = len(res)
    return {
        "initial_residual": float(res[0]),
        "final_residual": float(res[-1]),
        "final_quarter_mean_residual": float(np.mean(res[-max(n // 4, 1):])),
        "input_sensor_correlation": corr,
    }


def cmd_report(cfg: RunConfig | None, out: Path, runs: list[Path]) -> tuple[list, dict]:
    if not runs:
        raise ConfigError("report needs at least one run directory")
    summary_rows, outputs = [], []
    err_cols, res_cols = {}, {}
    overlay = None
    for d in runs:
        d = _require(Path(d), "run directory")
        tag = d.name
        for mpath in sorted(d.glob("metrics_h*.csv")):
            t = io.read_table(mpath)
            _check_finite(str(mpath), t["mean_rel_l1"])
            err_cols[f"{tag}/{mpath.stem}"] = t["mean_rel_l1"]
            summary_rows.append((tag, f"{mpath.stem}_mean_rel_l1", float(t["mean_rel_l1"].mean())))
        lpath = d / "run_log.csv"
        if lpath.exists():
            t = io.read_table(lpath)
            _check_finite(str(lpath), t["residual"], t["sensor"])
            side_path = d / "run_config.json"
            sidecar = json.loads(side_path.read_text()) if side_path.exists() else {}
            res_cols[tag] = t["residual"]
            for k, v in summarize_run(t, sidecar).items():
                summary_rows.append((tag, k, v))
            if overlay is None and sidecar.get("controller") == "mpc":
                overlay = (t["step"], t["t"], t["u"], -0.4 * t["sensor"])
    if not summary_rows:
        raise CommandError("no metrics or run logs found in the given directories")

    path = out / "summary.csv"
    io.write_table(path, ["source", "quantity", "value"], summary_rows)
    outputs.append(path)
    if err_cols:
        path = out / "error_vs_step.csv"
        _write_columns(path, err_cols)
        outputs.append(path)
    if res_cols:
        path = out / "residual_vs_step.csv"
        _write_columns(path, res_cols)
        outputs.append(path)
    if overlay is not None:
        path = out / "input_vs_sensor.csv"
        io.write_table(path, ["step", "t", "u", "scaled_sensor"],
                       [(int(a), float(b), float(c), float(e)) for a, b, c, e in zip(*overlay)])
        outputs.append(path)
    return outputs, {"runs": [str(Path(r)) for r in runs]}


def _write_columns(path: Path, cols: dict) -> None:
    n = max(len(v) for v in cols.values())
    names = sorted(cols)
    rows = []
    for i in range(n):
        rows.append((i + 1, *(float(cols[k][i]) if i < len(cols[k]) else float("nan") for k in names)))
    io.write_table(path, ["step", *names], rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "mpc": cmd_mpc,
    "pctl": cmd_pctl,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepkoopman", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "report", help="run config (JSON)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name == "report":
            p.add_argument("runs", nargs="+", type=Path, help="output directories of earlier commands")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = _now()
    try:
        cfg = load_config(args.config, args.seed) if args.config is not None else None
        out = args.out.resolve()
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "report":
            outputs, extra = cmd_report(cfg, out, [r.resolve() for r in args.runs])
        else:
            outputs, extra = COMMANDS[args.command](cfg, out)
        _write_manifest(out, args.command, cfg, started, outputs, extra)
    except ConfigError as exc:
        print(f"deepkoopman {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, io.ParseError, envs.DivergenceError, FloatingPointError, OSError) as exc:
        print(f"deepkoopman {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
