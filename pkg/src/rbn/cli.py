"""Command-line entry point: ``rbn <subcommand> [flags]``.

Every subcommand resolves its parameters as built-in defaults, then the
matching section of ``--config`` (a JSON file, or any artifact this tool
wrote, whose embedded config is reused), then explicit flags. The resolved
config and toolkit version are embedded in every output, and all outputs
are written atomically.

Exit status: 0 on success, 2 for usage or invalid arguments, 1 for I/O or
format failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import __version__
from .conformal import CalibrationError, calibrate, collect, min_calibration_size
from .dynamics import SystemModel, make_system
from .grid_solver import Grid, GridValue, solve
from .io import (
    FormatError, GRID_MAGIC, NET_MAGIC, read_checkpoint, read_grid, write_checkpoint,
    write_csv, write_grid, write_json,
)
from .metrics import classify_rollouts, compare_sets
from .providers import GridProvider, NetProvider, ValueProvider
from .simulator import Controller, SimConfig, run_trial
from .training import TrainConfig, TrainingError, train

log = logging.getLogger("rbn")

DEFAULT_GRIDS = {"integrator1d": "201", "dubins3d": "61x61x41", "air3d": "61x61x41"}

DEFAULTS: dict[str, dict] = {
    "solve-grid": {
        "system": "dubins3d", "system_params": {}, "gamma": 0.0, "horizon": 1.0,
        "grid": None, "snapshots": [],
    },
    "train": {"system": "dubins3d", "system_params": {}, "train": {}, "seed": 0},
    "calibrate": {
        "gamma": [0.0], "epsilon": [0.01], "n": 10_000, "dt": 0.01, "horizon": None,
        "volume_samples": 100_000, "seed": 0,
    },
    "rollout-eval": {
        "gamma": 0.0, "delta": 0.0, "n": 500, "policy": "learned", "dt": 0.01,
        "horizon": None, "seed": 0,
    },
    "compare-sets": {"gamma": 0.0, "level": 0.0, "tau": None, "n": 100_000, "seed": 0},
    "simulate": {
        "controller": "nominal", "gamma": 0.0, "delta": 0.0, "threshold": 0.0,
        "trials": 5, "seed": 0, "sim": {},
    },
}


class UsageError(ValueError):
    pass


# -- helpers --------------------------------------------------------------
def stream_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Named, independent sub-stream of the master seed."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def parse_grid_counts(text: str) -> list[int]:
    try:
        counts = [int(c) for c in str(text).lower().split("x")]
    except ValueError:
        raise UsageError(f"bad grid spec {text!r}; expected e.g. 61x61x41") from None
    if any(c < 2 for c in counts):
        raise UsageError("grid counts must be at least 2")
    return counts


def _parse_param(text: str):
    if "=" not in text:
        raise UsageError(f"expected KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None) -> dict:
    """Read a JSON config, or the config embedded in a prior output."""
    if path is None:
        return {}
    p = Path(path)
    data = p.read_bytes()
    if data.startswith(GRID_MAGIC):
        return dict(read_grid(p).meta.get("run_config", {}))
    if data.startswith(NET_MAGIC):
        return dict(read_checkpoint(p)[1].get("extra", {}).get("run_config", {}))
    text = data.decode("utf-8")
    if text.startswith("# config: "):
        return json.loads(text.splitlines()[0][len("# config: "):])
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a JSON config ({e})") from None
    if not isinstance(obj, dict):
        raise FormatError(f"{path}: config must be a JSON object")
    return obj.get("run_config", obj)


def resolve(command: str, file_config: dict, flags: dict) -> dict:
    """Defaults, then the file's section for ``command``, then explicit flags."""
    out = json.loads(json.dumps(DEFAULTS[command]))
    section = file_config.get(command, file_config) if file_config else {}
    if command == "train" and section and "train" not in section and "system" not in section:
        section = {"train": section}
    for k, v in section.items():
        if k in ("command", "version"):
            continue
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    for k, v in flags.items():
        if v is None:
            continue
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    out["command"] = command
    out["version"] = __version__
    return out


def _system(cfg: dict) -> SystemModel:
    return make_system(cfg["system"], **cfg.get("system_params", {}))


def _system_from_config(conf: dict) -> SystemModel:
    conf = dict(conf)
    return make_system(conf.pop("name"), **conf)


def load_value(paths: Sequence[str], clamp: bool = True) -> ValueProvider:
    """One checkpoint, or one or more grid files (any mix of gamma and tau)."""
    if not paths:
        raise UsageError("no value file given")
    first = Path(paths[0]).read_bytes()[:8]
    if first.startswith(NET_MAGIC):
        if len(paths) > 1:
            raise UsageError("give a single network checkpoint")
        return NetProvider(read_checkpoint(paths[0])[0], clamp=clamp)
    grids: dict[float, list[GridValue]] = {}
    system = None
    for p in paths:
        V = read_grid(p)
        conf = V.meta.get("system")
        if conf is None:
            raise FormatError(f"{p}: grid carries no system description")
        if system is None:
            system = _system_from_config(conf)
        elif system.config() != _system_from_config(conf).config():
            raise UsageError(f"{p}: grids describe different systems")
        grids.setdefault(float(V.gamma), []).append(V)
    return GridProvider(system, grids, clamp=clamp)


def _log_written(path) -> None:
    log.info("wrote %s", path)


# -- subcommands ----------------------------------------------------------
def cmd_solve_grid(cfg: dict, args) -> int:
    system = _system(cfg)
    spec = cfg["grid"] or DEFAULT_GRIDS.get(system.name)
    if spec is None:
        raise UsageError(f"no grid solve for {system.name}; its state is too large to grid")
    grid = Grid.for_system(system, parse_grid_counts(spec))
    snaps = solve(grid, system, float(cfg["gamma"]), float(cfg["horizon"]),
                  snapshot_times=cfg["snapshots"] or None)
    out = Path(args.out)
    for V in snaps:
        V.meta["run_config"] = cfg
        if math.isclose(V.time, cfg["horizon"]):
            path = out
        else:
            path = out.with_name(f"{out.stem}_tau{V.time:.4f}{out.suffix}")
        _log_written(write_grid(path, V))
    return 0


def cmd_train(cfg: dict, args) -> int:
    system = _system(cfg)
    tcfg = dict(cfg["train"])
    tcfg["seed"] = int(stream_seed(cfg["seed"], "training").generate_state(1)[0])
    config = TrainConfig.from_dict(tcfg)
    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    net, report = train(
        system, None, config, checkpoint_dir=ckpt_dir,
        save=lambda p, n: write_checkpoint(p, n, {"run_config": cfg}),
    )
    _log_written(write_checkpoint(args.out, net, {
        "run_config": cfg,
        "pretrain_loss_start": report.pretrain_loss_start,
        "pretrain_loss_end": report.pretrain_loss_end,
    }))
    if args.report:
        _log_written(write_csv(args.report, ["epoch", "loss", "progress", "seconds"],
                               report.rows(), cfg))
    return 0


def cmd_calibrate(cfg: dict, args) -> int:
    provider = load_value([args.net])
    rng = stream_rng(cfg["seed"], "calibration")
    gammas = [float(g) for g in np.atleast_1d(cfg["gamma"])]
    epsilons = [float(e) for e in np.atleast_1d(cfg["epsilon"])]
    n = int(cfg["n"])
    need = max(min_calibration_size(e) for e in epsilons)
    if n < need:
        raise CalibrationError(f"n={n} is too small for epsilon={min(epsilons)}; need {need}")
    vol_x = provider.system.sample_states(int(cfg["volume_samples"]), rng)
    horizon = provider.horizon if cfg["horizon"] is None else float(cfg["horizon"])
    curve_rows, record_rows, header = [], [], None
    for gamma in gammas:
        cal = collect(provider, gamma, n, rng, horizon=horizon, dt=float(cfg["dt"]))
        header = cal.header()
        record_rows.extend(cal.rows())
        base = provider.value(vol_x, gamma, tau=horizon)
        for eps in epsilons:
            delta = calibrate(cal, eps)
            curve_rows.append([gamma, eps, delta, n, float(np.mean(base - delta > 0))])
            print(f"gamma={gamma:g} epsilon={eps:g} delta={delta:.6g}")
    _log_written(write_csv(args.out, ["gamma", "epsilon", "delta", "n", "safe_volume_fraction"],
                           curve_rows, cfg))
    if args.records:
        _log_written(write_csv(args.records, header, record_rows, cfg))
    return 0


def _zero_nominal(system: SystemModel):
    def nominal(x, t):
        return np.zeros((len(x), system.control_dim))

    return nominal


def cmd_rollout_eval(cfg: dict, args) -> int:
    provider = load_value(args.value)
    rng = stream_rng(cfg["seed"], "rollout")
    x0 = provider.system.sample_states(int(cfg["n"]), rng)
    policy = cfg["policy"]
    if policy not in ("learned", "qp"):
        raise UsageError("policy must be 'learned' or 'qp'")
    res = classify_rollouts(
        provider, x0, float(cfg["gamma"]), delta=float(cfg["delta"]), policy=policy,
        horizon=cfg["horizon"], dt=float(cfg["dt"]),
        nominal=_zero_nominal(provider.system) if policy == "qp" else None,
    )
    print(f"FPR={res.fpr:.4f} FNR={res.fnr:.4f} CC={res.cc:.4f} n={res.n}")
    if args.out:
        _log_written(write_json(args.out, {"run_config": cfg, **res.to_dict()}))
    return 0


def cmd_compare_sets(cfg: dict, args) -> int:
    truth = load_value(args.truth, clamp=False)
    learned = load_value(args.learned, clamp=False)
    if truth.system.state_dim != learned.system.state_dim:
        raise UsageError("truth and learned values have different state dimensions")
    gamma, tau = float(cfg["gamma"]), cfg["tau"]
    if isinstance(truth, GridProvider):
        points = truth._lookup(gamma)[-1].grid.states.reshape(-1, truth.system.state_dim)
    else:
        points = truth.system.sample_states(int(cfg["n"]), stream_rng(cfg["seed"], "sampling"))
    res = compare_sets(truth.value(points, gamma, tau=tau), learned.value(points, gamma, tau=tau),
                       float(cfg["level"]))
    print(f"IOU={res.iou:.4f} FI={res.fi:.4f} FE={res.fe:.4f} n={res.n_points}")
    if args.out:
        _log_written(write_json(args.out, {"run_config": cfg, **res.to_dict()}))
    return 0


CONTROLLERS = {
    "nominal": "nominal", "least-restrictive": "least_restrictive", "lr": "least_restrictive",
    "qp": "qp", "pairwise": "pairwise_qp",
}


def cmd_simulate(cfg: dict, args) -> int:
    kind = CONTROLLERS.get(cfg["controller"])
    if kind is None:
        raise UsageError(f"unknown controller {cfg['controller']!r}; choose from {sorted(CONTROLLERS)}")
    provider = None
    if kind != "nominal":
        files = args.net or args.value
        if not files:
            raise UsageError(f"controller {cfg['controller']} needs --net or --value")
        provider = load_value(files)
    controller = Controller(kind, provider, float(cfg["gamma"]), float(cfg["delta"]),
                            float(cfg["threshold"]))
    seeds = stream_seed(cfg["seed"], "simulation").generate_state(int(cfg["trials"]))
    results = []
    for k, s in enumerate(seeds):
        sim = SimConfig(**{**cfg["sim"], "seed": int(s)})
        metrics, trace = run_trial(sim, controller)
        results.append(metrics.to_dict())
        print(f"trial {k}: collisions/min={metrics.collisions_per_min:.2f} "
              f"in-dist/min={metrics.in_dist_collisions_per_min:.2f} "
              f"goals/min={metrics.goals_per_min:.2f} deadlocks={metrics.deadlock_events}")
        if args.trace and k == 0:
            _log_written(write_csv(args.trace, trace.header(), trace.rows(), cfg))
    keys = [k for k in results[0] if k != "minutes"] if results else []
    summary = {k: float(np.mean([r[k] for r in results])) for k in keys}
    if args.out:
        _log_written(write_json(args.out, {"run_config": cfg, "trials": results, "mean": summary}))
    return 0


# -- parser ---------------------------------------------------------------
def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rbn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"rbn {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config, or an artifact whose embedded config to reuse")
    common.add_argument("--threads", type=int, default=1, help="worker cap (1 = reproducible)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("solve-grid", parents=[common], help="grid-solve the discounted value")
    s.add_argument("--system")
    s.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                   help="system parameter override")
    s.add_argument("--gamma", type=float)
    s.add_argument("--horizon", type=float)
    s.add_argument("--grid", help="node counts, e.g. 61x61x41")
    s.add_argument("--snapshots", type=_floats, help="extra tau snapshots, comma separated")
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", parents=[common], help="train a value network")
    s.add_argument("--system")
    s.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--epochs", type=int)
    s.add_argument("--pretrain-epochs", type=int)
    s.add_argument("--samples", type=int, help="samples per epoch")
    s.add_argument("--lr", type=float)
    s.add_argument("--hidden-layers", type=int)
    s.add_argument("--hidden-size", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--report", help="per-epoch CSV")
    s.add_argument("--checkpoint-dir")

    s = sub.add_parser("calibrate", parents=[common], help="conformal margins for a network")
    s.add_argument("--net", required=True)
    s.add_argument("--gamma", type=_floats)
    s.add_argument("--epsilon", type=_floats)
    s.add_argument("--n", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--volume-samples", type=int)
    s.add_argument("--out", required=True, help="delta curve CSV")
    s.add_argument("--records", help="calibration records CSV")

    s = sub.add_parser("rollout-eval", parents=[common], help="FPR/FNR/CC of rollouts")
    s.add_argument("--value", action="append", required=True, help="checkpoint or grid file(s)")
    s.add_argument("--gamma", type=float)
    s.add_argument("--delta", type=float)
    s.add_argument("--n", type=int)
    s.add_argument("--policy", choices=["learned", "qp"])
    s.add_argument("--dt", type=float)
    s.add_argument("--out")

    s = sub.add_parser("compare-sets", parents=[common], help="IOU/FI/FE of two safe sets")
    s.add_argument("--truth", action="append", required=True)
    s.add_argument("--learned", action="append", required=True)
    s.add_argument("--gamma", type=float)
    s.add_argument("--level", type=float)
    s.add_argument("--tau", type=float)
    s.add_argument("--out")

    s = sub.add_parser("simulate", parents=[common], help="multi-agent trials")
    s.add_argument("--controller", choices=sorted(CONTROLLERS))
    s.add_argument("--net", action="append", help="joint-state checkpoint")
    s.add_argument("--value", action="append", help="grid or checkpoint file(s)")
    s.add_argument("--gamma", type=float)
    s.add_argument("--delta", type=float)
    s.add_argument("--threshold", type=float)
    s.add_argument("--trials", type=int)
    s.add_argument("--seconds", type=float, help="trial length")
    s.add_argument("--agents", type=int)
    s.add_argument("--out")
    s.add_argument("--trace", help="CSV trace of the first trial")
    return p


def _flags(args) -> dict:
    c = args.command
    f: dict = {"seed": args.seed}
    if c in ("solve-grid", "train"):
        f["system"] = args.system
        if args.param:
            f["system_params"] = dict(_parse_param(t) for t in args.param)
    if c == "solve-grid":
        f.update(gamma=args.gamma, horizon=args.horizon, grid=args.grid, snapshots=args.snapshots)
    elif c == "train":
        t = {"epochs": args.epochs, "pretrain_epochs": args.pretrain_epochs,
             "samples_per_epoch": args.samples, "learning_rate": args.lr,
             "hidden_layers": args.hidden_layers, "hidden_size": args.hidden_size}
        f["train"] = {k: v for k, v in t.items() if v is not None} or None
    elif c == "calibrate":
        f.update(gamma=args.gamma, epsilon=args.epsilon, n=args.n, dt=args.dt,
                 volume_samples=args.volume_samples)
    elif c == "rollout-eval":
        f.update(gamma=args.gamma, delta=args.delta, n=args.n, policy=args.policy, dt=args.dt)
    elif c == "compare-sets":
        f.update(gamma=args.gamma, level=args.level, tau=args.tau)
    elif c == "simulate":
        s = {"trial_seconds": args.seconds, "n_agents": args.agents}
        f.update(controller=args.controller, gamma=args.gamma, delta=args.delta,
                 threshold=args.threshold, trials=args.trials,
                 sim={k: v for k, v in s.items() if v is not None} or None)
    return f


COMMANDS = {
    "solve-grid": cmd_solve_grid,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "rollout-eval": cmd_rollout_eval,
    "compare-sets": cmd_compare_sets,
    "simulate": cmd_simulate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    torch.set_num_threads(args.threads)
    try:
        cfg = resolve(args.command, load_config(args.config), _flags(args))
        return COMMANDS[args.command](cfg, args)
    except (FormatError, OSError) as e:
        where = getattr(e, "filename", None)
        msg = f"{where}: {e.strerror}" if where and getattr(e, "strerror", None) else str(e)
        print(f"rbn {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except (UsageError, CalibrationError, TrainingError, ValueError, TypeError) as e:
        print(f"rbn {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
