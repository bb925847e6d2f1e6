"""Command-line pipeline: simulate -> train -> observe -> evaluate.

Exit codes: 0 success, 1 internal error, 2 configuration error,
3 missing prerequisite, 4 shape or compatibility error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .containers import ContainerError
from .evaluation import build_test_set, run_benchmark, write_long_csv, write_summary_csv
from .fno import FnoArch, ShapeError, identity_correction, load_checkpoint, save_checkpoint
from .observers import observe, write_estimates_csv
from .ring_sim import run_scenario
from .train import (Dataset, Scenario, load_dataset, save_dataset, train_correction_operator,
                    train_solution_operator, write_training_log)

log = logging.getLogger("trafficobs")
EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_SHAPE = 0, 1, 2, 3, 4


class MissingPrerequisite(RuntimeError):
    pass


def _load_config(args) -> config_mod.ExperimentConfig:
    path = args.config or config_mod.bundled("desk.cfg")
    cfg = config_mod.load(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed).validate()
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"{what} not found at {path}")
    return path


def _check_arch(found: FnoArch, expected: FnoArch, what: str) -> None:
    if found != expected:
        a, b = found.to_dict(), expected.to_dict()
        diff = ", ".join(f"{k}: checkpoint {a[k]} vs config {b[k]}" for k in a if a[k] != b[k])
        raise ShapeError(f"{what} checkpoint does not match the configured architecture ({diff})")


def _descriptor(sc) -> dict:
    return {"target_density": sc.target_density, "seed": sc.seed, "warmup_steps": sc.warmup_steps,
            "ood": sc.ood}


def _simulate_one(sc):
    traj, record = run_scenario(sc)
    return Scenario(_descriptor(sc), traj, record)


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    scenarios = cfg.train_scenarios()
    if args.jobs > 1 and len(scenarios) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            sims = list(pool.map(_simulate_one, scenarios))
    else:
        sims = [_simulate_one(sc) for sc in scenarios]
    ds = Dataset(cfg.grid_size, cfg.dx, 1.0, cfg.n, cfg.n_out, sims)
    save_dataset(ds, out / "dataset.bin")
    if not sims:
        print("warning: configuration defines no scenarios; wrote an empty dataset", file=sys.stderr)
    print(f"scenarios: {len(sims)}")
    print(f"pairs: {ds.pair_count}")
    print(f"dataset: {out / 'dataset.bin'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    ds_path = Path(args.dataset) if args.dataset else out / "dataset.bin"
    ds = load_dataset(_require(ds_path, "dataset"))
    if (ds.n, ds.n_out, ds.grid_size) != (cfg.n, cfg.n_out, cfg.grid_size):
        raise ShapeError(f"dataset has n={ds.n}, n_out={ds.n_out}, grid={ds.grid_size}; "
                         f"config expects n={cfg.n}, n_out={cfg.n_out}, grid={cfg.grid_size}")
    pairs = ds.pairs()
    if not pairs:
        raise MissingPrerequisite("dataset contains no training pairs")
    dx_km = cfg.dx / 1000.0
    sol_path = out / "solution.ckpt"
    if args.which in ("solution", "both"):
        rows = []
        theta = train_solution_operator(pairs, cfg.solution_arch(), cfg.train, dx_km, rows, out)
        save_checkpoint(theta, sol_path)
        write_training_log(rows, out / "solution_log.csv")
        print(f"solution: {sol_path} (best val {min(r['val_loss'] for r in rows):.6g})")
    if args.which in ("correction", "both"):
        theta = load_checkpoint(_require(sol_path, "solution checkpoint"))
        _check_arch(theta.arch, cfg.solution_arch(), "solution")
        rows = []
        psi = train_correction_operator(pairs, theta, cfg.correction_arch(), cfg.train_correction, cfg.cells, cfg.gp,
                                        dx_km, rows, out)
        save_checkpoint(psi, out / "correction.ckpt")
        write_training_log(rows, out / "correction_log.csv")
        print(f"correction: {out / 'correction.ckpt'} (best val {min(r['val_loss'] for r in rows):.6g})")
    return EXIT_OK


def _load_operators(cfg, out: Path, mode: str, identity: bool):
    theta = load_checkpoint(_require(out / "solution.ckpt", "solution checkpoint"))
    _check_arch(theta.arch, cfg.solution_arch(), "solution")
    psi = None
    if mode == "cl" or "cl" in cfg.observers and mode == "all":
        if identity:
            psi = identity_correction
        else:
            psi = load_checkpoint(_require(out / "correction.ckpt", "correction checkpoint"))
            _check_arch(psi.arch, cfg.correction_arch(), "correction")
    return theta, psi


def cmd_observe(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    mode = args.mode
    theta, psi = _load_operators(cfg, out, mode, args.identity_correction)
    if args.dataset:
        ds = load_dataset(_require(Path(args.dataset), "record dataset"))
        if not 0 <= args.scenario < len(ds.scenarios):
            raise MissingPrerequisite(f"scenario {args.scenario} not in dataset of {len(ds.scenarios)}")
        record = ds.scenarios[args.scenario].record
    else:
        scenarios = cfg.test_scenarios()
        if not 0 <= args.scenario < len(scenarios):
            raise MissingPrerequisite(f"scenario {args.scenario} not among {len(scenarios)} test scenarios")
        sc = scenarios[args.scenario]
        if args.noise_sigma:
            sc = replace(sc, noise_sigma=args.noise_sigma)
        _, record = run_scenario(sc)
    est = observe(mode, theta, psi, record, cfg.observer(mode))
    path = out / f"estimates_{mode}.csv"
    write_estimates_csv(est, path)
    secs = est.step_seconds
    if len(secs):
        print(f"steps: {len(secs)}  mean {1e3 * secs.mean():.3f} ms  max {1e3 * secs.max():.3f} ms per step")
    print(f"estimates: {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    theta, psi = _load_operators(cfg, out, "all", args.identity_correction)
    cases = build_test_set(cfg.test_scenarios(), cfg.conditions, cfg.noise_sigma, args.jobs)
    report = run_benchmark(theta, psi, cases, cfg.observer(), cfg.observers, args.jobs)
    write_long_csv(report, out / "benchmark_long.csv")
    write_summary_csv(report, out / "benchmark_summary.csv")
    for obs, cond in report.cells():
        q25, q50, q75 = report.quantiles(obs, cond)
        print(f"{obs:9s} {cond:10s} median {q50:.4f}  IQR [{q25:.4f}, {q75:.4f}]")
    print(f"summary: {out / 'benchmark_summary.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficobs", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI configuration (default: bundled desk.cfg)")
        p.add_argument("--out", help="run directory (default: experiment.out_dir)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        return p

    common(sub.add_parser("simulate", help="generate the training dataset")).set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("train", help="train solution and/or correction operators"))
    p.add_argument("--which", choices=("solution", "correction", "both"), default="both")
    p.add_argument("--dataset", help="dataset file (default: <out>/dataset.bin)")
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("observe", help="run one observer on one record"))
    p.add_argument("--mode", choices=("ol", "ol_reset", "cl"), default="cl")
    p.add_argument("--identity-correction", action="store_true", help="replace the correction by identity")
    p.add_argument("--dataset", help="take the record from this dataset instead of simulating")
    p.add_argument("--scenario", type=int, default=0, help="scenario index")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="sensor noise for simulated records")
    p.set_defaults(func=cmd_observe)
    p = common(sub.add_parser("evaluate", help="benchmark all observers on the test matrix"))
    p.add_argument("--identity-correction", action="store_true", help="replace the correction by identity")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ShapeError, ContainerError) as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
