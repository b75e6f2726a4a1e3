"""Command-line entry points wiring configuration, data generation, training,
prediction, identification, and reporting into reproducible runs.

Every command writes the fully resolved configuration next to its outputs so
a run can be replayed from the directory alone.  Exit codes: 0 success,
2 configuration error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys

import numpy as np

from . import kernels
from .datagen import (
    IntegrationError,
    make_dataset,
    read_trajectory,
    write_trajectory,
)
from .evaluate import (
    coefficient_error,
    generalization_study,
    normalized_error,
    prediction_error_study,
    source_comparison,
    write_coefficient_images,
)
from .fields import Boundary, Field, grid_from_dict, read_pdf1, write_pdf1
from .lbfgs import LbfgsConfig
from .model import (
    BlowUpError,
    FilterMode,
    ModelConfig,
    StepModel,
    load_checkpoint,
    save_checkpoint,
)
from .moments import format_filter, save_filter, sum_rule_order
from .train import TrainConfig, pairs_from_trajectories, train_layerwise

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def default_config(kind: str = "linear") -> dict:
    if kind not in ("linear", "nonlinear"):
        raise ConfigError(f"unknown kind {kind!r}")
    two_pi = 2.0 * np.pi
    return {
        "kind": kind,
        "grid": {
            "nx": 50,
            "ny": 50,
            "lx": two_pi,
            "ly": two_pi,
            "boundary": "periodic" if kind == "linear" else "dirichlet",
        },
        "filter_size": 7,
        "max_order": 4 if kind == "linear" else 2,
        "mode": "constrained",
        "coef_points": 7,
        "dt": 0.01,
        "source": {"points": 40, "lo": -30.0, "hi": 30.0},
        "seed": 0,
        "threads": 0,  # 0 = all available cores
        "data": {
            "count": 28,
            "n_max": 9 if kind == "linear" else 6,
            "noise_level": 0.01,
            "t_end": 0.2,
            "frame_dt": 0.01,
        },
        "train": {
            "depth": 6 if kind == "linear" else 3,
            "batch_size": 28,
            "warmup_iters": 150,
            "iters_per_depth": 100,
            "init_std": 0.01,
            "pairs_per_traj": None,
            "lbfgs": {
                "memory": 10,
                "gtol": 1e-7,
                "ftol": 1e-10,
                "c1": 1e-4,
                "c2": 0.9,
                "ls_max": 30,
            },
        },
        "eval": {
            "n_test": 100,
            "horizon_steps": 60,
            "generalization_n_max": 12 if kind == "linear" else 10,
        },
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown configuration key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    kind = doc.get("kind", (overrides or {}).get("kind", "linear"))
    cfg = _merge(default_config(kind), doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def model_from_config(cfg: dict) -> StepModel:
    try:
        mc = ModelConfig(
            kind=cfg["kind"],
            grid=grid_from_dict(cfg["grid"]),
            filter_size=int(cfg["filter_size"]),
            max_order=int(cfg["max_order"]),
            mode=FilterMode(cfg["mode"]),
            dt=float(cfg["dt"]),
            coef_points=int(cfg["coef_points"]),
            source_points=int(cfg["source"]["points"]),
            source_lo=float(cfg["source"]["lo"]),
            source_hi=float(cfg["source"]["hi"]),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return StepModel(mc)


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    lb = t["lbfgs"]
    return TrainConfig(
        depth=int(t["depth"]),
        batch_size=int(t["batch_size"]),
        warmup_iters=int(t["warmup_iters"]),
        iters_per_depth=int(t["iters_per_depth"]),
        init_std=float(t["init_std"]),
        noise_level=float(cfg["data"]["noise_level"]),
        n_max=cfg["data"]["n_max"],
        t_end=float(cfg["data"]["t_end"]),
        frame_dt=float(cfg["data"]["frame_dt"]),
        pairs_per_traj=t["pairs_per_traj"],
        seed=int(cfg["seed"]),
        lbfgs=LbfgsConfig(
            memory=int(lb["memory"]),
            gtol=float(lb["gtol"]),
            ftol=float(lb["ftol"]),
            c1=float(lb["c1"]),
            c2=float(lb["c2"]),
            ls_max=int(lb["ls_max"]),
        ),
    )


def _prepare_out(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(cfg: dict, out_dir: str) -> int:
    _prepare_out(cfg, out_dir)
    rng = np.random.default_rng(cfg["seed"])
    data = cfg["data"]
    trajs = make_dataset(
        cfg["kind"],
        int(data["count"]),
        rng,
        n_max=data["n_max"],
        noise_level=float(data["noise_level"]),
        t_end=float(data["t_end"]),
        frame_dt=float(data["frame_dt"]),
    )
    for i, traj in enumerate(trajs):
        write_trajectory(
            os.path.join(out_dir, f"traj_{i:05d}"),
            traj,
            meta={"kind": cfg["kind"], "seed": cfg["seed"], "index": i,
                  "n_max": data["n_max"], "noise_level": data["noise_level"]},
        )
    g = trajs[0].grid
    print(f"wrote {len(trajs)} trajectories x {len(trajs[0])} frames "
          f"({g.nx}x{g.ny}, {g.boundary.name.lower()}) to {out_dir}")
    return 0


def cmd_train(cfg: dict, out_dir: str, data_dir: str | None = None) -> int:
    _prepare_out(cfg, out_dir)
    model = model_from_config(cfg)
    tc = train_config_from(cfg)
    log.info("parameter counts: %s", model.param_count_breakdown())

    data_source = None
    if data_dir is not None:
        dirs = sorted(
            os.path.join(data_dir, d)
            for d in os.listdir(data_dir)
            if d.startswith("traj_")
        )
        if not dirs:
            raise ConfigError(f"{data_dir}: contains no traj_* directories")
        trajs = [read_trajectory(d) for d in dirs]

        def data_source(phase, rng):
            return trajs

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["depth", "iteration", "loss", "grad_norm",
                            "wall_time"])
        writer.writeheader()

        def metrics(row):
            writer.writerow(row)

        results = train_layerwise(model, tc, data_source=data_source,
                                  metrics=metrics)

    for r in results:
        save_checkpoint(
            os.path.join(out_dir, f"checkpoint_depth{r.depth}.json"),
            model, r.theta, r.depth,
            extra={"loss": r.loss, "status": r.status, "seed": cfg["seed"]},
        )
    print(f"trained depths 1..{tc.depth}; final loss {results[-1].loss:.6g}; "
          f"checkpoints in {out_dir}")
    return 0


def _reference_for(kind: str, u0: Field, steps: int, dt: float):
    from .datagen import solve_linear_convdiff, solve_nonlinear_diffusion

    if kind == "linear":
        return solve_linear_convdiff(u0, steps * dt, dt=dt)
    raise ConfigError(
        "predict --reference requires a linear-experiment checkpoint; "
        "the nonlinear reference needs the fine-grid initial state "
        "(use `evaluate` instead)"
    )


def cmd_predict(checkpoint: str, out_dir: str, initial: str | None,
                steps: int, seed: int, with_reference: bool) -> int:
    model, theta, n_blocks, _ = load_checkpoint(checkpoint)
    cfgd = model.config.to_dict()
    _prepare_out({"checkpoint": os.path.abspath(checkpoint), "steps": steps,
                  "seed": seed, "model": cfgd}, out_dir)
    if initial is not None:
        u0 = read_pdf1(initial)
        if (u0.grid.nx, u0.grid.ny) != (model.config.grid.nx, model.config.grid.ny):
            raise ConfigError("initial field grid does not match the model")
        u0 = Field(model.config.grid, u0.values)
    else:
        from .datagen import InitSpec, sample_initial_condition, add_noise, Trajectory

        rng = np.random.default_rng(seed)
        spec = (InitSpec(n_max=9) if model.config.kind == "linear"
                else InitSpec(n_max=6, envelope=True))
        u0 = sample_initial_condition(model.config.grid, spec, rng)
        u0 = add_noise(Trajectory([u0], model.config.dt), 0.01, rng).fields[0]

    traj, blown = model.rollout(u0, theta, steps)
    write_trajectory(os.path.join(out_dir, "rollout"), traj,
                     meta={"steps": steps, "blown_at": blown})
    if blown is not None:
        print(f"rollout blew up at step {blown}; wrote {len(traj)} frames")
        return 3

    if with_reference and model.config.kind == "linear":
        ref = _reference_for(model.config.kind, u0, steps, model.config.dt)
        with open(os.path.join(out_dir, "errors.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "normalized_error"])
            for k in range(1, steps + 1):
                err = normalized_error(ref.fields[k], traj.fields[k])
                w.writerow([f"{k * model.config.dt:.6g}", f"{err:.10g}"])
    print(f"rolled out {steps} steps to {out_dir}")
    return 0


def cmd_identify(checkpoint: str, out_dir: str) -> int:
    model, theta, n_blocks, _ = load_checkpoint(checkpoint)
    _prepare_out({"checkpoint": os.path.abspath(checkpoint),
                  "model": model.config.to_dict()}, out_dir)
    freed = model.config.mode is FilterMode.FREED

    write_coefficient_images(os.path.join(out_dir, "coefficients"), model, theta)
    report_lines = []
    if freed:
        report_lines.append(
            "mode=freed: filters carry no moment constraints, so no "
            "differential-operator identity can be assigned to any filter "
            "and the coefficient fields cannot be matched to PDE terms."
        )
    violations = model.verify_constraints(theta)
    if violations:
        report_lines.append(
            "constraint check: patterns UNSATISFIED for "
            + ", ".join(sorted(violations))
        )
    else:
        report_lines.append("constraint check: all moment patterns satisfied")

    W = model.filters(theta)
    filt_dir = os.path.join(out_dir, "filters")
    os.makedirs(filt_dir, exist_ok=True)
    dumps = []
    for slot, weights in zip(model.slots, W):
        save_filter(os.path.join(filt_dir, f"{slot.name}.pdf1"), weights)
        dumps.append(format_filter(weights, name=slot.name))
    with open(os.path.join(out_dir, "filters.txt"), "w") as fh:
        fh.write("\n\n".join(dumps) + "\n")
    with open(os.path.join(out_dir, "filters.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filter", "intended_order", "sum_rule_alpha",
                    "sum_rule_total", "identified"])
        for slot, weights in zip(model.slots, W):
            sr = sum_rule_order(weights)
            intended = "avg" if slot.order is None else f"{slot.order}"
            if freed or sr is None:
                w.writerow([slot.name, intended, "", "", "no"])
            else:
                w.writerow([slot.name, intended, f"{sr.alpha}",
                            f"{sr.total[0]}\\{{{sr.total[1]}}}", "yes"])

    if model.config.kind == "linear" and not freed:
        rep = coefficient_error(model, theta)
        rep.write_csv(os.path.join(out_dir, "coefficient_errors.csv"))
        report_lines.append(f"aggregate coefficient error: {rep.aggregate:.6g}")
    if model.source is not None:
        src = theta[model.layout["source"]]
        ug = np.linspace(model.source.lo, model.source.hi, 601)
        with open(os.path.join(out_dir, "source.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "learned_source"])
            for u, v in zip(ug, model.source.evaluate(src, ug)):
                w.writerow([f"{u:.10g}", f"{v:.10g}"])

    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write("\n".join(report_lines) + "\n" if report_lines else "ok\n")
    for line in report_lines:
        print(line)
    print(f"identification artifacts in {out_dir}")
    return 0


def cmd_evaluate(cfg: dict, checkpoint: str, out_dir: str) -> int:
    _prepare_out(cfg, out_dir)
    model, theta, n_blocks, _ = load_checkpoint(checkpoint)
    ev = cfg["eval"]
    threads = int(cfg["threads"]) or (os.cpu_count() or 1)
    curve = prediction_error_study(
        model, theta, int(ev["n_test"]), int(ev["horizon_steps"]),
        noise_level=float(cfg["data"]["noise_level"]),
        seed=int(cfg["seed"]), threads=threads,
    )
    curve.write_csv(os.path.join(out_dir, "error_curve.csv"))
    gen = generalization_study(
        model, theta, int(ev["n_test"]), int(ev["horizon_steps"]),
        n_max=ev["generalization_n_max"],
        noise_level=float(cfg["data"]["noise_level"]),
        seed=int(cfg["seed"]), threads=threads,
    )
    gen.write_csv(os.path.join(out_dir, "generalization_curve.csv"))
    if model.config.kind == "linear" and model.config.mode is not FilterMode.FREED:
        coefficient_error(model, theta).write_csv(
            os.path.join(out_dir, "coefficient_errors.csv"))
    if model.source is not None:
        rng = np.random.default_rng(cfg["seed"])
        trajs = make_dataset("nonlinear", 4, rng,
                             n_max=cfg["data"]["n_max"],
                             noise_level=float(cfg["data"]["noise_level"]))
        values = np.concatenate([f.values.reshape(-1)
                                 for t in trajs for f in t.fields])
        cmp_ = source_comparison(model, theta, values)
        cmp_.write_csv(os.path.join(out_dir, "source_comparison.csv"))
    med = curve.median
    print(f"median normalized error at horizon: {med[-1]:.6g} "
          f"(n_test={ev['n_test']}); results in {out_dir}")
    return 0


def cmd_report(out_dir: str) -> int:
    lines = [f"run directory: {out_dir}"]
    cfg_path = os.path.join(out_dir, "config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            cfg = json.load(fh)
        lines.append(f"kind={cfg.get('kind')} mode={cfg.get('mode')} "
                     f"filter_size={cfg.get('filter_size')} seed={cfg.get('seed')}")
    metrics = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metrics):
        with open(metrics) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            by_depth = {}
            for r in rows:
                by_depth.setdefault(r["depth"], r)
                by_depth[r["depth"]] = r
            lines.append("training (final loss per phase):")
            for d, r in sorted(by_depth.items(), key=lambda kv: int(kv[0])):
                lines.append(f"  depth {d}: loss={float(r['loss']):.6g} "
                             f"grad_norm={float(r['grad_norm']):.3g}")
    for name in ("error_curve.csv", "generalization_curve.csv"):
        p = os.path.join(out_dir, name)
        if os.path.exists(p):
            with open(p) as fh:
                rows = list(csv.DictReader(fh))
            if rows:
                last = rows[-1]
                lines.append(f"{name}: median error {float(last['median']):.6g} "
                             f"at t={last['time']}")
    checkpoints = sorted(f for f in os.listdir(out_dir)
                         if f.startswith("checkpoint_depth"))
    if checkpoints:
        lines.append(f"checkpoints: {', '.join(checkpoints)}")
    text = "\n".join(lines)
    print(text)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pdelearn",
        description="Learn evolution PDEs from gridded observations.",
    )
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=None)

    sp = sub.add_parser("generate", help="write simulated trajectories")
    common(sp)
    sp.add_argument("--kind", choices=["linear", "nonlinear"], default=None)
    sp.add_argument("--count", type=int, default=None)

    sp = sub.add_parser("train", help="run warm-up plus layer-wise training")
    common(sp)
    sp.add_argument("--data", help="trajectory dataset directory (else on-the-fly)")

    sp = sub.add_parser("predict", help="roll out a trained model")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--initial", help="PDF1 initial field (else sampled)")
    sp.add_argument("--steps", type=int, default=60)
    sp.add_argument("--reference", action="store_true",
                    help="also solve the reference and write errors.csv")

    sp = sub.add_parser("identify", help="report the identified PDE structure")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("evaluate", help="prediction-error studies")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n-test", type=int, default=None)

    sp = sub.add_parser("report", help="summarize a run directory")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        threads = getattr(args, "threads", None)
        if threads:
            kernels.set_threads(threads)
        if args.command == "generate":
            cfg = load_config(args.config, {"seed": args.seed, "kind": args.kind,
                                            "threads": threads})
            if args.count is not None:
                cfg["data"]["count"] = args.count
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            cfg = load_config(args.config, {"seed": args.seed, "threads": threads})
            return cmd_train(cfg, args.out, data_dir=args.data)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.out, args.initial,
                               args.steps, args.seed or 0, args.reference)
        if args.command == "identify":
            return cmd_identify(args.checkpoint, args.out)
        if args.command == "evaluate":
            cfg = load_config(args.config, {"seed": args.seed, "threads": threads})
            if args.n_test is not None:
                cfg["eval"]["n_test"] = args.n_test
            return cmd_evaluate(cfg, args.checkpoint, args.out)
        if args.command == "report":
            return cmd_report(args.out)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (BlowUpError, IntegrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
