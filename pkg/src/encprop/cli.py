"""Operator surface: train models, run samplers, and emit analysis tables.

Commands (each takes --config <json> plus --seed/--workers/--out overrides):
  train    -> checkpoint.json, loss.csv
  sample   -> samples.csv, manifest.json
  analyze  -> deltas.csv, norms.csv, manifest.json
  bench    -> bench.csv, manifest.json
  compare  -> compare.csv, manifest.json

Configs are strict JSON: unknown keys are rejected before any compute.
Exit codes: 0 success, 2 config error, 3 runtime error. The output
directory resolves as --out, then the config's out_dir, then the
ENCPROP_OUT_DIR environment variable, then the working directory.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time

import numpy as np

from . import __version__, analysis, propagation, schedule, training, unet
from .tensor_core import Tensor


class ConfigError(ValueError):
    pass


def _from_config(fn, *args, **kwargs):
    """Run a constructor on config-derived values; bad values are config errors."""
    try:
        return fn(*args, **kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))


def _fmt(v: float) -> str:
    return format(v, ".17g")


def _check_keys(obj: dict, allowed: set[str], required: set[str], where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown fields in {where}: {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"missing fields in {where}: {sorted(missing)}")


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")


def _parse_schedule(spec: dict | None) -> schedule.NoiseSchedule:
    if spec is None:
        return schedule.make_linear_schedule()
    _check_keys(spec, {"T", "beta_start", "beta_end"}, set(), "schedule")
    return _from_config(
        schedule.make_linear_schedule,
        T=spec.get("T", schedule.DEFAULT_T),
        beta_start=spec.get("beta_start", schedule.DEFAULT_BETA_START),
        beta_end=spec.get("beta_end", schedule.DEFAULT_BETA_END),
    )


def _parse_plan(spec: dict | None, T: int) -> propagation.PropagationPlan:
    if spec is None:
        if T == 50:
            return propagation.nonuniform_plan(T, propagation.DEFAULT_KEY_STEPS)
        raise ConfigError("plan required when schedule T != 50")
    kind = spec.get("kind")
    if kind == "uniform":
        _check_keys(spec, {"kind", "stride"}, {"kind", "stride"}, "plan")
        return _from_config(propagation.uniform_plan, T, spec["stride"])
    if kind == "keys":
        _check_keys(spec, {"kind", "keys"}, {"kind", "keys"}, "plan")
        return _from_config(propagation.nonuniform_plan, T, spec["keys"])
    if kind == "suggest":
        _check_keys(spec, {"kind", "budget", "deltas_csv"}, {"kind", "budget", "deltas_csv"}, "plan")
        deltas = analysis.read_delta_series_csv(spec["deltas_csv"])
        return _from_config(propagation.suggest_plan, deltas, spec["budget"])
    raise ConfigError(f"unknown plan kind {kind!r}")


def _plan_label(plan: propagation.PropagationPlan) -> str:
    return "keys:" + "|".join(str(k) for k in plan.key_steps)


def _parse_inject(spec: dict | None) -> tuple[float, int] | None:
    if spec is None:
        return None
    _check_keys(spec, {"alpha", "tau"}, set(), "inject")
    return (
        float(spec.get("alpha", schedule.DEFAULT_INJECT_ALPHA)),
        int(spec.get("tau", schedule.DEFAULT_INJECT_TAU)),
    )


def _parse_model(spec: dict | None) -> unet.UNetConfig:
    if spec is None:
        return unet.UNetConfig()
    _check_keys(
        spec,
        {"data_dim", "stage_widths", "bottleneck_width", "time_embed_dim", "seed"},
        set(),
        "model",
    )
    base = unet.UNetConfig()
    return _from_config(
        unet.UNetConfig,
        data_dim=spec.get("data_dim", base.data_dim),
        stage_widths=tuple(spec.get("stage_widths", base.stage_widths)),
        bottleneck_width=spec.get("bottleneck_width", base.bottleneck_width),
        time_embed_dim=spec.get("time_embed_dim", base.time_embed_dim),
        seed=spec.get("seed", base.seed),
    )


def _parse_dataset(spec: dict, default_n: int = 8000) -> training.ToyDataset:
    _check_keys(spec, {"kind", "n", "seed"}, {"kind"}, "dataset")
    return _from_config(
        training.make_toy_dataset, spec["kind"], spec.get("n", default_n), spec.get("seed", 0)
    )


def _out_dir(cfg: dict, args) -> str:
    out = args.out or cfg.get("out_dir") or os.environ.get("ENCPROP_OUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(path: str, payload: dict):
    payload = {"version": __version__, **payload}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_samples_csv(path: str, pts: np.ndarray):
    header = ",".join(f"x{i}" for i in range(pts.shape[1]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header + "\n")
        for row in pts:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _draw_start_latents(seed: int, n: int, data_dim: int) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((n, data_dim)))


def cmd_train(cfg: dict, args) -> int:
    _check_keys(cfg, {"dataset", "model", "schedule", "train", "out_dir"}, {"dataset"}, "config")
    tr = cfg.get("train", {})
    _check_keys(
        tr,
        {"steps", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "seed"},
        set(),
        "train",
    )
    base = training.TrainConfig()
    tcfg = _from_config(
        training.TrainConfig,
        steps=tr.get("steps", base.steps),
        batch_size=tr.get("batch_size", base.batch_size),
        learning_rate=tr.get("learning_rate", base.learning_rate),
        beta1=tr.get("beta1", base.beta1),
        beta2=tr.get("beta2", base.beta2),
        adam_eps=tr.get("adam_eps", base.adam_eps),
        seed=args.seed if args.seed is not None else tr.get("seed", base.seed),
    )
    ds = _parse_dataset(cfg["dataset"])
    s = _parse_schedule(cfg.get("schedule"))
    mcfg = _parse_model(cfg.get("model"))
    out = _out_dir(cfg, args)

    params, losses = training.train(unet.init_params(mcfg), ds, tcfg, s)
    ckpt = os.path.join(out, "checkpoint.json")
    unet.save_params(params, ckpt)
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8", newline="\n") as f:
        f.write("step,loss\n")
        for step, loss in losses:
            f.write(f"{step},{_fmt(loss)}\n")
    _write_manifest(
        os.path.join(out, "manifest.json"),
        {"command": "train", "config": cfg, "train_seed": tcfg.seed, "checkpoint": ckpt},
    )
    print(f"wrote {ckpt} and loss.csv ({len(losses)} steps)")
    return 0


def _load_run_inputs(cfg: dict, args):
    s = _parse_schedule(cfg.get("schedule"))
    plan = _parse_plan(cfg.get("plan"), s.T)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    n = cfg.get("samples", 256)
    params = unet.load_params(cfg["checkpoint"])
    return params, s, plan, seed, workers, n


def cmd_sample(cfg: dict, args) -> int:
    _check_keys(
        cfg,
        {"checkpoint", "schedule", "plan", "strategy", "inject", "seed", "samples", "workers", "out_dir"},
        {"checkpoint", "strategy"},
        "config",
    )
    params, s, plan, seed, workers, n = _load_run_inputs(cfg, args)
    inject = _parse_inject(cfg.get("inject"))
    strategy = _from_config(propagation.Strategy, cfg["strategy"])
    out = _out_dir(cfg, args)

    z_T = _draw_start_latents(seed, n, params.cfg.data_dim)
    run = propagation.sample(strategy, plan, z_T, params, s, inject=inject, workers=workers)
    samples_path = os.path.join(out, "samples.csv")
    _write_samples_csv(samples_path, run.z0.data)
    _write_manifest(
        os.path.join(out, "manifest.json"),
        {
            "command": "sample",
            "config": cfg,
            "strategy": strategy.value,
            "plan": {"T": plan.T, "key_steps": list(plan.key_steps)},
            "seed": seed,
            "workers": workers,
            "samples_file": samples_path,
            "encoder_calls": run.encoder_calls,
            "decoder_calls": run.decoder_calls,
            "timings_ns": run.timings_ns,
            "flops": run.flops.to_dict(),
        },
    )
    print(f"wrote {samples_path} ({n} samples, strategy {strategy.value})")
    return 0


def cmd_analyze(cfg: dict, args) -> int:
    _check_keys(
        cfg, {"checkpoint", "schedule", "seed", "samples", "out_dir"}, {"checkpoint"}, "config"
    )
    params = unet.load_params(cfg["checkpoint"])
    s = _parse_schedule(cfg.get("schedule"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    n = cfg.get("samples", 256)
    out = _out_dir(cfg, args)

    z_T = _draw_start_latents(seed, n, params.cfg.data_dim)
    plan = propagation.PropagationPlan(T=s.T, key_steps=tuple(range(s.T, 0, -1)))
    run = propagation.sample(propagation.Strategy.FULL, plan, z_T, params, s, record_bundles=True)
    deltas = analysis.feature_delta_series(run.bundles)
    norms = analysis.frobenius_stats(run.bundles)
    deltas_path = os.path.join(out, "deltas.csv")
    norms_path = os.path.join(out, "norms.csv")
    analysis.export_csv(deltas, deltas_path)
    analysis.export_csv(norms, norms_path)
    _write_manifest(
        os.path.join(out, "manifest.json"),
        {"command": "analyze", "config": cfg, "seed": seed, "deltas": deltas_path, "norms": norms_path},
    )
    print(f"wrote {deltas_path} and {norms_path}")
    return 0


_BENCH_STRATEGIES = ("full", "encoder_prop", "encoder_prop_parallel")


def cmd_bench(cfg: dict, args) -> int:
    _check_keys(
        cfg,
        {"checkpoint", "schedule", "plan", "seed", "samples", "workers", "repetitions", "out_dir"},
        {"checkpoint"},
        "config",
    )
    params, s, plan, seed, workers, n = _load_run_inputs(cfg, args)
    reps = cfg.get("repetitions", 20)
    if reps < 1:
        raise ConfigError(f"repetitions must be >= 1, got {reps}")
    out = _out_dir(cfg, args)

    z_T = _draw_start_latents(seed, n, params.cfg.data_dim)
    rows = []
    for strat in _BENCH_STRATEGIES:
        kwargs = {"workers": workers} if strat == "encoder_prop_parallel" else {}
        propagation.sample(strat, plan, z_T, params, s, **kwargs)  # warm-up, untimed
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            run = propagation.sample(strat, plan, z_T, params, s, **kwargs)
            times.append(time.perf_counter_ns() - t0)
        report = run.flops
        rows.append((strat, int(statistics.median(times)), report.total_macs, report.savings_fraction))
    bench_path = os.path.join(out, "bench.csv")
    with open(bench_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("strategy,median_ns,flops_total,savings_fraction\n")
        for strat, med_ns, total, sav in rows:
            f.write(f"{strat},{med_ns},{total},{_fmt(sav)}\n")
    manifest = {
        "command": "bench",
        "config": cfg,
        "seed": seed,
        "workers": workers,
        "repetitions": reps,
        "plan": {"T": plan.T, "key_steps": list(plan.key_steps)},
        "bench": bench_path,
    }
    if reps == 1:
        manifest["warnings"] = ["single repetition: medians are single measurements"]
    _write_manifest(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {bench_path}")
    return 0


def cmd_compare(cfg: dict, args) -> int:
    _check_keys(
        cfg,
        {"checkpoint", "schedule", "dataset", "cases", "seed", "samples", "workers", "out_dir"},
        {"checkpoint", "dataset", "cases"},
        "config",
    )
    params = unet.load_params(cfg["checkpoint"])
    s = _parse_schedule(cfg.get("schedule"))
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    n = cfg.get("samples", 5000)
    out = _out_dir(cfg, args)

    reference = _parse_dataset(cfg["dataset"], default_n=n).points
    z_T = _draw_start_latents(seed, n, params.cfg.data_dim)
    rows = []
    for idx, case in enumerate(cfg["cases"]):
        _check_keys(case, {"strategy", "plan", "inject"}, {"strategy"}, f"cases[{idx}]")
        strategy = _from_config(propagation.Strategy, case["strategy"])
        plan = _parse_plan(case.get("plan"), s.T)
        inject = _parse_inject(case.get("inject"))
        t0 = time.perf_counter_ns()
        run = propagation.sample(strategy, plan, z_T, params, s, inject=inject, workers=workers)
        wall = time.perf_counter_ns() - t0
        ed = training.energy_distance(run.z0.data, reference)
        rows.append((strategy.value, _plan_label(plan), ed, run.flops.savings_fraction, wall))
    compare_path = os.path.join(out, "compare.csv")
    with open(compare_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("strategy,plan,energy_distance,savings_fraction,wall_ns\n")
        for strat, label, ed, sav, wall in rows:
            f.write(f"{strat},{label},{_fmt(ed)},{_fmt(sav)},{wall}\n")
    _write_manifest(
        os.path.join(out, "manifest.json"),
        {"command": "compare", "config": cfg, "seed": seed, "workers": workers, "compare": compare_path},
    )
    print(f"wrote {compare_path} ({len(rows)} rows)")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="encprop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to JSON config")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--workers", type=int, default=None, help="override worker count")
        sp.add_argument("--out", default=None, help="override output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
