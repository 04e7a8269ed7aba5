"""``rwf`` command line: run, verify, sweep, probe.

Exit codes: 0 success, 1 configuration error, 2 runtime or verification failure.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .backbone import build_model, forward
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import CSV_FIELDS, ExperimentConfig, resolved_model_config, run_experiment
from .numerics import RngStream, layer_norm
from .routing import RoutingParams, lipschitz_probe
from .stream import make_synthetic_stream, with_seed

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
PROBE_BETAS = (0.01, 1.0, 10.0)
PROBE_FIELDS = ["layer", "beta", "n_samples", "delta", "median_ratio", "mean_ratio", "max_ratio"]


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def bundled_config(name="default"):
    return resources.files("rwf").joinpath("configs", f"{name}.json")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc, item):
    """Set ``a.b.c=value`` in a nested dict; value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(raw)
    return doc


def load_config(path, overrides=()):
    """Parse, apply overrides and validate. Seed precedence: overrides, then
    the file, then ``RWF_SEED``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    env_seed = os.environ.get("RWF_SEED")
    if env_seed is not None and "seeds" not in doc:
        try:
            doc["seeds"] = [int(env_seed)]
        except ValueError:
            raise ConfigError(f"RWF_SEED must be an integer, got {env_seed!r}") from None
    for item in overrides:
        apply_override(doc, item)
    try:
        exp = ExperimentConfig.from_dict(doc)
        resolved_model_config(exp).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config {path}: {e}") from None
    return exp


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def write_run_outputs(out, exp, report):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "report.json", report.to_json())
    _write_csv(out / "summary.csv", CSV_FIELDS, report.csv_rows())
    resolved = exp.to_dict()
    resolved["model"] = resolved_model_config(exp).to_dict()
    _dump_json(out / "resolved_config.json", resolved)
    model, opt = report.models[-1]
    save_checkpoint(out / "checkpoint.bin", model, opt)
    _dump_json(out / "metadata.json", {"wall_clock_seconds": report.wall_clock,
                                       "finished_unix": time.time()})


def cmd_run(config_path, overrides=(), out="rwf_out/run"):
    exp = load_config(config_path, overrides)
    resolved = exp.to_dict()
    resolved["model"] = resolved_model_config(exp).to_dict()
    print(json.dumps(resolved, indent=2, sort_keys=True))
    report = run_experiment(exp, keep_models=True)
    write_run_outputs(out, exp, report)
    a, f = report.a_final, report.forgetting
    line = f"{exp.method}: A_final {a[0]:.4f} +- {a[1]:.4f}"
    if f[0] is not None:
        line += f", forgetting {f[0]:.4f} +- {f[1]:.4f}"
    print(line)
    print(f"wrote {out}")
    return EXIT_OK


def print_checks(checks, out=None):
    out = out or sys.stdout
    width = max(len(c.name) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<{width}}  {c.detail}", file=out)
    n_fail = sum(not c.passed for c in checks)
    print(f"{len(checks) - n_fail}/{len(checks)} checks passed", file=out)
    return n_fail


def cmd_verify(suite):
    from .verify import SUITES, run_suite

    if suite not in list(SUITES) + ["all"]:
        raise ConfigError(f"unknown suite {suite!r}")
    return EXIT_RUNTIME if print_checks(run_suite(suite)) else EXIT_OK


SWEEP_AXES = ("k", "placement", "fraction", "tasks")


def parse_values(text):
    text = text.strip()
    if text.startswith("["):
        vals = json.loads(text)
    else:
        vals = [_parse_value(v.strip()) for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("no sweep values given")
    return vals


def sweep_config(exp: ExperimentConfig, axis, value):
    if axis == "k":
        return replace(exp, model=replace(exp.model, k=int(value)))
    if axis == "placement":
        return replace(exp, model=replace(exp.model, placement=str(value)))
    if axis == "fraction":
        return replace(exp, stream=replace(exp.stream, few_shot_fraction=float(value)))
    if axis == "tasks":
        total = exp.stream.num_classes
        T = int(value)
        if T < 1 or total % T:
            raise ValueError(f"{total} classes cannot be split into {T} equal tasks")
        return replace(exp, stream=replace(exp.stream, T=T, classes_per_task=total // T))
    raise ValueError(f"unknown sweep axis {axis!r}")


def cmd_sweep(config_path, axis, values, overrides=(), out="rwf_out/sweep"):
    exp = load_config(config_path, overrides)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}")
    try:
        configs = [(v, sweep_config(exp, axis, v)) for v in values]
        for _, c in configs:
            resolved_model_config(c).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad sweep values: {e}") from None
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v, c in configs:
        report = run_experiment(c)
        sub = out / f"{axis}={v}"
        sub.mkdir(exist_ok=True)
        _dump_json(sub / "report.json", report.to_json())
        rows.extend(report.csv_rows())
        a = report.a_final
        print(f"{axis}={v}: A_final {a[0]:.4f} +- {a[1]:.4f}")
    path = out / f"sweep_{axis}.csv"
    _write_csv(path, CSV_FIELDS, rows)
    print(f"wrote {path}")
    return EXIT_OK


def probe_rows(model, x, n_samples=1000, delta=1e-3, betas=PROBE_BETAS, seed=0):
    """Lipschitz statistics of every routing layer on the layer inputs of ``x``."""
    cfg = model.config
    inputs = []
    forward(model, x[None], layer_inputs=inputs)
    rows = []
    for i in cfg.router_blocks():
        block = model.block(i)
        Z = inputs[i][0]
        if cfg.route_normalized:
            Z = layer_norm(Z, block.ln1_g, block.ln1_b)
        r = block.routing
        for beta in betas:
            p = RoutingParams(r.Q, r.W_Q, r.W_K, r.W_V, beta)
            stats = lipschitz_probe(Z, p, n_samples, delta, RngStream(seed).child(i))
            rows.append({
                "layer": i, "beta": beta, "n_samples": n_samples, "delta": delta,
                "median_ratio": stats["median_ratio"],
                "mean_ratio": float(np.mean(stats["ratios"])),
                "max_ratio": stats["max_ratio"],
            })
    return rows


def cmd_probe(config_path, overrides=(), checkpoint=None, out="rwf_out/probe"):
    exp = load_config(config_path, overrides)
    seed = exp.seeds[0]
    if checkpoint is not None:
        try:
            model, _ = load_checkpoint(checkpoint)
        except FileNotFoundError:
            raise ConfigError(f"checkpoint not found: {checkpoint}") from None
    else:
        model = build_model(resolved_model_config(exp), RngStream(seed).child(10))
    stream = make_synthetic_stream(with_seed(exp.stream, seed))
    x = stream.tasks[0].test_x[0]
    rows = probe_rows(model, x, seed=seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "probe.csv"
    _write_csv(path, PROBE_FIELDS, rows)
    if not rows:
        print("model has no routing layers (k = 0); probe output is empty")
    for r in rows:
        print(f"layer {r['layer']} beta {r['beta']:g}: median {r['median_ratio']:.4g} "
              f"max {r['max_ratio']:.4g}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="rwf", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="experiment config JSON ('default' for the bundled one)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. model.k=3 or seeds=[1,2]")

    p = sub.add_parser("run", help="run one experiment")
    with_config(p)
    p.add_argument("--out", default="rwf_out/run")

    p = sub.add_parser("verify", help="run a verification suite")
    p.add_argument("suite", choices=["energy", "gradients", "invariants", "all"])

    p = sub.add_parser("sweep", help="run an experiment per axis value")
    with_config(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="JSON list or comma-separated values")
    p.add_argument("--out", default="rwf_out/sweep")

    p = sub.add_parser("probe", help="Lipschitz probe of routing layers")
    with_config(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default="rwf_out/probe")
    return ap


def _config_path(name):
    if name in ("default", "tasks40"):
        return bundled_config(name)
    return name


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(_config_path(args.config), args.override, args.out)
        if args.command == "verify":
            return cmd_verify(args.suite)
        if args.command == "sweep":
            return cmd_sweep(_config_path(args.config), args.axis, parse_values(args.values),
                             args.override, args.out)
        return cmd_probe(_config_path(args.config), args.override, args.checkpoint, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (json.JSONDecodeError,) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
