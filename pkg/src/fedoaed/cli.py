"""Experiment command line: resolve a config, run, emit CSV metrics + manifest.

Precedence is flags over config-file values over built-in defaults. Every
run writes one CSV (fixed header, one row per evaluated round, newline
terminated) and a JSON manifest that fully reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__, harness, strategies
from .errors import ConfigurationError, FedoaedError

CSV_HEADER = [
    "round",
    "strategy",
    "seed",
    "test_accuracy",
    "test_loss",
    "mean_update_norm",
    "update_variance",
]

# Fields whose built-in default comes from the reference experiment table;
# everything else defaults to an artifact choice.
PAPER_DEFAULT_FIELDS = (
    "batch",
    "local_epochs",
    "client_lr",
    "momentum",
    "ae_latent",
    "ae_hidden",
)

SWEEP_STRATEGIES = list(strategies.STRATEGIES)

_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(harness.ExperimentConfig)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedoaed",
        description="Deterministic federated-learning simulator with a denoised-upload strategy.",
    )
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file (or a previously emitted manifest)")
    p.add_argument("--dataset", choices=["blobs", "idx"], default=None)
    p.add_argument("--idx-images", dest="idx_images", type=str, default=None)
    p.add_argument("--idx-labels", dest="idx_labels", type=str, default=None)
    p.add_argument("--idx-test-images", dest="idx_test_images", type=str, default=None)
    p.add_argument("--idx-test-labels", dest="idx_test_labels", type=str, default=None)
    p.add_argument("--blob-classes", dest="blob_classes", type=int, default=None)
    p.add_argument("--blob-dim", dest="blob_dim", type=int, default=None)
    p.add_argument("--blob-per-class", dest="blob_per_class", type=int, default=None)
    p.add_argument("--blob-spread", dest="blob_spread", type=float, default=None)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    p.add_argument("--partition", choices=["dirichlet", "lq"], default=None)
    p.add_argument("--alpha", type=float, default=None, help="dirichlet concentration")
    p.add_argument("--lq-q", dest="lq_q", type=int, default=None,
                   help="max distinct labels per client")
    p.add_argument("--clients", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None,
                   help="participating fraction per round")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--local-epochs", dest="local_epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--client-lr", dest="client_lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--server-lr", dest="server_lr", type=float, default=None)
    p.add_argument("--hidden", type=str, default=None,
                   help="comma-separated hidden layer sizes of the task model")
    p.add_argument("--strategy", choices=SWEEP_STRATEGIES + ["all"], default=None)
    p.add_argument("--lambda", dest="mix_lambda", type=float, default=None,
                   help="denoised/raw mixing coefficient in [0, 1]")
    p.add_argument("--ae-latent", dest="ae_latent", type=int, default=None)
    p.add_argument("--ae-hidden", dest="ae_hidden", type=int, default=None)
    p.add_argument("--ae-epochs", dest="ae_epochs", type=int, default=None)
    p.add_argument("--ae-lr", dest="ae_lr", type=float, default=None)
    p.add_argument("--snapshot-step", dest="snapshot_step", type=int, default=None)
    p.add_argument("--min-snapshots", dest="min_snapshots", type=int, default=None)
    p.add_argument("--prox-mu", dest="prox_mu", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--renormalize-weights", dest="renormalize_weights",
                   choices=["on", "off"], default=None)
    p.add_argument("--sweep-seeds", dest="sweep_seeds", type=int, default=None,
                   help="run this many consecutive seeds into one CSV")
    p.add_argument("--out", type=str, default=None, help="metrics CSV path")
    p.add_argument("--version", action="version", version=f"fedoaed {__version__}")
    return p


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as err:
        raise ConfigurationError(f"cannot read config file {path}: {err}")
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"config file {path} is not valid JSON: {err}")
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    if "config" in raw and isinstance(raw["config"], dict):
        # a manifest: unwrap the resolved config, keep its run-shape keys
        merged = dict(raw["config"])
        for key in ("sweep_seeds", "strategy", "out"):
            if key in raw and key not in merged:
                merged[key] = raw[key]
        raw = merged
    return raw


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigurationError(f"hidden: expected comma-separated integers, got {text!r}")
    if not sizes:
        raise ConfigurationError("hidden: needs at least one layer size")
    return sizes


@dataclasses.dataclass
class RunPlan:
    """One resolved invocation: which strategies, seeds, and output paths."""

    config: harness.ExperimentConfig
    strategy_list: list[str]
    seeds: list[int]
    out: Path
    explicit_keys: set[str]


def parse_config(argv: list[str] | None = None) -> RunPlan:
    """Resolve flags over file values over defaults into a run plan."""
    args = build_parser().parse_args(argv)

    resolved: dict = {}
    explicit: set[str] = set()
    extras = {"sweep_seeds": 1, "out": "results.csv", "strategy": None}

    if args.config is not None:
        for key, value in _load_config_file(args.config).items():
            if key in ("sweep_seeds", "out"):
                extras[key] = value
                explicit.add(key)
            elif key == "strategy":
                extras["strategy"] = value
                explicit.add(key)
            elif key == "hidden_sizes":
                resolved[key] = tuple(value)
                explicit.add(key)
            elif key in _CONFIG_FIELDS:
                resolved[key] = value
                explicit.add(key)
            else:
                raise ConfigurationError(f"unknown config key {key!r} in {args.config}")

    for key in _CONFIG_FIELDS:
        flag_value = getattr(args, key, None)
        if key == "hidden_sizes":
            continue
        if key == "strategy":
            continue
        if flag_value is not None:
            if key == "renormalize_weights":
                flag_value = flag_value == "on"
            resolved[key] = flag_value
            explicit.add(key)
    if args.hidden is not None:
        resolved["hidden_sizes"] = _parse_hidden(args.hidden)
        explicit.add("hidden_sizes")
    if args.strategy is not None:
        extras["strategy"] = args.strategy
        explicit.add("strategy")
    if args.sweep_seeds is not None:
        extras["sweep_seeds"] = args.sweep_seeds
        explicit.add("sweep_seeds")
    if args.out is not None:
        extras["out"] = args.out
        explicit.add("out")

    strategy = extras["strategy"] if extras["strategy"] is not None else "fedavg"
    if strategy == "all":
        strategy_list = list(SWEEP_STRATEGIES)
        resolved["strategy"] = strategy_list[0]
    else:
        strategy_list = [strategy]
        resolved["strategy"] = strategy

    try:
        config = harness.ExperimentConfig(**resolved)
    except TypeError as err:
        raise ConfigurationError(str(err))

    sweep_seeds = int(extras["sweep_seeds"])
    if sweep_seeds < 1:
        raise ConfigurationError("sweep_seeds: must be >= 1")
    seeds = [config.seed + i for i in range(sweep_seeds)]
    return RunPlan(config, strategy_list, seeds, Path(extras["out"]), explicit)


def _provenance(config: harness.ExperimentConfig, explicit: set[str]) -> dict:
    defaults = harness.ExperimentConfig()
    tags = {}
    for name in _CONFIG_FIELDS:
        if name in explicit and getattr(config, name) != getattr(defaults, name):
            tags[name] = "user"
        elif name in PAPER_DEFAULT_FIELDS:
            tags[name] = "paper-table"
        else:
            tags[name] = "artifact-default"
    return tags


def _config_as_dict(config: harness.ExperimentConfig) -> dict:
    d = dataclasses.asdict(config)
    d["hidden_sizes"] = list(config.hidden_sizes)
    return d


def _csv_paths(out: Path, strategy_list: list[str]) -> dict[str, Path]:
    if len(strategy_list) == 1:
        return {strategy_list[0]: out}
    stem = out.with_suffix("") if out.suffix == ".csv" else out
    return {s: Path(f"{stem}_{s}.csv") for s in strategy_list}


def _manifest_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".manifest.json")


def _format_float(x: float) -> str:
    return repr(float(x))


def run(plan: RunPlan) -> list[Path]:
    """Execute the plan; returns the CSV paths written."""
    written = []
    for strategy, csv_path in _csv_paths(plan.out, plan.strategy_list).items():
        cfg = harness.config_with(plan.config, strategy=strategy)
        rows = []
        for seed in plan.seeds:
            seeded = harness.config_with(cfg, seed=seed)
            for record in harness.run_experiment(seeded):
                rows.append(
                    [
                        record.round_index,
                        strategy,
                        seed,
                        _format_float(record.test_accuracy),
                        _format_float(record.test_loss),
                        _format_float(record.mean_update_norm),
                        _format_float(record.update_variance),
                    ]
                )
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            writer.writerows(rows)
        manifest = {
            "artifact_version": __version__,
            "config": _config_as_dict(cfg),
            "provenance": _provenance(cfg, plan.explicit_keys),
            "sweep_seeds": len(plan.seeds),
            "seeds": plan.seeds,
            "outputs": {"metrics_csv": str(csv_path)},
        }
        with open(_manifest_path(csv_path), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(csv_path)
        print(f"wrote {csv_path} and {_manifest_path(csv_path)}")
    return written


def main(argv: list[str] | None = None) -> int:
    try:
        plan = parse_config(argv)
    except ConfigurationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    try:
        run(plan)
    except ConfigurationError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FedoaedError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: cannot write output: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
