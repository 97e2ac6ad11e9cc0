"""Command-line front-end.

    fedbss run <config> [--out DIR] [--force | --resume] [--jobs N]
    fedbss compare <config> [<config> ...] [--grid KEY=V1,V2 ...] [--out DIR] [--force]
    fedbss validate <config>
    fedbss dump-scores <config> [--out DIR] [--force]

Log verbosity comes from the FEDBSS_LOG_LEVEL environment variable.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import yaml

from .config import (ExperimentConfig, apply_override, build_data, build_model, config_from_dict, echo_config,
                     federation_config, parse_config)
from .errors import ConfigError, FedBSSError
from .federation import run_experiment
from .nn import load_params, save_params
from .report import emit_report, read_metrics, summary_record

log = logging.getLogger("fedbss")

_CKPT_RE = re.compile(r"seed(-?\d+)_round(\d+)\.pv$")


def metrics_path(out_dir: Path, seed: int) -> Path:
    return out_dir / f"metrics_seed{seed}.jsonl"


def scores_path(out_dir: Path, seed: int) -> Path:
    return out_dir / f"scores_seed{seed}.jsonl"


def _checkpoints(out_dir: Path, seed: int) -> list[tuple[int, Path]]:
    found = []
    ckpt_dir = out_dir / "checkpoints"
    if ckpt_dir.is_dir():
        for p in ckpt_dir.iterdir():
            m = _CKPT_RE.search(p.name)
            if m and int(m.group(1)) == seed:
                found.append((int(m.group(2)), p))
    return sorted(found)


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str | Path, resume: bool = False,
             dump_scores: bool | None = None) -> list[float]:
    """Run one seed, streaming round records to its metrics file; returns accuracies."""
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    dump_scores = cfg.dump_scores if dump_scores is None else dump_scores
    fcfg = federation_config(cfg, seed)
    train, test, parts = build_data(cfg, seed)
    model = build_model(cfg, train.feature_shape, train.num_classes, seed)

    metrics = metrics_path(out_dir, seed)
    kept: list[dict] = []
    start = 1
    if resume and metrics.exists():
        ckpts = _checkpoints(out_dir, seed)
        if ckpts:
            done, ckpt = ckpts[-1]
            kept = [r for r in read_metrics(metrics) if r["round"] <= done]
            if [r["round"] for r in kept] != list(range(1, done + 1)):
                raise FedBSSError(f"{metrics} does not cover rounds 1..{done}; cannot resume")
            model = model.with_params(load_params(ckpt, model.layout))
            start = done + 1
            log.info("seed %d: resuming after round %d", seed, done)
    with open(metrics, "w") as fh:
        for rec in kept:
            fh.write(json.dumps(rec) + "\n")

    score_fh = open(scores_path(out_dir, seed), "a" if start > 1 else "w") if dump_scores else None
    accuracies = [r["accuracy"] for r in kept]

    def on_round(report, params):
        with open(metrics, "a") as fh:
            fh.write(json.dumps(report.to_record()) + "\n")
        for old_round, old in _checkpoints(out_dir, seed):
            if old_round != report.round:
                old.unlink()
        save_params(out_dir / "checkpoints" / f"seed{seed}_round{report.round}.pv", params)
        accuracies.append(report.test_accuracy)
        log.debug("seed %d round %d [%s] acc=%.4f loss=%.4f", seed, report.round, report.stage,
                  report.test_accuracy, report.mean_train_loss)

    sink = (lambda rec: score_fh.write(json.dumps(rec) + "\n")) if score_fh else None
    try:
        run_experiment(fcfg, model, train, parts, test, start_round=start, on_round=on_round, score_sink=sink)
    finally:
        if score_fh:
            score_fh.close()
    with open(metrics, "a") as fh:
        fh.write(json.dumps(summary_record(cfg.label, seed, accuracies)) + "\n")
    log.info("%s seed %d: final accuracy %.4f", cfg.label, seed, accuracies[-1])
    return accuracies


def _outputs_present(out_dir: Path) -> list[Path]:
    if not out_dir.is_dir():
        return []
    patterns = ("metrics_seed*.jsonl", "scores_seed*.jsonl", "summary.jsonl", "summary.md")
    found = [p for pat in patterns for p in out_dir.glob(pat)]
    found += list(out_dir.glob("*/metrics_seed*.jsonl"))
    return found


def _prepare_out(out_dir: Path, force: bool, resume: bool = False) -> None:
    existing = _outputs_present(out_dir)
    if existing and not (force or resume):
        raise FedBSSError(f"{out_dir} already holds results ({existing[0].name}); use --force to overwrite")
    if force:
        for p in existing:
            p.unlink()
        for ckpt_dir in [out_dir / "checkpoints", *out_dir.glob("*/checkpoints")]:
            if ckpt_dir.is_dir():
                for p in ckpt_dir.glob("*.pv"):
                    p.unlink()
    out_dir.mkdir(parents=True, exist_ok=True)


def run_seeds(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1, resume: bool = False,
              dump_scores: bool | None = None) -> dict[int, list[float]]:
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {s: pool.submit(run_seed, cfg, s, out_dir, resume, dump_scores) for s in cfg.seeds}
            return {s: f.result() for s, f in futures.items()}
    return {s: run_seed(cfg, s, out_dir, resume, dump_scores) for s in cfg.seeds}


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    sys.stdout.write(echo_config(cfg))
    return 0


def _run_like(args, dump_scores: bool | None) -> int:
    cfg = parse_config(args.config)
    out_dir = Path(args.out or cfg.output_dir)
    resume = getattr(args, "resume", False)
    _prepare_out(out_dir, args.force, resume)
    (out_dir / "config.yaml").write_text(echo_config(cfg))
    histories = run_seeds(cfg, out_dir, args.jobs, resume, dump_scores)
    records = emit_report({cfg.label: histories}, out_dir)
    pooled = records[-1]
    print(f"{cfg.label}: last-10 accuracy {100 * pooled['mean']:.2f}%"
          + (f" ± {100 * pooled['std']:.2f}" if pooled["std"] is not None else "")
          + f" over {len(cfg.seeds)} seed(s); results in {out_dir}")
    return 0


def cmd_run(args) -> int:
    return _run_like(args, None)


def cmd_dump_scores(args) -> int:
    return _run_like(args, True)


def _parse_value(text: str):
    return yaml.safe_load(text)


def expand_grid(configs: Sequence[Path], grid: Sequence[str], sets: Sequence[str]) -> list[ExperimentConfig]:
    """Apply ``--set`` overrides, then take the cartesian product of ``--grid`` values."""
    axes = []
    for item in grid:
        if "=" not in item:
            raise ConfigError(f"--grid expects KEY=V1,V2,..., got {item!r}")
        key, values = item.split("=", 1)
        axes.append([(key, _parse_value(v)) for v in values.split(",")])
    overrides = []
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides.append((key, _parse_value(value)))

    out = []
    for path in configs:
        base = parse_config(path)
        raw = base.model_dump(mode="json")
        for key, value in overrides:
            raw = apply_override(raw, key, value)
        base_label = config_from_dict(raw).label
        for combo in itertools.product(*axes) if axes else [()]:
            cell = raw
            for key, value in combo:
                cell = apply_override(cell, key, value)
            if combo:
                tag = ",".join(f"{key.rsplit('.', 1)[-1]}={value}" for key, value in combo)
                cell = apply_override(cell, "name", f"{base_label}[{tag}]")
            out.append(config_from_dict(cell))
    return out


def _safe(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=,-]+", "_", label)


def cmd_compare(args) -> int:
    configs = expand_grid(args.configs, args.grid, args.set)
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configurations (several files or a --grid)")
    seeds = configs[0].seeds
    for cfg in configs[1:]:
        if cfg.seeds != seeds:
            raise ConfigError(f"{cfg.label}: seeds {cfg.seeds} differ from {seeds}; comparisons must be paired")
    labels, seen = [], {}
    for cfg in configs:
        label = cfg.label
        seen[label] = seen.get(label, 0) + 1
        labels.append(label if seen[label] == 1 else f"{label}#{seen[label]}")
    out_dir = Path(args.out or configs[0].output_dir)
    _prepare_out(out_dir, args.force)
    histories = {}
    for label, cfg in zip(labels, configs):
        sub = out_dir / _safe(label)
        sub.mkdir(parents=True, exist_ok=True)
        (sub / "config.yaml").write_text(echo_config(cfg))
        histories[label] = run_seeds(cfg, sub, args.jobs)
    emit_report(histories, out_dir)
    sys.stdout.write((out_dir / "summary.md").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedbss", description="Federated bias-aware sample selection simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment per configured seed")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--force", action="store_true", help="overwrite existing results")
    mode.add_argument("--resume", action="store_true", help="continue from the latest checkpoints")
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configurations over shared seeds and tabulate")
    p.add_argument("configs", type=Path, nargs="+")
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="sweep a dotted config key, e.g. algorithm.variant=filter,linear,cosine")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--out", type=Path)
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="parse a config and print it with defaults resolved")
    p.add_argument("config", type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dump-scores", help="run with per-sample score dumps enabled")
    p.add_argument("config", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_dump_scores)
    return parser


def run_cli(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("FEDBSS_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (FedBSSError, OSError) as err:
        print(f"fedbss: error: {err}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
