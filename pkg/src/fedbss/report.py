"""Last-k-round accuracy statistics and summary files."""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ReportError

LAST_K = 10


@dataclass
class LastRounds:
    mean: float
    std: float | None
    rounds_used: int
    flagged: bool


def last_k_stats(accuracies: Sequence[float], k: int = LAST_K) -> LastRounds:
    """Mean and sample std (n - 1) of the final ``k`` accuracies.

    Shorter histories use every round and are flagged.
    """
    if not accuracies:
        raise ReportError("empty accuracy history")
    tail = list(accuracies[-k:])
    std = statistics.stdev(tail) if len(tail) > 1 else None
    return LastRounds(statistics.fmean(tail), std, len(tail), len(accuracies) < k)


def summary_record(label: str, seed: int, accuracies: Sequence[float], k: int = LAST_K) -> dict:
    stats = last_k_stats(accuracies, k)
    return {"type": "summary", "label": label, "seed": seed, "rounds": len(accuracies),
            "last_k": k, **{f"last_k_{key}": val for key, val in asdict(stats).items()}}


def emit_report(histories: Mapping[str, Mapping[int, Sequence[float]]], out_dir: str | Path | None = None,
                k: int = LAST_K) -> list[dict]:
    """Summarise ``{label: {seed: accuracies}}``.

    Returns per-seed records followed by one pooled record per label. The
    pooled mean is the mean of per-seed last-k means and the pooled std their
    sample std across seeds. When ``out_dir`` is given, writes
    ``summary.jsonl`` and a human-readable ``summary.md`` table.
    """
    if not histories:
        raise ReportError("no histories to report")
    records, pooled = [], []
    for label, by_seed in histories.items():
        if not by_seed:
            raise ReportError(f"{label}: no seeds")
        means = []
        for seed, accs in by_seed.items():
            try:
                rec = summary_record(label, seed, accs, k)
            except ReportError as err:
                raise ReportError(f"{label} seed {seed}: {err}") from None
            records.append(rec)
            means.append(rec["last_k_mean"])
        pooled.append({
            "type": "pooled",
            "label": label,
            "seeds": list(by_seed),
            "mean": statistics.fmean(means),
            "std": statistics.stdev(means) if len(means) > 1 else None,
            "flagged": any(r["last_k_flagged"] for r in records if r["label"] == label),
        })
    records += pooled
    if out_dir is not None:
        out_dir = Path(out_dir)
        with open(out_dir / "summary.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
        (out_dir / "summary.md").write_text(format_table(pooled, records, k))
    return records


def _pct(x: float | None) -> str:
    return "n/a" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.2f}"


def format_table(pooled: list[dict], records: list[dict], k: int = LAST_K) -> str:
    lines = [
        f"| label | seeds | last-{k} accuracy (%) mean ± std over seeds | per-seed last-{k} mean ± std (%) |",
        "|---|---|---|---|",
    ]
    for p in pooled:
        per_seed = ", ".join(
            f"{r['seed']}: {_pct(r['last_k_mean'])} ± {_pct(r['last_k_std'])}"
            for r in records if r.get("type") == "summary" and r["label"] == p["label"])
        flag = " (short history)" if p["flagged"] else ""
        lines.append(f"| {p['label']} | {len(p['seeds'])} | {_pct(p['mean'])} ± {_pct(p['std'])}{flag} | {per_seed} |")
    return "\n".join(lines) + "\n"


def read_metrics(path: str | Path) -> list[dict]:
    """Round records of a metrics file (summary lines skipped, torn last line ignored)."""
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                break
            if rec.get("type") == "round":
                out.append(rec)
    return out
