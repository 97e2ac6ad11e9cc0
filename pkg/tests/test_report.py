import json
import statistics

import pytest

from fedbss.errors import ReportError
from fedbss.report import emit_report, last_k_stats, read_metrics


def test_constant_series():
    s = last_k_stats([0.5] * 10)
    assert s.mean == 0.5 and s.std == 0.0 and s.rounds_used == 10 and not s.flagged


def test_pooled_mean_over_seeds():
    recs = emit_report({"a": {0: [0.40] * 10, 1: [0.50] * 10}})
    pooled = recs[-1]
    assert pooled["type"] == "pooled" and pooled["mean"] == pytest.approx(0.45, abs=1e-12)


def test_hand_computed_statistics():
    # last ten of 0.05, 0.1, ..., 1.0 are 0.55..1.0: mean 0.775, squared deviations sum 0.20625
    accs = [0.05 * i for i in range(1, 21)]
    s = last_k_stats(accs)
    assert s.mean == pytest.approx(0.775, abs=1e-9)
    assert s.std == pytest.approx((0.20625 / 9) ** 0.5, abs=1e-9)
    assert s.std == pytest.approx(statistics.stdev(accs[-10:]), abs=1e-9)


def test_short_history_uses_all_rounds_and_flags():
    s = last_k_stats([0.1, 0.3, 0.2])
    assert s.rounds_used == 3 and s.flagged and s.mean == pytest.approx(0.2)


def test_empty_history_errors():
    with pytest.raises(ReportError):
        last_k_stats([])
    with pytest.raises(ReportError):
        emit_report({})
    with pytest.raises(ReportError):
        emit_report({"a": {0: []}})


def test_summary_files(tmp_path):
    emit_report({"fedavg": {0: [0.4] * 12, 1: [0.6] * 12}, "fedbss": {0: [0.5] * 12, 1: [0.7] * 12}}, tmp_path)
    recs = [json.loads(line) for line in (tmp_path / "summary.jsonl").read_text().splitlines()]
    assert [r["type"] for r in recs] == ["summary"] * 4 + ["pooled"] * 2
    pooled = {r["label"]: r for r in recs if r["type"] == "pooled"}
    assert pooled["fedbss"]["mean"] == pytest.approx(0.6)
    assert pooled["fedbss"]["std"] == pytest.approx(statistics.stdev([0.5, 0.7]), abs=1e-9)
    table = (tmp_path / "summary.md").read_text()
    assert "| fedavg | 2 | 50.00 ± 14.14" in table and "| fedbss | 2 | 60.00 ± 14.14" in table


def test_read_metrics_ignores_summary_and_torn_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"type": "round", "round": 1}\n{"type": "summary"}\n{"type": "round", "round": 2}\n{"type": "ro')
    assert [r["round"] for r in read_metrics(path)] == [1, 2]
