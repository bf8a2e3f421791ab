"""Figure rendering smoke tests: every plot lands on disk as a real PNG."""

import json

from asklab import figures
from asklab.metrics import METRIC_NAMES, MetricReport


def _write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_supervised_log_plot(tmp_path):
    log = tmp_path / "sl.jsonl"
    _write_jsonl(log, [
        {"epoch": e, "l_pred": 2.0 / (e + 1), "l_gen": 5.0 / (e + 1),
         "val_f1": 0.5 + 0.1 * e, "val_perfect": 0.1 * e, "val_correct": 0.2 * e}
        for e in range(3)
    ])
    out = figures.plot_supervised_log(log, tmp_path / "nested" / "sl.png")
    assert out == tmp_path / "nested" / "sl.png"
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_rl_log_plot(tmp_path):
    log = tmp_path / "rl.jsonl"
    _write_jsonl(log, [
        {"epoch": e, "mean_return": 0.1 * e, "baseline_value": 0.05 * e,
         "train_success": 0.2 * e, "val_success": 0.15 * e}
        for e in range(2)
    ])
    out = figures.plot_rl_log(log, tmp_path / "rl.png")
    assert out.exists() and out.stat().st_size > 0


def test_report_plot(tmp_path):
    values = {name: 0.5 for name in METRIC_NAMES}
    report = MetricReport(
        mode="standard", seeds=[0],
        per_seed=[{"new_image": dict(values), "overall": dict(values)}],
    )
    out = figures.plot_report(report, tmp_path / "report.png")
    assert out.exists()
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
