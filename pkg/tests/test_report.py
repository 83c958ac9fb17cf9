import json

import numpy as np

from umbra.evaluation import ConfusionCounts, aggregate, metrics
from umbra.report import format_lines, summary_dict, write_report


def make_report(n=4, with_timing=True):
    rng = np.random.default_rng(0)
    entries = []
    for i in range(n):
        m = metrics(ConfusionCounts(tp=80 + i, fn=20 - i, tn=70, fp=30))
        m.image = f"img_{i}.png"
        if with_timing:
            m.seconds = 0.5 + 0.1 * i
            m.stage_seconds = {"segmentation": 0.1, "total": m.seconds}
        m.cnn_invocations = 100 + i
        entries.append(m)
    return aggregate(entries)


def test_lines_format():
    lines = format_lines(make_report())
    assert lines[0].startswith("image=img_0.png total=")
    assert any(line.startswith("aggregate metric=total_accuracy") for line in lines)
    assert any("mean_cnn_invocations" in line for line in lines)


def test_summary_schema():
    summary = summary_dict(make_report())
    assert summary["n_images"] == 4
    assert set(summary["metrics"]) == {
        "total_accuracy", "shadow_accuracy", "nonshadow_accuracy"
    }
    for agg in summary["metrics"].values():
        assert set(agg) == {"mean", "std", "n"}
    assert len(summary["per_image"]) == 4
    assert "seconds" not in json.dumps(summary)  # wall clock kept out


def test_write_report_files(tmp_path):
    report = make_report()
    out = tmp_path / "report.json"
    written = write_report(report, out)
    names = {p.name for p in written}
    assert names == {
        "report.json", "report.lines.txt", "report.timing.json",
        "report_accuracy.png", "report_timing.png",
    }
    parsed = json.loads(out.read_text())
    assert parsed["n_images"] == 4
    timing = json.loads((tmp_path / "report.timing.json").read_text())
    assert timing["seconds_per_image"]["mean"] is not None
    assert (tmp_path / "report_accuracy.png").read_bytes()[:8].startswith(b"\x89PNG")


def test_summary_deterministic_bytes(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    write_report(make_report(), a, figures=False)
    write_report(make_report(), b, figures=False)
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.lines.txt").read_bytes() == (tmp_path / "b.lines.txt").read_bytes()
