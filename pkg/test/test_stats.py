import numpy as np
import pandas as pd
import pytest

from nesy_soc import figs, stats
from nesy_soc.flowdata import ClassMetrics, Label


def _per_class(bf, xss, benign):
    return {Label.BRUTE_FORCE: ClassMetrics(*bf), Label.XSS: ClassMetrics(*xss), Label.BENIGN: ClassMetrics(*benign)}


BASELINE = _per_class((0.5, 0.8, 0.6), (0.4, 0.7, 0.5), (0.99, 0.90, 0.94))
LTN = _per_class((0.6, 0.8, 0.7), (0.4, 0.6, 0.5), (0.99, 0.895, 0.94))


def test_save_to_txt_adds_extension(tmp_path):
    stats.save_to_txt(str(tmp_path / "out"), "a = 1\n")
    stats.save_to_txt(str(tmp_path / "other.txt"), "b = 2\n")
    assert (tmp_path / "out.txt").read_text() == "a = 1\n"
    assert (tmp_path / "other.txt").read_text() == "b = 2\n"


def test_metrics_frame_layout():
    df = stats.metrics_frame({"baseline": BASELINE, "ltn": LTN})
    assert list(df.index) == ["BruteForce", "XSS", "Benign"]
    assert ("LTN", "Precision") in df.columns
    assert df.loc["BruteForce", ("Baseline", "F1")] == 0.6
    text = stats.metrics_table({"baseline": BASELINE})
    assert "0.500" in text and "Baseline" in text
    assert "0.155" in stats.reference_table()


def test_metrics_kv():
    kv = stats.metrics_kv("ltn", LTN)
    prefix = "metrics.ltn.BruteForce"
    assert list(kv)[:3] == [f"{prefix}.precision", f"{prefix}.recall", f"{prefix}.f1"]
    assert kv["metrics.ltn.Benign.recall"] == "0.895000"
    assert stats.format_kv({"a": 1, "b": "x"}) == "a = 1\nb = x\n"


def test_count_nws_attacks():
    predictions = np.array([0, 1, 2, 0, 1])
    assert stats.count_nws_attacks(predictions, {0, 1, 2}) == 2
    assert stats.count_nws_attacks(predictions, set()) == 0


def test_directional_checks(caplog):
    checks = stats.directional_checks(BASELINE, LTN, 10, 3)
    assert checks == {
        "check.attack_precision.BruteForce": True,
        "check.attack_precision.XSS": True,
        "check.nws_suppression": True,
        "check.benign_recall": True,
    }
    with caplog.at_level("WARNING"):
        checks = stats.directional_checks(LTN, BASELINE, 3, 3, recall_slack=0.0)
    assert not checks["check.attack_precision.BruteForce"]
    assert not checks["check.nws_suppression"]
    assert checks["check.benign_recall"]
    assert "check.nws_suppression failed" in caplog.text


# ===== FIGURES =====


def test_history_frame():
    histories = {
        "baseline": [{"epoch": 1, "loss": 1.0, "accuracy": 0.5}],
        "ltn": [{"epoch": 1, "loss": 0.4, "satisfaction": 0.6}],
    }
    df = figs.history_frame(histories)
    assert list(df.columns) == ["model", "epoch", "metric", "value"]
    assert len(df) == 4
    assert set(df["model"]) == {"Baseline", "LTN"}
    assert figs.history_frame({}).empty


@pytest.mark.parametrize("metric", ["precision", "recall", "f1"])
def test_figures_are_written(tmp_path, metric):
    fig = figs.metrics_bargraph({"baseline": BASELINE, "ltn": LTN}, metric)
    path = figs.figtofile(fig, str(tmp_path / f"bars_{metric}"))
    assert path.endswith(".pdf")
    assert (tmp_path / f"bars_{metric}.pdf").stat().st_size > 0


def test_training_curves(tmp_path):
    history = [{"epoch": e, "loss": 1.0 / e, "satisfaction": 1 - 1.0 / (e + 1)} for e in range(1, 6)]
    fig = figs.training_curves({"ltn": history})
    assert len(fig.axes) == 2
    assert figs.figtofile(fig, str(tmp_path / "curves.pdf")) == str(tmp_path / "curves.pdf")
    assert isinstance(figs.history_frame({"ltn": history}), pd.DataFrame)
