import logging
from typing import Dict, Mapping

import numpy as np
import pandas as pd

from nesy_soc.flowdata import ATTACK_LABELS, ClassMetrics, Label

logger = logging.getLogger(__name__)

MODEL_NAMES = {"baseline": "Baseline", "ltn": "LTN"}

# Per-class results reported for the full CICIDS2017 Thursday web-attack
# subset. Printed next to measured values, never compared against them.
REFERENCE_METRICS = {
    "baseline": {
        Label.BRUTE_FORCE: ClassMetrics(0.090, 0.686, 0.159),
        Label.XSS: ClassMetrics(0.088, 0.628, 0.155),
        Label.BENIGN: ClassMetrics(0.999, 0.916, 0.956),
    },
    "ltn": {
        Label.BRUTE_FORCE: ClassMetrics(0.155, 0.622, 0.248),
        Label.XSS: ClassMetrics(0.213, 0.648, 0.321),
        Label.BENIGN: ClassMetrics(0.998, 0.963, 0.981),
    },
}

TABLE_ORDER = (Label.BRUTE_FORCE, Label.XSS, Label.BENIGN)


def save_to_txt(filename, text):
    """Saves formatted text to a .txt file."""
    if filename[-4:] == ".txt":
        full_filename = filename
    else:
        full_filename = filename + ".txt"

    with open(full_filename, "w", encoding="utf-8", newline="\n") as file:
        file.write(text)


def metrics_frame(results: Mapping[str, Mapping[Label, ClassMetrics]]) -> pd.DataFrame:
    """
    Wide table: one row per class, precision/recall/F1 column triple per model.
    Designed to take {"baseline": metrics, "ltn": metrics}.
    """
    columns = {}
    for model, per_class in results.items():
        name = MODEL_NAMES.get(model, model)
        for field in ("precision", "recall", "f1"):
            columns[(name, "F1" if field == "f1" else field.capitalize())] = [
                getattr(per_class[label], field) for label in TABLE_ORDER
            ]
    df = pd.DataFrame(columns, index=[label.display for label in TABLE_ORDER])
    df.columns = pd.MultiIndex.from_tuples(df.columns)
    return df


def metrics_table(results: Mapping[str, Mapping[Label, ClassMetrics]]) -> str:
    return metrics_frame(results).to_string(float_format=lambda v: f"{v:.3f}") + "\n"


def reference_table() -> str:
    return "reference (full CICIDS2017 subset, not measured here):\n" + metrics_table(REFERENCE_METRICS)


def format_kv(values: Mapping[str, object]) -> str:
    """``key = value`` lines in mapping order."""
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def _number(x: float) -> str:
    return f"{x:.6f}"


def metrics_kv(model: str, per_class: Mapping[Label, ClassMetrics]) -> Dict[str, str]:
    out = {}
    for label in TABLE_ORDER:
        m = per_class[label]
        prefix = f"metrics.{model}.{label.display}"
        out[f"{prefix}.precision"] = _number(m.precision)
        out[f"{prefix}.recall"] = _number(m.recall)
        out[f"{prefix}.f1"] = _number(m.f1)
    return out


def count_nws_attacks(predictions: np.ndarray, nws_indices) -> int:
    """NWS flows that a detector labelled as a web attack."""
    idx = np.array(sorted(nws_indices), dtype=np.int64)
    if idx.size == 0:
        return 0
    return int(np.isin(np.asarray(predictions)[idx], [int(label) for label in ATTACK_LABELS]).sum())


def directional_checks(
    baseline: Mapping[Label, ClassMetrics],
    ltn: Mapping[Label, ClassMetrics],
    baseline_nws_attacks: int,
    ltn_nws_attacks: int,
    recall_slack: float = 0.01,
) -> Dict[str, bool]:
    """
    Pass/fail of each expected improvement of the logic-constrained detector
    over the baseline. Benign recall may drop by at most ``recall_slack``.
    """
    checks = {}
    for label in ATTACK_LABELS:
        checks[f"check.attack_precision.{label.display}"] = ltn[label].precision >= baseline[label].precision
    checks["check.nws_suppression"] = ltn_nws_attacks < baseline_nws_attacks
    checks["check.benign_recall"] = ltn[Label.BENIGN].recall >= baseline[Label.BENIGN].recall - recall_slack
    for name, ok in checks.items():
        if not ok:
            logger.warning("%s failed", name)
    return checks
