from typing import Dict, List, Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from nesy_soc.flowdata import ClassMetrics, Label  # noqa: E402
from nesy_soc.stats import MODEL_NAMES, TABLE_ORDER  # noqa: E402


def figtofile(fig, filename, filetype=".pdf"):
    """Saves figures as file."""
    if filename[-4:] == ".pdf":
        full_filename = filename
    else:
        full_filename = filename + filetype
    fig.savefig(full_filename)
    plt.close(fig)
    return full_filename


class FigureColors:
    """Color palette shared by the detector figures."""

    muted = sns.color_palette("muted").as_hex()
    colorblind = sns.color_palette("colorblind").as_hex()

    models = {
        "Baseline": colorblind[7],  # dark gray
        "LTN": muted[0],  # light blue
    }


def history_frame(histories: Mapping[str, List[Dict[str, float]]]) -> pd.DataFrame:
    """Tidy per-epoch table (model, epoch, metric, value) from model histories."""
    rows = []
    for model, history in histories.items():
        for entry in history:
            for metric, value in entry.items():
                if metric != "epoch":
                    rows.append(
                        {"model": MODEL_NAMES.get(model, model), "epoch": entry["epoch"], "metric": metric, "value": value}
                    )
    return pd.DataFrame(rows, columns=["model", "epoch", "metric", "value"])


def training_curves(histories, size=(12, 5)):
    """
    Line plots of the per-epoch training record, one panel per metric
    (loss, accuracy, satisfaction).
    """
    df = history_frame(histories)
    metrics = list(dict.fromkeys(df["metric"]))
    fig, axes = plt.subplots(1, max(1, len(metrics)), figsize=size, squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        sns.lineplot(
            data=df[df["metric"] == metric],
            x="epoch",
            y="value",
            hue="model",
            palette=FigureColors.models,
            ax=ax,
        )
        ax.set_title(metric)
        ax.set_ylabel("")
    fig.tight_layout()
    return fig


def metrics_bargraph(results: Mapping[str, Mapping[Label, ClassMetrics]], metric="precision", size=(8, 5)):
    """Grouped bars of one metric per class and model."""
    rows = [
        {"class": label.display, "model": MODEL_NAMES.get(model, model), metric: getattr(per_class[label], metric)}
        for model, per_class in results.items()
        for label in TABLE_ORDER
    ]
    fig, ax = plt.subplots(figsize=size)
    sns.barplot(data=pd.DataFrame(rows), x="class", y=metric, hue="model", palette=FigureColors.models, ax=ax)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("")
    fig.tight_layout()
    return fig
