"""
Static outputs: SVG charts through matplotlib's Agg backend and the
plain-text classification map written next to predictions.
"""
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from spatial_classify.data_models import Dataset  # noqa: E402

log = logging.getLogger(__name__)

# training 0, training 1, predicted 0, predicted 1, no location
MAP_CHARS = {"train0": "-", "train1": "+", "pred0": "o", "pred1": "#", "empty": " "}
UNKNOWN = -1


def _grid_shape(data: Dataset):
    if data.domain is not None:
        return data.domain.rows, data.domain.cols
    return int(data.coords[:, 0].max()) + 1, int(data.coords[:, 1].max()) + 1


def label_grid(data: Dataset, sites: Sequence[int], labels: Sequence[int]) -> np.ndarray:
    """
    Integer raster of the map: 0/1 for training labels, 2/3 for predicted
    labels at `sites`, -1 where the grid has no location or nothing is known.
    """
    rows, cols = _grid_shape(data)
    grid = np.full((rows, cols), UNKNOWN, dtype=int)
    train = np.flatnonzero((data.y >= 0) & ~data.test_mask)
    grid[data.coords[train, 0], data.coords[train, 1]] = data.y[train]
    sites = np.asarray(sites, dtype=int)
    grid[data.coords[sites, 0], data.coords[sites, 1]] = 2 + np.asarray(labels, dtype=int)
    return grid


def ascii_map(data: Dataset, sites: Sequence[int], labels: Sequence[int]) -> str:
    chars = np.array([MAP_CHARS[k] for k in ("train0", "train1", "pred0", "pred1", "empty")])
    grid = label_grid(data, sites, labels)
    # -1 indexes the last entry, the blank
    lines = ["".join(chars[row]) for row in grid]
    legend = (f"{MAP_CHARS['train0']}/{MAP_CHARS['train1']} training 0/1, "
              f"{MAP_CHARS['pred0']}/{MAP_CHARS['pred1']} predicted 0/1")
    return "\n".join(lines + ["", legend]) + "\n"


def write_ascii_map(data: Dataset, sites: Sequence[int], labels: Sequence[int], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(ascii_map(data, sites, labels), encoding="utf-8")
    log.info("wrote %s", path)
    return path


def classification_map_svg(data: Dataset, sites: Sequence[int], labels: Sequence[int],
                           path: Union[str, Path], title: str = "") -> Path:
    grid = np.ma.masked_less(label_grid(data, sites, labels), 0)
    cmap = ListedColormap(["#d9e6f2", "#f2d9d9", "#1f5f99", "#a32020"])
    fig, ax = plt.subplots(figsize=(5, 5))
    try:
        ax.imshow(grid, cmap=cmap, vmin=-0.5, vmax=3.5, interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title or "training (light) and predicted (dark) classes")
        path = Path(path)
        fig.savefig(path, format="svg", bbox_inches="tight")
    finally:
        plt.close(fig)
    log.info("wrote %s", path)
    return path


def error_vs_kappa(frame: pd.DataFrame, path: Union[str, Path], metric: str = "test",
                   models: Optional[Sequence[str]] = None) -> Path:
    """
    Line chart of mean error rate against kappa, one panel per linear
    component and one line per model. `frame` has the report-row columns.
    """
    sub = frame[frame["metric"] == metric].dropna(subset=["kappa"])
    if models is not None:
        sub = sub[sub["model_fit"].isin(models)]
    components = sorted(sub["linear_component"].unique()) or [""]
    fig, axes = plt.subplots(1, len(components), figsize=(4 * len(components), 3.5), sharey=True, squeeze=False)
    try:
        for ax, comp in zip(axes[0], components):
            means = (sub[sub["linear_component"] == comp]
                     .groupby(["model_fit", "kappa"])["rate"].mean().reset_index())
            for model, g in means.groupby("model_fit"):
                ax.plot(g["kappa"], g["rate"], marker="o", label=model)
            ax.set_title(comp or metric)
            ax.set_xlabel("kappa")
        axes[0][0].set_ylabel(f"{metric} error")
        handles, names = axes[0][0].get_legend_handles_labels()
        if handles:
            fig.legend(handles, names, loc="center right", fontsize="small")
        path = Path(path)
        fig.savefig(path, format="svg", bbox_inches="tight")
    finally:
        plt.close(fig)
    log.info("wrote %s", path)
    return path

