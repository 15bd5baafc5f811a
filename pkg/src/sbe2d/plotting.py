"""Deterministic SVG plots of small tables."""

from dataclasses import dataclass
import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "sbe2d"
plt.rcParams["svg.fonttype"] = "none"


@dataclass(frozen=True)
class Series:
    x: np.ndarray
    y: np.ndarray
    yerr: np.ndarray | None = None
    label: str = ""
    style: str = "o-"


def render_plot(series, kind="line", title="", xlabel="", ylabel="", logx=False, logy=False) -> str:
    """SVG text of one or more series; identical inputs give identical bytes."""
    series = list(series)
    if not series:
        raise ValueError("nothing to plot")
    if kind not in ("line", "scatter"):
        raise ValueError("kind is line or scatter")
    fig, ax = plt.subplots(figsize=(6, 4))
    for s in series:
        x = np.asarray(s.x, dtype=float)
        y = np.asarray(s.y, dtype=float)
        if x.size == 0 or x.shape != y.shape:
            plt.close(fig)
            raise ValueError(f"series {s.label!r} is empty or has mismatched shapes")
        fmt = "o" if kind == "scatter" or x.size == 1 else s.style
        if s.yerr is not None:
            ax.errorbar(x, y, yerr=np.asarray(s.yerr, dtype=float), fmt=fmt, capsize=3, label=s.label or None)
        else:
            ax.plot(x, y, fmt, label=s.label or None)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if any(s.label for s in series):
        ax.legend()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def write_plot(path, *args, **kwargs):
    svg = render_plot(*args, **kwargs)
    with open(path, "w") as fh:
        fh.write(svg)
    return path
