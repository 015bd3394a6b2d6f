"""Publication-style figures from the laboratory's CSV files.

The component boundary is the file format: everything here consumes the
documented CSV schemas (header row, data rows, trailing '# key=value'
metadata comment) and knows nothing about checkpoints or model code.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


class RenderError(ValueError):
    """Figure cannot be built from the given inputs."""


class MissingColumnError(RenderError):
    def __init__(self, column: str, path: str, header: list[str]):
        self.column = column
        super().__init__(
            f"column {column!r} not found in {path} (header has: {', '.join(header)})"
        )


class EmptyDataError(RenderError):
    pass


@dataclass(frozen=True)
class FigureSpec:
    """One figure: which CSVs, which columns, how the axes look.

    `series` names a column whose distinct values become separate curves;
    `band` names a half-width column drawn as a shaded region when the CSV
    has it (silently skipped otherwise, so one spec fits many files).
    """

    inputs: tuple[str, ...]
    x: str
    y: str
    out: str
    series: str | None = None
    band: str | None = "std_err"
    logx: bool = False
    logy: bool = False
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(str(p) for p in self.inputs))
        if not self.inputs:
            raise RenderError("figure needs at least one input CSV")
        if not self.out:
            raise RenderError("figure needs an output path")


@dataclass
class Curve:
    label: str
    x: np.ndarray
    y: np.ndarray
    band: np.ndarray | None = None


def read_table(path: str) -> tuple[list[str], list[list[str]], dict[str, str]]:
    """Header, data rows, and the trailing '# key=value' metadata."""
    header: list[str] = []
    rows: list[list[str]] = []
    metadata: dict[str, str] = {}
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise RenderError(f"cannot read {path}: {exc}") from exc
    with handle:
        for record in csv.reader(handle):
            if not record:
                continue
            if record[0].startswith("#"):
                text = ",".join(record).lstrip("#").strip()
                for token in text.split():
                    if "=" in token:
                        key, _, value = token.partition("=")
                        metadata[key] = value
                continue
            if not header:
                header = record
            else:
                rows.append(record)
    if not header:
        raise EmptyDataError(f"{path}: no header row")
    return header, rows, metadata


def _column(header: list[str], rows, name: str, path: str) -> list[str]:
    if name not in header:
        raise MissingColumnError(name, path, header)
    idx = header.index(name)
    return [row[idx] for row in rows]


def _floats(values: list[str], name: str, path: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in values])
    except ValueError as exc:
        raise RenderError(f"{path}: column {name!r} is not numeric: {exc}") from exc


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def load_curves(spec: FigureSpec) -> list[Curve]:
    """All curves for the figure, one per (input file, series value)."""
    curves: list[Curve] = []
    many = len(spec.inputs) > 1
    for path in spec.inputs:
        header, rows, _ = read_table(path)
        if not rows:
            raise EmptyDataError(f"{path}: no data rows")
        x = _floats(_column(header, rows, spec.x, path), spec.x, path)
        y = _floats(_column(header, rows, spec.y, path), spec.y, path)
        band = None
        if spec.band is not None and spec.band in header:
            band = _floats(_column(header, rows, spec.band, path), spec.band, path)
        if spec.series is None:
            groups = [(_stem(path) if many else "", np.arange(len(rows)))]
        else:
            keys = _column(header, rows, spec.series, path)
            seen: dict[str, list[int]] = {}
            for i, key in enumerate(keys):
                seen.setdefault(key, []).append(i)
            prefix = f"{_stem(path)}:" if many else ""
            groups = [(prefix + key, np.array(idx)) for key, idx in seen.items()]
        for label, idx in groups:
            order = idx[np.argsort(x[idx], kind="stable")]
            curves.append(
                Curve(
                    label=label,
                    x=x[order],
                    y=y[order],
                    band=None if band is None else band[order],
                )
            )
    return curves


def build_figure(spec: FigureSpec):
    """Matplotlib figure for a FigureSpec; layout depends only on the data."""
    curves = load_curves(spec)
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=150)
    for curve in curves:
        (line,) = ax.plot(curve.x, curve.y, marker="o", markersize=3,
                          label=curve.label or None)
        if curve.band is not None:
            ax.fill_between(
                curve.x,
                curve.y - curve.band,
                curve.y + curve.band,
                alpha=0.25,
                color=line.get_color(),
                linewidth=0,
            )
    if spec.logx:
        ax.set_xscale("log")
    if spec.logy:
        ax.set_yscale("log")
    ax.set_xlabel(spec.xlabel or spec.x)
    ax.set_ylabel(spec.ylabel or spec.y)
    if spec.title:
        ax.set_title(spec.title)
    if any(c.label for c in curves):
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return fig


def render(spec: FigureSpec) -> str:
    """Write the figure to spec.out; nothing is written when loading fails."""
    fig = build_figure(spec)
    parent = os.path.dirname(os.path.abspath(spec.out))
    os.makedirs(parent, exist_ok=True)
    try:
        fig.savefig(spec.out)
    finally:
        plt.close(fig)
    return spec.out


# Known output files and the axis labels that make them readable. Any other
# diag_*.csv still renders with the generic long-form recipe.
_LABELS = {
    "diag_drift": ("t", "per-dimension MSE", "marginal-vs-conditional drift"),
    "diag_accumulation": ("jump span t", "value", "single-step error accumulation"),
    "diag_omega_sweep": ("guidance weight", "sample distance", "guidance sweep"),
}


def standard_specs(run_dir: str, out_dir: str | None = None) -> list[FigureSpec]:
    """Specs for every renderable CSV found in a run directory."""
    out_root = run_dir if out_dir is None else out_dir
    specs: list[FigureSpec] = []
    names = sorted(os.listdir(run_dir))
    for name in names:
        stem, ext = os.path.splitext(name)
        if ext != ".csv":
            continue
        path = os.path.join(run_dir, name)
        out = os.path.join(out_root, f"{stem}.png")
        if stem == "metrics":
            specs.append(
                FigureSpec(
                    inputs=(path,),
                    x="step",
                    y="loss",
                    out=out,
                    series="objective",
                    band=None,
                    logy=True,
                    title="training loss",
                    xlabel="step",
                    ylabel="loss",
                )
            )
        elif stem.startswith("diag_"):
            xlabel, ylabel, title = _LABELS.get(
                stem, ("sweep value", "value", stem.removeprefix("diag_"))
            )
            specs.append(
                FigureSpec(
                    inputs=(path,),
                    x="sweep_value",
                    y="value",
                    out=out,
                    series="experiment",
                    title=title,
                    xlabel=xlabel,
                    ylabel=ylabel,
                )
            )
    return specs


def render_all(run_dir: str, out_dir: str | None = None) -> list[str]:
    if not os.path.isdir(run_dir):
        raise RenderError(f"not a directory: {run_dir}")
    specs = standard_specs(run_dir, out_dir)
    if not specs:
        raise RenderError(f"no renderable CSV files in {run_dir}")
    return [render(spec) for spec in specs]
