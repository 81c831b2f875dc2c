"""Report serialization: delimited tables plus rendered figures.

Every report type is written twice: a CSV table (RFC-4180 quoting, '.'
decimal separator, LF line endings, floats through repr so values
round-trip exactly) and a standalone SVG chart. Identical report
values produce byte-identical files, which is what the reproducibility
gates diff. Figures are rendered headless with a pinned hash salt so
the SVG ids are stable across runs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .attacks import SuiteReport
from .errors import ValidationError
from .geometry import PerClassKl
from .harness import BinnedReport, GridReport, GridRow, PairedHistograms
from .transform import TransformParams

__all__ = [
    "emit_report",
    "render_csv",
    "parse_binned_report",
    "parse_grid_report",
    "parse_paired_histograms",
    "parse_divergence",
    "parse_attack_csv",
]

_SVG_RC = {"svg.hashsalt": "blindspot", "svg.fonttype": "path"}

_BINNED_HEADER = [
    "bin", "lo", "hi", "count", "success_rate", "defined",
    "k", "p", "epsilon", "method", "tap", "attacked", "min_bin_count",
]
_GRID_HEADER = [
    "alpha", "beta", "accuracy", "rate_at_epsilon", "rate_at_strict", "strict",
    "attacked", "error", "epsilon", "dataset_tag", "method", "subset_size",
]
_HIST_HEADER = [
    "bin", "lo", "hi", "original_count", "transformed_count",
    "overlap", "alpha", "beta", "k", "p", "bins", "tap",
]
_SUITE_HEADER = [
    "index", "true_label", "original_pred", "adversarial_pred",
    "linf_distortion", "l2_distortion", "converged",
]
_KL_HEADER = ["class", "kl", "error", "average"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[_fmt(v) for v in row] for row in rows])


def _read_csv(path) -> list[dict]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _meta_cell(meta: dict, key: str):
    return meta[key] if key in meta else None


def _binned_rows(rep: BinnedReport):
    m = rep.metadata
    for i in range(rep.counts.size):
        rate = rep.success_rates[i] if rep.mask[i] else None
        yield [
            i, rep.edges[i], rep.edges[i + 1], rep.counts[i], rate, rep.mask[i],
            _meta_cell(m, "k"), _meta_cell(m, "p"), _meta_cell(m, "epsilon"),
            _meta_cell(m, "method"), _meta_cell(m, "tap"), _meta_cell(m, "attacked"),
            _meta_cell(m, "min_bin_count"),
        ]


def _grid_rows(rep: GridReport):
    m = rep.metadata
    for row in rep.rows:
        yield [
            row.params.alpha, row.params.beta, row.accuracy, row.rate_at_epsilon,
            row.rate_at_strict, row.strict, row.attacked, row.error,
            rep.epsilon, rep.dataset_tag, _meta_cell(m, "method"),
            _meta_cell(m, "subset_size"),
        ]


def _hist_rows(rep: PairedHistograms):
    m = rep.metadata
    for i in range(rep.original_counts.size):
        yield [
            i, rep.edges[i], rep.edges[i + 1],
            rep.original_counts[i], rep.transformed_counts[i],
            rep.overlap, rep.params.alpha, rep.params.beta,
            _meta_cell(m, "k"), _meta_cell(m, "p"), _meta_cell(m, "bins"),
            _meta_cell(m, "tap"),
        ]


def _suite_rows(rep: SuiteReport):
    for idx, r in zip(rep.indices, rep.results):
        yield [
            idx, r.true_label, r.original_pred, r.adversarial_pred,
            r.linf_distortion, r.l2_distortion, r.converged,
        ]


def _kl_rows(rep: PerClassKl):
    for cls in sorted(set(rep.values) | set(rep.errors)):
        yield [cls, rep.values.get(cls), rep.errors.get(cls, ""), rep.average]


def _figure_binned(rep: BinnedReport, ax) -> None:
    centers = (rep.edges[:-1] + rep.edges[1:]) / 2.0
    width = (rep.edges[1] - rep.edges[0]) * 0.9
    heights = np.where(rep.mask, rep.success_rates, 0.0)
    ax.bar(centers, heights, width=width, color="#4878a8", label="success rate")
    ax.set_xlabel("mean distance to nearest training features")
    ax.set_ylabel("attack success rate")
    ax.set_ylim(0.0, 1.05)
    twin = ax.twinx()
    twin.step(rep.edges, np.append(rep.counts, rep.counts[-1]), where="post",
              color="#b05050", alpha=0.7, label="count")
    twin.set_ylabel("points per bin")
    ax.set_title("attack success rate by distance to training set")


def _figure_grid(rep: GridReport, ax) -> None:
    n = len(rep.rows)
    xs = np.arange(n)
    acc = np.nan_to_num([r.accuracy for r in rep.rows])
    at_eps = np.nan_to_num([r.rate_at_epsilon for r in rep.rows])
    at_strict = np.nan_to_num([r.rate_at_strict for r in rep.rows])
    ax.bar(xs - 0.25, acc, width=0.25, label="accuracy", color="#60a060")
    ax.bar(xs, at_eps, width=0.25, label="success at eps", color="#4878a8")
    ax.bar(xs + 0.25, at_strict, width=0.25, label="success at alpha*eps", color="#b05050")
    labels = [f"a={r.params.alpha:g}\nb={r.params.beta:g}" for r in rep.rows]
    ax.set_xticks(xs)
    ax.set_xticklabels(labels)
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="upper left")
    ax.set_title(f"scale-and-shift grid ({rep.dataset_tag}, eps={rep.epsilon:g})")


def _figure_hist(rep: PairedHistograms, ax) -> None:
    ax.stairs(rep.original_counts, rep.edges, label="original", color="#4878a8")
    ax.stairs(rep.transformed_counts, rep.edges, label="transformed", color="#b05050")
    ax.set_xlabel("mean distance to nearest training features")
    ax.set_ylabel("test points")
    ax.legend(loc="upper right")
    ax.set_title(
        f"distance shift (a={rep.params.alpha:g}, b={rep.params.beta:g}, "
        f"overlap={rep.overlap:.3f})"
    )


def _figure_kl(rep: PerClassKl, ax) -> None:
    classes = sorted(rep.values)
    ax.bar([str(c) for c in classes], [rep.values[c] for c in classes], color="#4878a8")
    if np.isfinite(rep.average):
        ax.axhline(rep.average, color="#b05050", linestyle="--",
                   label=f"average {rep.average:.4f}")
        ax.legend(loc="upper right")
    ax.set_xlabel("class")
    ax.set_ylabel("K-L divergence (train vs test)")
    ax.set_title("per-class projected K-L divergence")


def _figure_suite(rep: SuiteReport, ax) -> None:
    linf = [r.linf_distortion for r in rep.results if r.converged]
    if linf:
        ax.hist(linf, bins=20, color="#4878a8")
        ax.set_xlabel("L-inf distortion")
        ax.set_ylabel("examples")
    else:
        ax.text(0.5, 0.5, "no converged attacks", ha="center", va="center")
        ax.set_axis_off()
    ax.set_title(f"attack distortions ({rep.attacked} attacked)")


_SHAPES = {
    BinnedReport: ("distance_binned", _BINNED_HEADER, _binned_rows, _figure_binned),
    GridReport: ("blindspot_grid", _GRID_HEADER, _grid_rows, _figure_grid),
    PairedHistograms: ("distance_shift", _HIST_HEADER, _hist_rows, _figure_hist),
    SuiteReport: ("attack_suite", _SUITE_HEADER, _suite_rows, _figure_suite),
    PerClassKl: ("divergence", _KL_HEADER, _kl_rows, _figure_kl),
}


def emit_report(report, out_dir, stem: str = "") -> tuple[Path, Path]:
    """Write the report's CSV and SVG into out_dir; returns both paths.

    The stem defaults to a per-type name. Identical report values give
    byte-identical output files.
    """
    shape = _SHAPES.get(type(report))
    if shape is None:
        raise ValidationError(f"no report shape registered for {type(report).__name__}")
    default_stem, header, rows, figure = shape
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = stem or default_stem
    csv_path = out / f"{name}.csv"
    svg_path = out / f"{name}.svg"
    _write_csv(csv_path, header, rows(report))
    _render_svg(report, figure, svg_path)
    return csv_path, svg_path


def _render_svg(report, figure, svg_path: Path) -> None:
    with matplotlib.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(7.0, 4.5), dpi=100)
        try:
            figure(report, ax)
            fig.tight_layout()
            fig.savefig(svg_path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)


def _csv_header(path) -> list[str]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            return row
    return []


class _SuiteView:
    """Just enough of a suite for the distortion figure."""

    class _Row:
        def __init__(self, linf, converged):
            self.linf_distortion = linf
            self.converged = converged

    def __init__(self, table: dict):
        self.results = [
            self._Row(linf, conv)
            for linf, conv in zip(table["linf_distortion"], table["converged"])
        ]
        self.attacked = len(self.results)


def render_csv(path, out_dir=None) -> Path:
    """Re-render an emitted CSV into its SVG figure.

    The report shape is recognized from the header row; the SVG lands
    next to the CSV (or in out_dir) under the same stem. Re-rendering
    an unmodified CSV reproduces the original SVG byte for byte.
    """
    src = Path(path)
    header = _csv_header(src)
    out = Path(out_dir) if out_dir is not None else src.parent
    out.mkdir(parents=True, exist_ok=True)
    svg_path = out / f"{src.stem}.svg"
    if header == _BINNED_HEADER:
        _render_svg(parse_binned_report(src), _figure_binned, svg_path)
    elif header == _GRID_HEADER:
        _render_svg(parse_grid_report(src), _figure_grid, svg_path)
    elif header == _HIST_HEADER:
        _render_svg(parse_paired_histograms(src), _figure_hist, svg_path)
    elif header == _SUITE_HEADER:
        _render_svg(_SuiteView(parse_attack_csv(src)), _figure_suite, svg_path)
    elif header == _KL_HEADER:
        _render_svg(parse_divergence(src), _figure_kl, svg_path)
    else:
        raise ValidationError(f"unrecognized report header in {src}")
    return svg_path


def _meta_from(row: dict, schema: dict) -> dict:
    meta = {}
    for key, conv in schema.items():
        cell = row.get(key, "")
        if cell != "":
            meta[key] = conv(cell)
    return meta


def parse_binned_report(path) -> BinnedReport:
    rows = _read_csv(path)
    if not rows:
        raise ValidationError(f"no data rows in {path}")
    bins = len(rows)
    edges = np.empty(bins + 1)
    counts = np.empty(bins, dtype=np.int64)
    rates = np.full(bins, np.nan)
    mask = np.zeros(bins, dtype=bool)
    for row in rows:
        i = int(row["bin"])
        edges[i] = float(row["lo"])
        edges[i + 1] = float(row["hi"])
        counts[i] = int(row["count"])
        mask[i] = row["defined"] == "true"
        if row["success_rate"] != "":
            rates[i] = float(row["success_rate"])
    meta = _meta_from(rows[0], {
        "k": int, "p": str, "epsilon": float, "method": str, "tap": str,
        "attacked": int, "min_bin_count": int,
    })
    meta["bins"] = bins
    return BinnedReport(
        edges=edges, counts=counts, success_rates=rates, mask=mask,
        distances=np.empty(0), successes=np.empty(0, dtype=bool), metadata=meta,
    )


def parse_grid_report(path) -> GridReport:
    rows = _read_csv(path)
    if not rows:
        raise ValidationError(f"no data rows in {path}")
    grid_rows = [
        GridRow(
            params=TransformParams(float(r["alpha"]), float(r["beta"])),
            accuracy=float(r["accuracy"]),
            rate_at_epsilon=float(r["rate_at_epsilon"]),
            rate_at_strict=float(r["rate_at_strict"]),
            strict=float(r["strict"]),
            attacked=int(r["attacked"]),
            error=r["error"],
        )
        for r in rows
    ]
    meta = _meta_from(rows[0], {"method": str, "subset_size": int})
    return GridReport(
        rows=grid_rows, epsilon=float(rows[0]["epsilon"]),
        dataset_tag=rows[0]["dataset_tag"], metadata=meta,
    )


def parse_paired_histograms(path) -> PairedHistograms:
    rows = _read_csv(path)
    if not rows:
        raise ValidationError(f"no data rows in {path}")
    bins = len(rows)
    edges = np.empty(bins + 1)
    orig = np.empty(bins, dtype=np.int64)
    trans = np.empty(bins, dtype=np.int64)
    for row in rows:
        i = int(row["bin"])
        edges[i] = float(row["lo"])
        edges[i + 1] = float(row["hi"])
        orig[i] = int(row["original_count"])
        trans[i] = int(row["transformed_count"])
    meta = _meta_from(rows[0], {"k": int, "p": str, "bins": int, "tap": str})
    return PairedHistograms(
        edges=edges, original_counts=orig, transformed_counts=trans,
        overlap=float(rows[0]["overlap"]),
        params=TransformParams(float(rows[0]["alpha"]), float(rows[0]["beta"])),
        metadata=meta,
    )


def parse_divergence(path) -> PerClassKl:
    rows = _read_csv(path)
    values = {int(r["class"]): float(r["kl"]) for r in rows if r["kl"] != ""}
    errors = {int(r["class"]): r["error"] for r in rows if r["error"] != ""}
    average = float(rows[0]["average"]) if rows else float("nan")
    return PerClassKl(values=values, errors=errors, average=average)


def parse_attack_csv(path) -> dict:
    """Per-example attack table as arrays keyed by column name."""
    rows = _read_csv(path)
    return {
        "index": np.array([int(r["index"]) for r in rows], dtype=np.int64),
        "true_label": np.array([int(r["true_label"]) for r in rows], dtype=np.int64),
        "original_pred": np.array([int(r["original_pred"]) for r in rows], dtype=np.int64),
        "adversarial_pred": np.array(
            [int(r["adversarial_pred"]) for r in rows], dtype=np.int64
        ),
        "linf_distortion": np.array([float(r["linf_distortion"]) for r in rows]),
        "l2_distortion": np.array([float(r["l2_distortion"]) for r in rows]),
        "converged": np.array([r["converged"] == "true" for r in rows], dtype=bool),
    }
