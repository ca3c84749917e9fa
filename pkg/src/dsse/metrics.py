"""Accuracy metrics, report tables and the per-feature MAE plot."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

Label = tuple[str, str]

REPORT_HEADER = ["method", "error_model", "n_smd", "n_scenarios", "phase_mae_deg", "magnitude_mape_pct"]
FEATURE_HEADER = ["method", "error_model", "bus", "phase", "n_scenarios", "phase_mae_deg", "magnitude_mape_pct"]


def _check(truth, est, labels_t=None, labels_e=None):
    truth = np.atleast_2d(np.asarray(truth, float))
    est = np.atleast_2d(np.asarray(est, float))
    if truth.shape != est.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape}, estimate {est.shape}")
    if labels_t is not None and labels_e is not None and list(map(tuple, labels_t)) != list(map(tuple, labels_e)):
        raise ValueError("feature ordering of truth and estimate differs")
    return truth, est


def angle_error(truth, est) -> np.ndarray:
    """|est - truth| in degrees, taking the short way round the circle."""
    d = (np.asarray(est, float) - np.asarray(truth, float) + 180.0) % 360.0 - 180.0
    return np.abs(d)


def phase_mae_per_feature(truth, est, labels_t=None, labels_e=None) -> np.ndarray:
    truth, est = _check(truth, est, labels_t, labels_e)
    return angle_error(truth, est).mean(axis=0)


def phase_mae(truth, est, labels_t=None, labels_e=None) -> float:
    """Mean absolute angle error (deg) over scenarios and features."""
    return float(phase_mae_per_feature(truth, est, labels_t, labels_e).mean())


def magnitude_mape_per_feature(truth, est, labels_t=None, labels_e=None) -> np.ndarray:
    truth, est = _check(truth, est, labels_t, labels_e)
    if np.any(truth <= 0):
        raise ValueError("MAPE needs strictly positive true magnitudes")
    return (100.0 * np.abs(est - truth) / truth).mean(axis=0)


def magnitude_mape(truth, est, labels_t=None, labels_e=None) -> float:
    """Mean absolute percentage error of magnitudes, in percent."""
    return float(magnitude_mape_per_feature(truth, est, labels_t, labels_e).mean())


@dataclass
class MetricsReport:
    method: str
    error_model: str
    n_smd: int
    n_scenarios: int
    labels: tuple[Label, ...]
    mae_per_feature: np.ndarray
    mape_per_feature: np.ndarray

    @property
    def phase_mae(self) -> float:
        return float(np.mean(self.mae_per_feature))

    @property
    def magnitude_mape(self) -> float:
        return float(np.mean(self.mape_per_feature))

    def mae_on(self, buses: Sequence[str], phases: str = "ABC") -> float:
        """Phase MAE restricted to the given buses."""
        keep = [i for i, (b, p) in enumerate(self.labels) if b in set(buses) and p in phases]
        if not keep:
            raise KeyError(f"no features on buses {list(buses)}")
        return float(np.mean(self.mae_per_feature[keep]))

    def row(self) -> list:
        return [self.method, self.error_model, self.n_smd, self.n_scenarios,
                repr(self.phase_mae), repr(self.magnitude_mape)]


def evaluate(method: str, error_model: str, n_smd: int, labels: Sequence[Label],
             vmag_true, vang_true, vmag_est, vang_est) -> MetricsReport:
    mae = phase_mae_per_feature(vang_true, vang_est)
    mape = magnitude_mape_per_feature(vmag_true, vmag_est)
    if len(labels) != mae.size:
        raise ValueError("labels do not match the feature count")
    return MetricsReport(method, error_model, int(n_smd), int(np.atleast_2d(vang_true).shape[0]),
                         tuple(map(tuple, labels)), mae, mape)


def write_report_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


def write_feature_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_HEADER)
        for r in reports:
            for (b, p), a, m in zip(r.labels, r.mae_per_feature, r.mape_per_feature):
                w.writerow([r.method, r.error_model, b, p, r.n_scenarios, repr(float(a)), repr(float(m))])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- plot ----------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
_MARKS = ("circle", "square", "diamond", "cross")


def _marker(kind: str, x: float, y: float, color: str) -> str:
    if kind == "circle":
        return f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="{color}"/>'
    if kind == "square":
        return f'<rect x="{x - 3:.1f}" y="{y - 3:.1f}" width="6" height="6" fill="{color}"/>'
    if kind == "diamond":
        return f'<polygon points="{x:.1f},{y - 4:.1f} {x + 4:.1f},{y:.1f} {x:.1f},{y + 4:.1f} {x - 4:.1f},{y:.1f}" ' \
               f'fill="{color}"/>'
    return (f'<path d="M{x - 3:.1f},{y - 3:.1f} L{x + 3:.1f},{y + 3:.1f} M{x - 3:.1f},{y + 3:.1f} '
            f'L{x + 3:.1f},{y - 3:.1f}" stroke="{color}" stroke-width="1.5"/>')


def mae_svg(reports: Sequence[MetricsReport], names: Sequence[str] | None = None, phase: str = "A",
            title: str = "Phase angle MAE per node") -> str:
    """Per-node angle MAE of one phase, one marker series per report."""
    if not reports:
        raise ValueError("nothing to plot")
    names = list(names) if names is not None else [f"{r.method} ({r.error_model})" for r in reports]
    buses = [b for b, p in reports[0].labels if p == phase]
    series = []
    for r in reports:
        pos = {lab: i for i, lab in enumerate(r.labels)}
        series.append([float(r.mae_per_feature[pos[(b, phase)]]) for b in buses])
    ymax = max(max(s) for s in series) or 1.0
    ymax *= 1.1
    W, H, L, B, T, R = 60 + 22 * len(buses), 320, 55, 60, 30, 160
    pw, ph = W - L - 20, H - B - T
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + R}" height="{H}" font-family="sans-serif" '
           f'font-size="10">',
           f'<text x="{L}" y="18" font-size="13">{escape(title)} (phase {phase})</text>',
           f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}" stroke="black"/>',
           f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}" stroke="black"/>']
    for k in range(6):
        v = ymax * k / 5
        y = T + ph - ph * k / 5
        out.append(f'<line x1="{L - 4}" y1="{y:.1f}" x2="{L}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{L - 6}" y="{y + 3:.1f}" text-anchor="end">{v:.3f}</text>')
    out.append(f'<text x="14" y="{T + ph / 2:.0f}" transform="rotate(-90 14 {T + ph / 2:.0f})" '
               f'text-anchor="middle">MAE [deg]</text>')
    step = pw / max(len(buses), 1)
    for i, b in enumerate(buses):
        x = L + step * (i + 0.5)
        out.append(f'<text x="{x:.1f}" y="{T + ph + 12}" text-anchor="end" '
                   f'transform="rotate(-60 {x:.1f} {T + ph + 12})">{escape(b)}</text>')
    for j, (s, name) in enumerate(zip(series, names)):
        color = _PALETTE[j % len(_PALETTE)]
        mark = _MARKS[j % len(_MARKS)]
        pts = [(L + step * (i + 0.5), T + ph - ph * v / ymax) for i, v in enumerate(s)]
        out.append('<polyline fill="none" stroke="{}" stroke-width="0.8" points="{}"/>'.format(
            color, " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)))
        out += [_marker(mark, x, y, color) for x, y in pts]
        ly = T + 14 * j + 6
        out.append(_marker(mark, W + 8, ly, color))
        out.append(f'<text x="{W + 16}" y="{ly + 3}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
