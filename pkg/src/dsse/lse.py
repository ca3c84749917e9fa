"""Linear weighted-least-squares state estimator on synchrophasor channels.

The state is the rectangular voltage of every present (bus, phase).  Voltage
channels map to it through identity rows.  Current channels map through the
branch admittance blocks.  Zero-injection phases add exact Kirchhoff rows
with a large weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .netmodel import PHASES, NetworkModel, zero_injection_phases
from .powerflow import branch_blocks, solve
from .smdsim import Measurements, SmdPlacement, SmdSite, TveModel, extract_true_channels

ZIP_WEIGHT_RATIO = 1e6
REF_FLOOR = 1e-3


class ObservabilityError(ValueError):
    def __init__(self, report: "ObservabilityReport"):
        super().__init__(f"state not observable: rank {report.rank} of {report.n_vars}, "
                         f"{len(report.unobservable)} phases unobservable")
        self.report = report


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Real-stacked measurement model z = H x + e.

    Columns hold the real parts of all phase voltages, then all imaginary
    parts.  Rows come in (re, im) pairs, one pair per channel, followed by the
    zero-injection pairs.  ``w`` is the diagonal of W.
    """

    H: np.ndarray
    w: np.ndarray
    row_labels: tuple
    col_labels: tuple
    n_channels: int

    @property
    def n_vars(self) -> int:
        return self.H.shape[1]

    @property
    def phase_labels(self) -> list[tuple[str, str]]:
        return [lab[:2] for lab in self.col_labels[: self.n_vars // 2]]

    def stack(self, z: np.ndarray) -> np.ndarray:
        """(S, C) complex channel readings -> (S, rows) real vector incl. zero rows."""
        z = np.atleast_2d(np.asarray(z, dtype=complex))
        if z.shape[1] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {z.shape[1]}")
        out = np.zeros((z.shape[0], self.H.shape[0]))
        out[:, 0 : 2 * self.n_channels : 2] = z.real
        out[:, 1 : 2 * self.n_channels : 2] = z.imag
        return out


@dataclass(frozen=True)
class ObservabilityReport:
    full_rank: bool
    rank: int
    n_vars: int
    unobservable: tuple[tuple[str, str], ...]

    def to_dict(self) -> dict:
        return {"full_rank": self.full_rank, "rank": self.rank, "n_vars": self.n_vars,
                "unobservable": [f"{b}.{p}" for b, p in self.unobservable]}


def _complex_rows(net: NetworkModel, placement: SmdPlacement, use_zip: bool = True):
    labels = net.phase_labels
    col = {lab: i for i, lab in enumerate(labels)}
    P = len(labels)
    blocks = branch_blocks(net)
    br_idx = {br: k for k, br in enumerate(net.branches)}

    def branch_rows(bus, f, t):
        """3 complex rows: current leaving ``bus`` into branch f-t, by phase."""
        if (f, t) not in br_idx:
            f, t = t, f
        k = br_idx[(f, t)]
        yff, yft, ytf, ytt = blocks[k]
        a, b = (yff, yft) if bus == f else (ytt, ytf)
        near, far = (f, t) if bus == f else (t, f)
        rows = np.zeros((3, P), complex)
        for src, m in ((near, a), (far, b)):
            for jj, pp in enumerate(PHASES):
                c = col.get((src, pp))
                if c is not None:
                    rows[:, c] += m[:, jj]
        return rows

    rows, rlabels = [], []
    for ch in placement.channels(net):
        site = placement.sites[ch.site]
        j = PHASES.index(ch.phase)
        if ch.kind == "V":
            r = np.zeros(P, complex)
            r[col[(site.bus, ch.phase)]] = 1.0
        else:
            r = branch_rows(site.bus, *site.branch)[j]
        rows.append(r)
        rlabels.append((site.label, ch.kind, ch.phase))
    n_ch = len(rows)
    if use_zip:
        inc = {b.id: [] for b in net.buses}
        for f, t in net.branches:
            inc[f].append((f, t))
            inc[t].append((f, t))
        for bus, ph in sorted(zero_injection_phases(net), key=lambda l: col[l]):
            j = PHASES.index(ph)
            r = sum(branch_rows(bus, f, t)[j] for f, t in inc[bus])
            rows.append(r)
            rlabels.append(("zip", bus, ph))
    return np.array(rows, complex).reshape(-1, P), rlabels, n_ch


def build_linear_model(net: NetworkModel, placement: SmdPlacement, tve_model: TveModel | None = None,
                       ref_mag: np.ndarray | None = None, use_zip: bool = True) -> LinearModel:
    """Assemble H and the weights.

    Channel std on each rectangular component is ``tve_model.sigma_factor``
    times a reference magnitude; by default the channel magnitude of the
    nominal power flow.  Zero-injection rows get ``ZIP_WEIGHT_RATIO`` times
    the largest channel weight.  Reference magnitudes are floored at
    ``REF_FLOOR`` times the largest one so idle channels (zero nominal
    current) do not get unbounded weight.
    """
    tve_model = tve_model or TveModel()
    hc, rlab, n_ch = _complex_rows(net, placement, use_zip)
    P = len(net.phase_labels)
    R = hc.shape[0]
    H = np.zeros((2 * R, 2 * P))
    H[0::2, :P] = hc.real
    H[0::2, P:] = -hc.imag
    H[1::2, :P] = hc.imag
    H[1::2, P:] = hc.real
    if ref_mag is None and n_ch:
        ref_mag = extract_true_channels(net, solve(net), placement).mag[0]
    ref = np.ones(n_ch) if ref_mag is None else np.asarray(ref_mag, float).reshape(-1)
    if n_ch:
        ref = np.maximum(ref, REF_FLOOR * ref.max()) if ref.max() > 0 else np.ones(n_ch)
    sig = tve_model.sigma_factor * ref
    wch = 1.0 / sig ** 2 if tve_model.tve_limit > 0 else np.ones(n_ch)
    wmax = wch.max() if n_ch else 1.0
    w = np.concatenate([np.repeat(wch, 2), np.full(2 * (R - n_ch), ZIP_WEIGHT_RATIO * wmax)])
    row_labels = tuple(lab + (part,) for lab in rlab for part in ("re", "im"))
    labels = net.phase_labels
    col_labels = tuple((b, p, "re") for b, p in labels) + tuple((b, p, "im") for b, p in labels)
    return LinearModel(H, w, row_labels, col_labels, n_ch)


def _rank(a: np.ndarray) -> tuple[int, float]:
    if a.size == 0:
        return 0, 0.0
    r = scipy.linalg.qr(a, mode="r", pivoting=True)[0]
    d = np.abs(np.diag(r))
    tol = np.finfo(float).eps * max(a.shape) * (d[0] if d.size else 0.0) * 10
    return int((d > tol).sum()), tol


def check_observability(model: LinearModel) -> ObservabilityReport:
    """Numerical rank of H and the phases touching its null space.

    Rank does not depend on the (positive) weights, so rows are normalised
    to unit length first; channel weights can span many decades.
    """
    norm = np.linalg.norm(model.H, axis=1)
    a = model.H[norm > 0] / norm[norm > 0, None]
    n = model.n_vars
    rank, _ = _rank(a)
    unobs: list[tuple[str, str]] = []
    if rank < n:
        if a.shape[0]:
            _, s, vt = np.linalg.svd(a, full_matrices=True)
            null = vt[rank:].T
        else:
            null = np.eye(n)
        weight = np.sqrt((null ** 2).sum(axis=1))
        P = n // 2
        bad = (weight[:P] > 1e-6) | (weight[P:] > 1e-6)
        unobs = [model.phase_labels[i] for i in np.flatnonzero(bad)]
    return ObservabilityReport(rank == n, rank, n, tuple(unobs))


@dataclass(frozen=True)
class WlsEstimate:
    labels: tuple[tuple[str, str], ...]
    v: np.ndarray  # (S, P) complex

    @property
    def vmag(self) -> np.ndarray:
        return np.abs(self.v)

    @property
    def vang(self) -> np.ndarray:
        return np.degrees(np.angle(self.v))


def wls_solve(model: LinearModel, z) -> WlsEstimate:
    """Weighted least squares via QR of W^1/2 H, for one or many scenarios.

    ``z`` is a Measurements batch or (S, C) complex channel readings.
    """
    zc = z.phasors if isinstance(z, Measurements) else z
    zs = model.stack(zc)
    if not np.isfinite(zs).all():
        raise ValueError("non-finite measurements")
    rep = check_observability(model)
    if not rep.full_rank:
        raise ObservabilityError(rep)
    sw = np.sqrt(model.w)
    a = sw[:, None] * model.H
    # heavy rows first keeps Householder QR accurate under wide weight ranges
    order = np.argsort(-np.linalg.norm(a, axis=1), kind="stable")
    q, r, piv = scipy.linalg.qr(a[order], mode="economic", pivoting=True)
    rhs = (zs * sw)[:, order] @ q
    x = np.empty((zs.shape[0], model.n_vars))
    x[:, piv] = scipy.linalg.solve_triangular(r, rhs.T).T
    P = model.n_vars // 2
    return WlsEstimate(tuple(model.phase_labels), x[:, :P] + 1j * x[:, P:])


def greedy_observability_placement(net: NetworkModel, use_zip: bool = True,
                                   tve_model: TveModel | None = None) -> SmdPlacement:
    """Add the site that removes the most unobservable phases until the
    model has full rank.  Candidates are every (bus, incident branch) pair.
    Ties go to the smallest (bus, far bus)."""
    cands = sorted({SmdSite(b, (f, t)) for f, t in net.branches for b in (f, t)},
                   key=lambda s: (s.bus, s.far_bus))
    if not cands:
        return SmdPlacement((SmdSite(net.buses[0].id, None),))
    chosen: list[SmdSite] = []
    cur = len(check_observability(build_linear_model(net, SmdPlacement(()), tve_model, use_zip=use_zip)).unobservable)
    while cur:
        best, best_n = None, cur
        for s in cands:
            if s in chosen:
                continue
            pl = SmdPlacement(tuple(chosen + [s]))
            m = build_linear_model(net, pl, tve_model, ref_mag=np.ones(len(pl.channels(net))), use_zip=use_zip)
            n = len(check_observability(m).unobservable)
            if n < best_n:
                best, best_n = s, n
        if best is None:
            raise RuntimeError("greedy placement stalled")
        chosen.append(best)
        cur = best_n
    return SmdPlacement(tuple(chosen))


def bus_coverage_placement(net: NetworkModel) -> SmdPlacement:
    """One voltage-only SMD at every bus; the well-conditioned full-coverage baseline."""
    return SmdPlacement(tuple(SmdSite(b.id, None) for b in net.buses))
