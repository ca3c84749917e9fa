"""Forward-backward sweep power flow for radial unbalanced feeders.

Everything is solved in per unit on a single power base (``net.base_mva``)
and per-bus voltage bases (``bus.base_kv``).  Voltages are line-to-neutral,
currents are per phase.  The sweep is vectorised over scenarios: a batch of
S scenarios is carried as arrays of shape (S, n_bus, 3), and each scenario
stops updating once it has converged so that batching never changes a
scenario's result.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Mapping, Sequence

import numpy as np

from .netmodel import PHASES, NetworkModel, phase_index

SQRT3 = math.sqrt(3.0)
NOMINAL_ANGLES = np.array([0.0, -120.0, 120.0])


class PowerFlowError(RuntimeError):
    pass


class NonConvergenceError(PowerFlowError):
    pass


class VoltageCollapseError(PowerFlowError):
    pass


class BatchSolveError(PowerFlowError):
    """Raised by :func:`batch_solve` when some scenarios fail.

    ``failures`` maps scenario index to the reason; ``result`` holds the
    (unconverged) arrays for every scenario so nothing is dropped silently.
    """

    def __init__(self, failures: dict[int, str], result: "BatchResult"):
        head = ", ".join(f"#{i}: {r}" for i, r in list(failures.items())[:5])
        super().__init__(f"{len(failures)} scenario(s) failed ({head})")
        self.failures = failures
        self.result = result


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-6
    max_iterations: int = 100
    collapse_pu: float = 0.5
    regulate: bool = False  # post-sweep tap adjustment for regulators with vreg_pu
    max_tap_rounds: int = 10

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


# -- scenarios ---------------------------------------------------------------

def load_keys(net: NetworkModel) -> list[tuple[str, str]]:
    """Ordered (bus, element) keys of every energised load element.

    Elements are phase letters for wye loads and AB/BC/CA for delta loads.
    """
    keys: dict[tuple[str, str], None] = {}
    for ld in net.loads:
        for el in ld.elements():
            if ld.nominal(el) != 0:
                keys[(ld.bus, el)] = None
    return list(keys)


def nominal_load(net: NetworkModel) -> dict[tuple[str, str], complex]:
    out: dict[tuple[str, str], complex] = {}
    for ld in net.loads:
        for el in ld.elements():
            s = ld.nominal(el)
            if s != 0:
                out[(ld.bus, el)] = out.get((ld.bus, el), 0j) + s
    return out


@dataclass(frozen=True)
class LoadScenario:
    """One load realisation.  Missing keys fall back to nominal values."""

    p_kw: Mapping[tuple[str, str], float] = field(default_factory=dict)
    q_kvar: Mapping[tuple[str, str], float] = field(default_factory=dict)
    taps: Mapping[tuple[str, str], tuple[int, int, int]] = field(default_factory=dict)
    cap_status: Mapping[str, tuple[bool, bool, bool]] = field(default_factory=dict)


class ScenarioSet(Sequence[LoadScenario]):
    """Array form of many scenarios over one network's load keys."""

    def __init__(self, keys, p_kw, q_kvar, taps=None, cap_status=None, seeds=None):
        self.keys = list(keys)
        self.p_kw = np.asarray(p_kw, dtype=float)
        self.q_kvar = np.asarray(q_kvar, dtype=float)
        if self.p_kw.ndim != 2 or self.p_kw.shape != self.q_kvar.shape or self.p_kw.shape[1] != len(self.keys):
            raise ValueError("p_kw/q_kvar must be (n_scenarios, n_keys)")
        self.taps = None if taps is None else np.asarray(taps, dtype=int)
        self.cap_status = None if cap_status is None else np.asarray(cap_status, dtype=bool)
        self.seeds = seeds

    def __len__(self) -> int:
        return self.p_kw.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            idx = range(len(self))[i]
            return self.subset(list(idx))
        p = dict(zip(self.keys, self.p_kw[i].tolist()))
        q = dict(zip(self.keys, self.q_kvar[i].tolist()))
        return LoadScenario(p, q)

    def subset(self, idx) -> "ScenarioSet":
        idx = np.asarray(idx, dtype=int)
        return ScenarioSet(self.keys, self.p_kw[idx], self.q_kvar[idx],
                           None if self.taps is None else self.taps[idx],
                           None if self.cap_status is None else self.cap_status[idx])

    @classmethod
    def from_scenarios(cls, net: NetworkModel, scenarios: Sequence[LoadScenario]) -> "ScenarioSet":
        if isinstance(scenarios, ScenarioSet):
            return scenarios
        keys = load_keys(net)
        nom = nominal_load(net)
        known = set(keys)
        n = len(scenarios)
        p = np.empty((n, len(keys)))
        q = np.empty((n, len(keys)))
        taps = np.array([[r.taps for r in net.regulators]] * n, dtype=int).reshape(n, len(net.regulators), 3)
        caps = np.array([[c.status for c in net.capacitors]] * n, dtype=bool).reshape(n, len(net.capacitors), 3)
        reg_idx = {(r.from_bus, r.to_bus): j for j, r in enumerate(net.regulators)}
        cap_idx = {c.bus: j for j, c in enumerate(net.capacitors)}
        for i, sc in enumerate(scenarios):
            extra = (set(sc.p_kw) | set(sc.q_kvar)) - known
            if extra:
                raise KeyError(f"scenario {i}: unknown load keys {sorted(extra)[:5]}")
            for k, key in enumerate(keys):
                p[i, k] = sc.p_kw.get(key, nom[key].real)
                q[i, k] = sc.q_kvar.get(key, nom[key].imag)
            for br, t in sc.taps.items():
                if br not in reg_idx:
                    raise KeyError(f"scenario {i}: no regulator on {br}")
                if any(abs(x) > 16 for x in t):
                    raise ValueError(f"scenario {i}: tap outside [-16, 16]")
                taps[i, reg_idx[br]] = t
            for bus, st in sc.cap_status.items():
                if bus not in cap_idx:
                    raise KeyError(f"scenario {i}: no capacitor at {bus}")
                caps[i, cap_idx[bus]] = st
        return cls(keys, p, q, taps, caps)

    @classmethod
    def nominal(cls, net: NetworkModel, n: int = 1, scale: float = 1.0) -> "ScenarioSet":
        keys = load_keys(net)
        nom = nominal_load(net)
        s = np.array([nom[k] for k in keys]) * scale
        return cls(keys, np.tile(s.real, (n, 1)), np.tile(s.imag, (n, 1)))


# -- compiled network ----------------------------------------------------------

@dataclass
class _Branch:
    f: int
    t: int
    kind: str  # "line" or "xfmr"
    mask: np.ndarray  # (3,) bool, phases carried
    z: np.ndarray  # series impedance pu (line) / leakage pu (xfmr, diag)
    yh: np.ndarray  # half shunt admittance pu
    reg: int = -1  # regulator index when the line carries one
    fwd_a: np.ndarray | None = None  # xfmr: V_t = fwd_a V_f - z I_t
    back_d: np.ndarray | None = None  # xfmr: I_f = back_d I_t


class Compiled:
    """Per-unit arrays derived from a NetworkModel, reused across solves."""

    def __init__(self, net: NetworkModel):
        self.net = net
        self.nb = len(net.buses)
        self.bidx = net.bus_index
        s1 = net.base_mva * 1000.0 / 3.0  # single-phase kVA base
        self.s1_kva = s1
        self.mask = np.zeros((self.nb, 3), dtype=bool)
        for b in net.buses:
            self.mask[self.bidx[b.id], phase_index(b.phases)] = True
        self.src = self.bidx[net.source.id]
        self.v_src = np.array([m * np.exp(1j * math.radians(a))
                               for m, a in zip(net.source_vmag, net.source_vang)]) * self.mask[self.src]
        line_of = {frozenset((ln.from_bus, ln.to_bus)): ln for ln in net.lines}
        xf_of = {frozenset((t.from_bus, t.to_bus)): t for t in net.transformers}
        reg_of = {frozenset((r.from_bus, r.to_bus)): j for j, r in enumerate(net.regulators)}
        self.branches: list[_Branch] = []
        self.branch_labels = list(net.branches)
        for f, t in net.branches:
            key = frozenset((f, t))
            mask = np.zeros(3, dtype=bool)
            mask[phase_index(net.branch_phases(f, t))] = True
            fi, ti = self.bidx[f], self.bidx[t]
            if key in line_of:
                ln = line_of[key]
                kv = net.bus(f).base_kv
                if not math.isclose(kv, net.bus(t).base_kv):
                    raise ValueError(f"line {f}-{t} joins different voltage bases")
                zb = kv * kv / net.base_mva
                self.branches.append(_Branch(fi, ti, "line", mask, ln.series_impedance / zb,
                                             ln.shunt_admittance * zb / 2.0, reg_of.get(key, -1)))
            else:
                tr = xf_of[key]
                bf, bt = net.bus(f).base_kv, net.bus(t).base_kv
                n = (tr.kv_high / bf) / (tr.kv_low / bt)
                zt = tr.z_pu * (net.base_mva * 1000.0 / tr.kva) * (tr.kv_low / bt) ** 2
                z = np.diag(np.where(mask, zt, 0.0)).astype(complex)
                if tr.conn_high == "delta":
                    fwd = np.array([[1, 0, -1], [-1, 1, 0], [0, -1, 1]], float) / (SQRT3 * n)
                    back = np.array([[1, -1, 0], [0, 1, -1], [-1, 0, 1]], float) / (SQRT3 * n)
                else:
                    fwd = np.diag(mask / n).astype(float)
                    back = np.diag(mask / n).astype(float)
                self.branches.append(_Branch(fi, ti, "xfmr", mask, z, np.zeros((3, 3), complex),
                                             fwd_a=fwd.astype(complex), back_d=back.astype(complex)))
        self.children = [[] for _ in range(self.nb)]
        self.parent_branch = np.full(self.nb, -1)
        for k, br in enumerate(self.branches):
            self.children[br.f].append(k)
            self.parent_branch[br.t] = k
        # load elements grouped by key
        self.keys = load_keys(net)
        kidx = {k: i for i, k in enumerate(self.keys)}
        nom = nominal_load(net)
        elems = []
        for ld in net.loads:
            for el in ld.elements():
                s = ld.nominal(el)
                if s == 0:
                    continue
                tot = nom[(ld.bus, el)]
                wp = s.real / tot.real if tot.real else 1.0 / _count(net, ld.bus, el)
                wq = s.imag / tot.imag if tot.imag else wp
                ph = phase_index(el)
                elems.append((self.bidx[ld.bus], ld.connection == "delta", ld.model,
                              ph[0], ph[1] if len(ph) > 1 else -1, kidx[(ld.bus, el)], wp, wq))
        self.elems = elems
        self.cap_bus = np.array([self.bidx[c.bus] for c in net.capacitors], dtype=int)
        self.cap_b = np.array([[k / s1 for k in c.kvar] for c in net.capacitors]).reshape(-1, 3)

    def reg_ratios(self, taps: np.ndarray) -> np.ndarray:
        """(S, R, 3) tap positions -> per-phase voltage ratios."""
        steps = np.array([r.step for r in self.net.regulators]).reshape(1, -1, 1)
        return 1.0 + steps * taps

    def load_power(self, sset: ScenarioSet) -> np.ndarray:
        """(S, E) complex per-unit power of each load element."""
        s = (sset.p_kw + 1j * sset.q_kvar) / self.s1_kva
        k = np.array([e[5] for e in self.elems], dtype=int)
        wp = np.array([e[6] for e in self.elems])
        wq = np.array([e[7] for e in self.elems])
        return s.real[:, k] * wp + 1j * s.imag[:, k] * wq


def _count(net, bus, el):
    return sum(1 for ld in net.loads if ld.bus == bus and el in ld.elements() and ld.nominal(el) != 0)




def compile_network(net: NetworkModel) -> Compiled:
    c = net._topology.get("compiled")
    if c is None:
        c = Compiled(net)
        net._topology["compiled"] = c
    return c


def _mv(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Row-wise 3x3 matrix-vector product with a fixed summation order."""
    return x[:, 0, None] * m[:, 0] + x[:, 1, None] * m[:, 1] + x[:, 2, None] * m[:, 2]


def load_currents(comp: Compiled, v: np.ndarray, s_elem: np.ndarray, cap_on: np.ndarray | None) -> np.ndarray:
    """Current drawn at every (bus, phase): loads plus capacitors, shape (S, nb, 3)."""
    out = np.zeros_like(v)
    for e, (b, delta, model, p, q, _k, _wp, _wq) in enumerate(comp.elems):
        s = s_elem[:, e]
        if delta:
            vv = v[:, b, p] - v[:, b, q]
            i = element_current(model, s, vv, SQRT3)
            out[:, b, p] += i
            out[:, b, q] -= i
        else:
            vv = v[:, b, p]
            out[:, b, p] += element_current(model, s, vv, 1.0)
    for j, b in enumerate(comp.cap_bus):
        bsh = comp.cap_b[j] if cap_on is None else comp.cap_b[j] * cap_on[:, j]
        out[:, b] += 1j * bsh * v[:, b]
    return out


def element_current(model: str, s: np.ndarray, v: np.ndarray, vnom: float) -> np.ndarray:
    """Current drawn by one load element with nominal power ``s`` at voltage ``v``."""
    if model == "PQ":
        return np.conj(s / v)
    if model == "I":
        return np.conj(s) / vnom * v / np.abs(v)
    return np.conj(s) / (vnom * vnom) * v


# -- results -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateVector:
    """Voltage magnitude (pu) and angle (deg) per (bus, phase) in canonical order."""

    labels: tuple[tuple[str, str], ...]
    vmag: np.ndarray
    vang: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.vmag, self.vang])

    @property
    def phasors(self) -> np.ndarray:
        return self.vmag * np.exp(1j * np.radians(self.vang))

    def __len__(self) -> int:
        return 2 * len(self.labels)


@dataclass(frozen=True, eq=False)
class BranchFlow:
    """Branch current phasors (pu): ``i_from`` leaves the upstream bus,
    ``i_to`` arrives at the downstream bus.  Absent phases are zero."""

    branches: tuple[tuple[str, str], ...]
    i_from: np.ndarray  # (n_branch, 3) complex
    i_to: np.ndarray

    def current(self, f: str, t: str, at: str | None = None) -> np.ndarray:
        """Current leaving bus ``at`` (default ``f``) into branch f-t, 3 phases."""
        at = f if at is None else at
        for k, (a, b) in enumerate(self.branches):
            if {a, b} == {f, t}:
                return self.i_from[k] if at == a else -self.i_to[k]
        raise KeyError(f"no branch {f}-{t}")


class BatchResult(Sequence[tuple[StateVector, BranchFlow]]):
    """Array view over the solutions of many scenarios of one network."""

    def __init__(self, net: NetworkModel, v, i_from, i_to, iterations, converged, deltas=None, taps=None):
        self.net = net
        self.v = v
        self.i_from = i_from
        self.i_to = i_to
        self.iterations = iterations
        self.converged = converged
        self.deltas = deltas
        self.taps = taps
        comp = compile_network(net)
        self._flat = np.flatnonzero(comp.mask.ravel())

    def __len__(self) -> int:
        return self.v.shape[0]

    @cached_property
    def phasors(self) -> np.ndarray:
        """(S, P) complex voltages in canonical (bus, phase) order."""
        return self.v.reshape(len(self), -1)[:, self._flat]

    @cached_property
    def vmag(self) -> np.ndarray:
        return np.abs(self.phasors)

    @cached_property
    def vang(self) -> np.ndarray:
        return np.degrees(np.angle(self.phasors))

    def states(self) -> np.ndarray:
        """(S, 2P) array: magnitudes then angles."""
        return np.hstack([self.vmag, self.vang])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(len(self))[i]]
        labels = tuple(self.net.phase_labels)
        sv = StateVector(labels, self.vmag[i].copy(), self.vang[i].copy())
        bf = BranchFlow(tuple(self.net.branches), self.i_from[i].copy(), self.i_to[i].copy())
        return sv, bf

    def __iter__(self) -> Iterator[tuple[StateVector, BranchFlow]]:
        for i in range(len(self)):
            yield self[i]


# -- the sweep -------------------------------------------------------------------

def _sweep(comp: Compiled, sset: ScenarioSet, opts: SolverOptions, taps: np.ndarray):
    S = len(sset)
    nb = comp.nb
    mask = comp.mask
    ratios = comp.reg_ratios(taps) if taps.size else np.zeros((S, 0, 3))
    s_elem = comp.load_power(sset)
    cap_on = None if sset.cap_status is None else sset.cap_status.astype(float)
    nbr = len(comp.branches)

    # flat start: source magnitudes with nominal phase angles, through transformer shifts
    v = np.zeros((S, nb, 3), dtype=complex)
    v[:, comp.src] = comp.v_src
    for br in comp.branches:
        if br.kind == "line":
            a = ratios[:, br.reg] if br.reg >= 0 else 1.0
            v[:, br.t] = a * v[:, br.f] * br.mask
        else:
            v[:, br.t] = _mv(br.fwd_a, v[:, br.f]) * br.mask
        v[:, br.t] *= mask[br.t]

    i_from = np.zeros((S, nbr, 3), dtype=complex)
    i_to = np.zeros((S, nbr, 3), dtype=complex)
    i_ser = np.zeros((S, nbr, 3), dtype=complex)
    active = np.ones(S, dtype=bool)
    iterations = np.zeros(S, dtype=int)
    deltas: list[np.ndarray] = []
    for it in range(1, opts.max_iterations + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        va = v[idx]
        ra = ratios[idx]
        iload = load_currents(comp, va, s_elem[idx], None if cap_on is None else cap_on[idx])
        ia_to = np.zeros((idx.size, nbr, 3), dtype=complex)
        ia_from = np.zeros_like(ia_to)
        ia_ser = np.zeros_like(ia_to)
        for k in range(nbr - 1, -1, -1):
            br = comp.branches[k]
            cur = iload[:, br.t].copy()
            for c in comp.children[br.t]:
                cur += ia_from[:, c]
            cur *= br.mask
            ia_to[:, k] = cur
            if br.kind == "line":
                a = ra[:, br.reg] if br.reg >= 0 else 1.0
                vf = a * va[:, br.f]
                ser = cur + _mv(br.yh, va[:, br.t])
                ia_ser[:, k] = ser
                ia_from[:, k] = a * (ser + _mv(br.yh, vf)) * br.mask
            else:
                ia_ser[:, k] = cur
                ia_from[:, k] = _mv(br.back_d, cur) * mask[br.f]
        vn = va.copy()
        for k, br in enumerate(comp.branches):
            if br.kind == "line":
                a = ra[:, br.reg] if br.reg >= 0 else 1.0
                vt = a * vn[:, br.f] - _mv(br.z, ia_ser[:, k])
            else:
                vt = _mv(br.fwd_a, vn[:, br.f]) - _mv(br.z, ia_ser[:, k])
            vn[:, br.t] = vt * mask[br.t]
        delta = np.abs(vn - va).reshape(idx.size, -1).max(axis=1)
        v[idx] = vn
        i_from[idx] = ia_from
        i_to[idx] = ia_to
        i_ser[idx] = ia_ser
        iterations[idx] = it
        d_full = np.full(S, np.nan)
        d_full[idx] = delta
        deltas.append(d_full)
        done = delta < opts.tolerance
        active[idx[done]] = False
    return v, i_from, i_to, iterations, ~active, np.array(deltas)


def _run(net: NetworkModel, sset: ScenarioSet, opts: SolverOptions) -> tuple[BatchResult, dict[int, str]]:
    comp = compile_network(net)
    if list(sset.keys) != comp.keys:
        raise KeyError("scenario keys do not match the network's load keys")
    S = len(sset)
    taps = sset.taps if sset.taps is not None else np.tile(
        np.array([r.taps for r in net.regulators], dtype=int).reshape(1, -1, 3), (S, 1, 1))
    taps = taps.copy()
    rounds = opts.max_tap_rounds if opts.regulate else 1
    for _ in range(rounds):
        v, i_from, i_to, iters, conv, deltas = _sweep(comp, sset, opts, taps)
        if not opts.regulate:
            break
        changed = _adjust_taps(comp, v, taps)
        if not changed.any():
            break
    res = BatchResult(net, v, i_from, i_to, iters, conv, deltas, taps)
    failures: dict[int, str] = {}
    low = np.where(comp.mask[None], np.abs(v), np.inf).reshape(S, -1).min(axis=1)
    for i in range(S):
        if not np.all(np.isfinite(v[i])):
            failures[i] = "non-finite voltage"
        elif low[i] < opts.collapse_pu:
            failures[i] = f"voltage collapse (min |V| = {low[i]:.3f} pu)"
        elif not conv[i]:
            failures[i] = f"no convergence after {opts.max_iterations} iterations"
    return res, failures


def _adjust_taps(comp: Compiled, v: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Move regulator taps toward their set point; returns per-scenario change flags."""
    changed = np.zeros(v.shape[0], dtype=bool)
    bidx = comp.bidx
    for j, rg in enumerate(comp.net.regulators):
        if rg.vreg_pu is None:
            continue
        vout = np.abs(v[:, bidx[rg.to_bus]])
        err = rg.vreg_pu - vout
        off = (np.abs(err) > rg.band_pu / 2) & comp.mask[bidx[rg.to_bus]]
        step = np.rint(err / rg.step).astype(int)
        new = np.clip(taps[:, j] + np.where(off, step, 0), -16, 16)
        changed |= np.any(new != taps[:, j], axis=1)
        taps[:, j] = new
    return changed


def solve(net: NetworkModel, scenario: LoadScenario | None = None,
          opts: SolverOptions | None = None) -> tuple[StateVector, BranchFlow]:
    """Solve one scenario; raises on divergence."""
    opts = opts or SolverOptions()
    sset = ScenarioSet.from_scenarios(net, [scenario or LoadScenario()])
    res, failures = _run(net, sset, opts)
    if failures:
        msg = failures[0]
        if "collapse" in msg:
            raise VoltageCollapseError(msg)
        if "convergence" in msg:
            raise NonConvergenceError(msg)
        raise PowerFlowError(msg)
    return res[0]


def batch_solve(net: NetworkModel, scenarios: Sequence[LoadScenario] | ScenarioSet,
                opts: SolverOptions | None = None) -> BatchResult:
    """Solve many scenarios; output order follows input order."""
    opts = opts or SolverOptions()
    if len(scenarios) == 0:
        comp = compile_network(net)
        z = np.zeros((0, comp.nb, 3), complex)
        zb = np.zeros((0, len(comp.branches), 3), complex)
        return BatchResult(net, z, zb, zb.copy(), np.zeros(0, int), np.zeros(0, bool))
    sset = ScenarioSet.from_scenarios(net, scenarios)
    res, failures = _run(net, sset, opts)
    if failures:
        raise BatchSolveError(failures, res)
    return res


# -- verification helpers --------------------------------------------------------

def branch_blocks(net: NetworkModel, taps: np.ndarray | None = None) -> list[tuple[np.ndarray, ...]]:
    """Per-branch admittance blocks (Yff, Yft, Ytf, Ytt), 3x3 pu, such that the
    currents leaving the two end buses into the branch are
    ``I_f = Yff V_f + Yft V_t`` and ``I_t = Ytf V_f + Ytt V_t``."""
    comp = compile_network(net)
    if taps is None:
        taps = np.array([r.taps for r in net.regulators], dtype=int).reshape(-1, 3)
    ratios = comp.reg_ratios(taps[None])[0] if taps.size else np.zeros((0, 3))
    out = []
    for br in comp.branches:
        idx = np.flatnonzero(br.mask)
        zinv = np.zeros((3, 3), complex)
        zinv[np.ix_(idx, idx)] = np.linalg.inv(br.z[np.ix_(idx, idx)])
        if br.kind == "line":
            a = np.diag(ratios[br.reg] * br.mask if br.reg >= 0 else br.mask.astype(float))
            ys, yh = zinv, br.yh
            out.append((a @ (ys + yh) @ a, -a @ ys, -ys @ a, ys + yh))
        else:
            at, d = br.fwd_a, br.back_d
            out.append((d @ zinv @ at, -d @ zinv, -zinv @ at, zinv))
    return out


def power_mismatch(net: NetworkModel, state_v: np.ndarray, scenario: ScenarioSet, index: int = 0) -> np.ndarray:
    """Complex power mismatch (pu) at every (bus, phase) for one solved scenario.

    Branch currents are recomputed from the voltages by Ohm's law, so this is
    independent of the sweep's own bookkeeping.  ``state_v`` is (nb, 3).
    The source bus row is set to zero.
    """
    comp = compile_network(net)
    taps = scenario.taps[index] if scenario.taps is not None else None
    blocks = branch_blocks(net, taps)
    inj = np.zeros((comp.nb, 3), complex)
    for br, (yff, yft, ytf, ytt) in zip(comp.branches, blocks):
        inj[br.f] += yff @ state_v[br.f] + yft @ state_v[br.t]
        inj[br.t] += ytf @ state_v[br.f] + ytt @ state_v[br.t]
    s_elem = comp.load_power(scenario.subset([index]))
    caps = None if scenario.cap_status is None else scenario.cap_status[[index]].astype(float)
    iload = load_currents(comp, state_v[None], s_elem, caps)[0]
    mism = state_v * np.conj(inj + iload)
    mism[comp.src] = 0
    return np.where(comp.mask, mism, 0)


def angle_detrend(labels: Sequence[tuple[str, str]]) -> np.ndarray:
    """Nominal phase angle (0, -120, +120 deg) for each (bus, phase) label."""
    return np.array([NOMINAL_ANGLES[PHASES.index(p)] for _, p in labels])


def write_state_table(path, labels: Sequence[tuple[str, str]], vmag: np.ndarray, vang: np.ndarray,
                      scenario_ids=None) -> None:
    """States (or estimates) as ``scenario_id, bus, phase, vmag_pu, vang_deg`` rows."""
    vmag, vang = np.atleast_2d(vmag), np.atleast_2d(vang)
    ids = range(len(vmag)) if scenario_ids is None else scenario_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "bus", "phase", "vmag_pu", "vang_deg"])
        for s, sid in enumerate(ids):
            for k, (b, p) in enumerate(labels):
                w.writerow([sid, b, p, repr(float(vmag[s, k])), repr(float(vang[s, k]))])


def write_states_csv(path, net: NetworkModel, res: BatchResult, scenario_ids=None) -> None:
    write_state_table(path, net.phase_labels, res.vmag, res.vang, scenario_ids)


def write_flows_csv(path, net: NetworkModel, res: BatchResult, scenario_ids=None) -> None:
    ids = range(len(res)) if scenario_ids is None else scenario_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "from", "to", "phase", "imag_pu", "iang_deg"])
        for s, sid in enumerate(ids):
            for k, (f, t) in enumerate(net.branches):
                for j, p in enumerate(net.branch_phases(f, t)):
                    c = res.i_from[s, k, PHASES.index(p)]
                    w.writerow([sid, f, t, p, repr(float(abs(c))), repr(float(np.degrees(np.angle(c))))])


def read_states_csv(path, net: NetworkModel) -> tuple[list, np.ndarray, np.ndarray]:
    """Returns (scenario ids, vmag (S, P), vang (S, P)) in canonical order."""
    pos = {lab: k for k, lab in enumerate(net.phase_labels)}
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(r["scenario_id"], {})[(r["bus"], r["phase"])] = (float(r["vmag_pu"]), float(r["vang_deg"]))
    ids = list(rows)
    vm = np.full((len(ids), len(pos)), np.nan)
    va = np.full_like(vm, np.nan)
    for s, sid in enumerate(ids):
        for lab, (m, a) in rows[sid].items():
            if lab in pos:
                vm[s, pos[lab]] = m
                va[s, pos[lab]] = a
    if np.isnan(vm).any():
        raise ValueError(f"{path}: states file does not cover every (bus, phase) of the network")
    return ids, vm, va
