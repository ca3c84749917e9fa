"""Data-driven SMD placement.

Spearman rank correlation of per-bus voltage features over many load
scenarios groups buses whose states move together.  One SMD goes in each
group, at the candidate site that observes the most phase voltages (POI).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .netmodel import NetworkModel, zero_injection_phases
from .smdsim import SmdPlacement, SmdSite

Label = tuple[str, str]


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    labels: tuple[Label, ...]
    rho: np.ndarray  # NaN rows/cols for undefined (constant) features

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(np.diag(self.rho))


def spearman_matrix(data: np.ndarray, labels: Sequence[Label]) -> CorrelationMatrix:
    """Pairwise Spearman coefficients of the columns of ``data`` (S, F).

    Ties get average ranks.  Constant columns have no defined coefficient and
    come back as NaN.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(labels):
        raise ValueError("data must be (scenarios, features) matching labels")
    if data.shape[0] < 3:
        raise ValueError("need at least 3 scenarios")
    r = rankdata(data, axis=0)
    r -= r.mean(axis=0)
    norm = np.sqrt((r * r).sum(axis=0))
    const = norm == 0
    if const.any():
        bad = [f"{b}.{p}" for (b, p), c in zip(labels, const) if c]
        warnings.warn(f"constant features excluded: {', '.join(bad)}", stacklevel=2)
    norm[const] = 1.0
    r /= norm
    rho = r.T @ r
    rho = np.clip((rho + rho.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    rho[const, :] = np.nan
    rho[:, const] = np.nan
    return CorrelationMatrix(tuple(labels), rho)


def state_features(net: NetworkModel, values: np.ndarray, phases: str = "A") -> tuple[list[Label], np.ndarray]:
    """Columns of a canonical (S, P) state block (angles or magnitudes) for the given phases."""
    labs = net.phase_labels
    keep = [i for i, (_, p) in enumerate(labs) if p in phases]
    return [labs[i] for i in keep], np.asarray(values)[:, keep]


def cluster_features(corr: CorrelationMatrix | np.ndarray, threshold: float = 0.9) -> list[list[int]]:
    """Average-linkage agglomeration on 1 - |rho|, stopped once the closest
    pair of clusters is farther apart than 1 - threshold.

    Undefined features are left out.  Clusters come back as sorted index
    lists, ordered by their smallest index.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    rho = corr.rho if isinstance(corr, CorrelationMatrix) else np.asarray(corr, dtype=float)
    idx = [i for i in range(rho.shape[0]) if not np.isnan(rho[i, i])]
    if not idx:
        return []
    d = 1.0 - np.abs(rho[np.ix_(idx, idx)])
    clusters = [[i] for i in idx]
    # sums of pairwise distances between clusters
    tot = d.copy()
    size = np.ones(len(idx))
    alive = list(range(len(idx)))
    cut = 1.0 - threshold
    while len(alive) > 1:
        best, pair = np.inf, None
        for a_pos, a in enumerate(alive):
            for b in alive[a_pos + 1:]:
                dist = tot[a, b] / (size[a] * size[b])
                if dist < best - 1e-15:
                    best, pair = dist, (a, b)
        if best > cut + 1e-12:
            break
        a, b = pair
        tot[a, :] += tot[b, :]
        tot[:, a] += tot[:, b]
        size[a] += size[b]
        clusters[a] += clusters[b]
        alive.remove(b)
    out = [sorted(clusters[a]) for a in alive]
    return sorted(out, key=lambda c: c[0])


# -- observability index ---------------------------------------------------------

def candidate_sites(net: NetworkModel, upstream_only: bool = True) -> list[SmdSite]:
    sites = [SmdSite(f, (f, t)) for f, t in net.branches]
    if not upstream_only:
        sites += [SmdSite(t, (f, t)) for f, t in net.branches]
    return sorted(sites, key=lambda s: (s.bus, s.far_bus))


def observed_phases(net: NetworkModel, site: SmdSite, use_zip: bool = True) -> set[Label]:
    """Phase voltages recoverable from one SMD.

    The metered bus is observed directly.  The far end of the metered branch
    follows from Ohm's law.  With ``use_zip``, Kirchhoff's current law at
    zero-injection phases yields the current of the last unknown branch on
    that phase.  Once every phase of a branch carries a known current, its
    far end becomes observable, and so on.  Branches with both ends fully
    observed have known currents.
    """
    if site.branch is None:
        return {(site.bus, p) for p in net.bus(site.bus).phases}
    f, t = site.branch
    if site.bus not in (f, t):
        raise ValueError(f"branch {f}-{t} is not incident to {site.bus}")
    if (f, t) not in net.branches and (t, f) not in net.branches:
        raise KeyError(f"no branch {f}-{t}")
    zip_set = zero_injection_phases(net) if use_zip else set()
    bph = {b.id: set(b.phases) for b in net.buses}
    branches = [(a, b, set(net.branch_phases(a, b))) for a, b in net.branches]
    inc: dict[str, list[int]] = {b: [] for b in bph}
    for k, (a, b, _) in enumerate(branches):
        inc[a].append(k)
        inc[b].append(k)
    v: set[Label] = {(site.bus, p) for p in bph[site.bus]}
    cur: set[tuple[int, str]] = set()
    k0 = next(k for k, (a, b, _) in enumerate(branches) if {a, b} == {f, t})
    cur |= {(k0, p) for p in branches[k0][2]}

    def full(bus, phs):
        return all((bus, p) in v for p in phs)

    changed = True
    while changed:
        changed = False
        for k, (a, b, phs) in enumerate(branches):
            known_i = all((k, p) in cur for p in phs)
            if not known_i and full(a, phs) and full(b, phs):
                cur |= {(k, p) for p in phs}
                known_i = changed = True
            if known_i:
                for near, far in ((a, b), (b, a)):
                    if full(near, phs) and not full(far, phs):
                        v |= {(far, p) for p in phs}
                        changed = True
        for bus, p in zip_set:
            if not full(bus, bph[bus]):
                continue
            unknown = [k for k in inc[bus] if p in branches[k][2] and (k, p) not in cur]
            if len(unknown) == 1:
                cur.add((unknown[0], p))
                changed = True
    return v


def poi(net: NetworkModel, site: SmdSite, use_zip: bool = True) -> int:
    """Phase observability index: number of phase voltages observed from ``site``."""
    return len(observed_phases(net, site, use_zip))


# -- recommendation -------------------------------------------------------------

@dataclass
class PlacementPlan:
    threshold: float
    labels: list[Label]
    clusters: list[list[Label]]
    excluded: list[Label]
    poi: dict[str, int]
    placement: SmdPlacement
    cross_check: dict[str, list[list[str]]] = field(default_factory=dict)

    def cluster_of(self, bus: str) -> int | None:
        for i, c in enumerate(self.clusters):
            if any(b == bus for b, _ in c):
                return i
        return None

    def to_dict(self) -> dict:
        doc = self.placement.to_dict()
        doc.update({
            "threshold": self.threshold,
            "clusters": [[f"{b}.{p}" for b, p in c] for c in self.clusters],
            "excluded": [f"{b}.{p}" for b, p in self.excluded],
            "poi": self.poi,
            "cross_check": self.cross_check,
        })
        return doc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _bus_partition(clusters: list[list[Label]]) -> list[list[str]]:
    return sorted(sorted({b for b, _ in c}) for c in clusters)


def recommend_placement(net: NetworkModel, vang: np.ndarray, threshold: float = 0.9,
                        k: int | None = None, use_zip: bool = True, cross_check: bool = True) -> PlacementPlan:
    """Cluster phase-A angle features of the (S, P) canonical angle block
    ``vang`` and pick the highest-POI site in each cluster.

    Sites are metered at the upstream end of a branch.  Ties go to the
    lexicographically smallest (bus, far bus).  When ``k`` exceeds the
    cluster count, the extra sites are the best remaining POI sites overall;
    when it is smaller, the largest clusters are served first.
    """
    vang = np.asarray(vang)
    if vang.ndim != 2 or vang.shape[0] == 0:
        raise ValueError("need a non-empty (scenarios, phases) angle block")
    if len(net.buses) == 1:
        b = net.buses[0]
        labs = [(b.id, p) for p in b.phases]
        return PlacementPlan(threshold, labs, [labs], [], {b.id: len(b.phases)},
                             SmdPlacement((SmdSite(b.id, None),)))
    labels, data = state_features(net, vang, "A")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        corr = spearman_matrix(data, labels)
    for w in caught:
        warnings.warn(str(w.message), stacklevel=2)
    idx_clusters = cluster_features(corr, threshold)
    clusters = [[labels[i] for i in c] for c in idx_clusters]
    excluded = [labels[i] for i in range(len(labels)) if not corr.defined[i]]

    cands = candidate_sites(net)
    scores = {s.label: poi(net, s, use_zip) for s in cands}
    rank = sorted(cands, key=lambda s: (-scores[s.label], s.bus, s.far_bus))

    order = sorted(range(len(clusters)), key=lambda i: (-len(clusters[i]), i))
    n_sites = len(clusters) if k is None else k
    chosen: list[SmdSite] = []
    for ci in order[:n_sites]:
        buses = {b for b, _ in clusters[ci]}
        pick = next((s for s in rank if s.bus in buses and s not in chosen), None)
        if pick is None:
            # leaf-only cluster: meter the bus on its upstream branch instead
            alt = sorted((SmdSite(t, (f, t)) for f, t in net.branches if t in buses),
                         key=lambda s: (-poi(net, s, use_zip), s.bus, s.far_bus))
            if not alt:
                raise ValueError(f"cluster {ci} has no candidate site")
            pick = alt[0]
            scores[pick.label] = poi(net, pick, use_zip)
        chosen.append(pick)
    for s in rank:
        if len(chosen) >= n_sites:
            break
        if s not in chosen:
            chosen.append(s)

    checks = {}
    if cross_check:
        ref = _bus_partition(clusters)
        for ph in "BC":
            lab_p, dat_p = state_features(net, vang, ph)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cp = spearman_matrix(dat_p, lab_p)
            part = _bus_partition([[lab_p[i] for i in c] for c in cluster_features(cp, threshold)])
            # compare on buses that carry phase A as well
            common = {b for b, _ in lab_p} & {b for b, _ in labels}
            a_part = [[b for b in c if b in common] for c in ref]
            p_part = [[b for b in c if b in common] for c in part]
            if sorted(c for c in a_part if c) != sorted(c for c in p_part if c):
                checks[ph] = part
        if checks:
            warnings.warn(f"phase-A clusters differ from phases {', '.join(checks)}", stacklevel=2)
    return PlacementPlan(threshold, list(labels), clusters, excluded, scores, SmdPlacement(tuple(chosen)), checks)


# -- heatmap ---------------------------------------------------------------------

def _color(r: float) -> str:
    if np.isnan(r):
        return "#cccccc"
    r = float(np.clip(r, -1, 1))
    if r >= 0:
        c = int(round(255 * (1 - r)))
        return f"#ff{c:02x}{c:02x}"
    c = int(round(255 * (1 + r)))
    return f"#{c:02x}{c:02x}ff"


def heatmap_svg(corr: CorrelationMatrix, cell: int = 14, title: str = "") -> str:
    n = len(corr.labels)
    pad = 60
    size = pad + n * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 80}" height="{size + 20}" '
           f'font-family="sans-serif" font-size="{max(cell - 5, 6)}">']
    if title:
        out.append(f'<text x="{pad}" y="12">{title}</text>')
    for i, (b, p) in enumerate(corr.labels):
        y = pad + i * cell + cell * 0.75
        out.append(f'<text x="{pad - 4}" y="{y:.1f}" text-anchor="end">{b}{p}</text>')
        x = pad + i * cell + cell * 0.75
        out.append(f'<text x="{x:.1f}" y="{pad - 4}" transform="rotate(-90 {x:.1f} {pad - 4})">{b}{p}</text>')
    for i in range(n):
        for j in range(n):
            out.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="{_color(corr.rho[i, j])}"/>')
    # colour bar
    x0 = pad + n * cell + 20
    for k in range(21):
        r = 1 - k / 10
        out.append(f'<rect x="{x0}" y="{pad + k * cell * n / 21:.1f}" width="12" height="{cell * n / 21 + 0.5:.1f}" '
                   f'fill="{_color(r)}"/>')
    out.append(f'<text x="{x0 + 16}" y="{pad + 8}">1</text>')
    out.append(f'<text x="{x0 + 16}" y="{pad + n * cell}">-1</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
