"""Synchrophasor measurement device (SMD) channels and their error model.

An SMD site meters the voltage phasors of one bus and the current phasors of
one branch leaving that bus.  Readings pass through two error levels:

1. instrumentation channel: a truncated three-component Gaussian mixture on
   each magnitude (relative) and angle (degrees);
2. device accuracy: Gaussian noise on the rectangular components, sized from
   the total vector error (TVE) limit.
"""
from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .loadgen import substream
from .netmodel import PHASES, NetworkModel
from .powerflow import BatchResult, BranchFlow, StateVector, compile_network

# 99.7 % quantile of the Rayleigh distribution in units of sigma
RAYLEIGH_997 = math.sqrt(-2.0 * math.log(1.0 - 0.997))


@dataclass(frozen=True)
class SmdSite:
    """Metered bus plus the incident branch whose currents are read.
    ``branch=None`` gives a voltage-only device."""

    bus: str
    branch: tuple[str, str] | None

    @property
    def far_bus(self) -> str:
        if self.branch is None:
            return ""
        a, b = self.branch
        return b if a == self.bus else a

    @property
    def label(self) -> str:
        return self.bus if self.branch is None else f"{self.bus}-{self.far_bus}"


@dataclass(frozen=True)
class Channel:
    site: int
    kind: str  # "V" or "I"
    phase: str


@dataclass(frozen=True)
class SmdPlacement:
    sites: tuple[SmdSite, ...]

    def __post_init__(self):
        if len(set(self.sites)) != len(self.sites):
            raise ValueError("placement sites must be distinct")
        for s in self.sites:
            if s.branch is not None and s.bus not in s.branch:
                raise ValueError(f"site {s}: branch not incident to metered bus")

    @classmethod
    def parse(cls, labels: Sequence[str]) -> "SmdPlacement":
        """From labels like ``"808-812"`` (metered bus first)."""
        sites = []
        for lab in labels:
            if "-" in lab:
                a, b = lab.split("-")
                sites.append(SmdSite(a, (a, b)))
            else:
                sites.append(SmdSite(lab, None))
        return cls(tuple(sites))

    def channels(self, net: NetworkModel) -> list[Channel]:
        out = []
        for k, s in enumerate(self.sites):
            if s.bus not in net.bus_index:
                raise KeyError(f"site {s.label}: unknown bus {s.bus}")
            out += [Channel(k, "V", p) for p in net.bus(s.bus).phases]
            if s.branch is None:
                continue
            f, t = s.branch
            if (f, t) not in net.branches and (t, f) not in net.branches:
                raise KeyError(f"site {s.label}: no branch {f}-{t}")
            out += [Channel(k, "I", p) for p in net.branch_phases(f, t)]
        return out

    def to_dict(self) -> dict:
        return {"sites": [{"bus": s.bus, "branch": None if s.branch is None else list(s.branch)}
                          for s in self.sites]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SmdPlacement":
        return cls(tuple(SmdSite(s["bus"], None if s.get("branch") is None else tuple(s["branch"]))
                         for s in doc["sites"]))

    def __len__(self) -> int:
        return len(self.sites)


@dataclass(frozen=True, eq=False)
class Measurements:
    """Phasor readings for S scenarios: ``mag`` (pu) and ``ang`` (deg), shape (S, C)."""

    channels: tuple[Channel, ...]
    mag: np.ndarray
    ang: np.ndarray
    flagged: np.ndarray | None = None  # zero-magnitude phasors that skipped TVE noise
    site_labels: tuple[str, ...] | None = None  # keys the per-site noise streams

    def features(self) -> np.ndarray:
        """(S, 2C): magnitude and angle of each channel, interleaved."""
        out = np.empty((self.mag.shape[0], 2 * self.mag.shape[1]))
        out[:, 0::2] = self.mag
        out[:, 1::2] = self.ang
        return out

    @property
    def phasors(self) -> np.ndarray:
        return self.mag * np.exp(1j * np.radians(self.ang))

    def __len__(self) -> int:
        return self.mag.shape[0]

    def replace(self, mag=None, ang=None, flagged=None) -> "Measurements":
        return Measurements(self.channels, self.mag if mag is None else mag,
                            self.ang if ang is None else ang, flagged, self.site_labels)


# -- true channels -------------------------------------------------------------

def _arrays(net: NetworkModel, result) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(result, BatchResult):
        return result.v, result.i_from, result.i_to
    sv, bf = result
    if not isinstance(sv, StateVector) or not isinstance(bf, BranchFlow):
        raise TypeError("expected a BatchResult or a (StateVector, BranchFlow) pair")
    comp = compile_network(net)
    v = np.zeros((1, comp.nb, 3), complex)
    for (b, p), ph in zip(sv.labels, sv.phasors):
        v[0, comp.bidx[b], PHASES.index(p)] = ph
    return v, bf.i_from[None], bf.i_to[None]


def extract_true_channels(net: NetworkModel, result, placement: SmdPlacement) -> Measurements:
    """Exact phasors seen by the placement, for a batch or a single solution."""
    v, i_from, i_to = _arrays(net, result)
    comp = compile_network(net)
    br_index = {br: k for k, br in enumerate(net.branches)}
    chans = placement.channels(net)
    cols = []
    for ch in chans:
        s = placement.sites[ch.site]
        j = PHASES.index(ch.phase)
        if ch.kind == "V":
            cols.append(v[:, comp.bidx[s.bus], j])
        else:
            f, t = s.branch
            if (f, t) in br_index:
                k = br_index[(f, t)]
                up = f
            else:
                k = br_index[(t, f)]
                up = t
            cols.append(i_from[:, k, j] if s.bus == up else -i_to[:, k, j])
    ph = np.stack(cols, axis=1) if cols else np.zeros((v.shape[0], 0), complex)
    return Measurements(tuple(chans), np.abs(ph), np.degrees(np.angle(ph)),
                        site_labels=tuple(s.label for s in placement.sites))


# -- level 1: instrumentation channel mixture -------------------------------------

@dataclass(frozen=True)
class Mixture:
    """Three-component Gaussian mixture truncated to [-bound, bound]."""

    weights: tuple[float, float, float]
    means: tuple[float, float, float]
    stds: tuple[float, float, float]
    bound: float

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.means) != 3 or len(self.stds) != 3:
            raise ValueError("mixture needs exactly 3 components")
        if any(w <= 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0, abs_tol=1e-9):
            raise ValueError("mixture weights must be positive and sum to 1")
        if any(s < 0 for s in self.stds) or self.bound < 0:
            raise ValueError("stds and bound must be non-negative")
        for m, s in zip(self.means, self.stds):
            if s == 0 and abs(m) > self.bound:
                raise ValueError("a zero-width component lies outside the truncation bound")

    @classmethod
    def default(cls, bound: float) -> "Mixture":
        return cls((0.3, 0.4, 0.3), (-bound / 2, 0.0, bound / 2), (bound / 6,) * 3, bound)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        w = np.cumsum(self.weights)
        mu = np.asarray(self.means)
        sd = np.asarray(self.stds)

        def draw(n):
            comp = np.minimum(np.searchsorted(w, rng.random(n), side="right"), 2)
            return mu[comp] + sd[comp] * rng.standard_normal(n)

        n = int(np.prod(size))
        out = draw(n)
        bad = np.abs(out) > self.bound
        while bad.any():
            out[bad] = draw(int(bad.sum()))
            bad = np.abs(out) > self.bound
        return out.reshape(size)

    @property
    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "means": list(self.means), "stds": list(self.stds),
                "bound": self.bound}


@dataclass(frozen=True)
class GmmErrorModel:
    """Independent mixtures for V magnitude (fraction), V angle (deg),
    I magnitude (fraction) and I angle (deg)."""

    vmag: Mixture = field(default_factory=lambda: Mixture.default(0.012))
    vang: Mixture = field(default_factory=lambda: Mixture.default(1.0))
    imag: Mixture = field(default_factory=lambda: Mixture.default(0.024))
    iang: Mixture = field(default_factory=lambda: Mixture.default(2.0))

    @classmethod
    def zero(cls) -> "GmmErrorModel":
        z = Mixture((0.3, 0.4, 0.3), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 0.0)
        return cls(z, z, z, z)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in ("vmag", "vang", "imag", "iang")}

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmErrorModel":
        kw = {}
        for k in ("vmag", "vang", "imag", "iang"):
            if k in doc:
                d = doc[k]
                kw[k] = Mixture(tuple(d["weights"]), tuple(d["means"]), tuple(d["stds"]), float(d["bound"]))
        return cls(**kw)


def _site_key(z: Measurements, k: int) -> int:
    if z.site_labels is None:
        return k
    return zlib.crc32(z.site_labels[k].encode())


class _Streams:
    """One generator per (scenario, site), so a site's noise does not depend
    on which other sites share the placement."""

    def __init__(self, z: Measurements, seed, indices):
        idx = list(range(len(z))) if indices is None else list(indices)
        if len(idx) != len(z):
            raise ValueError("indices must match the number of scenarios")
        sites = sorted({c.site for c in z.channels})
        self.cols = {k: np.array([i for i, c in enumerate(z.channels) if c.site == k]) for k in sites}
        self.rngs = [{k: substream(seed, "noise", i, _site_key(z, k)) for k in sites} for i in idx]


def _gmm_level(z: Measurements, gmm: GmmErrorModel, streams: _Streams) -> Measurements:
    is_v = np.array([c.kind == "V" for c in z.channels], dtype=bool)
    mag = z.mag.copy()
    ang = z.ang.copy()
    for s, rngs in enumerate(streams.rngs):
        for k, cols in streams.cols.items():
            rng = rngs[k]
            v, i = cols[is_v[cols]], cols[~is_v[cols]]
            em_v, em_i = gmm.vmag.sample(rng, len(v)), gmm.imag.sample(rng, len(i))
            ea_v, ea_i = gmm.vang.sample(rng, len(v)), gmm.iang.sample(rng, len(i))
            mag[s, v] *= 1.0 + em_v
            mag[s, i] *= 1.0 + em_i
            ang[s, v] += ea_v
            ang[s, i] += ea_i
    return z.replace(mag, ang, z.flagged)


def apply_instrumentation_error(z: Measurements, gmm: GmmErrorModel, seed: int = 0,
                                indices: Sequence[int] | None = None) -> Measurements:
    """Scale magnitudes by (1 + e) and shift angles by e, e drawn per channel
    from the matching mixture.  Scenario ``s`` and site ``k`` draw from
    substream (seed, "noise", indices[s], key of k); indices default to 0..S-1."""
    return _gmm_level(z, gmm, _Streams(z, seed, indices))


# -- level 2: total vector error ----------------------------------------------------

@dataclass(frozen=True)
class TveModel:
    """Gaussian noise on the rectangular components of each phasor.

    ``sigma_rule="radial"`` (default) sizes the per-component std so that
    99.7 % of readings have TVE below ``tve_limit``; ``"component"`` uses
    ``tve_limit / 3`` per component.
    """

    tve_limit: float = 0.01
    sigma_rule: str = "radial"

    def __post_init__(self):
        if self.tve_limit < 0:
            raise ValueError("tve_limit must be non-negative")
        if self.sigma_rule not in ("radial", "component"):
            raise ValueError(f"unknown sigma rule {self.sigma_rule!r}")

    @property
    def sigma_factor(self) -> float:
        """Per-component std per unit phasor magnitude."""
        return self.tve_limit / (RAYLEIGH_997 if self.sigma_rule == "radial" else 3.0)

    def to_dict(self) -> dict:
        return {"tve_limit": self.tve_limit, "sigma_rule": self.sigma_rule}


def tve(true, measured) -> np.ndarray:
    """Total vector error |X_meas - X_true| / |X_true|."""
    true = np.asarray(true, dtype=complex)
    return np.abs(np.asarray(measured, dtype=complex) - true) / np.abs(true)


def _tve_level(z: Measurements, model: TveModel, streams: _Streams) -> Measurements:
    k = model.sigma_factor
    zero = z.mag == 0
    if not k:
        return z.replace(flagged=zero)
    ph = z.phasors
    out = ph.copy()
    for s, rngs in enumerate(streams.rngs):
        for site, cols in streams.cols.items():
            rng = rngs[site]
            noise = rng.standard_normal(len(cols)) + 1j * rng.standard_normal(len(cols))
            out[s, cols] = ph[s, cols] + k * np.abs(ph[s, cols]) * noise
    out = np.where(zero, ph, out)
    return z.replace(np.abs(out), np.where(zero, z.ang, np.degrees(np.angle(out))), zero)


def apply_tve(z: Measurements, model: TveModel, seed: int = 0,
              indices: Sequence[int] | None = None) -> Measurements:
    """Rectangular Gaussian noise with std ``model.sigma_factor * |X|`` per
    component.  Zero phasors are left untouched and reported in ``flagged``."""
    return _tve_level(z, model, _Streams(z, seed, indices))


def measure(net: NetworkModel, result, placement: SmdPlacement, gmm: GmmErrorModel | None,
            tve_model: TveModel, seed: int = 0, indices: Sequence[int] | None = None) -> Measurements:
    """Exact channels, then the mixture level (skipped when ``gmm`` is None),
    then the TVE level.  Each (scenario, site) draws both levels, in that
    order, from one generator seeded by (seed, "noise", indices[s], site key)."""
    z = extract_true_channels(net, result, placement)
    streams = _Streams(z, seed, indices)
    if gmm is not None:
        z = _gmm_level(z, gmm, streams)
    return _tve_level(z, tve_model, streams)


# -- config and files ---------------------------------------------------------------

def error_model_from_dict(doc: dict | None) -> tuple[GmmErrorModel | None, TveModel]:
    """``{"level1_gmm": {...} | None | "default", "level2_tve": {...}}``"""
    doc = doc or {}
    g = doc.get("level1_gmm", "default")
    if g is None or g is False or g == "none":
        gmm = None
    elif g == "default" or g is True:
        gmm = GmmErrorModel()
    else:
        gmm = GmmErrorModel.from_dict(g)
    t = doc.get("level2_tve", {}) or {}
    return gmm, TveModel(float(t.get("tve_limit", 0.01)), t.get("sigma_rule", "radial"))


def write_measurements_csv(path, placement: SmdPlacement, z: Measurements, scenario_ids=None) -> None:
    ids = range(len(z)) if scenario_ids is None else scenario_ids
    per_site: dict[int, int] = {}
    chan_no = []
    for ch in z.channels:
        chan_no.append(per_site.get(ch.site, 0))
        per_site[ch.site] = chan_no[-1] + 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "site", "channel", "kind", "phase", "mag", "ang_deg"])
        for s, sid in enumerate(ids):
            for c, ch in enumerate(z.channels):
                w.writerow([sid, placement.sites[ch.site].label, chan_no[c], ch.kind, ch.phase,
                            repr(float(z.mag[s, c])), repr(float(z.ang[s, c]))])


def read_measurements_csv(path, net: NetworkModel, placement: SmdPlacement) -> tuple[list[str], Measurements]:
    chans = placement.channels(net)
    labels = [placement.sites[c.site].label for c in chans]
    pos = {(labels[i], c.kind, c.phase): i for i, c in enumerate(chans)}
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (r["site"], r["kind"], r["phase"])
            if key not in pos:
                raise KeyError(f"{path}: channel {key} not in placement")
            rows.setdefault(r["scenario_id"], {})[pos[key]] = (float(r["mag"]), float(r["ang_deg"]))
    ids = list(rows)
    mag = np.full((len(ids), len(chans)), np.nan)
    ang = np.full_like(mag, np.nan)
    for s, sid in enumerate(ids):
        for c, (m, a) in rows[sid].items():
            mag[s, c] = m
            ang[s, c] = a
    if np.isnan(mag).any():
        raise ValueError(f"{path}: missing channels for some scenarios")
    return ids, Measurements(tuple(chans), mag, ang)


def save_placement(path, placement: SmdPlacement, extra: dict | None = None) -> None:
    doc = placement.to_dict()
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_placement(path) -> SmdPlacement:
    with open(path) as fh:
        return SmdPlacement.from_dict(json.load(fh))
