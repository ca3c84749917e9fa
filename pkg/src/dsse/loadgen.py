"""Load distributions and Monte Carlo load scenarios.

Two ways to obtain per-load distributions of active power:

* ``fit_kde`` on aggregated smart-meter power (historical data path), and
* ``gaussian_variation`` around the network's nominal loads.

``sample_scenarios`` draws active power from those marginals, independently
per load element, and attaches reactive power through a power factor.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special

from .netmodel import NetworkModel
from .powerflow import ScenarioSet, load_keys, nominal_load

log = logging.getLogger(__name__)

# named random substreams, see ``substream``
STREAMS = {"loads": 1, "noise": 2, "init": 3, "shuffle": 4, "dropout": 5, "meters": 6}


def substream(seed: int, stream: str | int, index: int | None = None, *sub: int) -> np.random.Generator:
    """Independent generator for (root seed, stream name, optional index[, sub-keys])."""
    tag = STREAMS[stream] if isinstance(stream, str) else int(stream)
    key = (tag,) if index is None else (tag, int(index), *(int(k) for k in sub))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


# -- smart meters ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeterReadingSeries:
    meter_id: str
    transformer_id: str
    timestamps: tuple[datetime, ...]
    energy_kwh: np.ndarray
    interval_h: float

    def __post_init__(self):
        if np.any(np.asarray(self.energy_kwh) < 0):
            raise ValueError(f"meter {self.meter_id}: negative energy reading")
        if len(self.timestamps) != len(self.energy_kwh):
            raise ValueError(f"meter {self.meter_id}: timestamps and readings differ in length")


def energy_to_power(series: MeterReadingSeries) -> np.ndarray:
    """Average kW over each interval."""
    if not series.interval_h > 0:
        raise ValueError(f"meter {series.meter_id}: interval length must be positive")
    return np.asarray(series.energy_kwh, dtype=float) / series.interval_h


def aggregate_to_transformer(series: Sequence[MeterReadingSeries]) -> dict[str, np.ndarray]:
    """Net kW per transformer: per-timestamp sum over its meters."""
    groups: dict[str, list[MeterReadingSeries]] = {}
    for s in series:
        groups.setdefault(s.transformer_id, []).append(s)
    out = {}
    for tid, members in groups.items():
        ref = members[0]
        for m in members[1:]:
            if m.timestamps != ref.timestamps or m.interval_h != ref.interval_h:
                raise ValueError(f"transformer {tid}: meter {m.meter_id} is not aligned with {ref.meter_id}")
        out[tid] = np.sum([energy_to_power(m) for m in members], axis=0)
    return out


def read_meter_csv(path) -> list[MeterReadingSeries]:
    rows: dict[tuple[str, str], list[tuple[datetime, float]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault((r["meter_id"], r["transformer_id"]), []).append(
                (datetime.fromisoformat(r["timestamp"]), float(r["kwh"])))
    out = []
    for (mid, tid), recs in rows.items():
        recs.sort()
        ts = tuple(t for t, _ in recs)
        steps = {(b - a).total_seconds() for a, b in zip(ts, ts[1:])}
        if len(steps) > 1:
            raise ValueError(f"meter {mid}: non-uniform interval length")
        interval = (steps.pop() if steps else 3600.0) / 3600.0
        out.append(MeterReadingSeries(mid, tid, ts, np.array([e for _, e in recs]), interval))
    return out


def write_meter_csv(path, series: Sequence[MeterReadingSeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["meter_id", "transformer_id", "timestamp", "kwh"])
        for s in series:
            for t, e in zip(s.timestamps, s.energy_kwh):
                w.writerow([s.meter_id, s.transformer_id, t.isoformat(), repr(float(e))])


def synthetic_meter_data(mean_kw: Mapping[str, float], meters_per_transformer: int = 5, days: int = 365,
                         seed: int = 0, noise: float = 0.35, start: datetime = datetime(2020, 1, 1)
                         ) -> list[MeterReadingSeries]:
    """Hourly smart-meter readings with a two-peak daily shape and lognormal noise.

    Each transformer's meters share ``mean_kw[transformer]`` on average.
    """
    hours = np.arange(days * 24)
    hod = hours % 24
    shape = (0.6 + 0.35 * np.exp(-0.5 * ((hod - 8) / 2.0) ** 2)
             + 0.6 * np.exp(-0.5 * ((hod - 19) / 2.5) ** 2))
    shape /= shape.mean()
    ts = tuple(start + timedelta(hours=int(h)) for h in hours)
    out = []
    for j, (tid, kw) in enumerate(mean_kw.items()):
        rng = substream(seed, "meters", j)
        for m in range(meters_per_transformer):
            per = kw / meters_per_transformer
            sigma = noise
            mult = rng.lognormal(-0.5 * sigma * sigma, sigma, size=hours.size)
            out.append(MeterReadingSeries(f"{tid}/m{m}", tid, ts, per * shape * mult, 1.0))
    return out


# -- marginal distributions ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KdeDistribution:
    """Gaussian-kernel density with equal weights on ``centers`` (kW)."""

    centers: np.ndarray
    bandwidth: float
    nonnegative: bool = True

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        c = self.centers
        for s in range(0, x.size, 256):
            u = (x[s:s + 256, None] - c[None, :]) / self.bandwidth
            out[s:s + 256] = np.exp(-0.5 * u * u).sum(axis=1)
        return out / (c.size * self.bandwidth * math.sqrt(2 * math.pi))

    def cdf(self, x: float) -> float:
        return float(special.ndtr((x - self.centers) / self.bandwidth).mean())

    def ppf(self, q: float) -> float:
        lo = self.centers.min() - 10 * self.bandwidth
        hi = self.centers.max() + 10 * self.bandwidth
        return optimize.brentq(lambda x: self.cdf(x) - q, lo, hi, xtol=1e-10 * max(1.0, hi - lo))

    def interval(self, confidence: float) -> tuple[float, float]:
        a = (1 - confidence) / 2
        return self.ppf(a), self.ppf(1 - a)

    @property
    def mean(self) -> float:
        return float(self.centers.mean())

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        out = self.centers[rng.integers(0, self.centers.size, size)] + self.bandwidth * rng.standard_normal(size)
        if self.nonnegative:
            bad = out < 0
            while bad.any():
                k = int(bad.sum())
                out[bad] = self.centers[rng.integers(0, self.centers.size, k)] + self.bandwidth * rng.standard_normal(k)
                bad = out < 0
        return out


@dataclass(frozen=True)
class TruncatedGaussian:
    mean: float
    std: float
    lower: float
    upper: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.lower > self.upper:
            raise ValueError("bounds out of order")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Rejection sampling; out-of-bounds draws are redrawn."""
        if self.std == 0:
            return np.full(size, min(max(self.mean, self.lower), self.upper))
        out = self.mean + self.std * rng.standard_normal(size)
        bad = (out < self.lower) | (out > self.upper)
        while bad.any():
            out[bad] = self.mean + self.std * rng.standard_normal(int(bad.sum()))
            bad = (out < self.lower) | (out > self.upper)
        return out


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    iqr = np.subtract(*np.percentile(x, [75, 25])) / 1.349
    spread = np.std(x, ddof=1)
    a = min(spread, iqr) if iqr > 0 else spread
    return 0.9 * a * x.size ** -0.2


def fit_kde(samples, confidence: float = 0.95, tolerance: float = 0.01, max_steps: int = 50) -> KdeDistribution:
    """KDE whose central ``confidence`` interval matches the empirical one.

    Starts from Silverman's bandwidth.  If the fitted interval width is not
    within ``tolerance`` (relative) of the empirical percentile width, the
    bandwidth is bisected toward the largest value that meets it, i.e. the
    smoothest density that still reproduces the data's interval.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < 30:
        raise ValueError("fit_kde needs at least 30 samples")
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    if np.ptp(x) == 0 or np.std(x) == 0:
        raise ValueError("degenerate samples: zero variance")
    a = (1 - confidence) / 2
    lo_e, hi_e = np.percentile(x, [100 * a, 100 * (1 - a)])
    w_emp = hi_e - lo_e
    if w_emp <= 0:
        raise ValueError("degenerate samples: empty central interval")
    h0 = silverman_bandwidth(x)
    nonneg = bool(x.min() >= 0)

    def mismatch(h: float) -> float:
        lo, hi = KdeDistribution(x, h, False).interval(confidence)
        return (hi - lo) / w_emp - 1.0

    g0 = mismatch(h0)
    if abs(g0) <= tolerance:
        return KdeDistribution(x, h0, nonneg)
    # aim at the upper edge of the tolerance band
    target = tolerance / 2

    def g(h):
        return mismatch(h) - target

    if g0 > 0:
        lo, hi = h0 * 1e-3, h0
    else:
        lo, hi = h0, h0
        for _ in range(20):
            hi *= 2
            if g(hi) > 0:
                break
    if not (g(lo) < 0 < g(hi)):
        log.warning("KDE bandwidth bisection could not bracket the target; using Silverman bandwidth")
        return KdeDistribution(x, h0, nonneg)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if abs(gm) <= tolerance / 4:
            return KdeDistribution(x, mid, nonneg)
        if gm > 0:
            hi = mid
        else:
            lo = mid
    return KdeDistribution(x, lo, nonneg)


# -- per-network load distributions ------------------------------------------------

@dataclass(frozen=True, eq=False)
class LoadDistribution:
    """Independent active-power marginals, one per load key (bus, element).

    ``q_ratio`` holds each key's nominal Q/P, used when reactive power keeps
    the nominal power factor.
    """

    keys: tuple[tuple[str, str], ...]
    marginals: tuple  # KdeDistribution | TruncatedGaussian per key
    q_ratio: np.ndarray

    def __post_init__(self):
        gauss = all(isinstance(m, TruncatedGaussian) for m in self.marginals)
        object.__setattr__(self, "_gauss", None if not gauss else np.array(
            [[m.mean, m.std, m.lower, m.upper] for m in self.marginals]).reshape(-1, 4))

    def sample_p(self, rng: np.random.Generator) -> np.ndarray:
        """One draw per key (kW)."""
        if self._gauss is None:
            return np.array([m.sample(rng, 1)[0] for m in self.marginals])
        mu, sd, lo, hi = self._gauss.T
        out = mu + sd * rng.standard_normal(mu.size)
        bad = (out < lo) | (out > hi)
        while bad.any():
            out[bad] = mu[bad] + sd[bad] * rng.standard_normal(int(bad.sum()))
            bad = (out < lo) | (out > hi)
        return out


def gaussian_variation(net: NetworkModel, fraction: float = 0.5, sigmas: float = 3.0) -> LoadDistribution:
    """Loads varied by +/- ``fraction`` of nominal, read as the ``sigmas``-sigma interval."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    keys = load_keys(net)
    nom = nominal_load(net)
    margs = []
    for k in keys:
        p = nom[k].real
        margs.append(TruncatedGaussian(p, fraction * p / sigmas, p * (1 - fraction), p * (1 + fraction)))
    return LoadDistribution(tuple(keys), tuple(margs), _q_ratio(keys, nom))


def kde_distribution(net: NetworkModel, power_by_key: Mapping[tuple[str, str], np.ndarray],
                     confidence: float = 0.95) -> LoadDistribution:
    """Fit one KDE per load key from aggregated transformer power series.

    Keys absent from ``power_by_key`` keep their nominal power (a zero-width
    Gaussian).
    """
    keys = load_keys(net)
    nom = nominal_load(net)
    margs = []
    for k in keys:
        if k in power_by_key:
            margs.append(fit_kde(power_by_key[k], confidence))
        else:
            p = nom[k].real
            margs.append(TruncatedGaussian(p, 0.0, p, p))
    return LoadDistribution(tuple(keys), tuple(margs), _q_ratio(keys, nom))


def transformer_key(tid: str) -> tuple[str, str]:
    """Smart-meter transformer ids name load keys as ``bus:element``."""
    bus, _, el = tid.partition(":")
    if not el:
        raise ValueError(f"transformer id {tid!r} is not of the form bus:element")
    return bus, el


def _q_ratio(keys, nom) -> np.ndarray:
    return np.array([nom[k].imag / nom[k].real if nom[k].real else 0.0 for k in keys])


@dataclass(frozen=True)
class PowerFactorRange:
    lower: float = 0.95
    upper: float = 1.0

    def __post_init__(self):
        if not 0 < self.lower <= self.upper <= 1:
            raise ValueError("power factor range must satisfy 0 < lower <= upper <= 1")


def sample_scenarios(dist: LoadDistribution, pf: PowerFactorRange | None = PowerFactorRange(), n: int = 12_500,
                     seed: int = 0, stream: str | int = "loads", start: int = 0) -> ScenarioSet:
    """Monte Carlo load scenarios.

    Scenario ``i`` is drawn from its own substream (seed, stream, start + i),
    so any scenario can be regenerated alone and streams never overlap.
    With ``pf=None`` reactive power follows the nominal Q/P of each key;
    otherwise a power factor is drawn per scenario and key.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    K = len(dist.keys)
    p = np.empty((n, K))
    q = np.empty((n, K))
    seeds = []
    for i in range(n):
        rng = substream(seed, stream, start + i)
        seeds.append((seed, stream, start + i))
        p[i] = dist.sample_p(rng)
        if pf is None:
            q[i] = p[i] * dist.q_ratio
        else:
            f = rng.uniform(pf.lower, pf.upper, K)
            q[i] = p[i] * np.tan(np.arccos(f))
    return ScenarioSet(dist.keys, p, q, seeds=seeds)


def write_scenarios_csv(path, sset: ScenarioSet, scenario_ids=None) -> None:
    ids = range(len(sset)) if scenario_ids is None else scenario_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "bus", "phase", "p_kw", "q_kvar"])
        for s, sid in enumerate(ids):
            for k, (bus, el) in enumerate(sset.keys):
                w.writerow([sid, bus, el, repr(float(sset.p_kw[s, k])), repr(float(sset.q_kvar[s, k]))])


def read_scenarios_csv(path, net: NetworkModel) -> tuple[list[str], ScenarioSet]:
    keys = load_keys(net)
    pos = {k: i for i, k in enumerate(keys)}
    nom = nominal_load(net)
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (r["bus"], r["phase"])
            if key not in pos:
                raise KeyError(f"{path}: unknown load key {key}")
            rows.setdefault(r["scenario_id"], {})[key] = (float(r["p_kw"]), float(r["q_kvar"]))
    ids = list(rows)
    p = np.tile([nom[k].real for k in keys], (len(ids), 1))
    q = np.tile([nom[k].imag for k in keys], (len(ids), 1))
    for s, sid in enumerate(ids):
        for key, (pp, qq) in rows[sid].items():
            p[s, pos[key]] = pp
            q[s, pos[key]] = qq
    return ids, ScenarioSet(keys, p, q)
