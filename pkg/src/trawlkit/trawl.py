"""Trawl-set geometry and exact grid simulation.

A trawl set is the region between the time axis and an increasing function
``phi`` on (-inf, 0]; translating it in time generates a stationary process
``X_t = L(A_t)``.  Everything observable about the process is driven by two
ingredients implemented here: the overlap areas ``Leb(A ∩ A_h)`` of translated
sets (hence the autocorrelation ``rho(h)``) and the family of the Lévy seed.

The grid simulator decomposes the union of the trawl sets over an observation
grid into disjoint birth/death slices whose basis values are independent, so
each simulated ``X_j`` has the exact marginal law of ``L(A)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import ClassVar

import numpy as np

from .dist import SeedDistribution, basis_scale

_TAIL_EPS = 1e-8  # fold slice mass older than this autocorrelation level


@dataclass(frozen=True)
class TrawlFunction:
    """Base class for parametric trawl functions ``phi`` on (-inf, 0]."""

    param_names: ClassVar[tuple] = ()

    @property
    def params(self):
        return np.array([getattr(self, name) for name in self.param_names], dtype=float)

    def with_params(self, theta):
        return replace(self, **{n: float(v) for n, v in zip(self.param_names, np.asarray(theta, dtype=float))})

    @property
    def n_params(self):
        return len(self.param_names)

    def phi(self, t):
        raise NotImplementedError

    def total_area(self):
        """Leb(A) = integral of phi over (-inf, 0]."""
        raise NotImplementedError

    def area_gradient(self):
        raise NotImplementedError

    def overlap_area(self, h):
        """Leb(A ∩ A_h) = integral of phi over (-inf, -h]."""
        raise NotImplementedError

    def overlap_gradient(self, h):
        raise NotImplementedError

    # -- autocorrelation ----------------------------------------------------
    def acf(self, h):
        """rho(h) = Leb(A ∩ A_h) / Leb(A) for lags h >= 0."""
        h = np.asarray(h, dtype=float)
        if np.any(h < 0.0):
            raise ValueError("autocorrelation lags must be nonnegative")
        out = np.asarray(self.overlap_area(h)) / self.total_area()
        return float(out) if np.ndim(h) == 0 else out

    def acf_gradient(self, h):
        """∇_θ rho(h), shape (n_params,) + shape(h)."""
        h = np.asarray(h, dtype=float)
        if np.any(h < 0.0):
            raise ValueError("autocorrelation lags must be nonnegative")
        area = self.total_area()
        darea = np.asarray(self.area_gradient())
        over = np.asarray(self.overlap_area(h))
        dover = np.asarray(self.overlap_gradient(h))
        shape = (1,) * np.ndim(h)
        return (dover * area - over * darea.reshape(darea.shape + shape)) / area**2


@dataclass(frozen=True)
class ExponentialTrawl(TrawlFunction):
    """phi(t) = e^{rate*t}; rho(h) = e^{-rate*h}."""

    rate: float

    param_names: ClassVar[tuple] = ("rate",)

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("decay rate must be positive")

    def phi(self, t):
        return np.exp(self.rate * np.asarray(t, dtype=float))

    def total_area(self):
        return 1.0 / self.rate

    def area_gradient(self):
        return np.array([-1.0 / self.rate**2])

    def overlap_area(self, h):
        return np.exp(-self.rate * np.asarray(h, dtype=float)) / self.rate

    def overlap_gradient(self, h):
        h = np.asarray(h, dtype=float)
        return (-np.exp(-self.rate * h) * (h * self.rate + 1.0) / self.rate**2)[None, ...]


@dataclass(frozen=True)
class SupExponentialTrawl(TrawlFunction):
    """Convex superposition of exponentials: phi(t) = sum_j w_j e^{rate_j t}."""

    weights: tuple
    rates: tuple

    param_names: ClassVar[tuple] = ()  # parameter vector handled explicitly below

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        r = np.asarray(self.rates, dtype=float)
        if w.shape != r.shape or w.ndim != 1 or w.size == 0:
            raise ValueError("weights and rates must be 1-d sequences of equal length")
        # tolerance leaves room for finite-difference probes of the gradient;
        # the acf ratio normalises, so tiny off-simplex weights are harmless
        if np.any(w < 0.0) or not math.isclose(float(w.sum()), 1.0, abs_tol=1e-2):
            raise ValueError("weights must be nonnegative and sum to one")
        if np.any(r <= 0.0):
            raise ValueError("rates must be positive")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))
        object.__setattr__(self, "rates", tuple(float(v) for v in r))

    @property
    def params(self):
        return np.concatenate([self.weights, self.rates])

    def with_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        j = len(self.weights)
        return SupExponentialTrawl(tuple(theta[:j]), tuple(theta[j:]))

    @property
    def n_params(self):
        return 2 * len(self.weights)

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        w = np.asarray(self.weights)
        r = np.asarray(self.rates)
        return np.sum(w * np.exp(np.multiply.outer(t, r)), axis=-1)

    def total_area(self):
        return float(np.sum(np.asarray(self.weights) / np.asarray(self.rates)))

    def area_gradient(self):
        w = np.asarray(self.weights)
        r = np.asarray(self.rates)
        return np.concatenate([1.0 / r, -w / r**2])

    def overlap_area(self, h):
        h = np.asarray(h, dtype=float)
        w = np.asarray(self.weights)
        r = np.asarray(self.rates)
        return np.sum((w / r) * np.exp(-np.multiply.outer(h, r)), axis=-1)

    def overlap_gradient(self, h):
        h = np.asarray(h, dtype=float)
        w = np.asarray(self.weights)
        r = np.asarray(self.rates)
        e = np.exp(-np.multiply.outer(h, r))  # shape h-shape + (J,)
        gw = np.moveaxis(e / r, -1, 0)
        gr = np.moveaxis(-w * e * (np.multiply.outer(h, np.ones_like(r)) * r + 1.0) / r**2, -1, 0)
        return np.concatenate([gw, gr], axis=0)


@dataclass(frozen=True)
class InvGaussianTrawl(TrawlFunction):
    """Trawl function with inverse-Gaussian mixing of exponential decays.

    rho(h) = exp(-(shape/mean) (sqrt(1 + 2 mean^2 h / shape) - 1)), giving
    sub-exponential decay.
    """

    mean: float
    shape: float

    param_names: ClassVar[tuple] = ("mean", "shape")

    def __post_init__(self):
        if not (self.mean > 0 and self.shape > 0):
            raise ValueError("mean and shape must be positive")

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        s = np.sqrt(1.0 - 2.0 * self.mean**2 * t / self.shape)
        return np.exp((self.shape / self.mean) * (1.0 - s)) / s

    def total_area(self):
        return 1.0 / self.mean

    def area_gradient(self):
        return np.array([-1.0 / self.mean**2, 0.0])

    def _s(self, h):
        return np.sqrt(1.0 + 2.0 * self.mean**2 * np.asarray(h, dtype=float) / self.shape)

    def overlap_area(self, h):
        s = self._s(h)
        return np.exp(-(self.shape / self.mean) * (s - 1.0)) / self.mean

    def overlap_gradient(self, h):
        h = np.asarray(h, dtype=float)
        mu, lam = self.mean, self.shape
        s = self._s(h)
        g = (lam / mu) * (s - 1.0)
        dg_dmu = -lam * (s - 1.0) / mu**2 + 2.0 * h / s
        dg_dlam = (s - 1.0) / mu - mu * h / (lam * s)
        over = np.exp(-g) / mu
        return np.stack([over * (-1.0 / mu - dg_dmu), over * (-dg_dlam)])


@dataclass(frozen=True)
class GammaTrawl(TrawlFunction):
    """Long-memory trawl function: rho(h) = (1 + h/scale)^(-exponent)."""

    exponent: float
    scale: float

    param_names: ClassVar[tuple] = ("exponent", "scale")

    def __post_init__(self):
        if not (self.exponent > 0 and self.scale > 0):
            raise ValueError("exponent and scale must be positive")

    def phi(self, t):
        t = np.asarray(t, dtype=float)
        return (1.0 - t / self.scale) ** (-(self.exponent + 1.0))

    def total_area(self):
        return self.scale / self.exponent

    def area_gradient(self):
        return np.array([-self.scale / self.exponent**2, 1.0 / self.exponent])

    def overlap_area(self, h):
        h = np.asarray(h, dtype=float)
        return (self.scale / self.exponent) * (1.0 + h / self.scale) ** (-self.exponent)

    def overlap_gradient(self, h):
        h = np.asarray(h, dtype=float)
        H, d = self.exponent, self.scale
        base = (1.0 + h / d) ** (-H)
        gH = -(d / H) * base * (1.0 / H + np.log1p(h / d))
        gd = base / H + (h / d) * (1.0 + h / d) ** (-H - 1.0)
        return np.stack([gH, gd])


@dataclass(frozen=True)
class SliceTriple:
    """Areas of the three disjoint pieces of a pair of trawl sets at lag h."""

    s_common: float
    s_left: float
    s_right: float
    h: float

    def __post_init__(self):
        if min(self.s_common, self.s_left, self.s_right) < 0.0:
            raise ValueError("slice areas must be nonnegative")


def pair_slices(tf: TrawlFunction, h: float) -> SliceTriple:
    """Slice areas for the pair (A_s, A_{s+h}): common, s-only, t-only."""
    if h < 0:
        raise ValueError("lag must be nonnegative")
    area = tf.total_area()
    common = float(tf.overlap_area(h))
    return SliceTriple(common, area - common, area - common, float(h))


def grid_slice_areas(tf: TrawlFunction, n: int, tau: float) -> np.ndarray:
    """Areas of the disjoint birth/death pieces over an n-point grid.

    Entry ``[b-1, d-1]`` (1 <= b <= d <= n) is the Lebesgue measure of the set
    of points first covered at grid time b and last covered at grid time d;
    pieces born before the window are booked at b = 1 and pieces alive past
    the window at d = n.  Entries below the diagonal are zero.  For every j,
    the areas of pieces alive at j sum to Leb(A).
    """
    if n < 1:
        raise ValueError("need at least one grid point")
    if not tau > 0:
        raise ValueError("grid spacing must be positive")
    area = tf.total_area()
    rho = np.asarray(tf.acf(np.arange(n + 1) * tau))
    q = np.zeros((n, n))
    for b in range(1, n + 1):
        for d in range(b, n + 1):
            if b == 1 and d == n:
                val = rho[n - 1]
            elif b == 1:
                val = rho[d - 1] - rho[d]
            elif d == n:
                val = rho[n - b] - rho[n - b + 1]
            else:
                g = d - b
                val = rho[g] - 2.0 * rho[g + 1] + rho[g + 2]
            q[b - 1, d - 1] = val * area
    if q.min() < -1e-12 * max(area, 1.0):
        raise RuntimeError("negative slice area: autocorrelation is not convex on the grid")
    np.clip(q, 0.0, None, out=q)
    return q


@dataclass(frozen=True)
class ModelSpec:
    """Full model: a Lévy seed plus a trawl function.

    The flattened parameter vector is (seed params, trawl params) in the fixed
    per-family orderings.
    """

    seed: SeedDistribution
    trawl: TrawlFunction

    @property
    def theta(self):
        return np.concatenate([self.seed.params, self.trawl.params])

    @property
    def param_names(self):
        return tuple(f"seed.{n}" for n in self.seed.param_names) + tuple(
            f"trawl.{n}" for n in self.trawl.param_names
        )

    @property
    def n_seed_params(self):
        return self.seed.n_params

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        k = self.seed.n_params
        return ModelSpec(self.seed.with_params(theta[:k]), self.trawl.with_params(theta[k:]))

    def marginal(self):
        """Law of X_t = L(A)."""
        return basis_scale(self.seed, self.trawl.total_area())

    def slices(self, h):
        return pair_slices(self.trawl, h)


def _max_age(tf: TrawlFunction, n: int, tau: float) -> int:
    """Smallest age M with rho(M tau) <= _TAIL_EPS, capped at n - 1.

    A work cap keeps the simulation O(n * M) bounded for long-memory trawls;
    beyond the cap the folded tail mass is rho(M tau) relative, which shows up
    only in autocorrelations past lag M.
    """
    cap = min(n - 1, max(2000, 50_000_000 // max(n, 1)))
    if tf.acf(cap * tau) > _TAIL_EPS:
        return cap
    lo, hi = 0, cap
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tf.acf(mid * tau) > _TAIL_EPS:
            lo = mid
        else:
            hi = mid
    return hi


def simulate(model: ModelSpec, n: int, tau: float, rng, max_age: int | None = None) -> np.ndarray:
    """Simulate X at times tau, 2*tau, ..., n*tau on the slice partition.

    Each path value is the sum of the independent basis values of the slices
    alive at that time, so the marginal law is exactly that of
    ``basis_scale(seed, Leb(A))`` (up to the folded tail mass below the
    ``_TAIL_EPS`` autocorrelation level for long-memory trawls).
    """
    if n < 1:
        raise ValueError("need at least one observation")
    if not tau > 0:
        raise ValueError("grid spacing must be positive")
    seed = model.seed
    tf = model.trawl
    area = tf.total_area()
    m_age = _max_age(tf, n, tau) if max_age is None else min(int(max_age), n - 1)
    m_age = max(m_age, 1) if n > 1 else 0

    rho = np.asarray(tf.acf(np.arange(m_age + 2) * tau))
    # interior column areas by age, tail mass folded into the last age
    w_int = area * (rho[:-2] - 2.0 * rho[1:-1] + rho[2:]) if m_age >= 1 else np.empty(0)
    w_int = np.concatenate([w_int, [area * (rho[m_age] - rho[m_age + 1])]])
    # the first column carries everything alive at time 1
    w_first = area * (rho[:-1] - rho[1:])
    w_first = np.concatenate([w_first[:m_age], [area * rho[m_age]]])
    w_int = np.clip(w_int, 0.0, None)
    w_first = np.clip(w_first, 0.0, None)

    diff = np.zeros(n + 2)
    births = np.arange(2, n + 1)
    for a in range(m_age + 1):
        if w_first[a] > 0.0:
            v = _sample_scaled(seed, w_first[a], rng, 1)[0]
            diff[1] += v
            diff[min(1 + a, n) + 1] -= v
        if n > 1 and w_int[a] > 0.0:
            vals = _sample_scaled(seed, w_int[a], rng, n - 1)
            diff[2 : n + 1] += vals
            ends = np.minimum(births + a, n) + 1
            np.add.at(diff, ends, -vals)
    return np.cumsum(diff)[1 : n + 1]


def _sample_scaled(seed, leb, rng, size):
    return basis_scale(seed, leb).sample(rng, size)


def write_path_csv(x, tau, fname):
    """Write a simulated path as `t,x` rows with times j*tau."""
    x = np.asarray(x, dtype=float)
    t = (np.arange(1, x.size + 1)) * tau
    with open(fname, "w") as fh:
        fh.write("t,x\n")
        for ti, xi in zip(t, x):
            fh.write(f"{ti:.17g},{xi:.17g}\n")


def read_path_csv(fname):
    """Read a `t,x` path file; returns (times, values)."""
    data = np.loadtxt(fname, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError("path file must have exactly the two columns t,x")
    return data[:, 0], data[:, 1]
