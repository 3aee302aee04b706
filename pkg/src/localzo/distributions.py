"""Sampling distributions for the perturbation variable z.

Three analytic families (Normal, Uniform, Laplace) and a tabulated family
built by inverse transform sampling from an arbitrary density.  Every
distribution exposes ``pdf``, ``cdf``, ``sample`` and the |z| transforms
used by the threshold computations.
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .errors import ConfigurationError, DegeneratePdfError, DomainError

__all__ = [
    "Distribution",
    "Normal",
    "Uniform",
    "Laplace",
    "Tabulated",
    "InverseCdfTable",
    "pdf",
    "sample",
    "abs_cdf",
    "build_inverse_cdf_table",
    "save_table",
    "load_table",
    "standard_normal",
    "unit_uniform",
    "unit_laplace",
    "by_name",
]

SQRT3 = math.sqrt(3.0)
TABLE_MAGIC = b"LZOTBL1"


class Distribution:
    """Base class; subclasses are immutable after construction."""

    even = False

    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def sample(self, rng, n):
        raise NotImplementedError

    @property
    def support(self):
        raise NotImplementedError

    def abs_cdf(self, x):
        """CDF of |z|: ``2 (F(x) - F(0))`` for x >= 0 and 0 below."""
        if not self.even:
            raise DomainError(f"{self!r} is not even about 0; |z| transform undefined")
        x = np.asarray(x, dtype=float)
        out = np.where(x < 0, 0.0, 2.0 * (self.cdf(np.maximum(x, 0.0)) - self.cdf(0.0)))
        return np.clip(out, 0.0, 1.0)[()]

    def abs_upper(self, eps=1e-12):
        """Point beyond which |z| carries at most ``eps`` probability."""
        raise NotImplementedError

    def abs_moment(self, p):
        """``int_0^inf t^p pdf(t) dt`` (half-line moment)."""
        hi = self.support[1]
        f = lambda t: t**p * self.pdf(t)
        if math.isinf(hi):
            val, _ = integrate.quad(f, 0.0, np.inf, epsabs=1e-12, limit=200)
        else:
            val, _ = integrate.quad(f, 0.0, hi, epsabs=1e-12, limit=200)
        return val


def _positive(name, value):
    if not (np.isfinite(value) and value > 0):
        raise ConfigurationError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class Normal(Distribution):
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        _positive("std", self.std)
        if not np.isfinite(self.mean):
            raise ConfigurationError("mean must be finite")

    @property
    def even(self):
        return self.mean == 0.0

    @property
    def support(self):
        return (-math.inf, math.inf)

    def pdf(self, x):
        s = (np.asarray(x, dtype=float) - self.mean) / self.std
        return (np.exp(-0.5 * s * s) / (self.std * math.sqrt(2.0 * math.pi)))[()]

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.mean) / self.std)[()]

    def sample(self, rng, n):
        return rng.normal(self.mean, self.std, size=n)

    def abs_upper(self, eps=1e-12):
        return float(-special.ndtri(eps / 2.0) * self.std)

    def abs_cdf(self, x):
        if not self.even:
            raise DomainError(f"{self!r} is not even about 0; |z| transform undefined")
        x = np.asarray(x, dtype=float)
        return np.where(x < 0, 0.0, special.erf(np.maximum(x, 0.0) / (self.std * math.sqrt(2.0))))[()]


@dataclass(frozen=True)
class Uniform(Distribution):
    a: float = -SQRT3
    b: float = SQRT3

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b) and self.a < self.b):
            raise ConfigurationError(f"Uniform requires finite a < b, got ({self.a}, {self.b})")

    @property
    def even(self):
        return self.a == -self.b

    @property
    def support(self):
        return (self.a, self.b)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.a) & (x <= self.b), 1.0 / (self.b - self.a), 0.0)[()]

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)[()]

    def sample(self, rng, n):
        return rng.uniform(self.a, self.b, size=n)

    def abs_upper(self, eps=1e-12):
        return float(max(abs(self.a), abs(self.b)))


@dataclass(frozen=True)
class Laplace(Distribution):
    mu: float = 0.0
    b: float = 1.0 / math.sqrt(2.0)

    def __post_init__(self):
        _positive("b", self.b)
        if not np.isfinite(self.mu):
            raise ConfigurationError("mu must be finite")

    @property
    def even(self):
        return self.mu == 0.0

    @property
    def support(self):
        return (-math.inf, math.inf)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return (np.exp(-np.abs(x - self.mu) / self.b) / (2.0 * self.b))[()]

    def cdf(self, x):
        s = (np.asarray(x, dtype=float) - self.mu) / self.b
        return np.where(s < 0, 0.5 * np.exp(np.minimum(s, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(s, 0.0)))[()]

    def sample(self, rng, n):
        return rng.laplace(self.mu, self.b, size=n)

    def abs_upper(self, eps=1e-12):
        return float(-self.b * math.log(eps))


@dataclass(frozen=True, eq=False)
class InverseCdfTable:
    """Inverse CDF sampled at ``grid_n`` equally spaced quantiles.

    Entry ``i`` holds the quantile at ``(i + 0.5) / grid_n``, so each entry
    carries exactly ``1 / grid_n`` of the probability mass.
    """

    lo: float
    hi: float
    grid_n: int
    inv_cdf: np.ndarray
    source_pdf_id: str = ""

    def __post_init__(self):
        inv = np.asarray(self.inv_cdf, dtype=float)
        if inv.shape != (self.grid_n,):
            raise ConfigurationError("inv_cdf length must equal grid_n")
        if np.any(np.diff(inv) < 0):
            raise ConfigurationError("inv_cdf must be non-decreasing")
        if inv[0] < self.lo or inv[-1] > self.hi:
            raise ConfigurationError("inv_cdf leaves the declared support")
        inv.setflags(write=False)
        object.__setattr__(self, "inv_cdf", inv)

    @property
    def support(self):
        return (self.lo, self.hi)

    @property
    def quantiles(self):
        return (np.arange(self.grid_n) + 0.5) / self.grid_n


def _grid(lo, hi, n, spacing, sinh_scale):
    """Integration grid on [lo, hi]; mirrored exactly when lo == -hi."""
    if spacing == "uniform":
        if lo == -hi:
            half = np.linspace(0.0, hi, n // 2 + 1)
            return np.concatenate([-half[:0:-1], half])
        return np.linspace(lo, hi, n)
    if spacing == "sinh":
        if lo == -hi:
            t = np.linspace(0.0, math.asinh(hi / sinh_scale), n // 2 + 1)
            half = sinh_scale * np.sinh(t)
            half[-1] = hi
            return np.concatenate([-half[:0:-1], half])
        c = min(max(0.0, lo), hi)
        t = np.linspace(math.asinh((lo - c) / sinh_scale), math.asinh((hi - c) / sinh_scale), n)
        x = c + sinh_scale * np.sinh(t)
        x[0], x[-1] = lo, hi
        return x
    raise ConfigurationError(f"unknown grid spacing {spacing!r}")


def _tabulate(pdf_fn, support, grid_n, resolution=None, spacing="uniform", sinh_scale=1e-3):
    lo, hi = float(support[0]), float(support[1])
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ConfigurationError(f"support must be a finite interval, got {support!r}")
    grid_n = int(grid_n)
    if grid_n < 1000:
        raise ConfigurationError("grid_n must be at least 1000")
    if resolution is None:
        resolution = 4 * grid_n + 1
    x = _grid(lo, hi, int(resolution), spacing, sinh_scale)
    dens = np.asarray(pdf_fn(x), dtype=float)
    if dens.shape != x.shape:
        dens = np.broadcast_to(dens, x.shape).astype(float)
    if np.any(~np.isfinite(dens)) or np.any(dens < 0):
        raise ConfigurationError("pdf must be finite and non-negative on the support")
    dx = np.diff(x)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * dx)])
    mass = cum[-1]
    if not mass > 1e-12:
        raise DegeneratePdfError(f"pdf integrates to {mass:g} over [{lo}, {hi}]")
    cdf = cum / mass
    cdf[-1] = 1.0
    q = (np.arange(grid_n) + 0.5) / grid_n
    idx = np.searchsorted(cdf, q, side="right")
    f0, f1 = cdf[idx - 1], cdf[idx]
    x0, x1 = x[idx - 1], x[idx]
    inv = x0 + (q - f0) / (f1 - f0) * (x1 - x0)
    inv = np.clip(np.maximum.accumulate(inv), lo, hi)
    return inv, x, dens / mass, cdf


def build_inverse_cdf_table(pdf, support, grid_n, resolution=None, spacing="uniform", sinh_scale=1e-3,
                            label=""):
    """Invert the running-sum CDF of ``pdf`` onto ``grid_n`` quantiles.

    The CDF is accumulated with the trapezoid rule on ``resolution`` points
    (``4 * grid_n + 1`` by default), renormalized to end at exactly 1, and
    inverted by linear interpolation.  ``spacing="sinh"`` clusters the
    integration points around 0, which heavy-tailed densities need when the
    support is wide.
    """
    inv, _, _, _ = _tabulate(pdf, support, grid_n, resolution, spacing, sinh_scale)
    return InverseCdfTable(float(support[0]), float(support[1]), int(grid_n), inv, label)


@dataclass(frozen=True, eq=False)
class Tabulated(Distribution):
    """Distribution sampled through an :class:`InverseCdfTable`.

    The density is kept on its integration grid and linearly interpolated.
    """

    table: InverseCdfTable
    x: np.ndarray = field(repr=False)
    density: np.ndarray = field(repr=False)
    cumulative: np.ndarray = field(repr=False)
    even: bool = False

    @classmethod
    def from_pdf(cls, pdf, support, grid_n=100_000, resolution=None, spacing="uniform", sinh_scale=1e-3,
                 label=""):
        inv, x, dens, cdf = _tabulate(pdf, support, grid_n, resolution, spacing, sinh_scale)
        table = InverseCdfTable(float(support[0]), float(support[1]), int(grid_n), inv, label)
        return cls(table, x, dens, cdf, _looks_even(x, dens))

    @classmethod
    def from_table(cls, table):
        """Rebuild a distribution from a bare table (e.g. a deserialized one).

        The density is recovered by differentiating the piecewise-linear CDF
        through the table points.
        """
        q = table.quantiles
        x = np.concatenate([[table.lo], table.inv_cdf, [table.hi]])
        cdf = np.concatenate([[0.0], q, [1.0]])
        x, keep = np.unique(x, return_index=True)
        cdf = cdf[keep]
        mid = np.gradient(cdf, x) if len(x) > 2 else np.full_like(x, 1.0 / (table.hi - table.lo))
        dens = np.maximum(mid, 0.0)
        return cls(table, x, dens, cdf, _looks_even(x, dens))

    @property
    def support(self):
        return self.table.support

    def pdf(self, x):
        return np.interp(x, self.x, self.density, left=0.0, right=0.0)[()]

    def cdf(self, x):
        return np.interp(x, self.x, self.cumulative, left=0.0, right=1.0)[()]

    def sample(self, rng, n):
        return self.from_uniform(rng.random(n))

    def from_uniform(self, r):
        """Table lookup for uniforms ``r`` in [0, 1): entry ``floor(r * grid_n)``."""
        n_tab = self.table.grid_n
        idx = np.minimum((np.asarray(r) * n_tab).astype(np.int64), n_tab - 1)
        return self.table.inv_cdf[idx]

    def abs_upper(self, eps=1e-12):
        return float(max(abs(self.table.lo), abs(self.table.hi)))

    def abs_moment(self, p):
        keep = self.x >= 0
        t, d = self.x[keep], self.density[keep]
        return float(np.trapezoid(t**p * d, t))


def _looks_even(x, dens):
    lo, hi = x[0], x[-1]
    if not math.isclose(lo, -hi, rel_tol=1e-12):
        return False
    probe = np.linspace(0.0, hi, 1001)
    a = np.interp(probe, x, dens)
    b = np.interp(-probe, x, dens)
    return bool(np.max(np.abs(a - b)) <= 1e-9 * max(1.0, float(dens.max())))


def pdf(dist, x):
    return dist.pdf(x)


def sample(dist, rng, n):
    return dist.sample(rng, n)


def abs_cdf(dist, x):
    return dist.abs_cdf(x)


def standard_normal():
    return Normal(0.0, 1.0)


def unit_uniform():
    """Uniform(-sqrt 3, sqrt 3): zero mean, unit variance."""
    return Uniform(-SQRT3, SQRT3)


def unit_laplace():
    """Laplace(0, 1/sqrt 2): zero mean, unit variance."""
    return Laplace(0.0, 1.0 / math.sqrt(2.0))


def by_name(name):
    try:
        return {"normal": standard_normal, "uniform": unit_uniform, "laplace": unit_laplace}[name]()
    except KeyError:
        raise ConfigurationError(f"unknown distribution {name!r}") from None


def save_table(table, path):
    """Write ``table`` as a little-endian blob.

    Layout: 7-byte magic ``LZOTBL1``, lo and hi as float64, grid_n as
    uint64, then grid_n float64 inverse-CDF values.
    """
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<ddQ", table.lo, table.hi, table.grid_n))
        fh.write(np.asarray(table.inv_cdf, dtype="<f8").tobytes())


def load_table(path, label=""):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:7] != TABLE_MAGIC:
        raise ConfigurationError(f"{path}: not an inverse-CDF table (bad magic)")
    lo, hi, n = struct.unpack_from("<ddQ", blob, 7)
    body = blob[7 + 24:]
    if len(body) != 8 * n:
        raise ConfigurationError(f"{path}: expected {n} values, found {len(body) // 8}")
    inv = np.frombuffer(body, dtype="<f8").astype(float)
    return InverseCdfTable(lo, hi, int(n), inv, label)
