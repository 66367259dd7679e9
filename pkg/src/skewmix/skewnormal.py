r"""Multivariate skew-normal distribution.

The density of :math:`Y \sim SN_d(\eta, \Sigma, \lambda)` is

.. math::
    f(y) = 2 N(y \mid \eta, \Sigma) \Phi(\lambda' \Sigma^{-1/2} (y - \eta))

with :math:`\Sigma^{1/2}` the symmetric positive-definite square root. The
hierarchical (canonical) form writes
:math:`Y \mid U=u \sim N(\eta + u\xi, \Omega)` with :math:`U` half-normal, where
:math:`\delta = \lambda / \sqrt{1 + \lambda'\lambda}`,
:math:`\xi = \Sigma^{1/2}\delta` and :math:`\Omega = \Sigma - \xi\xi'`.

The first coordinate is treated as the response (CT) and the rest as the
covariates (MR) by :func:`conditional_split` and :func:`conditional_mean`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import log_ndtr

from .errors import (
    DegenerateDispersionError,
    DegenerateSkewnessError,
    InputError,
    NotSplittableError,
    ParameterDomainError,
)

__all__ = [
    "SkewNormalParams",
    "CanonicalParams",
    "ConditionalSplit",
    "spd_eigh",
    "sqrtm_spd",
    "reparam_forward",
    "reparam_inverse",
    "sn_logpdf",
    "sn_sample",
    "mills_ratio",
    "trunc_moments",
    "conditional_split",
    "conditional_mean",
    "conditional_logpdf",
]

LOG2 = math.log(2.0)
LOG2PI = math.log(2.0 * math.pi)

SPD_RTOL = 1e-10
SYM_RTOL = 1e-12
# below this argument the Mills ratio switches to the continued fraction
MILLS_SWITCH = -8.0
_CF_TERMS = 200


def spd_eigh(a, *, regularize=False, name="dispersion"):
    """Validated eigendecomposition of a symmetric positive-definite matrix.

    Returns ``(w, V)`` with ascending eigenvalues. The matrix must be symmetric
    to ``SYM_RTOL`` relative and satisfy ``min(w) >= SPD_RTOL * max(w)``; with
    ``regularize=True`` small eigenvalues are lifted to that floor instead.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParameterDomainError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ParameterDomainError(f"{name} has non-finite entries")
    scale = np.max(np.abs(a))
    if np.max(np.abs(a - a.T)) > SYM_RTOL * scale:
        raise ParameterDomainError(f"{name} is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    top = w[-1]
    if top <= 0:
        raise ParameterDomainError(f"{name} is not positive definite")
    floor = SPD_RTOL * top
    if w[0] < floor:
        if not regularize:
            raise ParameterDomainError(
                f"{name} is not positive definite (eigenvalue ratio "
                f"{w[0] / top:.3g} < {SPD_RTOL:g})"
            )
        w = np.maximum(w, floor)
    return w, v


def sqrtm_spd(a, power=0.5):
    """``a**power`` for SPD ``a`` via its eigendecomposition (symmetric result)."""
    w, v = spd_eigh(a)
    out = (v * w**power) @ v.T
    return 0.5 * (out + out.T)


def _frozen(x):
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class SkewNormalParams:
    """Location ``eta``, dispersion ``Sigma`` and skewness ``lambda`` of one component."""

    location: np.ndarray
    dispersion: np.ndarray
    skewness: np.ndarray

    def __post_init__(self):
        loc = np.array(self.location, dtype=float, ndmin=1)
        disp = np.array(self.dispersion, dtype=float, ndmin=2)
        skew = np.array(self.skewness, dtype=float, ndmin=1)
        d = loc.shape[0]
        if loc.ndim != 1 or skew.shape != (d,) or disp.shape != (d, d):
            raise ParameterDomainError(
                f"inconsistent shapes: location {loc.shape}, dispersion "
                f"{disp.shape}, skewness {skew.shape}"
            )
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(skew))):
            raise ParameterDomainError("location and skewness must be finite")
        w, v = spd_eigh(disp)
        object.__setattr__(self, "location", _frozen(loc))
        object.__setattr__(self, "dispersion", _frozen(0.5 * (disp + disp.T)))
        object.__setattr__(self, "skewness", _frozen(skew))
        object.__setattr__(self, "_eig", (w, v))

    @classmethod
    def gaussian(cls, location, dispersion):
        loc = np.array(location, dtype=float, ndmin=1)
        return cls(loc, dispersion, np.zeros_like(loc))

    @classmethod
    def regularized(cls, location, dispersion, skewness):
        """Build params, lifting tiny dispersion eigenvalues to the SPD floor."""
        w, v = spd_eigh(dispersion, regularize=True)
        disp = (v * w) @ v.T
        return cls(location, 0.5 * (disp + disp.T), skewness)

    @property
    def d(self):
        return self.location.shape[0]

    @property
    def is_symmetric(self):
        return not np.any(self.skewness)

    @cached_property
    def sqrt_dispersion(self):
        w, v = self._eig
        out = (v * np.sqrt(w)) @ v.T
        return 0.5 * (out + out.T)

    @cached_property
    def inv_sqrt_dispersion(self):
        w, v = self._eig
        out = (v / np.sqrt(w)) @ v.T
        return 0.5 * (out + out.T)

    @cached_property
    def log_det(self):
        return float(np.sum(np.log(self._eig[0])))

    @cached_property
    def nu(self):
        """``Sigma^{-1/2} lambda``, from the same eigendecomposition as the root."""
        return self.inv_sqrt_dispersion @ self.skewness

    def __repr__(self):
        return (
            f"SkewNormalParams(location={self.location.tolist()}, "
            f"dispersion={self.dispersion.tolist()}, "
            f"skewness={self.skewness.tolist()})"
        )


@dataclass(frozen=True, eq=False)
class CanonicalParams:
    """Hierarchical-form parameters ``(eta, xi, Omega)``; ``delta`` is derived."""

    location: np.ndarray
    xi: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        loc = np.array(self.location, dtype=float, ndmin=1)
        xi = np.array(self.xi, dtype=float, ndmin=1)
        om = np.array(self.omega, dtype=float, ndmin=2)
        d = loc.shape[0]
        if xi.shape != (d,) or om.shape != (d, d):
            raise ParameterDomainError(
                f"inconsistent shapes: location {loc.shape}, xi {xi.shape}, "
                f"omega {om.shape}"
            )
        object.__setattr__(self, "location", _frozen(loc))
        object.__setattr__(self, "xi", _frozen(xi))
        object.__setattr__(self, "omega", _frozen(0.5 * (om + om.T)))

    @property
    def d(self):
        return self.location.shape[0]

    @cached_property
    def dispersion(self):
        return self.omega + np.outer(self.xi, self.xi)

    @cached_property
    def delta(self):
        return sqrtm_spd(self.dispersion, -0.5) @ self.xi


@dataclass(frozen=True, eq=False)
class ConditionalSplit:
    """Blocks of one component partitioned as (response, covariates).

    ``nu = Sigma^{-1/2} lambda`` and ``tau`` is the skewness of the covariate
    marginal, so that ``Y2 ~ SN(eta2, sigma22, tau)``.
    """

    eta1: float
    eta2: np.ndarray
    sigma11: float
    sigma12: np.ndarray
    sigma22: np.ndarray
    nu: np.ndarray
    tau: np.ndarray

    @cached_property
    def regression(self):
        """``Sigma22^{-1} Sigma21``."""
        return np.linalg.solve(self.sigma22, self.sigma12)

    @cached_property
    def sigma11_c(self):
        """Schur complement ``Sigma11 - Sigma12 Sigma22^{-1} Sigma21``."""
        return float(self.sigma11 - self.sigma12 @ self.regression)

    @cached_property
    def marginal(self):
        return SkewNormalParams(self.eta2, self.sigma22, self.tau)

    @cached_property
    def kappa_coef(self):
        """Coefficients of ``tau' Sigma22^{-1/2} (y2 - eta2)`` as a linear form."""
        return self.marginal.inv_sqrt_dispersion @ self.tau

    @cached_property
    def shift_scale(self):
        nu1 = self.nu[0]
        s = self.sigma11_c
        return s * nu1 / math.sqrt(1.0 + nu1 * s * nu1)


def reparam_forward(p):
    """Map ``(eta, Sigma, lambda)`` to the canonical ``(eta, xi, Omega)``."""
    lam = p.skewness
    delta = lam / math.sqrt(1.0 + lam @ lam)
    xi = p.sqrt_dispersion @ delta
    omega = p.dispersion - np.outer(xi, xi)
    return CanonicalParams(p.location, xi, omega)


def reparam_inverse(c):
    """Recover ``(eta, Sigma, lambda)`` from canonical parameters.

    Raises DegenerateSkewnessError when ``xi' Sigma^{-1} xi >= 1``.
    """
    sigma = c.omega + np.outer(c.xi, c.xi)
    w, v = spd_eigh(sigma)
    root_inv = (v / np.sqrt(w)) @ v.T
    z = root_inv @ c.xi
    s = float(z @ z)
    if not s < 1.0:
        raise DegenerateSkewnessError(f"xi' Sigma^-1 xi = {s:.6g} >= 1")
    return SkewNormalParams(c.location, sigma, z / math.sqrt(1.0 - s))


def _as_rows(y, d):
    y = np.asarray(y, dtype=float)
    single = y.ndim <= 1
    y2 = np.atleast_2d(y).reshape(-1, d) if single else y
    if y2.ndim != 2 or y2.shape[1] != d:
        raise InputError(f"expected points of dimension {d}, got shape {y.shape}")
    if not np.all(np.isfinite(y2)):
        raise InputError("points must be finite")
    return y2, single


def _logpdf_rows(y, p):
    z = (y - p.location) @ p.inv_sqrt_dispersion
    maha = np.einsum("ij,ij->i", z, z)
    return LOG2 - 0.5 * (p.d * LOG2PI + p.log_det + maha) + log_ndtr(z @ p.skewness)


def sn_logpdf(y, p):
    """Log density at a point (``(d,)``) or at each row of an ``(n, d)`` array."""
    rows, single = _as_rows(y, p.d)
    out = _logpdf_rows(rows, p)
    return float(out[0]) if single else out


def _sample(p, n, rng):
    delta = p.skewness / math.sqrt(1.0 + p.skewness @ p.skewness)
    resid = np.eye(p.d) - np.outer(delta, delta)
    w, v = np.linalg.eigh(resid)
    resid_root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    u = np.abs(rng.standard_normal(n))
    vv = rng.standard_normal((n, p.d))
    a = p.sqrt_dispersion @ delta
    b = p.sqrt_dispersion @ resid_root
    return p.location + u[:, None] * a + vv @ b.T


def sn_sample(p, n, seed):
    """Draw ``n`` points using the half-normal/normal stochastic representation."""
    if n < 1:
        raise InputError(f"sample size must be >= 1, got {n}")
    return _sample(p, int(n), np.random.default_rng(seed))


def _cf_tail(x):
    """First two tails ``t1, t2`` of ``t_j = j / (x + t_{j+1})`` for ``x >= 8``.

    The upper-tail Mills ratio is ``1 / (x + t1)`` and ``t1 * t2 = 1 - x * t1``.
    """
    t = np.zeros_like(x)
    for j in range(_CF_TERMS, 1, -1):
        t = j / (x + t)
    t2 = t
    t1 = 1.0 / (x + t2)
    return t1, t2


def mills_ratio(a):
    """``phi(a) / Phi(a)``, stable for all real ``a``."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    tail = a < MILLS_SWITCH
    body = ~tail
    ab = a[body]
    out[body] = np.exp(-0.5 * ab * ab - 0.5 * LOG2PI - log_ndtr(ab))
    if np.any(tail):
        x = -a[tail]
        t1, _ = _cf_tail(x)
        out[tail] = x + t1
    return out if out.ndim else float(out)


def _unit_trunc_moments(alpha, log_cdf=None):
    """Moments of ``TN(alpha, 1, (0, inf))``: ``alpha + m`` and ``1 + alpha*m + alpha^2``.

    ``log_cdf`` may carry a precomputed ``log Phi(alpha)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    first = np.empty_like(alpha)
    second = np.empty_like(alpha)
    tail = alpha < MILLS_SWITCH
    body = ~tail
    ab = alpha[body]
    lc = log_ndtr(ab) if log_cdf is None else np.asarray(log_cdf)[body]
    m = np.exp(-0.5 * ab * ab - 0.5 * LOG2PI - lc)
    first[body] = ab + m
    second[body] = 1.0 + ab * m + ab * ab
    if np.any(tail):
        # closed forms in the continued-fraction tails avoid the cancellation
        # in alpha + m and 1 + alpha*m + alpha^2
        t1, t2 = _cf_tail(-alpha[tail])
        first[tail] = t1
        second[tail] = t1 * t2
    return first, second


def trunc_moments(alpha, beta):
    """First and second moments of ``U | U > 0`` with ``U ~ N(alpha/beta, 1/beta^2)``.

    ``E[U] = (alpha + m(alpha)) / beta`` and
    ``E[U^2] = (1 + alpha m(alpha) + alpha^2) / beta^2`` where ``m`` is the
    Mills ratio. Accepts scalars or broadcastable arrays.
    """
    beta = np.asarray(beta, dtype=float)
    if np.any(~(beta > 0)):
        raise ParameterDomainError("beta must be > 0")
    alpha = np.asarray(alpha, dtype=float)
    first, second = _unit_trunc_moments(alpha)
    mean = first / beta
    sq = second / (beta * beta)
    if mean.ndim == 0:
        return float(mean), float(sq)
    return mean, sq


def conditional_split(p):
    """Partition a component into response (first coordinate) and covariates."""
    if p.d < 2:
        raise NotSplittableError("conditional quantities need d >= 2")
    nu = p.nu
    sigma = p.dispersion
    split = ConditionalSplit(
        eta1=float(p.location[0]),
        eta2=p.location[1:],
        sigma11=float(sigma[0, 0]),
        sigma12=sigma[0, 1:].copy(),
        sigma22=sigma[1:, 1:].copy(),
        nu=nu,
        tau=np.zeros(p.d - 1),
    )
    s11c = split.sigma11_c
    if not s11c > 1e-12 * split.sigma11:
        raise DegenerateDispersionError(
            f"conditional variance {s11c:.3g} is not positive; the response is "
            "perfectly predictable from the covariates"
        )
    root22 = sqrtm_spd(split.sigma22)
    tau = root22 @ (split.regression * nu[0] + nu[1:]) / math.sqrt(
        1.0 + nu[0] * s11c * nu[0]
    )
    object.__setattr__(split, "tau", _frozen(tau))
    return split


def conditional_mean(y2, p, split=None):
    """``E[Y1 | Y2 = y2]`` for one point ``(d-1,)`` or rows ``(n, d-1)``."""
    if split is None:
        split = conditional_split(p)
    rows, single = _as_rows(y2, p.d - 1)
    centred = rows - split.eta2
    out = split.eta1 + centred @ split.regression
    if split.nu[0] != 0.0:
        kappa = centred @ split.kappa_coef
        out = out + split.shift_scale * mills_ratio(kappa)
    return float(out[0]) if single else out


def conditional_logpdf(y1, y2, p, split=None):
    """Log density of ``Y1 = y1`` given ``Y2 = y2`` (scalar ``y2`` row)."""
    if split is None:
        split = conditional_split(p)
    y2 = np.asarray(y2, dtype=float).reshape(p.d - 1)
    y1 = np.asarray(y1, dtype=float)
    centred2 = y2 - split.eta2
    loc = split.eta1 + centred2 @ split.regression
    s = split.sigma11_c
    lin = split.nu[0] * (y1 - split.eta1) + split.nu[1:] @ centred2
    kappa = centred2 @ split.kappa_coef
    out = (
        -0.5 * (LOG2PI + math.log(s) + (y1 - loc) ** 2 / s)
        + log_ndtr(lin)
        - log_ndtr(kappa)
    )
    return out if out.ndim else float(out)
