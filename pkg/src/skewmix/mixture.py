"""EM fitting of skew-normal and Gaussian mixtures.

The skew variant iterates the closed-form updates of the hierarchical
representation: E-step responsibilities ``gamma`` and the conditional moments
``vartheta = gamma * E[U | y]`` and ``psi = gamma * E[U^2 | y]``, then the
M-step updates ``pi -> eta -> xi -> Omega`` in that order. The Gaussian variant
is the ``lambda = 0`` special case with ``xi`` pinned at zero.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from ._parallel import map_chunks
from .errors import ComponentCollapseError, InitializationError, InputError
from .skewnormal import (
    LOG2,
    LOG2PI,
    CanonicalParams,
    SkewNormalParams,
    _logpdf_rows,
    _unit_trunc_moments,
    reparam_forward,
    reparam_inverse,
)

__all__ = [
    "VARIANTS",
    "MixtureModel",
    "FitConfig",
    "EStepQuantities",
    "FitTrace",
    "kmeans_init",
    "e_step",
    "m_step",
    "fit",
    "loglik",
    "q_function",
    "param_change",
]

VARIANTS = ("skew", "gaussian")
WEIGHT_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """K weighted skew-normal components; ``variant='gaussian'`` forces zero skewness.

    ``fit_info`` carries free-form metadata from fitting (seed, iterations,
    final max responsibility change) and does not affect any computation.
    """

    variant: str
    weights: np.ndarray
    components: tuple
    fit_info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        comps = tuple(self.components)
        w = np.array(self.weights, dtype=float, ndmin=1)
        if len(comps) < 1 or w.shape != (len(comps),):
            raise InputError(
                f"need K >= 1 components with matching weights, got "
                f"{len(comps)} components and weights of shape {w.shape}"
            )
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_ATOL * len(w) + 1e-15:
            raise InputError(f"weights must be nonnegative and sum to 1, got {w}")
        d = comps[0].d
        if any(c.d != d for c in comps):
            raise InputError("all components must share the same dimension")
        if self.variant == "gaussian" and any(not c.is_symmetric for c in comps):
            raise InputError("gaussian variant requires zero skewness")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def K(self):
        return len(self.components)

    @property
    def d(self):
        return self.components[0].d

    @property
    def canonical(self):
        try:
            return self._canonical
        except AttributeError:
            can = tuple(reparam_forward(c) for c in self.components)
            object.__setattr__(self, "_canonical", can)
            return can

    def permuted(self, order):
        order = list(order)
        return MixtureModel(
            self.variant,
            self.weights[order],
            tuple(self.components[i] for i in order),
            dict(self.fit_info),
        )

    def with_info(self, **info):
        return dataclasses.replace(self, fit_info={**self.fit_info, **info})


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit`.

    ``ridge`` is relative: each M-step adds ``ridge * tr(Omega) / d * I``.
    ``collapse_count`` is the minimum effective number of voxels
    (sum of responsibilities) a component may own.

    Convergence needs both ``max |gamma_new - gamma_old| <= stop_tol`` and a
    parameter step of at most ``param_tol`` (see :func:`param_change`); the
    responsibility rule alone fires immediately on well-separated data.
    ``param_tol=None`` disables the second condition.
    """

    K: int
    variant: str = "skew"
    max_iter: int = 1000
    stop_tol: float = 5e-5
    param_tol: float | None = 1e-5
    restarts: int = 1
    seed: int = 0
    ridge: float = 1e-6
    lock_skewness: bool = False
    collapse_count: float = 10.0
    threads: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise InputError("K must be >= 1")
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        if not self.stop_tol > 0:
            raise InputError("stop_tol must be > 0")
        if self.param_tol is not None and not self.param_tol > 0:
            raise InputError("param_tol must be > 0 or None")
        if self.restarts < 1:
            raise InputError("restarts must be >= 1")
        if self.max_iter < 0:
            raise InputError("max_iter must be >= 0")
        if self.ridge < 0:
            raise InputError("ridge must be >= 0")


@dataclass(frozen=True, eq=False)
class EStepQuantities:
    gamma: np.ndarray
    vartheta: np.ndarray
    psi: np.ndarray
    loglik: float
    n_degenerate: int = 0


@dataclass
class FitTrace:
    """Per-iteration observed log-likelihood and max responsibility change.

    Row 0 is the initial model (its change is NaN).
    """

    iterations: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    max_delta: list = field(default_factory=list)
    param_delta: list = field(default_factory=list)
    converged: bool = False
    seed: int | None = None
    restart: int = 0
    n_degenerate: int = 0

    def add(self, it, ll, delta, param=math.nan):
        self.iterations.append(int(it))
        self.loglik.append(float(ll))
        self.max_delta.append(float(delta))
        self.param_delta.append(float(param))

    @property
    def n_iter(self):
        return self.iterations[-1] if self.iterations else 0

    @property
    def final_delta(self):
        return self.max_delta[-1] if self.max_delta else math.nan

    def to_text(self):
        lines = ["iteration\tloglik\tmax_delta_gamma\tparam_change"]
        rows = zip(self.iterations, self.loglik, self.max_delta, self.param_delta)
        for it, ll, dg, dp in rows:
            lines.append(f"{it}\t{ll!r}\t{dg!r}\t{dp!r}")
        return "\n".join(lines) + "\n"


def _check_data(data):
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise InputError(f"data must be an (n, d) array, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise InputError("data must be finite")
    return data


def _ridged(cov, ridge):
    d = cov.shape[0]
    cov = 0.5 * (cov + cov.T)
    return cov + ridge * np.trace(cov) / d * np.eye(d)


def _sq_dists(x, centers):
    return (
        np.einsum("ij,ij->i", x, x)[:, None]
        - 2.0 * x @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )


def _kmeanspp(data, K, rng):
    n = len(data)
    centers = np.empty((K, data.shape[1]))
    centers[0] = data[rng.integers(n)]
    closest = np.maximum(_sq_dists(data, centers[:1])[:, 0], 0.0)
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[k] = data[idx]
        closest = np.minimum(closest, np.maximum(_sq_dists(data, centers[k : k + 1])[:, 0], 0.0))
    return centers


def _lloyd(data, centers, max_iter):
    K = len(centers)
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dists(data, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, data)
        filled = counts > 0
        centers = centers.copy()
        centers[filled] = sums[filled] / counts[filled, None]
    labels = np.argmin(_sq_dists(data, centers), axis=1)
    return labels, centers


def kmeans_init(data, K, seed, *, variant="skew", ridge=1e-6, max_iter=50):
    """Initial mixture from k-means++ seeded Lloyd iterations.

    Locations are cluster means, weights are cluster fractions and dispersions
    are within-cluster (maximum-likelihood) covariances plus the relative
    ridge. Skewness vectors are drawn uniformly from ``[-1, 1]^d`` (zero for
    the Gaussian variant).
    """
    data = _check_data(data)
    n, d = data.shape
    if n < K * (d + 1):
        raise InputError(f"need n >= K*(d+1) = {K * (d + 1)} rows, got {n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(data, K, rng)
    labels, centers = _lloyd(data, centers, max_iter)
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        far = np.sum((data - centers[labels]) ** 2, axis=1)
        order = np.argsort(-far, kind="stable")
        for j, k in enumerate(np.flatnonzero(counts == 0)):
            centers[k] = data[order[j]]
        labels, centers = _lloyd(data, centers, max_iter)
        counts = np.bincount(labels, minlength=K)
        if np.any(counts == 0):
            raise InitializationError(
                f"k-means left clusters {np.flatnonzero(counts == 0).tolist()} empty"
            )
    global_var = np.var(data, axis=0)
    comps = []
    for k in range(K):
        pts = data[labels == k]
        mean = pts.mean(axis=0)
        r = pts - mean
        cov = _ridged(r.T @ r / len(pts), ridge)
        w = np.linalg.eigvalsh(cov)
        if not w[0] > 1e-10 * max(w[-1], 0.0):
            # too few or coincident points: shrink towards the global variances
            shrink = (d + 1) / (len(pts) + d + 1)
            cov = (1 - shrink) * cov + shrink * np.diag(global_var)
        comps.append((mean, cov))
    skews = rng.uniform(-1.0, 1.0, size=(K, d))
    if variant == "gaussian":
        skews[:] = 0.0
    components = tuple(
        SkewNormalParams(mean, cov, skews[k]) for k, (mean, cov) in enumerate(comps)
    )
    return MixtureModel(variant, counts / n, components)


def _lse_rows(a):
    top = np.max(a, axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(a - safe[:, None]), axis=1)) + safe


def _log_joint(y, model):
    """``log pi_k + log SN_k(y_i)`` as an ``(n, K)`` array."""
    out = np.empty((len(y), model.K))
    for k, (w, comp) in enumerate(zip(model.weights, model.components)):
        with np.errstate(divide="ignore"):
            out[:, k] = math.log(w) if w > 0 else -np.inf
        out[:, k] += _logpdf_rows(y, comp)
    return out


def _nearest_component(y, model):
    dist = np.empty((len(y), model.K))
    for k, comp in enumerate(model.components):
        z = (y - comp.location) @ comp.inv_sqrt_dispersion
        dist[:, k] = np.einsum("ij,ij->i", z, z)
    return np.argmin(dist, axis=1)


def _normalize(y, lj, model):
    norm = _lse_rows(lj)
    bad = ~np.isfinite(norm)
    with np.errstate(invalid="ignore"):
        gamma = np.exp(lj - norm[:, None])
    n_bad = int(bad.sum())
    if n_bad:
        gamma[bad] = 0.0
        gamma[np.flatnonzero(bad), _nearest_component(y[bad], model)] = 1.0
    return gamma, float(np.sum(norm[~bad])), n_bad


def _estep_terms(model):
    """Per-component constants for the E-step.

    The skew-normal density's ``Phi`` argument equals the truncated-normal
    ``alpha = xi' Omega^{-1} (y - eta) / beta``, so a single ``log Phi(alpha)``
    feeds both the responsibilities and the latent moments.
    """
    terms = []
    for w, comp, can in zip(model.weights, model.components, model.canonical):
        with np.errstate(divide="ignore"):
            const = (math.log(w) if w > 0 else -np.inf) - 0.5 * (
                comp.d * LOG2PI + comp.log_det
            )
        if comp.is_symmetric:
            terms.append((comp, const, None, 1.0))
            continue
        oinv_xi = np.linalg.solve(can.omega, can.xi)
        beta = math.sqrt(1.0 + can.xi @ oinv_xi)
        terms.append((comp, const + LOG2, oinv_xi / beta, beta))
    return terms


def e_step(data, model, threads=None):
    """Responsibilities and conditional latent moments for every voxel."""
    data = _check_data(data)
    skew = model.variant == "skew"
    terms = _estep_terms(model)

    def work(sl):
        y = data[sl]
        lj = np.empty((len(y), model.K))
        alphas = []
        for k, (comp, const, a_coef, _) in enumerate(terms):
            r = y - comp.location
            z = r @ comp.inv_sqrt_dispersion
            lj[:, k] = const - 0.5 * np.einsum("ij,ij->i", z, z)
            if a_coef is None:
                alphas.append((np.zeros(len(y)), None))
            else:
                alpha = r @ a_coef
                log_cdf = log_ndtr(alpha)
                lj[:, k] += log_cdf
                alphas.append((alpha, log_cdf))
        gamma, ll, n_bad = _normalize(y, lj, model)
        if not skew:
            return gamma, None, None, ll, n_bad
        vt = np.empty_like(gamma)
        ps = np.empty_like(gamma)
        for k, ((alpha, log_cdf), (_, _, _, beta)) in enumerate(zip(alphas, terms)):
            first, second = _unit_trunc_moments(alpha, log_cdf)
            vt[:, k] = gamma[:, k] * first / beta
            ps[:, k] = gamma[:, k] * second / (beta * beta)
        return gamma, vt, ps, ll, n_bad

    parts = map_chunks(work, len(data), threads)
    gamma = np.concatenate([p[0] for p in parts])
    if skew:
        vartheta = np.concatenate([p[1] for p in parts])
        psi = np.concatenate([p[2] for p in parts])
    else:
        vartheta = np.zeros_like(gamma)
        psi = np.zeros_like(gamma)
    ll = math.fsum(p[3] for p in parts)
    return EStepQuantities(gamma, vartheta, psi, ll, sum(p[4] for p in parts))


def m_step(data, q, model, *, ridge=1e-6, lock_skewness=False, collapse_count=10.0):
    """Closed-form parameter update from E-step quantities.

    ``model`` supplies the current ``xi`` used by the location update. Raises
    ComponentCollapseError if a component's responsibility mass is below
    ``collapse_count``.
    """
    data = _check_data(data)
    n, d = data.shape
    nk = q.gamma.sum(axis=0)
    for k in range(model.K):
        if not nk[k] >= collapse_count:
            raise ComponentCollapseError(k, float(nk[k]), collapse_count)
    weights = nk / nk.sum()
    skew = model.variant == "skew" and not lock_skewness
    comps = []
    for k, can in enumerate(model.canonical):
        g = q.gamma[:, k]
        if skew:
            th = q.vartheta[:, k]
            eta = (g @ data - th.sum() * can.xi) / nk[k]
            r = data - eta
            th_r = th @ r
            psi_sum = q.psi[:, k].sum()
            xi = th_r / psi_sum
            scatter = (r * g[:, None]).T @ r
            omega = (
                scatter
                - (np.outer(th_r, xi) + np.outer(xi, th_r))
                + psi_sum * np.outer(xi, xi)
            ) / nk[k]
        else:
            eta = (g @ data) / nk[k]
            r = data - eta
            xi = np.zeros(d)
            omega = (r * g[:, None]).T @ r / nk[k]
        omega = _ridged(omega, ridge)
        comps.append(reparam_inverse(CanonicalParams(eta, xi, omega)))
    return MixtureModel(model.variant, weights, tuple(comps))


def loglik(data, model, threads=None):
    """Observed-data log-likelihood ``sum_i log sum_k pi_k SN_k(y_i)``."""
    data = _check_data(data)
    parts = map_chunks(
        lambda sl: float(np.sum(_lse_rows(_log_joint(data[sl], model)))),
        len(data),
        threads,
    )
    return math.fsum(parts)


def q_function(data, q, model):
    """Expected complete-data log-likelihood of ``model`` under E-step ``q``.

    Terms that do not depend on the parameters (the half-normal density of
    ``U``) are dropped.
    """
    data = _check_data(data)
    d = data.shape[1]
    total = 0.0
    for k, (w, can) in enumerate(zip(model.weights, model.canonical)):
        g = q.gamma[:, k]
        nk = g.sum()
        _, logdet = np.linalg.slogdet(can.omega)
        oinv = np.linalg.inv(can.omega)
        r = data - can.location
        maha = np.einsum("ij,jk,ik->i", r, oinv, r)
        cross = r @ (oinv @ can.xi)
        quad = can.xi @ oinv @ can.xi
        total += nk * (math.log(w) - 0.5 * (d * LOG2PI + logdet))
        total -= 0.5 * (g @ maha - 2.0 * q.vartheta[:, k] @ cross + q.psi[:, k].sum() * quad)
    return float(total)


def param_change(old, new):
    """Largest parameter step between two models, in whitened units.

    Location and ``xi`` steps are measured in ``Sigma^{-1/2}`` units of the new
    component, ``Omega`` steps after whitening on both sides, weights as is.
    """
    worst = float(np.max(np.abs(new.weights - old.weights)))
    for c_old, c_new, p_new in zip(old.canonical, new.canonical, new.components):
        w = p_new.inv_sqrt_dispersion
        steps = (
            w @ (c_new.location - c_old.location),
            w @ (c_new.xi - c_old.xi),
            w @ (c_new.omega - c_old.omega) @ w,
        )
        worst = max(worst, *(float(np.max(np.abs(s))) for s in steps))
    return worst


def _run_em(data, model, cfg, callback=None):
    trace = FitTrace()
    q = e_step(data, model, cfg.threads)
    trace.add(0, q.loglik, math.nan)
    trace.n_degenerate += q.n_degenerate
    for it in range(1, cfg.max_iter + 1):
        new = m_step(
            data,
            q,
            model,
            ridge=cfg.ridge,
            lock_skewness=cfg.lock_skewness,
            collapse_count=cfg.collapse_count,
        )
        q_new = e_step(data, new, cfg.threads)
        delta = float(np.max(np.abs(q_new.gamma - q.gamma)))
        step = param_change(model, new)
        model, q = new, q_new
        trace.add(it, q.loglik, delta, step)
        trace.n_degenerate += q.n_degenerate
        if callback is not None:
            callback(it, model)
        if delta <= cfg.stop_tol and (cfg.param_tol is None or step <= cfg.param_tol):
            trace.converged = True
            break
    return model, trace


def _restart_seeds(seed, restarts):
    children = np.random.SeedSequence(seed).spawn(restarts)
    return [int(c.generate_state(1)[0]) for c in children]


def fit(data, cfg, *, init=None, selection=None, callback=None):
    """Fit a mixture by EM with k-means initialized restarts.

    Each restart runs until ``max |gamma_new - gamma_old| <= cfg.stop_tol`` or
    ``cfg.max_iter`` iterations. The returned restart maximizes the observed
    log-likelihood, or minimizes the CT-prediction mean squared error on
    ``selection = (mr, ct)`` when given. A restart that collapses a component
    is skipped; if every restart collapses the last error is raised.

    Returns ``(model, trace)``. A run that hit ``max_iter`` is returned with
    ``trace.converged = False``.
    """
    data = _check_data(data)
    n, d = data.shape
    if init is None and n < cfg.K * (d + 1):
        raise InputError(f"need n >= K*(d+1) = {cfg.K * (d + 1)} rows, got {n}")
    if selection is not None:
        from .predictor import predict_volume

        sel_mr = np.asarray(selection[0], dtype=float)
        sel_ct = np.asarray(selection[1], dtype=float)

    seeds = [cfg.seed] if init is not None else _restart_seeds(cfg.seed, cfg.restarts)
    best = None
    failure = None
    for r, seed in enumerate(seeds):
        start = init
        if start is None:
            start = kmeans_init(data, cfg.K, seed, variant=cfg.variant, ridge=cfg.ridge)
        elif start.variant != cfg.variant:
            start = MixtureModel(cfg.variant, start.weights, start.components)
        try:
            model, trace = _run_em(data, start, cfg, callback)
        except ComponentCollapseError as err:
            failure = err
            continue
        trace.seed, trace.restart = seed, r
        if selection is not None:
            score = -float(np.mean((predict_volume(sel_mr, model, cfg.threads) - sel_ct) ** 2))
        else:
            score = trace.loglik[-1]
        if best is None or score > best[0]:
            best = (score, model, trace)
    if best is None:
        raise failure
    _, model, trace = best
    model = model.with_info(
        seed=trace.seed,
        restart=trace.restart,
        iterations=trace.n_iter,
        final_delta=trace.final_delta,
        converged=trace.converged,
        loglik=trace.loglik[-1],
    )
    return model, trace
