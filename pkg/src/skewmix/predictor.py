"""CT prediction from MR channels.

Each voxel's prediction is the mixture conditional expectation

    E[Y1 | y2] = sum_k P(Z = k | y2) E[Y1 | y2, Z = k]

with the weights from Bayes' rule over the skew-normal marginals of the MR
channels. :func:`predict_partitioned` adds the two-stage scheme: a full-data
model routes voxels by predicted HU to a non-bone or a bone model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._parallel import map_chunks
from .dataio import HUInterval, extract_partition
from .errors import InputError, PartitionSizeError
from .mixture import FitConfig, fit
from .skewnormal import _logpdf_rows, conditional_split, mills_ratio

__all__ = [
    "PartitionSpec",
    "PartitionedModel",
    "component_splits",
    "posterior_weights",
    "predict_point",
    "predict_volume",
    "train_partitioned",
    "predict_partitioned",
    "select_k",
]


@dataclass(frozen=True)
class PartitionSpec:
    """Training intervals for the two tissue models and the routing threshold.

    Voxels whose stage-1 prediction is ``<= predict_threshold`` are routed to
    the non-bone model.
    """

    train_nonbone: HUInterval = field(default_factory=lambda: HUInterval(-1024.0, 200.0))
    train_bone: HUInterval = field(
        default_factory=lambda: HUInterval(100.0, 3071.0, hi_closed=True)
    )
    predict_threshold: float = 100.0

    def __post_init__(self):
        lo, hi = self.train_bone.lo, self.train_nonbone.hi
        if hi < lo:
            raise InputError(
                f"training intervals must overlap (non-bone upper {hi} < bone lower {lo})"
            )
        if not lo <= self.predict_threshold <= hi:
            raise InputError(
                f"threshold {self.predict_threshold} must lie in the overlap [{lo}, {hi}]"
            )

    @property
    def overlap(self):
        return self.train_nonbone.hi - self.train_bone.lo


@dataclass(frozen=True, eq=False)
class PartitionedModel:
    full: object
    nonbone: object
    bone: object
    spec: PartitionSpec = field(default_factory=PartitionSpec)

    def __post_init__(self):
        if not self.full.d == self.nonbone.d == self.bone.d:
            raise InputError("full, non-bone and bone models must share d")

    @property
    def d(self):
        return self.full.d


def component_splits(model):
    """Per-component conditional blocks, cached on the (immutable) model."""
    try:
        return model._splits
    except AttributeError:
        splits = tuple(conditional_split(c) for c in model.components)
        object.__setattr__(model, "_splits", splits)
        return splits


def _check_mr(mr, model):
    if model.d < 2:
        raise InputError("prediction needs a model with d >= 2")
    mr = np.asarray(mr, dtype=float)
    single = mr.ndim <= 1
    rows = mr.reshape(-1, model.d - 1) if single else mr
    if rows.ndim != 2 or rows.shape[1] != model.d - 1:
        raise InputError(f"expected {model.d - 1} MR channels, got shape {mr.shape}")
    if not np.all(np.isfinite(rows)):
        raise InputError("MR intensities must be finite")
    return rows, single


def _log_marginal_joint(rows, model, splits):
    out = np.empty((len(rows), model.K))
    for k, (w, sp) in enumerate(zip(model.weights, splits)):
        with np.errstate(divide="ignore"):
            out[:, k] = math.log(w) if w > 0 else -np.inf
        out[:, k] += _logpdf_rows(rows, sp.marginal)
    return out


def _weights(rows, model, splits):
    lj = _log_marginal_joint(rows, model, splits)
    norm = logsumexp(lj, axis=1)
    with np.errstate(invalid="ignore"):
        w = np.exp(lj - norm[:, None])
    bad = ~np.isfinite(norm)
    if np.any(bad):
        dist = np.empty((int(bad.sum()), model.K))
        for k, sp in enumerate(splits):
            z = (rows[bad] - sp.eta2) @ sp.marginal.inv_sqrt_dispersion
            dist[:, k] = np.einsum("ij,ij->i", z, z)
        w[bad] = 0.0
        w[np.flatnonzero(bad), np.argmin(dist, axis=1)] = 1.0
    return w


def _cond_means(rows, splits):
    out = np.empty((len(rows), len(splits)))
    for k, sp in enumerate(splits):
        centred = rows - sp.eta2
        m = sp.eta1 + centred @ sp.regression
        if sp.nu[0] != 0.0:
            m = m + sp.shift_scale * mills_ratio(centred @ sp.kappa_coef)
        out[:, k] = m
    return out


def _predict_rows(rows, model, splits):
    return np.einsum("ik,ik->i", _weights(rows, model, splits), _cond_means(rows, splits))


def posterior_weights(y2, model):
    """``P(Z = k | Y2 = y2)`` from the MR-channel marginals; rows sum to 1."""
    rows, single = _check_mr(y2, model)
    w = _weights(rows, model, component_splits(model))
    return w[0] if single else w


def predict_point(y2, model):
    """Mixture conditional expectation of CT for one MR vector."""
    rows, _ = _check_mr(y2, model)
    if len(rows) != 1:
        raise InputError("predict_point takes a single MR vector; use predict_volume")
    return float(_predict_rows(rows, model, component_splits(model))[0])


def predict_volume(mr, model, threads=None):
    """Vectorized :func:`predict_point` over the rows of ``mr``."""
    rows, _ = _check_mr(mr, model)
    splits = component_splits(model)
    parts = map_chunks(lambda sl: _predict_rows(rows[sl], model, splits), len(rows), threads)
    return np.concatenate(parts) if parts else np.empty(0)


def train_partitioned(train, spec, cfg_full, cfg_part, *, threads=None, selection=None):
    """Fit the full-data model and the two overlapping tissue models.

    ``cfg_full`` drives the stage-1 (routing) model. ``cfg_part`` is used for
    both the non-bone and the bone partition.
    """
    parts = {}
    for name, interval in (("nonbone", spec.train_nonbone), ("bone", spec.train_bone)):
        sub = extract_partition(train, interval)
        need = cfg_part.K * (sub.d + 1)
        if sub.n < need:
            raise PartitionSizeError(
                f"{name} partition {interval} has {sub.n} voxels, need >= {need}"
            )
        parts[name] = sub
    if threads is not None:
        cfg_full = _with_threads(cfg_full, threads)
        cfg_part = _with_threads(cfg_part, threads)
    full, _ = fit(train.data, cfg_full, selection=selection)
    nonbone, _ = fit(parts["nonbone"].data, cfg_part)
    bone, _ = fit(parts["bone"].data, cfg_part)
    return PartitionedModel(full, nonbone, bone, spec)


def _with_threads(cfg, threads):
    from dataclasses import replace

    return replace(cfg, threads=threads)


def predict_partitioned(mr, pm, threads=None, return_routing=False):
    """Two-stage prediction: route by the full model, predict by the tissue model.

    With ``return_routing`` also returns the boolean mask of voxels sent to
    the bone model.
    """
    stage1 = predict_volume(mr, pm.full, threads)
    to_bone = stage1 > pm.spec.predict_threshold
    rows = np.asarray(mr, dtype=float).reshape(len(stage1), -1)
    out = np.empty_like(stage1)
    for mask, model in ((~to_bone, pm.nonbone), (to_bone, pm.bone)):
        if np.any(mask):
            out[mask] = predict_volume(rows[mask], model, threads)
    return (out, to_bone) if return_routing else out


def select_k(data, grid, cfg, *, holdout_frac=0.2, seed=0):
    """Choose K from ``grid`` by held-out CT-prediction mean squared error.

    Returns ``(best_K, {K: mse})``; ties go to the smaller K.
    """
    from dataclasses import replace

    data = np.asarray(data, dtype=float)
    if not 0 < holdout_frac < 1:
        raise InputError("holdout_frac must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    n_hold = max(1, int(round(holdout_frac * len(data))))
    hold, train = data[perm[:n_hold]], data[perm[n_hold:]]
    scores = {}
    for K in sorted(set(int(k) for k in grid)):
        model, _ = fit(train, replace(cfg, K=K))
        pred = predict_volume(hold[:, 1:], model, cfg.threads)
        scores[K] = float(np.mean((pred - hold[:, 0]) ** 2))
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores
