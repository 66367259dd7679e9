"""Voxel tables: CSV ingestion, partition extraction and synthetic cohorts.

A table holds one row per voxel: CT intensity (HU), the binary head mask and
the MR channel intensities. On disk it is a UTF-8 CSV with the header
``ct,mask,mr1,...,mrM`` (M = 4 for the dual-echo UTE protocol).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, TableFormatError
from .mixture import MixtureModel
from .skewnormal import SkewNormalParams, _sample

__all__ = [
    "CT_MIN",
    "CT_MAX",
    "HUInterval",
    "VoxelTable",
    "SynthSpec",
    "load_table",
    "save_table",
    "labels_path",
    "save_labels",
    "load_labels",
    "extract_partition",
    "concat_tables",
    "synth_generate",
    "default_truth",
    "two_regime_truth",
    "planted_cohort",
]

CT_MIN = -1024.0
CT_MAX = 3071.0
N_MR_DEFAULT = 4


@dataclass(frozen=True)
class HUInterval:
    """Interval on the HU axis with explicit endpoint closure."""

    lo: float
    hi: float
    lo_closed: bool = False
    hi_closed: bool = False

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise InputError(f"interval lower bound {self.lo} exceeds upper {self.hi}")

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        lo_ok = x >= self.lo if self.lo_closed else x > self.lo
        hi_ok = x <= self.hi if self.hi_closed else x < self.hi
        return lo_ok & hi_ok

    @classmethod
    def parse(cls, text):
        """Parse ``"(-1024,200)"``, ``"(100,3071]"`` and the like."""
        s = text.strip()
        if len(s) < 5 or s[0] not in "([" or s[-1] not in ")]" or "," not in s:
            raise InputError(f"cannot parse interval {text!r}")
        lo, hi = s[1:-1].split(",", 1)
        try:
            return cls(float(lo), float(hi), s[0] == "[", s[-1] == "]")
        except ValueError:
            raise InputError(f"cannot parse interval {text!r}") from None

    def __str__(self):
        return (
            f"{'[' if self.lo_closed else '('}{self.lo:g},"
            f"{self.hi:g}{']' if self.hi_closed else ')'}"
        )


@dataclass(frozen=True, eq=False)
class VoxelTable:
    ct: np.ndarray
    mask: np.ndarray
    mr: np.ndarray
    patient_id: str = ""

    def __post_init__(self):
        ct = np.array(self.ct, dtype=float, ndmin=1)
        mask = np.array(self.mask, dtype=np.int8, ndmin=1)
        mr = np.array(self.mr, dtype=float, ndmin=2)
        n = ct.shape[0]
        if ct.ndim != 1 or mask.shape != (n,) or mr.ndim != 2 or mr.shape[0] != n:
            raise InputError(
                f"inconsistent table shapes: ct {ct.shape}, mask {mask.shape}, mr {mr.shape}"
            )
        if mr.shape[1] < 1:
            raise InputError("a table needs at least one MR channel")
        if not (np.all(np.isfinite(ct)) and np.all(np.isfinite(mr))):
            raise InputError("table values must be finite")
        if np.any((mask != 0) & (mask != 1)):
            raise InputError("mask values must be 0 or 1")
        if np.any(mr < 0):
            raise InputError("MR intensities must be nonnegative")
        for a in (ct, mask, mr):
            a.setflags(write=False)
        object.__setattr__(self, "ct", ct)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "mr", mr)

    @property
    def n(self):
        return self.ct.shape[0]

    @property
    def d(self):
        return 1 + self.mr.shape[1]

    @property
    def data(self):
        """The ``(n, d)`` model matrix: CT first, then the MR channels."""
        return np.column_stack([self.ct, self.mr])

    def rows(self, index):
        return VoxelTable(self.ct[index], self.mask[index], self.mr[index], self.patient_id)

    def masked(self):
        return self.rows(self.mask == 1)


def concat_tables(tables, patient_id="concat"):
    tables = list(tables)
    if not tables:
        raise InputError("nothing to concatenate")
    return VoxelTable(
        np.concatenate([t.ct for t in tables]),
        np.concatenate([t.mask for t in tables]),
        np.concatenate([t.mr for t in tables]),
        patient_id,
    )


def _expected_header(n_mr):
    return ["ct", "mask"] + [f"mr{j}" for j in range(1, n_mr + 1)]


def load_table(path, *, clamp=False, check_range=True, apply_mask=True, n_mr=None):
    """Read a voxel table CSV and drop voxels outside the mask.

    The header must be ``ct,mask,mr1,...,mrM`` in that order (``n_mr`` pins M).
    CT values outside ``[CT_MIN, CT_MAX]`` are an error unless ``clamp`` is set
    or ``check_range`` is off (used for prediction files).
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no such table file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TableFormatError("empty file", line=1) from None
        m = len(header) - 2
        if m < 1 or header != _expected_header(m) or (n_mr is not None and m != n_mr):
            want = ",".join(_expected_header(n_mr or N_MR_DEFAULT))
            raise TableFormatError(f"header must be {want!r}, got {','.join(header)!r}", line=1)
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != m + 2:
                raise TableFormatError(f"expected {m + 2} fields, got {len(row)}", line=lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise TableFormatError(f"non-numeric field in {row!r}", line=lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise TableFormatError("non-finite value", line=lineno)
            if vals[1] not in (0.0, 1.0):
                raise TableFormatError(f"mask must be 0 or 1, got {row[1]!r}", line=lineno)
            if any(v < 0 for v in vals[2:]):
                raise TableFormatError("MR intensities must be nonnegative", line=lineno)
            ct = vals[0]
            if check_range and not CT_MIN <= ct <= CT_MAX:
                if not clamp:
                    raise TableFormatError(
                        f"ct value {row[0]} outside [{CT_MIN:g}, {CT_MAX:g}]", line=lineno
                    )
                vals[0] = min(max(ct, CT_MIN), CT_MAX)
            values.append(vals)
    arr = np.array(values, dtype=float).reshape(-1, m + 2)
    table = VoxelTable(arr[:, 0], arr[:, 1], arr[:, 2:], path.stem)
    return table.masked() if apply_mask else table


def _fmt(x):
    return f"{x:.10g}"


def save_table(path, table):
    """Write a table with 10 significant digits per value."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_expected_header(table.mr.shape[1]))
        for ct, mk, mr in zip(table.ct, table.mask, table.mr):
            w.writerow([_fmt(ct), int(mk)] + [_fmt(v) for v in mr])
    return path


def labels_path(table_path):
    p = Path(table_path)
    return p.with_name(p.stem + ".labels.csv")


def save_labels(path, labels):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write("component\n")
        fh.writelines(f"{int(v)}\n" for v in labels)
    return path


def load_labels(path):
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "component":
            raise TableFormatError(f"labels header must be 'component', got {header!r}", line=1)
        return np.array([int(s) for s in fh.read().split()], dtype=int)


def extract_partition(table, interval):
    """Rows whose CT lies in ``interval`` (endpoint closure honoured)."""
    return table.rows(interval.contains(table.ct))


@dataclass(frozen=True)
class SynthSpec:
    """Planted-truth generator settings; column 0 of the truth model is CT."""

    truth: MixtureModel
    n: int
    seed: int
    ct_channel_index: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise InputError(f"synthetic table needs n >= 1, got {self.n}")
        if self.truth.d < 2:
            raise InputError("truth model needs d >= 2 (CT plus at least one MR channel)")
        if self.ct_channel_index != 0:
            raise InputError("CT must be the first channel")


def synth_generate(spec, patient_id="synth"):
    """Sample a voxel table from a planted mixture.

    Labels are drawn from the mixture weights, then each component's rows come
    from its stochastic representation. CT is clipped to ``[CT_MIN, CT_MAX]``
    and MR to nonnegative values, as a scanner would. Returns
    ``(table, labels)``.
    """
    truth = spec.truth
    rng = np.random.default_rng(spec.seed)
    labels = rng.choice(truth.K, size=spec.n, p=truth.weights)
    y = np.empty((spec.n, truth.d))
    for k, comp in enumerate(truth.components):
        idx = np.flatnonzero(labels == k)
        if len(idx):
            y[idx] = _sample(comp, len(idx), rng)
    ct = np.clip(y[:, 0], CT_MIN, CT_MAX)
    mr = np.clip(y[:, 1:], 0.0, None)
    return VoxelTable(ct, np.ones(spec.n, dtype=np.int8), mr, patient_id), labels


def _random_corr(d, rng, strength=0.5):
    a = rng.standard_normal((d, d))
    cov = strength * (a @ a.T) / d + np.eye(d)
    s = np.sqrt(np.diag(cov))
    return cov / np.outer(s, s)


def default_truth(K, d, seed, variant="skew"):
    """A random head-like truth model: CT locations spread over soft tissue to bone.

    CT locations are evenly spaced on ``[-800, 1200]`` HU, MR locations on
    ``[50, 450]`` in random order per channel, and skewness entries are drawn
    from ``[-3, 3]``.
    """
    if K < 1 or d < 2:
        raise InputError("default truth needs K >= 1 and d >= 2")
    rng = np.random.default_rng(seed)
    ct_loc = np.linspace(-800.0, 1200.0, K) if K > 1 else np.array([40.0])
    mr_loc = np.column_stack(
        [rng.permutation(np.linspace(50.0, 450.0, K) if K > 1 else [250.0]) for _ in range(d - 1)]
    )
    scales = np.concatenate([[60.0], np.full(d - 1, 15.0)])
    comps = []
    for k in range(K):
        corr = _random_corr(d, rng)
        skew = rng.uniform(-3.0, 3.0, size=d) if variant == "skew" else np.zeros(d)
        loc = np.concatenate([[ct_loc[k]], mr_loc[k]])
        comps.append(SkewNormalParams(loc, corr * np.outer(scales, scales), skew))
    weights = rng.dirichlet(np.full(K, 5.0))
    return MixtureModel(variant, weights, tuple(comps))


def two_regime_truth(n_mr=N_MR_DEFAULT):
    """Planted soft-tissue / bone mixture split around 150 HU.

    Three soft-tissue components (air-like, fat-like, water-like) sit below
    150 HU and three bone components above it. Within the bone regime CT
    rises with the MR channels along a curved path, which a single global
    mixture with few components cannot follow.
    """
    rng = np.random.default_rng(20231016)
    specs = [
        # weight, ct, mr locations, ct scale, mr scale, ct skew
        (0.14, -700.0, [40.0, 30.0, 60.0, 25.0], 80.0, 12.0, 2.0),
        (0.22, -90.0, [300.0, 260.0, 180.0, 150.0], 25.0, 15.0, -1.0),
        (0.34, 40.0, [220.0, 200.0, 240.0, 190.0], 15.0, 15.0, 1.0),
        (0.13, 400.0, [90.0, 110.0, 100.0, 120.0], 70.0, 10.0, 1.5),
        (0.10, 900.0, [60.0, 90.0, 50.0, 70.0], 90.0, 8.0, 1.0),
        (0.07, 1500.0, [75.0, 60.0, 30.0, 40.0], 120.0, 8.0, -1.0),
    ]
    comps = []
    for w, ct, mr, s_ct, s_mr, lam in specs:
        mr = np.resize(np.asarray(mr), n_mr)
        d = 1 + n_mr
        corr = _random_corr(d, rng, strength=0.3)
        corr[0, 1:] = corr[1:, 0] = 0.6 * np.sign(corr[0, 1:]) * np.abs(corr[0, 1:]) ** 0.5
        w_c, v_c = np.linalg.eigh(corr)
        corr = (v_c * np.maximum(w_c, 0.05)) @ v_c.T
        s = np.sqrt(np.diag(corr))
        corr = corr / np.outer(s, s)
        scales = np.concatenate([[s_ct], np.full(n_mr, s_mr)])
        skew = np.zeros(d)
        skew[0] = lam
        comps.append(
            SkewNormalParams(np.concatenate([[ct], mr]), corr * np.outer(scales, scales), skew)
        )
    weights = np.array([s[0] for s in specs])
    return MixtureModel("skew", weights / weights.sum(), tuple(comps))


def planted_cohort(n_heads, n_per_head, seed, truth=None):
    """Independent synthetic heads sampled from one planted truth model."""
    truth = two_regime_truth() if truth is None else truth
    seeds = np.random.SeedSequence(seed).spawn(n_heads)
    out = []
    for h, ss in enumerate(seeds):
        table, _ = synth_generate(
            SynthSpec(truth, n_per_head, int(ss.generate_state(1)[0])), patient_id=f"head{h + 1}"
        )
        out.append(table)
    return out
