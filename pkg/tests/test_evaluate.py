import csv
import itertools
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from skewmix import evaluate as ev
from skewmix.dataio import VoxelTable, planted_cohort
from skewmix.errors import DegenerateTestError, EmptyRegionError, InputError, SkewMixError
from skewmix.mixture import FitConfig
from skewmix.predictor import PartitionSpec


def brute_p(diffs):
    """P(W+ <= observed) by enumerating every sign pattern."""
    d = np.asarray([x for x in diffs if x != 0], dtype=float)
    ranks = stats.rankdata(np.abs(d))
    obs = ranks[d > 0].sum()
    signs = np.array(list(itertools.product([0, 1], repeat=len(d))))
    w = signs @ ranks
    return np.count_nonzero(w <= obs + 1e-9) / len(signs)


def test_mae_regions():
    truth = np.array([-500.0, 100.0, 150.0, 1000.0])
    pred = truth + np.array([1.0, -2.0, 3.0, -4.0])
    assert ev.mae(pred, truth) == 2.5
    assert ev.mae(pred, truth, ev.REGIONS["nonbone"]) == 1.5
    assert ev.mae(pred, truth, ev.REGIONS["bone"]) == 3.5
    assert ev.mae(pred, truth, ev.REGIONS["dense_bone"]) == 4.0


def test_mae_empty_region():
    with pytest.raises(EmptyRegionError):
        ev.mae([0.0], [0.0], ev.REGIONS["bone"])


def test_mae_length_mismatch():
    with pytest.raises(InputError):
        ev.mae([0.0, 1.0], [0.0])


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(-50, 50))
def test_mae_translation(resid, c):
    truth = np.linspace(-1000, 3000, len(resid))
    pred = truth + np.array(resid)
    want = np.mean([abs(r + c) for r in resid])
    assert ev.mae(pred + c, truth) == pytest.approx(want, rel=1e-9, abs=1e-9)


def test_psnr_hand_example():
    truth = np.array([0.0, 1.0, 2.0, 2.0])
    assert ev.psnr(truth + 1.0, truth) == pytest.approx(10 * math.log10(4.0), abs=1e-12)


def test_psnr_zero_peak():
    with pytest.raises(InputError):
        ev.psnr([1.0, 2.0], [-5.0, 0.0])


def test_psnr_exact_prediction():
    assert ev.psnr([1.0, 2.0], [1.0, 2.0]) == math.inf


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20), st.integers(0, 19),
       st.floats(0.1, 10))
def test_psnr_decreases_with_error(resid, i, bump):
    i %= len(resid)
    truth = np.linspace(10, 500, len(resid))
    pred = truth + np.array(resid)
    worse = pred.copy()
    worse[i] += math.copysign(bump, resid[i] if resid[i] else 1.0)
    assert ev.psnr(worse, truth) < ev.psnr(pred, truth)


def test_residuals_single_window():
    truth = np.array([0.0, 5.0, 10.0])
    pred = truth + np.array([1.0, -3.0, 5.0])
    (w,) = ev.smoothed_residuals(pred, truth)
    assert w.count == 3
    assert w.mean_truth == pytest.approx(5.0)
    assert w.mean_residual == pytest.approx(1.0)
    assert w.mean_abs_residual == pytest.approx(3.0)


def test_residuals_first_window_boundary():
    (w,) = ev.smoothed_residuals([0.0, 0.0], [-1024.0, -1005.0])
    assert (w.lo, w.count) == (-1024.0, 2)
    curve = ev.smoothed_residuals([0.0, 0.0], [-1024.0, -1004.0])
    assert [c.lo for c in curve] == [-1024.0, -1004.0]


def test_residuals_group_by_oracle():
    rng = np.random.default_rng(3)
    truth = rng.uniform(-1024, 3071, 5000)
    pred = truth + rng.normal(0, 30, 5000)
    groups = defaultdict(list)
    for t, p in zip(truth, pred):
        groups[int((t + 1024) // 20)].append((t, p - t))
    curve = ev.smoothed_residuals(pred, truth, 20)
    assert len(curve) == len(groups)
    for c in curve:
        g = groups[int(round((c.lo + 1024) / 20))]
        assert c.count == len(g)
        assert c.mean_truth == pytest.approx(np.mean([t for t, _ in g]), rel=1e-12)
        assert c.mean_residual == pytest.approx(np.mean([r for _, r in g]), abs=1e-9)
        assert c.mean_abs_residual == pytest.approx(np.mean([abs(r) for _, r in g]), rel=1e-12)


@given(st.integers(1, 300), st.integers(0, 2**31), st.sampled_from([1.0, 7.5, 20.0, 500.0]))
def test_residual_curve_reconstructs_mae(n, seed, window):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(-1024, 3071, n)
    pred = truth + rng.normal(0, 50, n)
    curve = ev.smoothed_residuals(pred, truth, window)
    recon = sum(c.count * c.mean_abs_residual for c in curve) / n
    assert abs(recon - ev.mae(pred, truth)) <= 1e-9


def test_residuals_rejects_window():
    with pytest.raises(InputError):
        ev.smoothed_residuals([0.0], [0.0], 0.0)


def test_bland_altman_shift():
    truth = np.array([1.0, 2.0, 3.0])
    ba = ev.bland_altman(truth + 5, truth)
    assert ba.bias == 5.0 and ba.sd == 0.0
    assert ba.pairs == [(3.5, 5.0), (4.5, 5.0), (5.5, 5.0)]
    assert ev.bland_altman(truth, truth).bias == 0.0


def test_bland_altman_direct():
    rng = np.random.default_rng(4)
    truth = rng.normal(0, 100, 200)
    pred = truth + rng.normal(3, 10, 200)
    ba = ev.bland_altman(pred, truth)
    diff = pred - truth
    assert ba.bias == pytest.approx(pred.mean() - truth.mean(), abs=1e-12)
    assert ba.sd == pytest.approx(np.std(diff, ddof=1))
    assert ba.loa_low == pytest.approx(diff.mean() - 1.96 * np.std(diff, ddof=1))
    assert ba.loa_high == pytest.approx(diff.mean() + 1.96 * np.std(diff, ddof=1))


def test_wilcoxon_single_negative():
    assert ev.wilcoxon_one_sided([-3.0]).p_value == 0.5


def test_wilcoxon_five_negatives():
    res = ev.wilcoxon_one_sided([-1.0, -2.0, -3.0, -4.0, -5.0])
    assert res.p_value == 0.03125 and res.statistic == 0.0 and res.exact


def test_wilcoxon_all_zero():
    with pytest.raises(DegenerateTestError):
        ev.wilcoxon_one_sided([0.0, 0.0])


def test_wilcoxon_drops_zeros():
    assert ev.wilcoxon_one_sided([0.0, -1.0, 0.0]).n_effective == 1


@settings(max_examples=200)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=10))
def test_wilcoxon_matches_enumeration(vals):
    if not any(vals):
        return
    assert ev.wilcoxon_one_sided(vals).p_value == brute_p(vals)


@pytest.mark.parametrize("n", [6, 10, 15, 20])
def test_wilcoxon_exact_matches_scipy_without_ties(n):
    rng = np.random.default_rng(n)
    d = rng.permutation(np.arange(1, n + 1)) * rng.choice([-1, 1], n)
    want = stats.wilcoxon(d, alternative="less", method="exact").pvalue
    assert ev.wilcoxon_one_sided(d).p_value == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("n", [21, 40])
def test_wilcoxon_normal_approximation(n):
    rng = np.random.default_rng(n)
    d = np.round(rng.normal(-0.3, 1, n), 1)
    res = ev.wilcoxon_one_sided(d)
    want = stats.wilcoxon(d, alternative="less", method="approx", correction=True,
                          zero_method="wilcox").pvalue
    assert not res.exact
    assert res.p_value == pytest.approx(want, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_wilcoxon_mirror_symmetry(seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(-5, 6, 9).astype(float)
    d[d == 0] = 1.0
    ranks = stats.rankdata(np.abs(d))
    values, probs = ev.signed_rank_null(ranks)
    w = ranks[d > 0].sum()
    p_ge = probs[values >= w - 1e-9].sum()
    assert ev.wilcoxon_one_sided(-d).p_value == pytest.approx(p_ge, abs=1e-15)
    # the null distribution is symmetric about n(n+1)/4
    assert_allclose(probs, probs[::-1])
    assert_allclose(values + values[::-1], len(d) * (len(d) + 1) / 2)


def test_evaluate_prediction_empty_region_is_nan():
    truth = np.array([-500.0, 0.0])
    r = ev.evaluate_prediction(truth + 1, truth)
    assert math.isnan(r.mae_bone) and r.mae_nonbone == 1.0 and r.mae_overall == 1.0


def test_loocv_contract():
    heads = planted_cohort(3, 1500, seed=5)
    cfg = FitConfig(K=2, max_iter=30)
    sizes = []
    reports = ev.loocv(heads, PartitionSpec(), cfg, cfg,
                       on_fold=lambda i, r, p: sizes.append(r.train_size))
    assert len(reports) == 3
    total = sum(h.n for h in heads)
    assert sizes == [total - h.n for h in heads]
    assert [r.head for r in reports] == ["head1", "head2", "head3"]


def test_loocv_identical_tables_symmetric():
    (head,) = planted_cohort(1, 2000, seed=6)
    cfg = FitConfig(K=2, max_iter=30)
    a, b = ev.loocv([head, head], PartitionSpec(), cfg, cfg, method="full")
    assert a.mae_overall == pytest.approx(b.mae_overall, rel=1e-12)


def test_loocv_annotates_fold():
    good = planted_cohort(1, 500, seed=7)[0]
    tiny = VoxelTable([500.0, 600.0], [1, 1], np.ones((2, good.mr.shape[1])), "tiny")
    cfg = FitConfig(K=2, max_iter=5)
    # fold 2 holds out head1 and trains on the tiny table alone
    with pytest.raises(SkewMixError, match=r"fold 2 \(head1\)") as info:
        ev.loocv([tiny, good], PartitionSpec(), cfg, cfg)
    assert info.value.fold == 2


def test_loocv_needs_two_tables():
    with pytest.raises(InputError):
        ev.loocv([planted_cohort(1, 50, seed=0)[0]], PartitionSpec(), FitConfig(K=1))


def fake_report(head, mae_bone):
    return ev.EvalReport(head, 10, 1.0, mae_bone, 2.0, 3.0, 20.0)


def test_summary_grid_average_and_p():
    res = {
        "sgmm": [fake_report(f"h{i}", v) for i, v in enumerate([1.0, 2.0, 3.0, 4.0, 5.0])],
        "gmm": [fake_report(f"h{i}", v) for i, v in enumerate([2.0, 3.0, 4.0, 5.0, 6.0])],
    }
    rows = ev.summary_grid(res, "mae_bone")
    assert rows[0] == ["head", "sgmm", "gmm"]
    avg = rows[-2]
    assert avg[0] == "Average" and avg[1] == pytest.approx(3.0, abs=1e-9) and avg[2] == 4.0
    assert rows[-1] == ["p-value", "-", 0.03125]
    text = ev.format_grid(rows, "mae_bone")
    assert "Average" in text and "0.031" in text


def test_csv_writers(tmp_path):
    rng = np.random.default_rng(8)
    truth = rng.uniform(-1000, 2000, 300)
    r = ev.evaluate_prediction(truth + rng.normal(0, 5, 300), truth, "h1")
    with ev.write_report(tmp_path / "r.csv", r).open() as fh:
        rows = dict(csv.reader(fh))
    assert float(rows["mae_overall"]) == r.mae_overall
    with ev.write_residual_curve(tmp_path / "c.csv", r.residual_curve).open() as fh:
        assert len(list(csv.reader(fh))) == len(r.residual_curve) + 1
    with ev.write_bland_altman(tmp_path / "b.csv", r.bland_altman).open() as fh:
        assert len(list(csv.reader(fh))) == 301
