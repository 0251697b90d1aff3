import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from sdsat.training.masking import (
    IGNORE,
    MaskPlan,
    apply_masks,
    coverage_probability,
    plan_masks,
)


def simulate_coverage(n, L, rate, trials, seed=0):
    """Vectorized re-simulation of the selection process, independent of plan_masks."""
    rng = np.random.default_rng(seed)
    covered = 0
    for _ in range(trials):
        starts = rng.random(n) < rate
        widths = rng.integers(1, L + 1, size=n)
        ends = np.where(starts, np.minimum(np.arange(n) + widths, n), 0)
        reach = np.maximum.accumulate(ends)
        covered += int((reach > np.arange(n)).sum())
    return covered / (n * trials)


class TestPlan:
    def test_windows_in_bounds(self):
        plan = plan_masks(50, 5, 0.3, np.random.default_rng(0))
        assert all(0 <= s and s + w <= 50 and 1 <= w <= 5 for s, w in plan.replacements)

    def test_runs_merge_overlaps(self):
        plan = MaskPlan(10, 3, 0.1, ((1, 3), (2, 3), (7, 1)))
        assert plan.runs() == [(1, 4), (7, 1)]
        assert plan.replaced_count == 5

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            MaskPlan(5, 3, 0.1, ((4, 2),))

    @pytest.mark.parametrize("args", [(0, 1, 0.1), (5, 0, 0.1), (5, 1, 0.0), (5, 1, 1.0)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            plan_masks(*args, np.random.default_rng(0))

    def test_l1_is_binomial(self):
        n, rate = 200, 0.1
        rng = np.random.default_rng(1)
        counts = np.array([plan_masks(n, 1, rate, rng).replaced_count for _ in range(4000)])
        assert counts.mean() == pytest.approx(n * rate, rel=0.02)
        assert counts.var() == pytest.approx(n * rate * (1 - rate), rel=0.1)
        hist = np.bincount(counts, minlength=n + 1)
        lo, hi = 8, 33
        expected = stats.binom.pmf(np.arange(n + 1), n, rate) * len(counts)
        obs = np.concatenate([[hist[:lo].sum()], hist[lo:hi], [hist[hi:].sum()]])
        exp = np.concatenate([[expected[:lo].sum()], expected[lo:hi], [expected[hi:].sum()]])
        assert stats.chisquare(obs, exp * obs.sum() / exp.sum()).pvalue > 0.001

    @pytest.mark.parametrize("L", [1, 3, 5, 7])
    def test_closed_form_matches_simulation(self, L):
        assert simulate_coverage(2000, L, 0.1, 200, seed=L) == pytest.approx(
            coverage_probability(L, 0.1), rel=0.02)

    def test_plan_masks_matches_closed_form(self):
        rng = np.random.default_rng(5)
        frac = np.mean([plan_masks(5000, 5, 0.1, rng).replaced_count / 5000 for _ in range(100)])
        assert frac == pytest.approx(coverage_probability(5, 0.1), rel=0.01)


class TestApply:
    def test_empty_plan(self):
        mixed = apply_masks([4, 7, 2], MaskPlan(3, 2, 0.1, ()), [30])
        assert mixed.m == [4, 7, 2] and mixed.m_mask == [0, 0, 0]

    def test_worked_example(self):
        mixed = apply_masks([4, 7, 2, 9, 5], MaskPlan(5, 2, 0.1, ((1, 2),)), [30])
        assert mixed.m == [4, 30, 30, 9, 5]
        assert mixed.m_mask == [0, 1, 1, 0, 0]
        assert mixed.labels == [7, 2, 9, 5, IGNORE]

    def test_diverse_window(self):
        mixed = apply_masks([1, 2, 3, 4], MaskPlan(4, 3, 0.1, ((0, 3),)), [30, 31, 32], diverse=True)
        assert mixed.m == [30, 31, 32, 4]

    def test_diverse_merged_run_reuses_last_id(self):
        plan = MaskPlan(6, 2, 0.1, ((0, 2), (2, 2)))
        assert apply_masks(list(range(6)), plan, [30, 31], diverse=True).m == [30, 31, 31, 31, 4, 5]

    def test_diverse_window_too_wide(self):
        with pytest.raises(ValueError):
            apply_masks([1, 2, 3], MaskPlan(3, 3, 0.1, ()), [30, 31], diverse=True)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            apply_masks([1, 2], MaskPlan(3, 1, 0.1, ()), [30])

    @given(y=st.lists(st.integers(0, 20), min_size=1, max_size=60), seed=st.integers(0, 10**6),
           L=st.integers(1, 6))
    def test_labels_untouched(self, y, seed, L):
        plan = plan_masks(len(y), L, 0.3, np.random.default_rng(seed))
        mixed = apply_masks(y, plan, [99])
        assert mixed.labels == y[1:] + [IGNORE]
        assert sum(mixed.m_mask) == plan.replaced_count
        assert all(m == (99 if f else t) for m, t, f in zip(mixed.m, y, mixed.m_mask))
