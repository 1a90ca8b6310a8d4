import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_array_equal
from scipy import stats

from genpunet.data import generate_synthetic
from genpunet.evaluation import (
    GedEntry,
    GedReport,
    PairedMetricTable,
    UndefinedTestError,
    empty_fraction,
    evaluate_model,
    ged,
    iou_distance,
    pairwise_iou_distance,
    read_case_csv,
    summarize,
    wilcoxon_signed_rank,
    write_case_csv,
)
from genpunet.model import ArchConfig, build_variant

from .oracles import brute_force_ged, enumerated_wilcoxon_p, set_iou_distance

masks_4x4 = hnp.arrays(np.bool_, (4, 4))


class TestIouDistance:
    def test_identity(self):
        a = np.eye(4, dtype=bool)
        assert iou_distance(a, a) == 0.0

    def test_disjoint(self):
        a = np.zeros((3, 3), bool)
        b = np.zeros((3, 3), bool)
        a[0, 0] = b[2, 2] = True
        assert iou_distance(a, b) == 1.0

    def test_set_count_example(self):
        a = np.zeros(10, bool)
        b = np.zeros(10, bool)
        a[:5] = True
        b[3:8] = True  # intersection 2, union 8
        assert iou_distance(a, b) == 0.75

    def test_both_empty(self):
        z = np.zeros((2, 2), bool)
        assert iou_distance(z, z) == 0.0
        assert iou_distance(z, np.ones((2, 2), bool)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou_distance(np.zeros((2, 2)), np.zeros((2, 3)))

    @settings(max_examples=100, deadline=None)
    @given(masks_4x4, masks_4x4)
    def test_symmetric_bounded_and_matches_sets(self, a, b):
        d = iou_distance(a, b)
        assert d == iou_distance(b, a) == set_iou_distance(a, b)
        assert 0.0 <= d <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.bool_, (3, 4, 4)), hnp.arrays(np.bool_, (2, 4, 4)))
    def test_pairwise_matrix(self, xs, ys):
        expect = np.array([[iou_distance(x, y) for y in ys] for x in xs])
        assert_array_equal(pairwise_iou_distance(xs, ys), expect)


class TestGed:
    def test_identical_sets_zero(self, rng):
        refs = rng.random((2, 4, 4)) > 0.5
        refs[1] = ~refs[0]
        entry = ged(refs[::-1].copy(), refs)
        assert entry.ged_squared == 0.0

    def test_hand_enumerated(self):
        S = np.zeros((2, 4, 4), bool)
        Y = np.zeros((2, 4, 4), bool)
        S[0, :2, :2] = True          # 4 px
        S[1, :2, :3] = True          # 6 px, contains S0
        Y[0, :2, :2] = True          # equals S0
        Y[1, 2:, 2:] = True          # disjoint from everything
        # d(S0,Y0)=0, d(S0,Y1)=1, d(S1,Y0)=1-4/6, d(S1,Y1)=1 ; d(S0,S1)=1-4/6 ; d(Y0,Y1)=1
        # self terms average 2x2 matrices with a zero diagonal
        cross = (0 + 1 + (1 - 4 / 6) + 1) / 4
        div = 2 * (1 - 4 / 6) / 4
        entry = ged(S, Y)
        assert entry.cross_term == pytest.approx(cross, abs=1e-15)
        assert entry.diversity_term == pytest.approx(div, abs=1e-15)
        assert entry.interobserver_term == 0.5
        assert entry.ged_squared == pytest.approx(2 * cross - div - 0.5, abs=1e-15)
        assert (entry.ged_squared, entry.cross_term, entry.diversity_term, entry.interobserver_term) == \
            brute_force_ged(S, Y)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.bool_, st.tuples(st.integers(2, 5), st.just(4), st.just(4))),
           hnp.arrays(np.bool_, st.tuples(st.integers(2, 4), st.just(4), st.just(4))))
    def test_matches_brute_force(self, S, Y):
        e = ged(S, Y)
        assert (e.ged_squared, e.cross_term, e.diversity_term, e.interobserver_term) == brute_force_ged(S, Y)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.bool_, (3, 3, 3)), hnp.arrays(np.bool_, (3, 3, 3)))
    def test_terms_bounded(self, S, Y):
        e = ged(S, Y)
        for term in (e.cross_term, e.diversity_term, e.interobserver_term):
            assert 0.0 <= term <= 1.0

    def test_needs_two_of_each(self):
        with pytest.raises(ValueError):
            ged(np.zeros((1, 2, 2)), np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            ged(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


class TestReport:
    def test_population_std(self):
        s = summarize([0.1, 0.3])
        assert s.mean == pytest.approx(0.2) and s.std == pytest.approx(0.1)

    def test_format(self):
        rep = GedReport([GedEntry(0.1, 0.2, 0.3, 0.4, "a"), GedEntry(0.3, 0.2, 0.3, 0.4, "b")])
        text = rep.format_summary()
        assert "population" in text.splitlines()[0]
        assert "ged_squared, 0.200 ± 0.100" in text

    def test_csv_round_trip(self, tmp_path):
        rep = GedReport([GedEntry(1 / 3, 0.1, 2 / 7, 0.5, "c1"), GedEntry(-0.0625, 0.2, 0.3, 0.4, "c2")])
        write_case_csv(rep, tmp_path / "cases.csv")
        assert read_case_csv(tmp_path / "cases.csv").entries == rep.entries
        header = (tmp_path / "cases.csv").read_text().splitlines()[0]
        assert header == "case_id,ged_squared,cross_term,diversity_term,interobserver_term"

    def test_bad_header(self, tmp_path):
        (tmp_path / "x.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_case_csv(tmp_path / "x.csv")

    def test_empty_fraction(self):
        s = np.zeros((4, 2, 2), bool)
        s[1, 0, 0] = True
        assert empty_fraction(s) == 0.75


class TestEvaluateModel:
    @pytest.fixture(scope="class")
    @staticmethod
    def setup():
        arch = ArchConfig(latent_dim=2, variant="mix-aa", mixture_components=2, temperature=0.3,
                          filter_depths=(4, 8, 8), bottleneck_depth=8, image_size=(32, 32))
        return build_variant(arch, seed=0), generate_synthetic(5, seed=2)

    def test_deterministic(self, setup):
        model, cases = setup
        a = evaluate_model(model, cases, n_samples=4, seed=3)
        b = evaluate_model(model, cases, n_samples=4, seed=3)
        assert a.entries == b.entries
        assert [e.case_id for e in a.entries] == [c.case_id for c in cases]

    def test_batching_does_not_change_streams(self, setup):
        model, cases = setup
        a = evaluate_model(model, cases, n_samples=4, seed=3, batch_size=32)
        b = evaluate_model(model, cases, n_samples=4, seed=3, batch_size=2)
        np.testing.assert_allclose(a.column("ged_squared"), b.column("ged_squared"), atol=1e-6)

    def test_keep_samples(self, setup):
        model, cases = setup
        rep, samples = evaluate_model(model, cases[:2], n_samples=3, keep_samples=True)
        assert len(samples) == 2 and samples[0].shape == (3, 32, 32)
        assert rep.entries[0] == ged(samples[0], cases[0].masks, cases[0].case_id)


class TestWilcoxon:
    def test_constant_shift_significant(self, rng):
        b = rng.random(30)
        r = wilcoxon_signed_rank(b + 0.1, b)
        assert r.significant and r.p_value < 0.05 and r.statistic == 0 and r.method == "approx"

    def test_six_pair_example_matches_enumeration(self):
        diffs = np.array([1, 2, 3, 4, 5, -6], dtype=float)
        r = wilcoxon_signed_rank(diffs, np.zeros(6))
        assert r.method == "exact" and r.statistic == 6
        assert r.p_value == pytest.approx(enumerated_wilcoxon_p(diffs), abs=1e-12)
        # W- = 6; 14 of the 64 sign assignments put rank mass <= 6 on the negative side
        assert r.p_value == pytest.approx(28 / 64, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.int64, st.integers(1, 12), elements=st.integers(-4, 4)))
    def test_exact_matches_enumeration_with_ties(self, diffs):
        if not np.any(diffs):
            return
        r = wilcoxon_signed_rank(diffs.astype(float), np.zeros(len(diffs)), method="exact")
        assert r.p_value == pytest.approx(enumerated_wilcoxon_p(diffs), abs=1e-12)

    def test_exact_agrees_with_scipy(self, rng):
        a, b = rng.normal(size=15), rng.normal(size=15)
        r = wilcoxon_signed_rank(a, b)
        ref = stats.wilcoxon(a, b, method="exact")
        assert r.statistic == ref.statistic
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)

    def test_approx_agrees_with_scipy(self, rng):
        a = np.round(rng.normal(size=60), 1)
        b = np.round(rng.normal(size=60), 1)
        r = wilcoxon_signed_rank(a, b)
        ref = stats.wilcoxon(a, b, method="approx", correction=True, zero_method="wilcox")
        assert r.n == np.count_nonzero(a - b)
        assert r.statistic == ref.statistic
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)

    def test_zero_differences_dropped(self):
        r = wilcoxon_signed_rank([1.0, 2.0, 3.0, 5.0], [1.0, 1.0, 1.0, 1.0])
        assert r.n == 3

    def test_all_zero_undefined(self):
        with pytest.raises(UndefinedTestError):
            wilcoxon_signed_rank(np.ones(5), np.ones(5))

    def test_input_checks(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, 2.0], [1.0])
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1.0, 2.0], [0.0, 0.0], method="bogus")


class TestPairedTable:
    def reports(self):
        a = GedReport([GedEntry(0.1, 0, 0, 0, "x"), GedEntry(0.2, 0, 0, 0, "y")])
        b = GedReport([GedEntry(0.5, 0, 0, 0, "y"), GedEntry(0.4, 0, 0, 0, "x")])
        return a, b

    def test_aligns_by_case_id(self):
        a, b = self.reports()
        table = PairedMetricTable.from_reports({"A": a, "B": b})
        assert table.case_ids == ["x", "y"]
        assert_array_equal(table.columns["B"], [0.4, 0.5])

    def test_mismatched_ids(self):
        a, _ = self.reports()
        c = GedReport([GedEntry(0.1, 0, 0, 0, "x"), GedEntry(0.2, 0, 0, 0, "z")])
        with pytest.raises(ValueError):
            PairedMetricTable.from_reports({"A": a, "C": c})
        dup = GedReport([GedEntry(0.1, 0, 0, 0, "x"), GedEntry(0.2, 0, 0, 0, "x")])
        with pytest.raises(ValueError):
            PairedMetricTable.from_reports({"A": a, "D": dup})

    def test_csv_round_trip(self, tmp_path):
        a, b = self.reports()
        table = PairedMetricTable.from_reports({"A": a, "B": b})
        table.write_csv(tmp_path / "paired.csv")
        back = PairedMetricTable.read_csv(tmp_path / "paired.csv")
        assert back.case_ids == table.case_ids
        for k in table.columns:
            assert_array_equal(back.columns[k], table.columns[k])
