import itertools
import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgecast.qoc import (
    DEFAULT_DETECTION_TABLE,
    Q_FULL,
    DetectionTable,
    EmptyRequirement,
    Infeasible,
    QualityMatrix,
    RateModel,
    Requirement,
    StreamQuality,
    bandwidth_full,
    bandwidth_saved,
    detection_lookup,
    edge_suppression,
    effective_quality,
    keep_for_loss,
    max_tolerable_loss,
    solve_min_bandwidth,
)

MBPS = 1e6
DESK = RateModel(1.2 * MBPS, 4.8 * MBPS)


class TestRateModel:
    def test_full_and_keep(self):
        assert DESK.bandwidth(Q_FULL) == pytest.approx(6.0 * MBPS)
        assert DESK.bandwidth(StreamQuality(0.5)) == pytest.approx(3.6 * MBPS)
        assert DESK.differential_share == pytest.approx(0.8)

    def test_bandwidth_full_scales_with_processes(self):
        assert bandwidth_full([DESK, DESK], 3) == pytest.approx(36 * MBPS, abs=1e-3)

    def test_saved(self):
        saved = bandwidth_saved([DESK, DESK], [StreamQuality(0.5), StreamQuality(0.5)])
        assert saved == pytest.approx(4.8 * MBPS, abs=1e-3)
        assert bandwidth_saved([DESK], [Q_FULL]) == 0

    def test_invalid_quality(self):
        with pytest.raises(ValueError):
            StreamQuality(1.5)
        with pytest.raises(ValueError):
            RateModel(-1, 1)


class TestEffectiveQuality:
    def test_join_is_max(self):
        assert effective_quality([StreamQuality(0.5), StreamQuality(0.9)]).differential_keep == 0.9

    def test_empty(self):
        with pytest.raises(EmptyRequirement):
            effective_quality([])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.permutations(range(6)))
    def test_join_laws(self, keeps, perm):
        qs = [StreamQuality(k) for k in keeps]
        shuffled = [qs[i] for i in perm if i < len(qs)]
        top = effective_quality(qs)
        assert top == effective_quality(shuffled)
        assert top == effective_quality(qs + qs)
        assert all(q <= top for q in qs)


class TestTable:
    PUBLISHED = {
        (0.5, "uniform"): 0.95, (1.0, "uniform"): 0.84, (2.0, "uniform"): 0.46, (5.0, "uniform"): 0.1,
        (0.5, "differential"): 0.99, (1.0, "differential"): 0.96,
        (2.0, "differential"): 0.74, (5.0, "differential"): 0.4,
    }

    def test_published_points(self):
        for (loss, strategy), value in self.PUBLISHED.items():
            assert detection_lookup(loss, strategy) == value

    def test_interpolation_and_clamp(self):
        assert detection_lookup(1.5, "differential") == pytest.approx(0.85)
        assert detection_lookup(0.0, "uniform") == 0.95
        assert detection_lookup(50.0, "differential") == 0.4

    def test_negative_loss(self):
        with pytest.raises(ValueError):
            detection_lookup(-1, "uniform")

    def test_differential_dominates_everywhere(self):
        for tenth in range(0, 80):
            loss = tenth / 10
            assert detection_lookup(loss, "differential") >= detection_lookup(loss, "uniform")

    def test_inverse_at_rows(self):
        assert max_tolerable_loss(0.96, "differential") == 1.0
        assert max_tolerable_loss(0.46, "uniform") == 2.0
        assert max_tolerable_loss(0.9, "differential") == pytest.approx(1.2727272727)

    def test_infeasible_above_first_row(self):
        with pytest.raises(Infeasible):
            max_tolerable_loss(0.995, "differential")

    def test_below_last_row_tolerates_everything(self):
        assert max_tolerable_loss(0.3, "differential") == 100.0

    @given(st.floats(0.41, 0.99), st.sampled_from(["differential"]))
    def test_lookup_inverse(self, threshold, strategy):
        loss = max_tolerable_loss(threshold, strategy)
        assert detection_lookup(loss, strategy) == pytest.approx(threshold, abs=1e-9)

    @given(st.floats(0.11, 0.95))
    def test_lookup_inverse_uniform(self, threshold):
        loss = max_tolerable_loss(threshold, "uniform")
        assert detection_lookup(loss, "uniform") == pytest.approx(threshold, abs=1e-9)
        # a little more loss must break the threshold
        assert detection_lookup(loss + 1e-6, "uniform") < threshold

    def test_load_and_dump(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("loss,uniform,differential\n0.5, 0.95, 0.99 # first\n\n5,0.1,0.4\n")
        table = DetectionTable.load(path)
        assert len(table.rows) == 2
        path.write_text(DEFAULT_DETECTION_TABLE.dump())
        assert DetectionTable.load(path) == DEFAULT_DETECTION_TABLE

    @pytest.mark.parametrize("rows", [
        [(1, 0.9, 0.95), (0.5, 0.8, 0.9)],
        [(0.5, 0.9, 0.95), (1, 0.95, 0.96)],
        [(0.5, 0.9, 0.8)],
    ])
    def test_bad_tables(self, rows):
        with pytest.raises(ValueError):
            DetectionTable.from_rows(rows)


class TestSolve:
    def test_worked_instance(self):
        sol = solve_min_bandwidth({(1, 1): 0.96, (1, 2): 0.74})
        assert sol.omega[(1, 1)].differential_keep == pytest.approx(0.99)
        assert sol.omega[(1, 2)].differential_keep == pytest.approx(0.98)
        assert sol.q_eff[1].differential_keep == pytest.approx(0.99)
        assert sol.suppression[1][1] == 0.0
        assert sol.suppression[1][2] == pytest.approx(1 - 0.98 / 0.99)

    def test_strategy_matters(self):
        diff = solve_min_bandwidth({(1, 1): Requirement(0.84, "differential")})
        uni = solve_min_bandwidth({(1, 1): Requirement(0.84, "uniform")})
        assert diff.q_eff[1] < uni.q_eff[1]

    def test_bandwidth_with_rates(self):
        sol = solve_min_bandwidth({(1, 1): 0.96, (2, 1): 0.96}, rates={1: DESK, 2: DESK})
        assert sol.sensor_bandwidth == pytest.approx(2 * DESK.bandwidth(StreamQuality(0.99)))

    def test_edge_suppression_zero_keep(self):
        q, delta = edge_suppression(QualityMatrix({(1, 1): StreamQuality(0.0)}))
        assert q[1].differential_keep == 0.0 and delta[1][1] == 0.0

    @given(st.dictionaries(st.tuples(st.integers(1, 3), st.integers(1, 3)),
                           st.floats(0.41, 0.99), min_size=1, max_size=9))
    def test_realized_keep_matches_omega(self, thresholds):
        sol = solve_min_bandwidth(thresholds)
        for (s, p), q in sol.omega.cells.items():
            assert sol.realized_keep(s, p) == pytest.approx(q.differential_keep, abs=1e-12)
            assert 0.0 <= sol.suppression[s][p] <= 1.0
            assert detection_lookup((1 - sol.realized_keep(s, p)) * 100, "differential") \
                >= thresholds[(s, p)] - 1e-9

    @given(st.dictionaries(st.tuples(st.integers(1, 2), st.integers(1, 3)),
                           st.sampled_from([0.96, 0.9, 0.85, 0.74, 0.5]), min_size=1, max_size=6))
    def test_minimal_against_grid_search(self, thresholds):
        # oracle: the cheapest sensor keep per stream on a fine grid that still
        # gives every consumer a keep meeting its requirement
        sol = solve_min_bandwidth(thresholds)
        for s in {k[0] for k in thresholds}:
            best = None
            for step in range(10001):
                keep = step / 10000
                loss = (1 - keep) * 100
                ok = all(detection_lookup(loss, "differential") >= t - 1e-12
                         for (si, _), t in thresholds.items() if si == s)
                if ok:
                    best = keep
                    break
            assert sol.q_eff[s].differential_keep == pytest.approx(best, abs=1e-4)

    def test_monotone_in_threshold(self):
        keeps = [solve_min_bandwidth({(1, 1): t}).q_eff[1].differential_keep
                 for t in (0.5, 0.74, 0.85, 0.96, 0.99)]
        assert keeps == sorted(keeps)

    def test_keep_for_loss(self):
        assert keep_for_loss(1.0) == pytest.approx(0.99)
        assert keep_for_loss(100) == 0.0
