import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seppx.core import (
    BACKGROUND,
    BranchingStructure,
    MarkedEvent,
    ObservationDomain,
    PointPattern,
    UnitScaler,
    scale_to_unit,
)


def _pattern(times, domain=None, marks=None):
    n = len(times)
    domain = domain or ObservationDomain((0, 10), (0, 1), (0, 1))
    return PointPattern.from_arrays(
        times, np.full(n, 0.5), np.full(n, 0.5),
        marks if marks is not None else np.zeros(n), domain,
    )


class TestMarkedEvent:
    def test_rejects_negative_mark(self):
        with pytest.raises(ValueError):
            MarkedEvent("a", 0.1, 0.2, 0.3, -1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            MarkedEvent("a", np.nan, 0.2, 0.3, 1.0)
        with pytest.raises(ValueError):
            MarkedEvent("a", 0.1, np.inf, 0.3, 1.0)

    def test_zero_mark_allowed(self):
        ev = MarkedEvent("a", 0.1, 0.2, 0.3, 0.0)
        assert ev.m == 0.0


class TestObservationDomain:
    def test_volume(self):
        dom = ObservationDomain((0, 2), (1, 4), (0, 5))
        assert dom.volume == 2 * 3 * 5

    def test_unit(self):
        dom = ObservationDomain.unit()
        assert dom.volume == 1.0
        assert dom.contains(0.5, 0.5, 0.5)
        assert not dom.contains(1.5, 0.5, 0.5)

    def test_rejects_empty_ranges(self):
        with pytest.raises(ValueError):
            ObservationDomain((1, 1), (0, 1), (0, 1))
        with pytest.raises(ValueError):
            ObservationDomain((0, 1), (0, 1), (0, 1), mark_ceiling=0.0)


class TestPointPattern:
    def test_requires_strict_time_order(self):
        with pytest.raises(ValueError, match="strictly increasing"):
            _pattern([0.1, 0.1, 0.2])
        with pytest.raises(ValueError, match="strictly increasing"):
            _pattern([0.2, 0.1])

    def test_arrays_read_only(self):
        pat = _pattern([0.1, 0.2])
        with pytest.raises(ValueError):
            pat.times[0] = 99.0

    def test_rejects_events_outside_domain(self):
        dom = ObservationDomain((0, 1), (0, 1), (0, 1))
        with pytest.raises(ValueError, match="outside domain"):
            _pattern([0.5, 2.0], domain=dom)

    def test_mark_ceiling_configured_beats_data(self):
        dom = ObservationDomain((0, 10), (0, 1), (0, 1), mark_ceiling=100.0)
        pat = _pattern([0.1, 0.2], domain=dom, marks=[3, 7])
        assert pat.mark_ceiling() == 100.0

    def test_mark_ceiling_derived_is_max_plus_one(self):
        pat = _pattern([0.1, 0.2], marks=[3, 7])
        assert pat.mark_ceiling() == 8.0

    def test_ids_default_to_indices(self):
        pat = _pattern([0.1, 0.2, 0.3])
        assert pat.ids == ("0", "1", "2")


class TestBranchingStructure:
    def test_parent_must_precede_child(self):
        with pytest.raises(ValueError):
            BranchingStructure([BACKGROUND, 1])  # self-parent
        with pytest.raises(ValueError):
            BranchingStructure([0, BACKGROUND])  # first event has no predecessor

    def test_roots_resolve_transitively(self):
        br = BranchingStructure([BACKGROUND, 0, 1, BACKGROUND, 3])
        assert br.roots().tolist() == [0, 0, 0, 3, 3]

    def test_clusters_partition_events(self):
        br = BranchingStructure([BACKGROUND, 0, BACKGROUND, 2, 0])
        clusters = br.clusters()
        roots = [c[0] for c in clusters]
        members = sorted(i for _, mem in clusters for i in mem)
        assert roots == [0, 2]
        assert members == [0, 1, 2, 3, 4]
        # members are time ordered within each cluster
        for _, mem in clusters:
            assert mem == sorted(mem)

    def test_background_and_triggered_split(self):
        br = BranchingStructure([BACKGROUND, 0, BACKGROUND])
        assert br.background_indices.tolist() == [0, 2]
        assert br.triggered_indices.tolist() == [1]

    def test_all_background(self):
        br = BranchingStructure.all_background(4)
        assert br.background_indices.size == 4


class TestUnitScaler:
    @settings(deadline=None, max_examples=60)
    @given(
        t=st.floats(0.0, 364.9999),
        x=st.floats(60.0, 75.0),
        y=st.floats(29.0, 39.0),
    )
    def test_round_trip_within_1e12(self, t, x, y):
        dom = ObservationDomain((0, 365), (60, 75), (29, 39))
        sc = UnitScaler.for_domain(dom, mark_ceiling=50.0)
        assert abs(sc.t_from_unit(sc.t_to_unit(t)) - t) <= 1e-12 * max(1.0, abs(t))
        assert abs(sc.x_from_unit(sc.x_to_unit(x)) - x) <= 1e-12 * max(1.0, abs(x))
        assert abs(sc.y_from_unit(sc.y_to_unit(y)) - y) <= 1e-12 * max(1.0, abs(y))

    def test_volume_is_jacobian(self):
        dom = ObservationDomain((0, 365), (60, 75), (29, 39))
        sc = UnitScaler.for_domain(dom, mark_ceiling=50.0)
        assert sc.volume == 365 * 15 * 10

    def test_intensity_unscaling_preserves_counts(self):
        # lambda_unit over the unit cube and lambda_orig over the window
        # must integrate to the same expected count
        dom = ObservationDomain((0, 365), (60, 75), (29, 39))
        sc = UnitScaler.for_domain(dom, mark_ceiling=1.0)
        lam_unit = 123.4
        lam_orig = sc.unscale_intensity(lam_unit)
        assert lam_orig * dom.volume == pytest.approx(lam_unit * 1.0, rel=1e-14)

    def test_scale_pattern_maps_to_unit_cube(self):
        dom = ObservationDomain((0, 365), (60, 75), (29, 39), mark_ceiling=50)
        pat = PointPattern.from_arrays(
            [10.0, 200.0], [61.0, 74.0], [30.0, 38.5], [0, 25], dom
        )
        unit, sc = scale_to_unit(pat)
        assert np.all((unit.times >= 0) & (unit.times <= 1))
        assert np.all((unit.xs >= 0) & (unit.xs <= 1))
        assert np.all((unit.marks >= 0) & (unit.marks <= 1))
        assert unit.marks[1] == 0.5

    def test_scale_pattern_breaks_collapsed_ties(self):
        # distinct times closer than one unit-scale ulp must stay ordered
        dom = ObservationDomain((0, 365), (0, 1), (0, 1))
        t0 = 180.0
        t1 = np.nextafter(t0, np.inf)
        pat = PointPattern.from_arrays([t0, t1], [0.5, 0.5], [0.5, 0.5], [0, 0], dom)
        sc = UnitScaler.for_domain(dom, 1.0)
        unit = sc.scale_pattern(pat)
        assert unit.times[1] > unit.times[0]

    def test_unscale_pattern_inverts(self):
        dom = ObservationDomain((0, 365), (60, 75), (29, 39), mark_ceiling=50)
        pat = PointPattern.from_arrays(
            [10.0, 200.0], [61.0, 74.0], [30.0, 38.5], [0, 25], dom
        )
        unit, sc = scale_to_unit(pat)
        back = sc.unscale_pattern(unit, dom)
        np.testing.assert_allclose(back.times, pat.times, rtol=1e-12)
        np.testing.assert_allclose(back.xs, pat.xs, rtol=1e-12)
        np.testing.assert_allclose(back.marks, pat.marks, rtol=1e-12)
