import math

import numpy as np
import pytest

from core_types import (
    D_DETAIL, DEGENERATE_MARGIN_DEG, MASK_TOKEN, PAD_TOKEN, DetailVec, NormStats, PoiVocab,
    StopPoint, Trajectory, denormalize_detail, normalize_stop, normalize_stops,
)
from errors import InvalidStop, ValidationError, VocabError


def stop(start, end, lat=34.1, lon=-118.3, category=0):
    return StopPoint(category, start, end, lat, lon)


class TestPoiVocab:
    """Test vocabulary indexing."""

    def test_first_seen_order(self):
        vocab = PoiVocab.from_sequence(['home', 'work', 'home'])
        assert vocab.categories == ('home', 'work')
        assert vocab.size == 4
        assert vocab.pad_index == 2
        assert vocab.mask_index == 3

    def test_specials_are_last(self, vocab):
        assert vocab.category(vocab.pad_index) == PAD_TOKEN
        assert vocab.category(vocab.mask_index) == MASK_TOKEN
        assert vocab.category(0) == 'home'

    def test_unknown_category(self, vocab):
        with pytest.raises(VocabError):
            vocab.index('library')
        with pytest.raises(VocabError):
            vocab.category(vocab.size)

    def test_duplicates_rejected(self):
        with pytest.raises(VocabError):
            PoiVocab(('home', 'home'))

    def test_indices_survive_save_load(self, vocab):
        restored = PoiVocab.from_dict(vocab.to_dict())
        assert restored == vocab
        assert all(restored.index(name) == vocab.index(name) for name in vocab.categories)

    def test_fingerprint_depends_on_order(self):
        a = PoiVocab(('home', 'work'))
        b = PoiVocab(('work', 'home'))
        assert a.fingerprint() == PoiVocab(('home', 'work')).fingerprint()
        assert a.fingerprint() != b.fingerprint()


class TestStopPoint:
    """Test stop and trajectory invariants."""

    def test_valid_stop(self):
        stop(0, 60).validate()

    @pytest.mark.parametrize('bad', [
        stop(100, 50),
        stop(0, 10, lat=91.0),
        stop(0, 10, lon=-181.0),
        stop(0, 10, lat=math.nan),
        stop(0, math.inf),
    ])
    def test_invalid_stop(self, bad):
        with pytest.raises(InvalidStop):
            bad.validate()

    def test_overlapping_trajectory(self):
        trajectory = Trajectory('a', (stop(0, 100), stop(50, 200)))
        with pytest.raises(ValidationError):
            trajectory.validate()

    def test_unsorted_trajectory(self):
        trajectory = Trajectory('a', (stop(500, 600), stop(0, 100)))
        with pytest.raises(ValidationError):
            trajectory.validate()

    def test_touching_stops_are_valid(self):
        Trajectory('a', (stop(0, 100), stop(100, 200))).validate()


class TestNormStats:
    """Test normalization statistics."""

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            NormStats(1.0, 1.0, 0.0, 1.0)

    def test_single_stop_box_is_widened(self):
        stats = NormStats.from_stops([stop(0, 60, lat=10.0, lon=20.0)])
        assert stats.lat_min == pytest.approx(10.0 - DEGENERATE_MARGIN_DEG)
        assert stats.lat_max == pytest.approx(10.0 + DEGENERATE_MARGIN_DEG)
        assert stats.lon_max > stats.lon_min

    def test_day_span(self):
        stats = NormStats.from_stops([stop(0, 60, lat=1.0, lon=1.0), stop(3 * 86400 + 5, 3 * 86400 + 60, lat=2.0, lon=2.0)])
        assert stats.day_span == 3

    def test_dict_round_trip(self, stats):
        assert NormStats.from_dict(stats.to_dict()) == stats


class TestNormalize:
    """Test detail vector normalization."""

    def test_midday(self, stats):
        detail = normalize_stop(stop(43200, 43300), stats)
        assert detail.start_frac == pytest.approx(0.5)

    def test_corner_maps_to_zero(self, stats):
        detail = normalize_stop(stop(0, 10, lat=stats.lat_min, lon=stats.lon_min), stats)
        assert detail.x == 0.0
        assert detail.y == 0.0

    def test_second_day(self):
        stats = NormStats(0.0, 1.0, 0.0, 1.0, day_span=2)
        detail = normalize_stop(stop(90000, 90060, lat=0.5, lon=0.5), stats)
        assert detail.start_frac == pytest.approx((90000 - 86400) / 86400)
        assert detail.day_index == pytest.approx(0.5)

    def test_out_of_box_is_clamped(self, stats):
        detail = normalize_stop(stop(0, 10, lat=40.0, lon=-120.0), stats)
        assert detail.y == 1.0
        assert detail.x == 0.0

    def test_non_finite_rejected(self, stats):
        with pytest.raises(InvalidStop):
            normalize_stops([stop(0, 10, lat=math.nan)], stats)

    def test_shape(self, stats):
        assert normalize_stops([stop(0, 10), stop(20, 30)], stats).shape == (2, D_DETAIL)
        assert normalize_stops([], stats).shape == (0, D_DETAIL)

    def test_monotone_within_day(self, stats):
        starts = np.arange(0, 86400, 997)
        fracs = normalize_stops([stop(float(s), float(s) + 1) for s in starts], stats)[:, 0]
        assert np.all(np.diff(fracs) > 0)


class TestDenormalize:
    """Test the inverse of normalization."""

    def test_zero_vector(self, stats):
        out = denormalize_detail(DetailVec(0.0, 0.0, 0.0, 0.0, 0.0), stats)
        assert out['start_time'] == 0.0
        assert out['lat'] == stats.lat_min
        assert out['lon'] == stats.lon_min

    def test_quarter_day(self):
        stats = NormStats(0.0, 1.0, 0.0, 1.0, day_span=1)
        out = denormalize_detail(DetailVec(0.25, 0.3, 0.0, 0.5, 0.5), stats)
        assert out['start_time'] == pytest.approx(21600.0)

    def test_detail_vec_array_round_trip(self):
        detail = DetailVec(0.1, 0.2, 0.3, 0.4, 0.5)
        assert DetailVec.from_array(detail.as_array()) == detail
        with pytest.raises(ValueError):
            DetailVec.from_array([0.0] * 4)

    def test_random_round_trip(self):
        stats = NormStats(33.5, 34.5, -118.9, -117.9, day_span=10)
        rng = np.random.default_rng(0)
        n = 10000
        days = rng.integers(0, stats.day_span + 1, size=n)
        starts = days * 86400 + rng.integers(0, 86400, size=n)
        ends = starts + rng.integers(0, 86399, size=n)
        lats = rng.uniform(stats.lat_min, stats.lat_max, size=n)
        lons = rng.uniform(stats.lon_min, stats.lon_max, size=n)
        stops = [stop(float(s), float(e), lat=float(a), lon=float(o)) for s, e, a, o in zip(starts, ends, lats, lons)]

        details = normalize_stops(stops, stats)
        for original, row in zip(stops, details):
            back = denormalize_detail(DetailVec.from_array(row), stats)
            assert abs(back['start_time'] - original.start_time) <= 1.0
            assert abs(back['end_time'] - original.end_time) <= 1.0
            assert abs(back['lat'] - original.lat) <= 1e-9
            assert abs(back['lon'] - original.lon) <= 1e-9
