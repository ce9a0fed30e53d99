"""
Canonical data model shared by every other module: vocabularies, stop points,
trajectories and the normalized detail features the model regresses.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from errors import InvalidStop, ValidationError, VocabError
from utils import text_fingerprint

SECONDS_PER_DAY = 86400
D_DETAIL = 5
UNLABELED = -1

PAD_TOKEN = '<pad>'
MASK_TOKEN = '<mask>'

# Half-width in degrees given to a bounding box axis that has no extent
DEGENERATE_MARGIN_DEG = 1e-3


@dataclass(frozen=True)
class PoiVocab:
    """
    Ordered POI categories followed by the PAD and MASK specials.

    Indices 0..n_real-1 are real categories; PAD is n_real and MASK is n_real + 1.
    """
    categories: Tuple[str, ...]

    def __post_init__(self):
        if len(set(self.categories)) != len(self.categories):
            raise VocabError("duplicate categories in vocabulary")
        if PAD_TOKEN in self.categories or MASK_TOKEN in self.categories:
            raise VocabError("special tokens cannot be used as category names")

    @classmethod
    def from_sequence(cls, names: Iterable[str]) -> 'PoiVocab':
        """Build a vocabulary from names in first-seen order."""
        seen: Dict[str, None] = {}
        for name in names:
            seen.setdefault(name, None)
        return cls(tuple(seen))

    @property
    def n_real(self) -> int:
        return len(self.categories)

    @property
    def size(self) -> int:
        return len(self.categories) + 2

    @property
    def pad_index(self) -> int:
        return len(self.categories)

    @property
    def mask_index(self) -> int:
        return len(self.categories) + 1

    def index(self, name: str) -> int:
        try:
            return self.categories.index(name)
        except ValueError:
            raise VocabError(f"unknown category '{name}'") from None

    def category(self, index: int) -> str:
        if 0 <= index < self.n_real:
            return self.categories[index]
        if index == self.pad_index:
            return PAD_TOKEN
        if index == self.mask_index:
            return MASK_TOKEN
        raise VocabError(f"category index {index} out of range for vocabulary of size {self.size}")

    def fingerprint(self) -> str:
        return text_fingerprint(self.categories)

    def to_dict(self) -> Dict[str, Any]:
        return {'categories': list(self.categories)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'PoiVocab':
        return cls(tuple(data['categories']))


@dataclass(frozen=True)
class StopPoint:
    """One dwell event. Times are seconds since the trajectory-local epoch."""
    category: int
    start_time: float
    end_time: float
    lat: float
    lon: float

    def validate(self) -> None:
        values = (self.start_time, self.end_time, self.lat, self.lon)
        if not all(math.isfinite(v) for v in values):
            raise InvalidStop(f"non-finite value in stop {self}")
        if self.end_time < self.start_time:
            raise InvalidStop(f"end_time {self.end_time} precedes start_time {self.start_time}")
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise InvalidStop(f"coordinates out of range: ({self.lat}, {self.lon})")

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time


@dataclass(frozen=True)
class Trajectory:
    agent_id: str
    stops: Tuple[StopPoint, ...] = field(default_factory=tuple)

    def validate(self) -> None:
        """Check per-stop validity, ordering and non-overlap."""
        for stop in self.stops:
            stop.validate()
        for prev, cur in zip(self.stops, self.stops[1:]):
            if cur.start_time < prev.start_time:
                raise ValidationError(f"agent {self.agent_id}: stops not sorted by start_time")
            if prev.end_time > cur.start_time:
                raise ValidationError(
                    f"agent {self.agent_id}: stop ending at {prev.end_time} overlaps stop "
                    f"starting at {cur.start_time}"
                )

    def __len__(self) -> int:
        return len(self.stops)


@dataclass(frozen=True)
class DetailVec:
    start_frac: float
    end_frac: float
    day_index: float
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.start_frac, self.end_frac, self.day_index, self.x, self.y], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> 'DetailVec':
        if len(values) != D_DETAIL:
            raise ValueError(f"detail vectors have {D_DETAIL} components, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class NormStats:
    """Bounding box and day span used to scale stops into [0, 1]."""
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    day_span: int = 0

    def __post_init__(self):
        if not self.lat_max > self.lat_min or not self.lon_max > self.lon_min:
            raise ValidationError(
                f"degenerate bounding box: lat [{self.lat_min}, {self.lat_max}], "
                f"lon [{self.lon_min}, {self.lon_max}]"
            )
        if self.day_span < 0:
            raise ValidationError(f"day_span must be >= 0, got {self.day_span}")

    @classmethod
    def from_stops(cls, stops: Iterable[StopPoint]) -> 'NormStats':
        """
        Compute stats over stops.

        An axis with zero extent (e.g. a single stop) is widened by
        DEGENERATE_MARGIN_DEG on both sides.
        """
        stops = list(stops)
        if not stops:
            raise ValidationError("cannot compute normalization stats over zero stops")
        lats = np.array([s.lat for s in stops], dtype=np.float64)
        lons = np.array([s.lon for s in stops], dtype=np.float64)
        days = np.floor(np.array([s.start_time for s in stops], dtype=np.float64) / SECONDS_PER_DAY)
        lat_min, lat_max = _widen(float(lats.min()), float(lats.max()))
        lon_min, lon_max = _widen(float(lons.min()), float(lons.max()))
        return cls(lat_min, lat_max, lon_min, lon_max, int(max(days.max(), 0)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'lat_min': self.lat_min,
            'lat_max': self.lat_max,
            'lon_min': self.lon_min,
            'lon_max': self.lon_max,
            'day_span': self.day_span,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'NormStats':
        return cls(
            float(data['lat_min']), float(data['lat_max']),
            float(data['lon_min']), float(data['lon_max']),
            int(data['day_span']),
        )


def _widen(low: float, high: float) -> Tuple[float, float]:
    if high > low:
        return low, high
    return low - DEGENERATE_MARGIN_DEG, high + DEGENERATE_MARGIN_DEG


def normalize_stops(stops: Sequence[StopPoint], stats: NormStats) -> np.ndarray:
    """
    Vectorized normalization of stops into an (N, 5) float64 array.

    Columns are start_frac, end_frac, day_index, x, y. Coordinates outside the
    bounding box and days beyond day_span are clamped.
    """
    if not stops:
        return np.zeros((0, D_DETAIL), dtype=np.float64)
    raw = np.array([(s.start_time, s.end_time, s.lat, s.lon) for s in stops], dtype=np.float64)
    if not np.isfinite(raw).all():
        bad = int(np.argmin(np.isfinite(raw).all(axis=1)))
        raise InvalidStop(f"non-finite value in stop {stops[bad]}")
    start, end, lat, lon = raw.T
    out = np.empty((len(stops), D_DETAIL), dtype=np.float64)
    out[:, 0] = np.mod(start, SECONDS_PER_DAY) / SECONDS_PER_DAY
    out[:, 1] = np.mod(end, SECONDS_PER_DAY) / SECONDS_PER_DAY
    out[:, 2] = np.floor(start / SECONDS_PER_DAY) / max(1, stats.day_span)
    out[:, 3] = (lon - stats.lon_min) / (stats.lon_max - stats.lon_min)
    out[:, 4] = (lat - stats.lat_min) / (stats.lat_max - stats.lat_min)
    out[:, 2:] = np.clip(out[:, 2:], 0.0, 1.0)
    return out


def normalize_stop(stop: StopPoint, stats: NormStats) -> DetailVec:
    return DetailVec.from_array(normalize_stops([stop], stats)[0])


def denormalize_detail(detail: DetailVec, stats: NormStats) -> Dict[str, float]:
    """
    Invert normalize_stop.

    The end time is placed on the start day, or on the following day when its
    fraction of day is earlier than the start's. Dwells of 24 hours or longer
    are not representable.

    Returns:
        Dict: start_time, end_time, lat, lon
    """
    day = round(detail.day_index * max(1, stats.day_span))
    day_origin = day * SECONDS_PER_DAY
    start_time = day_origin + detail.start_frac * SECONDS_PER_DAY
    end_time = day_origin + detail.end_frac * SECONDS_PER_DAY
    if end_time < start_time:
        end_time += SECONDS_PER_DAY
    return {
        'start_time': start_time,
        'end_time': end_time,
        'lat': stats.lat_min + detail.y * (stats.lat_max - stats.lat_min),
        'lon': stats.lon_min + detail.x * (stats.lon_max - stats.lon_min),
    }


def collect_stops(trajectories: Iterable[Trajectory]) -> List[StopPoint]:
    return [stop for trajectory in trajectories for stop in trajectory.stops]
