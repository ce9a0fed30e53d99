"""
Synthetic pattern-of-life generator.

Every agent owns a home and a work anchor and follows a daily template:
weekdays run home, gym, home, work, lunch, work, grocery, home; weekends swap
work for social and interest outings. Optional activities can be skipped and
interior boundaries are jittered with truncated Gaussian noise.
"""

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from core_types import SECONDS_PER_DAY, StopPoint
from errors import ConfigError, NoPois
from ingest import StopDataset, build_dataset, write_stop_file
from logging_config import log_data_processing, log_performance_metrics

logger = logging.getLogger(__name__)

# (category, start minute, end minute, optional)
Activity = Tuple[str, int, int, bool]

WEEKDAY_TEMPLATE: Tuple[Activity, ...] = (
    ('home', 0, 390, False),           # 00:00 - 06:30
    ('gym', 405, 465, True),           # 06:45 - 07:45
    ('home', 480, 520, False),         # 08:00 - 08:40
    ('work', 540, 730, False),         # 09:00 - 12:10
    ('restaurant', 740, 800, True),    # 12:20 - 13:20
    ('work', 810, 1050, False),        # 13:30 - 17:30
    ('grocery', 1065, 1095, True),     # 17:45 - 18:15
    ('home', 1110, 1439, False),       # 18:30 - 23:59
)

WEEKEND_TEMPLATE: Tuple[Activity, ...] = (
    ('home', 0, 570, False),           # 00:00 - 09:30
    ('social', 600, 720, True),        # 10:00 - 12:00
    ('home', 750, 840, False),         # 12:30 - 14:00
    ('interest', 870, 1020, True),     # 14:30 - 17:00
    ('restaurant', 1080, 1170, True),  # 18:00 - 19:30
    ('home', 1200, 1439, False),       # 20:00 - 23:59
)

# Sub-task flavors: categories that are never skipped, and whether weekends
# follow the weekday template.
PROFILES: Dict[str, Dict] = {
    'combined': {'always': frozenset(), 'weekend_work': False},
    'hunger': {'always': frozenset({'restaurant', 'grocery'}), 'weekend_work': False},
    'interest': {'always': frozenset({'interest', 'gym'}), 'weekend_work': False},
    'social': {'always': frozenset({'social', 'restaurant'}), 'weekend_work': False},
    'work': {'always': frozenset(), 'weekend_work': True},
}

WEEKEND_DAYS = (5, 6)
MIN_GAP_MIN = 1.0
MAX_JITTER_TRIES = 1000


def default_poi_map() -> Tuple[Tuple[float, float, str], ...]:
    """A fixed city of POIs scattered over a ~20 km box."""
    counts = {
        'home': 16, 'work': 6, 'gym': 3, 'restaurant': 5,
        'grocery': 3, 'social': 4, 'interest': 4,
    }
    rng = np.random.default_rng(20240101)
    pois = []
    for category, count in counts.items():
        for _ in range(count):
            lat = round(34.0 + rng.uniform(0.0, 0.18), 5)
            lon = round(-118.4 + rng.uniform(0.0, 0.22), 5)
            pois.append((lat, lon, category))
    return tuple(pois)


@dataclass(frozen=True)
class ScenarioConfig:
    n_agents: int = 200
    n_days: int = 14
    poi_map: Tuple[Tuple[float, float, str], ...] = field(default_factory=default_poi_map)
    schedule_noise_min: float = 15.0
    skip_prob: float = 0.1
    seed: int = 7
    profile: str = 'combined'

    def __post_init__(self):
        if self.n_agents < 0 or self.n_days < 0:
            raise ConfigError("n_agents and n_days must be >= 0")
        if not 0.0 <= self.skip_prob <= 1.0:
            raise ConfigError(f"skip_prob must be in [0, 1], got {self.skip_prob}")
        if self.schedule_noise_min < 0:
            raise ConfigError(f"schedule_noise_min must be >= 0, got {self.schedule_noise_min}")
        scenario_profile(self.profile)


def scenario_profile(name: str) -> Dict:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile '{name}', expected one of {sorted(PROFILES)}") from None


def _pois_by_category(poi_map: Sequence[Tuple[float, float, str]]) -> Dict[str, List[Tuple[float, float]]]:
    grouped: Dict[str, List[Tuple[float, float]]] = {}
    for lat, lon, category in poi_map:
        grouped.setdefault(category, []).append((lat, lon))
    return grouped


def _required_categories(profile: Dict) -> List[str]:
    templates = [WEEKDAY_TEMPLATE] if profile['weekend_work'] else [WEEKDAY_TEMPLATE, WEEKEND_TEMPLATE]
    return sorted({a[0] for template in templates for a in template})


def _day_template(day: int, profile: Dict) -> Tuple[Activity, ...]:
    if day % 7 in WEEKEND_DAYS and not profile['weekend_work']:
        return WEEKEND_TEMPLATE
    return WEEKDAY_TEMPLATE


def _drop_skipped(
    template: Sequence[Activity],
    skip_prob: float,
    always: frozenset,
    rng: np.random.Generator
) -> List[List]:
    """Remove skipped optional activities and merge the now-adjacent repeats."""
    kept: List[List] = []
    for category, start, end, optional in template:
        # one draw per optional activity keeps the stream aligned across profiles
        skipped = optional and rng.random() < skip_prob and category not in always
        if skipped:
            continue
        if kept and kept[-1][0] == category:
            kept[-1][2] = end
        else:
            kept.append([category, float(start), float(end)])
    return kept


def truncated_normal(rng: np.random.Generator, sigma: float, bound: float = 3.0) -> float:
    """Draw from N(0, sigma^2) restricted to |x| <= bound * sigma, redrawing out-of-range values."""
    while True:
        value = float(rng.normal(0.0, sigma))
        if abs(value) <= bound * sigma:
            return value


def _jitter_boundaries(boundaries: List[float], noise: float, rng: np.random.Generator) -> List[float]:
    """
    Jitter interior boundaries with noise truncated at 3 sigma.

    The first and last boundaries (day start and end) stay fixed. Each draw is
    rejected and redrawn until it lands at least MIN_GAP_MIN after the
    previous boundary and before the fixed day end.
    """
    if noise == 0 or len(boundaries) <= 2:
        return list(boundaries)
    out = [boundaries[0]]
    day_end = boundaries[-1]
    remaining = len(boundaries) - 2
    for k, base in enumerate(boundaries[1:-1]):
        # leave room for the boundaries still to place
        ceiling = day_end - MIN_GAP_MIN * (remaining - k)
        floor = out[-1] + MIN_GAP_MIN
        for _ in range(MAX_JITTER_TRIES):
            candidate = base + truncated_normal(rng, noise)
            if floor <= candidate <= ceiling:
                break
        else:
            candidate = min(max(base, floor), ceiling)
        out.append(candidate)
    out.append(day_end)
    return out


def _generate_agent(agent_index: int, cfg: ScenarioConfig) -> List[Tuple[str, str, StopPoint]]:
    rng = np.random.default_rng([cfg.seed, agent_index])
    profile = scenario_profile(cfg.profile)
    pois = _pois_by_category(cfg.poi_map)

    # fixed places for this agent, one per category
    places = {}
    for category in sorted(pois):
        candidates = pois[category]
        places[category] = candidates[int(rng.integers(len(candidates)))]

    agent_id = f"agent_{agent_index:05d}"
    rows = []
    for day in range(cfg.n_days):
        activities = _drop_skipped(_day_template(day, profile), cfg.skip_prob, profile['always'], rng)
        boundaries = []
        for _, start, end in activities:
            boundaries.extend([start, end])
        boundaries = _jitter_boundaries(boundaries, cfg.schedule_noise_min, rng)
        origin = day * SECONDS_PER_DAY
        for k, (category, _, _) in enumerate(activities):
            lat, lon = places[category]
            rows.append((agent_id, category, StopPoint(
                category=-1,
                start_time=origin + int(round(boundaries[2 * k] * 60)),
                end_time=origin + int(round(boundaries[2 * k + 1] * 60)),
                lat=lat,
                lon=lon,
            )))
    return rows


def generate(cfg: ScenarioConfig, path: Optional[str] = None, workers: int = 1) -> StopDataset:
    """
    Generate a synthetic dataset.

    Per-agent random streams are derived from (seed, agent index), so the
    output is identical for any worker count.

    Args:
        cfg: Scenario parameters
        path: When given, the canonical stop-point file is written here
        workers: Parallel jobs for per-agent generation

    Returns:
        StopDataset: Generated trajectories with vocabulary and stats
    """
    start_time = time.time()
    if cfg.n_agents > 0:
        if not cfg.poi_map:
            raise NoPois("scenario has agents but an empty POI map")
        available = set(_pois_by_category(cfg.poi_map))
        missing = [c for c in _required_categories(scenario_profile(cfg.profile)) if c not in available]
        if missing:
            raise NoPois(f"POI map has no places for categories {missing}")

    per_agent = Parallel(n_jobs=workers)(
        delayed(_generate_agent)(index, cfg) for index in range(cfg.n_agents)
    )
    dataset = build_dataset(row for rows in per_agent for row in rows)

    log_data_processing(logger, "Synthetic generation", f"{cfg.n_agents} agents x {cfg.n_days} days", f"{dataset.n_stops} stops")
    log_performance_metrics(logger, start_time, time.time(), "Synthetic generation")

    if path is not None:
        write_stop_file(path, dataset)
    return dataset


def class_histogram(dataset: StopDataset) -> Dict[str, int]:
    """Stop count per category name, in vocabulary order."""
    counts = Counter(
        dataset.vocab.category(stop.category)
        for trajectory in dataset.trajectories
        for stop in trajectory.stops
    )
    return {name: counts[name] for name in dataset.vocab.categories if counts[name]}
