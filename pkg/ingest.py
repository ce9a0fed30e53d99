import logging
import math
import time
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from config import ERROR_MESSAGES, StaypointConfig
from core_types import NormStats, PoiVocab, StopPoint, Trajectory, UNLABELED, collect_stops
from errors import NoPois, NotSorted, ParseError, TrajmaskError, ValidationError, VocabError, ConfigError
from logging_config import log_data_processing, log_error, log_performance_metrics
from utils import iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6371000.0

STOP_KEYS = frozenset({'agent_id', 'category', 'start_time', 'end_time', 'lat', 'lon'})
PING_KEYS = frozenset({'agent_id', 'timestamp', 'lat', 'lon'})

PoiTable = Sequence[Tuple[float, float, str]]


@dataclass(frozen=True)
class RawPing:
    agent_id: str
    timestamp: float
    lat: float
    lon: float


@dataclass
class StopDataset:
    """Trajectories grouped by agent, with the vocabulary and stats built over them."""
    trajectories: List[Trajectory]
    vocab: PoiVocab
    stats: NormStats

    @property
    def agent_ids(self) -> List[str]:
        return [t.agent_id for t in self.trajectories]

    @property
    def n_stops(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def subset(self, agent_ids: Iterable[str]) -> 'StopDataset':
        """Keep only the listed agents; vocabulary and stats are unchanged."""
        wanted = set(agent_ids)
        return StopDataset(
            [t for t in self.trajectories if t.agent_id in wanted],
            self.vocab,
            self.stats,
        )

    def to_records(self) -> List[Dict[str, Any]]:
        return trajectories_to_records(self.trajectories, self.vocab)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; works on scalars and broadcast arrays."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def detect_staypoints(pings: Sequence[RawPing], cfg: StaypointConfig = StaypointConfig()) -> List[StopPoint]:
    """
    Extract stays from one agent's pings.

    A window grows from its first ping while every later ping stays within
    dist_threshold_m of that first ping. Windows lasting at least
    time_threshold_s become a stop at the centroid of their pings; the sweep
    then continues after the window, otherwise it advances by one ping.

    Args:
        pings: Pings of a single agent, sorted by timestamp
        cfg: Distance and time thresholds

    Returns:
        List[StopPoint]: Unlabeled stops in time order
    """
    if not pings:
        return []
    times = np.array([p.timestamp for p in pings], dtype=np.float64)
    if np.any(np.diff(times) < 0):
        first = int(np.argmax(np.diff(times) < 0)) + 1
        raise NotSorted(f"ping {first} of agent {pings[0].agent_id} is earlier than its predecessor")
    lats = np.array([p.lat for p in pings], dtype=np.float64)
    lons = np.array([p.lon for p in pings], dtype=np.float64)

    stops: List[StopPoint] = []
    n = len(pings)
    i = 0
    while i < n:
        j = i + 1
        while j < n and haversine_m(lats[i], lons[i], lats[j], lons[j]) <= cfg.dist_threshold_m:
            j += 1
        if times[j - 1] - times[i] >= cfg.time_threshold_s:
            stops.append(StopPoint(
                category=UNLABELED,
                start_time=float(times[i]),
                end_time=float(times[j - 1]),
                lat=float(lats[i:j].mean()),
                lon=float(lons[i:j].mean()),
            ))
            i = j
        else:
            i += 1
    return stops


def assign_poi(
    stops: Sequence[StopPoint],
    poi_table: PoiTable,
    vocab: Optional[PoiVocab] = None
) -> List[StopPoint]:
    """
    Label each stop with the category of its nearest POI.

    Distances are haversine; ties go to the lowest POI index.

    Args:
        stops: Stops to label
        poi_table: (lat, lon, category) rows
        vocab: Vocabulary for the returned indices; defaults to the table's
            categories in first-seen order

    Returns:
        List[StopPoint]: Stops with category set
    """
    if len(poi_table) == 0:
        raise NoPois("POI table is empty")
    if vocab is None:
        vocab = PoiVocab.from_sequence(row[2] for row in poi_table)
    poi_lat = np.array([row[0] for row in poi_table], dtype=np.float64)
    poi_lon = np.array([row[1] for row in poi_table], dtype=np.float64)
    poi_cat = [vocab.index(row[2]) for row in poi_table]
    if not stops:
        return []
    stop_lat = np.array([s.lat for s in stops], dtype=np.float64)[:, None]
    stop_lon = np.array([s.lon for s in stops], dtype=np.float64)[:, None]
    nearest = np.argmin(haversine_m(stop_lat, stop_lon, poi_lat[None, :], poi_lon[None, :]), axis=1)
    return [
        StopPoint(poi_cat[k], s.start_time, s.end_time, s.lat, s.lon)
        for s, k in zip(stops, nearest)
    ]


def detect_schema(record: Mapping[str, Any]) -> Optional[str]:
    """Return 'stop', 'ping' or None for a decoded input record."""
    keys = set(record)
    if keys == STOP_KEYS:
        return 'stop'
    if keys == PING_KEYS:
        return 'ping'
    return None


def detect_file_schema(path: str) -> str:
    """
    Schema of a whole input file.

    Every record must share the schema of the first one; an empty file is
    read as an (empty) stop file.
    """
    schema = None
    for line_no, record in iter_jsonl(path):
        found = detect_schema(record)
        if found is None:
            raise ParseError(f"record matches neither the stop nor the ping schema (keys {sorted(record)})", line_no)
        if schema is None:
            schema = found
        elif found != schema:
            raise ParseError(f"{ERROR_MESSAGES['MIXED_SCHEMA']} Found a {found} record in a {schema} file", line_no)
    return schema or 'stop'


def _number(record: Mapping[str, Any], key: str, line_no: int) -> float:
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"'{key}' must be a number", line_no)
    if not math.isfinite(value):
        raise ParseError(f"'{key}' must be finite", line_no)
    return float(value)


def _integer(record: Mapping[str, Any], key: str, line_no: int) -> int:
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ParseError(f"'{key}' must be an integer", line_no)
    return value


def _coordinates(record: Mapping[str, Any], line_no: int) -> Tuple[float, float]:
    lat, lon = _number(record, 'lat', line_no), _number(record, 'lon', line_no)
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise ParseError(f"coordinates out of range: ({lat}, {lon})", line_no)
    return lat, lon


def parse_stop_record(record: Mapping[str, Any], line_no: int) -> Tuple[str, str, StopPoint]:
    """Decode one canonical stop record into (agent_id, category name, stop)."""
    if detect_schema(record) != 'stop':
        raise ParseError(f"expected keys {sorted(STOP_KEYS)}, got {sorted(record)}", line_no)
    if not isinstance(record['agent_id'], str) or not isinstance(record['category'], str):
        raise ParseError("'agent_id' and 'category' must be strings", line_no)
    stop = StopPoint(
        category=UNLABELED,
        start_time=_integer(record, 'start_time', line_no),
        end_time=_integer(record, 'end_time', line_no),
        lat=_number(record, 'lat', line_no),
        lon=_number(record, 'lon', line_no),
    )
    try:
        stop.validate()
    except TrajmaskError as e:
        raise ParseError(str(e), line_no) from e
    return record['agent_id'], record['category'], stop


def parse_ping_record(record: Mapping[str, Any], line_no: int) -> RawPing:
    if detect_schema(record) != 'ping':
        raise ParseError(f"expected keys {sorted(PING_KEYS)}, got {sorted(record)}", line_no)
    if not isinstance(record['agent_id'], str):
        raise ParseError("'agent_id' must be a string", line_no)
    lat, lon = _coordinates(record, line_no)
    return RawPing(
        agent_id=record['agent_id'],
        timestamp=_number(record, 'timestamp', line_no),
        lat=lat,
        lon=lon,
    )


def build_dataset(rows: Iterable[Tuple[str, str, StopPoint]]) -> StopDataset:
    """
    Group (agent_id, category, stop) rows into a dataset.

    The vocabulary follows first-seen order of the rows; trajectories are
    ordered by agent id and time-sorted internally.
    """
    rows = list(rows)
    vocab = PoiVocab.from_sequence(category for _, category, _ in rows)
    grouped: Dict[str, List[StopPoint]] = {}
    for agent_id, category, stop in rows:
        labeled = StopPoint(vocab.index(category), stop.start_time, stop.end_time, stop.lat, stop.lon)
        grouped.setdefault(agent_id, []).append(labeled)

    trajectories = []
    for agent_id in sorted(grouped):
        stops = sorted(grouped[agent_id], key=lambda s: s.start_time)
        trajectory = Trajectory(agent_id, tuple(stops))
        trajectory.validate()
        trajectories.append(trajectory)

    all_stops = collect_stops(trajectories)
    if all_stops:
        stats = NormStats.from_stops(all_stops)
    else:
        stats = NormStats(-1.0, 1.0, -1.0, 1.0, 0)
    return StopDataset(trajectories, vocab, stats)


def load_stop_file(path: str) -> StopDataset:
    """
    Load a canonical stop-point file.

    Args:
        path: UTF-8 JSON-lines file of stop records

    Returns:
        StopDataset: Trajectories, first-seen vocabulary and stats over all stops
    """
    start_time = time.time()
    try:
        dataset = build_dataset(
            parse_stop_record(record, line_no) for line_no, record in iter_jsonl(path)
        )
    except (ParseError, ValidationError) as e:
        log_error(logger, e, f"Error loading stop file {path}")
        raise
    log_data_processing(logger, "Load stop file", path, f"{dataset.n_stops} stops / {len(dataset.trajectories)} agents")
    log_performance_metrics(logger, start_time, time.time(), "Stop file loading")
    return dataset


def load_ping_file(path: str) -> Dict[str, List[RawPing]]:
    """
    Load raw pings grouped by agent and sorted by timestamp.

    Records may come in any order, but an agent's timestamps must be
    distinct; a repeated timestamp is reported at its second occurrence.
    """
    grouped: Dict[str, List[Tuple[RawPing, int]]] = {}
    for line_no, record in iter_jsonl(path):
        ping = parse_ping_record(record, line_no)
        grouped.setdefault(ping.agent_id, []).append((ping, line_no))

    result = {}
    for agent_id, entries in sorted(grouped.items()):
        entries.sort(key=lambda entry: (entry[0].timestamp, entry[1]))
        for (previous, _), (ping, line_no) in zip(entries, entries[1:]):
            if ping.timestamp == previous.timestamp:
                raise ParseError(f"duplicate timestamp {ping.timestamp:g} for agent '{agent_id}'", line_no)
        result[agent_id] = [ping for ping, _ in entries]
    return result


def load_poi_table(path: str) -> List[Tuple[float, float, str]]:
    """Load a POI table of JSON-lines records with keys lat, lon, category."""
    table = []
    for line_no, record in iter_jsonl(path):
        if set(record) != {'lat', 'lon', 'category'} or not isinstance(record['category'], str):
            raise ParseError("POI records need keys lat, lon, category", line_no)
        table.append((*_coordinates(record, line_no), record['category']))
    if not table:
        raise NoPois(f"POI table {path} is empty")
    return table


def _label_agent(
    agent_id: str,
    pings: Sequence[RawPing],
    cfg: StaypointConfig,
    poi_table: PoiTable,
    vocab: PoiVocab
) -> List[Tuple[str, str, StopPoint]]:
    stops = assign_poi(detect_staypoints(pings, cfg), poi_table, vocab)
    return [(agent_id, vocab.category(s.category), s) for s in stops]


def stops_from_pings(
    pings_by_agent: Mapping[str, Sequence[RawPing]],
    poi_table: PoiTable,
    cfg: StaypointConfig = StaypointConfig(),
    workers: int = 1
) -> StopDataset:
    """
    Run staypoint detection and POI labeling for every agent.

    Agents are processed in parallel and merged in agent-id order, so the
    result does not depend on the worker count.
    """
    if len(poi_table) == 0:
        raise NoPois("POI table is empty")
    table_vocab = PoiVocab.from_sequence(row[2] for row in poi_table)
    agent_ids = sorted(pings_by_agent)
    per_agent = Parallel(n_jobs=workers)(
        delayed(_label_agent)(agent_id, pings_by_agent[agent_id], cfg, poi_table, table_vocab)
        for agent_id in agent_ids
    )
    dataset = build_dataset(row for rows in per_agent for row in rows)
    log_data_processing(
        logger, "Staypoint detection",
        f"{sum(len(p) for p in pings_by_agent.values())} pings",
        f"{dataset.n_stops} stops",
    )
    return dataset


def trajectories_to_records(trajectories: Iterable[Trajectory], vocab: PoiVocab) -> List[Dict[str, Any]]:
    """Canonical stop records, agent by agent in time order."""
    records = []
    for trajectory in trajectories:
        for stop in trajectory.stops:
            records.append({
                'agent_id': trajectory.agent_id,
                'category': vocab.category(stop.category),
                'start_time': int(round(stop.start_time)),
                'end_time': int(round(stop.end_time)),
                'lat': stop.lat,
                'lon': stop.lon,
            })
    return records


def write_stop_file(path: str, dataset: StopDataset) -> None:
    write_jsonl(path, dataset.to_records())
    logger.info(f"Wrote {dataset.n_stops} stops to {path}")


def segment_windows(trajectory: Trajectory, window_len: int) -> List[Tuple[StopPoint, ...]]:
    """
    Cut a trajectory into consecutive non-overlapping windows.

    Full windows hold exactly window_len stops; a trailing remainder is kept
    when it has at least 2 stops.
    """
    if window_len < 2:
        raise ConfigError(f"window length must be >= 2, got {window_len}")
    stops = trajectory.stops
    windows = [stops[k:k + window_len] for k in range(0, len(stops), window_len)]
    return [w for w in windows if len(w) >= 2]


def dataset_windows(dataset: StopDataset, window_len: int) -> List[Tuple[StopPoint, ...]]:
    return [w for t in dataset.trajectories for w in segment_windows(t, window_len)]


def check_vocab(expected: PoiVocab, actual: PoiVocab) -> None:
    if expected != actual:
        raise VocabError(
            f"{ERROR_MESSAGES['VOCAB_MISMATCH']} checkpoint {expected.fingerprint()} vs dataset {actual.fingerprint()}"
        )
