#!/usr/bin/env python3
"""
Convert a GeoLife trajectory tree into the raw ping JSON-lines format.

GeoLife stores one directory per user (Data/000/Trajectory/*.plt); each .plt
file has six header lines followed by
lat, lon, 0, altitude, days since 1899-12-30, date, time.
The output has one {"agent_id", "timestamp", "lat", "lon"} record per ping,
agents in directory order and pings sorted by time.
"""

import argparse
import logging
import os
import sys
import time

import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from logging_config import log_data_processing, log_performance_metrics, setup_logging  # noqa: E402
from utils import write_jsonl  # noqa: E402

logger = logging.getLogger(__name__)

PLT_COLUMNS = ['lat', 'lon', 'unused', 'alt', 'days', 'date', 'time']
PLT_HEADER_LINES = 6
# 1970-01-01 as days since 1899-12-30
UNIX_EPOCH_DAYS = 25569.0


def read_plt(path: str) -> pd.DataFrame:
    """Read one .plt file as lat, lon, timestamp (unix seconds)."""
    frame = pd.read_csv(path, skiprows=PLT_HEADER_LINES, header=None, names=PLT_COLUMNS)
    frame['timestamp'] = ((frame['days'] - UNIX_EPOCH_DAYS) * 86400.0).round().astype('int64')
    return frame[['lat', 'lon', 'timestamp']]


def user_pings(user_dir: str, agent_id: str) -> pd.DataFrame:
    traj_dir = os.path.join(user_dir, 'Trajectory')
    files = sorted(f for f in os.listdir(traj_dir) if f.endswith('.plt'))
    if not files:
        return pd.DataFrame(columns=['agent_id', 'timestamp', 'lat', 'lon'])
    frame = pd.concat([read_plt(os.path.join(traj_dir, f)) for f in files], ignore_index=True)
    frame = frame.sort_values('timestamp', kind='stable').drop_duplicates('timestamp')
    frame.insert(0, 'agent_id', agent_id)
    return frame[['agent_id', 'timestamp', 'lat', 'lon']]


def convert(data_dir: str, output: str, users=None) -> int:
    """
    Convert GeoLife users under data_dir into one ping file.

    Args:
        data_dir: GeoLife Data/ directory
        output: Ping JSON-lines file to write
        users: Optional user directory names to keep

    Returns:
        int: Number of pings written
    """
    start_time = time.time()
    user_dirs = sorted(
        d for d in os.listdir(data_dir)
        if os.path.isdir(os.path.join(data_dir, d, 'Trajectory')) and (not users or d in users)
    )
    records = []
    for user in user_dirs:
        frame = user_pings(os.path.join(data_dir, user), f"geolife_{user}")
        records.extend(
            {'agent_id': row.agent_id, 'timestamp': int(row.timestamp), 'lat': float(row.lat), 'lon': float(row.lon)}
            for row in frame.itertuples(index=False)
        )
        logger.info(f"User {user}: {len(frame)} pings")
    write_jsonl(output, records)
    log_data_processing(logger, "GeoLife conversion", f"{len(user_dirs)} users", f"{len(records)} pings")
    log_performance_metrics(logger, start_time, time.time(), "GeoLife conversion")
    return len(records)


def main():
    """Main entry point."""
    parser = argparse.ArgumentParser(description="Convert GeoLife .plt files to ping JSON lines")
    parser.add_argument('data_dir', help='GeoLife Data/ directory')
    parser.add_argument('-o', '--output', required=True, help='Ping file to write')
    parser.add_argument('--users', nargs='*', help='User directory names to convert (default: all)')
    args = parser.parse_args()

    setup_logging()
    try:
        convert(args.data_dir, args.output, args.users)
    except (OSError, ValueError) as e:
        logger.error(f"Conversion failed: {e}")
        sys.exit(1)


if __name__ == '__main__':
    main()
