import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd
import seaborn as sns

from core_types import SECONDS_PER_DAY
from ingest import StopDataset

logger = logging.getLogger(__name__)

FRAME_COLUMNS = ['agent_id', 'category', 'start_time', 'end_time', 'lat', 'lon', 'dwell_min', 'day']


@dataclass
class DatasetSummary:
    n_agents: int
    n_stops: int
    category_counts: Dict[str, int] = field(default_factory=dict)
    mean_dwell_min: Dict[str, float] = field(default_factory=dict)
    stops_per_agent_day: float = 0.0
    majority_class: Optional[str] = None

    def lines(self) -> List[str]:
        out = [
            f"Agents: {self.n_agents}",
            f"Stops: {self.n_stops}",
            f"Stops per agent-day: {self.stops_per_agent_day:.2f}",
            f"Majority class: {self.majority_class}",
            "Category counts:",
        ]
        for name, count in self.category_counts.items():
            out.append(f"  {name:<12} {count:>8d}  mean dwell {self.mean_dwell_min[name]:8.1f} min")
        return out


def stops_frame(dataset: StopDataset) -> pd.DataFrame:
    """One row per stop with category names, dwell minutes and day index."""
    frame = pd.DataFrame(dataset.to_records(), columns=FRAME_COLUMNS[:6])
    frame['dwell_min'] = (frame['end_time'] - frame['start_time']) / 60.0
    frame['day'] = frame['start_time'] // SECONDS_PER_DAY
    return frame


def summarize_dataset(dataset: StopDataset) -> DatasetSummary:
    """
    Class balance and dwell statistics of a stop dataset.

    Categories are listed in vocabulary order; the majority class follows the
    metric convention (most frequent, ties to the lowest vocabulary index).
    """
    frame = stops_frame(dataset)
    if frame.empty:
        return DatasetSummary(n_agents=len(dataset.trajectories), n_stops=0)

    order = [name for name in dataset.vocab.categories if name in set(frame['category'])]
    counts = frame['category'].value_counts().reindex(order)
    dwell = frame.groupby('category')['dwell_min'].mean().reindex(order)
    agent_days = frame.groupby(['agent_id', 'day']).ngroups

    return DatasetSummary(
        n_agents=int(frame['agent_id'].nunique()),
        n_stops=len(frame),
        category_counts={name: int(n) for name, n in counts.items()},
        mean_dwell_min={name: float(m) for name, m in dwell.items()},
        stops_per_agent_day=len(frame) / agent_days,
        majority_class=order[int(counts.to_numpy().argmax())],
    )


def plot_class_distribution(summary: DatasetSummary, path: str) -> None:
    plt.figure(figsize=(10, 6))
    pd.Series(summary.category_counts).plot(kind='bar')
    plt.title('POI Category Distribution')
    plt.ylabel('stops')
    plt.xticks(rotation=45)
    plt.tight_layout()
    plt.savefig(path)
    plt.close()
    logger.info(f"Saved class distribution plot to {path}")


def plot_dwell_histogram(frame: pd.DataFrame, path: str) -> None:
    plt.figure(figsize=(10, 6))
    sns.histplot(data=frame, x='dwell_min', hue='category', bins=48, multiple='stack')
    plt.title('Dwell Time Distribution')
    plt.xlabel('dwell (minutes)')
    plt.tight_layout()
    plt.savefig(path)
    plt.close()
    logger.info(f"Saved dwell histogram to {path}")


def write_plots(dataset: StopDataset, output_dir: str) -> DatasetSummary:
    """Summarize a dataset and save both charts into output_dir."""
    os.makedirs(output_dir, exist_ok=True)
    summary = summarize_dataset(dataset)
    if summary.n_stops:
        plot_class_distribution(summary, os.path.join(output_dir, 'class_distribution.png'))
        plot_dwell_histogram(stops_frame(dataset), os.path.join(output_dir, 'dwell_distribution.png'))
    return summary
