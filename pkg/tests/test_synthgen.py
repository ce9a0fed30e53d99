import os

import numpy as np
import pytest

from core_types import SECONDS_PER_DAY
from errors import ConfigError, NoPois
from synthgen import (
    WEEKDAY_TEMPLATE, ScenarioConfig, _jitter_boundaries, class_histogram, default_poi_map, generate,
    scenario_profile, truncated_normal,
)


def names(dataset, trajectory):
    return [dataset.vocab.category(s.category) for s in trajectory.stops]


class TestTemplate:
    """Test the deterministic daily template."""

    def test_exact_weekday_sequence(self, template_dataset):
        trajectory = template_dataset.trajectories[0]
        assert names(template_dataset, trajectory) == [a[0] for a in WEEKDAY_TEMPLATE]
        assert [(s.start_time, s.end_time) for s in trajectory.stops] == [
            (start * 60, end * 60) for _, start, end, _ in WEEKDAY_TEMPLATE
        ]

    def test_histogram(self, template_dataset):
        assert class_histogram(template_dataset) == {
            'home': 3, 'work': 2, 'gym': 1, 'restaurant': 1, 'grocery': 1,
        }

    def test_periodic_without_noise(self):
        dataset = generate(ScenarioConfig(n_agents=2, n_days=5, schedule_noise_min=0.0, skip_prob=0.0))
        for trajectory in dataset.trajectories:
            days = {}
            for s in trajectory.stops:
                day = int(s.start_time // SECONDS_PER_DAY)
                days.setdefault(day, []).append((s.category, s.start_time - day * SECONDS_PER_DAY, s.lat))
            assert all(days[d] == days[0] for d in range(5))

    def test_weekend_template(self):
        dataset = generate(ScenarioConfig(n_agents=1, n_days=7, schedule_noise_min=0.0, skip_prob=0.0))
        saturday = [
            dataset.vocab.category(s.category) for s in dataset.trajectories[0].stops
            if s.start_time // SECONDS_PER_DAY == 5
        ]
        assert 'work' not in saturday
        assert 'social' in saturday and 'interest' in saturday


class TestGenerate:
    """Test scenario generation."""

    def test_no_agents(self):
        dataset = generate(ScenarioConfig(n_agents=0, n_days=1))
        assert dataset.trajectories == []
        assert class_histogram(dataset) == {}

    def test_byte_identical_output(self, temp_dir):
        cfg = ScenarioConfig(n_agents=3, n_days=4, seed=11)
        a = os.path.join(temp_dir, 'a.jsonl')
        b = os.path.join(temp_dir, 'b.jsonl')
        generate(cfg, path=a)
        generate(cfg, path=b)
        with open(a, 'rb') as fa, open(b, 'rb') as fb:
            assert fa.read() == fb.read()

    def test_workers_do_not_change_output(self):
        cfg = ScenarioConfig(n_agents=4, n_days=3, seed=2)
        assert generate(cfg, workers=1).to_records() == generate(cfg, workers=2).to_records()

    def test_histogram_total(self, synthetic_dataset):
        assert sum(class_histogram(synthetic_dataset).values()) == synthetic_dataset.n_stops

    def test_majority_is_home(self):
        histogram = class_histogram(generate(ScenarioConfig(n_agents=20, n_days=14)))
        assert max(histogram, key=histogram.get) == 'home'

    def test_noisy_trajectories_are_valid(self):
        dataset = generate(ScenarioConfig(n_agents=10, n_days=14, schedule_noise_min=60.0, skip_prob=0.5, seed=1))
        for trajectory in dataset.trajectories:
            trajectory.validate()
            for prev, cur in zip(trajectory.stops, trajectory.stops[1:]):
                assert prev.end_time <= cur.start_time

    def test_empty_poi_map(self):
        with pytest.raises(NoPois):
            generate(ScenarioConfig(n_agents=1, n_days=1, poi_map=()))

    def test_missing_category(self):
        pois = tuple(p for p in default_poi_map() if p[2] != 'gym')
        with pytest.raises(NoPois):
            generate(ScenarioConfig(n_agents=1, n_days=1, poi_map=pois))

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(skip_prob=1.5)
        with pytest.raises(ConfigError):
            ScenarioConfig(profile='nightlife')


class TestProfiles:
    """Test scenario profiles."""

    def test_lookup(self):
        assert scenario_profile('work')['weekend_work'] is True
        assert scenario_profile('hunger')['always'] == {'restaurant', 'grocery'}
        with pytest.raises(ConfigError) as excinfo:
            scenario_profile('nightlife')
        assert 'combined' in str(excinfo.value)

    def test_hunger_never_skips_meals(self):
        dataset = generate(ScenarioConfig(n_agents=2, n_days=5, skip_prob=1.0, profile='hunger'))
        histogram = class_histogram(dataset)
        assert histogram['restaurant'] == 10
        assert histogram['grocery'] == 10
        assert 'gym' not in histogram

    def test_work_profile_has_no_weekend(self):
        dataset = generate(ScenarioConfig(n_agents=1, n_days=7, schedule_noise_min=0.0, skip_prob=0.0, profile='work'))
        histogram = class_histogram(dataset)
        assert histogram['work'] == 14
        assert 'social' not in histogram

    def test_profiles_share_agent_places(self):
        a = generate(ScenarioConfig(n_agents=2, n_days=1, profile='combined'))
        b = generate(ScenarioConfig(n_agents=2, n_days=1, profile='social'))
        assert a.trajectories[0].stops[0].lat == b.trajectories[0].stops[0].lat


class TestJitter:

    def test_noise_is_truncated_not_clipped(self):
        rng = np.random.default_rng(1)
        draws = np.array([truncated_normal(rng, 2.0) for _ in range(20000)])
        assert np.abs(draws).max() <= 6.0
        # clipping would stack about 0.27% of the draws on the bound
        assert np.sum(np.abs(draws) >= 5.98) < 10
        assert 1.94 <= draws.std() <= 2.0

    def test_boundaries_stay_ordered(self):
        rng = np.random.default_rng(0)
        base = [0.0, 390.0, 405.0, 465.0, 480.0, 1439.0]
        for _ in range(200):
            out = _jitter_boundaries(base, 120.0, rng)
            assert out[0] == 0.0 and out[-1] == 1439.0
            assert all(b > a for a, b in zip(out, out[1:]))
