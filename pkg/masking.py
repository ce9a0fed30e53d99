"""
Mask plans for pretraining and the four infilling tasks.

A plan marks which state cells (POI category) and action cells (stop
details) of a window are hidden from the model. Random hides scattered
cells, forward dynamics hides the tail of the window, inverse dynamics
hides its head, and goal hides only the last state and its action.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np

from config import ERROR_MESSAGES, MaskParams
from errors import ConfigError, TooShort


class TaskKind(str, Enum):
    RANDOM = 'random'
    FORWARD_DYNAMICS = 'fd'
    INVERSE_DYNAMICS = 'id'
    GOAL = 'goal'
    PRETRAIN_RANDOM = 'pretrain'


# Tasks accepted on the command line, in report column order
EVAL_TASKS = (
    TaskKind.INVERSE_DYNAMICS,
    TaskKind.FORWARD_DYNAMICS,
    TaskKind.RANDOM,
    TaskKind.GOAL,
)


def parse_tasks(text: str) -> List[TaskKind]:
    """Parse a comma separated task list such as 'id,fd,random,goal'."""
    valid = {task.value: task for task in EVAL_TASKS}
    tasks = []
    for name in (part.strip().lower() for part in text.split(',')):
        if name not in valid:
            raise ConfigError(f"{ERROR_MESSAGES['UNKNOWN_TASK']} Got '{name}', valid names: {', '.join(valid)}")
        if valid[name] not in tasks:
            tasks.append(valid[name])
    if not tasks:
        raise ConfigError("no tasks given")
    return tasks


@dataclass(frozen=True)
class MaskPlan:
    """Per-position masks for the state (category) and action (detail) modalities."""
    state_mask: np.ndarray
    action_mask: np.ndarray
    valid_len: int

    @property
    def total_len(self) -> int:
        return len(self.state_mask)

    @property
    def n_masked(self) -> int:
        return int(self.state_mask.sum() + self.action_mask.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return (
            self.valid_len == other.valid_len
            and np.array_equal(self.state_mask, other.state_mask)
            and np.array_equal(self.action_mask, other.action_mask)
        )


def _random_cells(valid_len: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    cells = rng.random((2, valid_len)) < ratio
    if not cells.any():
        flat = int(rng.integers(2 * valid_len))
        cells[flat // valid_len, flat % valid_len] = True
    return cells


def make_plan(
    kind: TaskKind,
    valid_len: int,
    total_len: int,
    params: MaskParams = MaskParams(),
    rng: Optional[np.random.Generator] = None
) -> MaskPlan:
    """
    Build the mask plan of a task for one window.

    Random kinds mask each (position, modality) cell independently: the
    pretraining ratio is drawn per sequence from params.pretrain_ratio_range,
    the evaluation ratio is params.random_ratio. At least one cell is always
    masked. FD masks a suffix and ID a prefix of ceil(valid_len * split_fraction)
    positions in both modalities; Goal masks the last valid position.

    Args:
        kind: Task to plan for
        valid_len: Number of real stops in the window
        total_len: Padded window length
        params: Ratios and split fraction
        rng: Random generator, required by the random kinds

    Returns:
        MaskPlan: Masks of length total_len; PAD positions are never masked
    """
    kind = TaskKind(kind)
    if valid_len < 2:
        raise TooShort(f"mask plans need at least 2 valid positions, got {valid_len}")
    if valid_len > total_len:
        raise ConfigError(f"valid_len {valid_len} exceeds total_len {total_len}")

    state = np.zeros(total_len, dtype=bool)
    action = np.zeros(total_len, dtype=bool)

    if kind in (TaskKind.PRETRAIN_RANDOM, TaskKind.RANDOM):
        if rng is None:
            raise ConfigError(f"task '{kind.value}' needs a random generator")
        if kind is TaskKind.PRETRAIN_RANDOM:
            low, high = params.pretrain_ratio_range
            ratio = float(rng.uniform(low, high))
        else:
            ratio = params.random_ratio
        cells = _random_cells(valid_len, ratio, rng)
        state[:valid_len] = cells[0]
        action[:valid_len] = cells[1]
    elif kind is TaskKind.FORWARD_DYNAMICS:
        span = math.ceil(valid_len * params.split_fraction)
        state[valid_len - span:valid_len] = True
        action[valid_len - span:valid_len] = True
    elif kind is TaskKind.INVERSE_DYNAMICS:
        span = math.ceil(valid_len * params.split_fraction)
        state[:span] = True
        action[:span] = True
    elif kind is TaskKind.GOAL:
        state[valid_len - 1] = True
        action[valid_len - 1] = True

    return MaskPlan(state, action, valid_len)


def observed_complement(plan: MaskPlan) -> MaskPlan:
    """Cell-wise negation of a plan over its valid positions."""
    valid = np.arange(plan.total_len) < plan.valid_len
    return MaskPlan(~plan.state_mask & valid, ~plan.action_mask & valid, plan.valid_len)
