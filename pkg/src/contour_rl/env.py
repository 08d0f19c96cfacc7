"""Contour-walking MDP: observation patches, moves, rewards and termination."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .contours import Pixel
from .data import Sample
from .errors import EpisodeFinished, PositionOutOfImage

# action code -> (d_row, d_col); 1 = north, then clockwise on screen
ACTIONS = {
    1: (-1, 0),
    2: (-1, 1),
    3: (0, 1),
    4: (1, 1),
    5: (1, 0),
    6: (1, -1),
    7: (0, -1),
    8: (-1, -1),
}
N_ACTIONS = 8
# row i holds the displacement of action code i + 1
DISPLACEMENTS = np.array([ACTIONS[a] for a in range(1, N_ACTIONS + 1)], dtype=np.int64)
_CODE_OF = {d: a for a, d in ACTIONS.items()}

TRAIN = "train"
TEST = "test"

# termination reasons
CONTOUR_LENGTH = "contour_length"
OUT_OF_IMAGE = "out_of_image"
HOME = "home"
MAX_STEPS = "max_steps"


@dataclass(frozen=True)
class EnvConfig:
    patch_size: int = 21
    out_of_image_penalty: float = -400.0
    gamma: float = 0.99
    home_warmup: int = 20
    home_window: int = 5
    max_test_steps: int = 600

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 3")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.out_of_image_penalty >= 0:
            raise ValueError("out_of_image_penalty must be negative")
        if self.home_window < 1:
            raise ValueError("home_window must be >= 1")


def action_for(displacement) -> int:
    """Action code for a king move ``(d_row, d_col)``."""
    key = (int(displacement[0]), int(displacement[1]))
    try:
        return _CODE_OF[key]
    except KeyError:
        raise ValueError(f"{key} is not a one-pixel move") from None


def pad_image(image: np.ndarray, patch_size: int) -> np.ndarray:
    half = patch_size // 2
    return np.pad(np.asarray(image, dtype=np.float32), half, mode="constant")


def observe(image: np.ndarray, pos, patch_size: int = 21) -> np.ndarray:
    """``patch_size`` square centred on ``pos``; pixels beyond the image read 0."""
    h, w = image.shape
    r, c = int(pos[0]), int(pos[1])
    if not (0 <= r < h and 0 <= c < w):
        raise PositionOutOfImage(f"position {(r, c)} outside the {h}x{w} image")
    half = patch_size // 2
    out = np.zeros((patch_size, patch_size), dtype=np.float32)
    r0, r1 = max(r - half, 0), min(r + half + 1, h)
    c0, c1 = max(c - half, 0), min(c + half + 1, w)
    out[r0 - (r - half):r1 - (r - half), c0 - (c - half):c1 - (c - half)] = image[r0:r1, c0:c1]
    return out


def observe_padded(padded: np.ndarray, positions: np.ndarray, patch_size: int) -> np.ndarray:
    """Batch of patches from an image pre-padded by :func:`pad_image`."""
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    idx = np.arange(patch_size)
    rows = positions[:, 0, None, None] + idx[None, :, None]
    cols = positions[:, 1, None, None] + idx[None, None, :]
    return padded[rows, cols]


def total_return(rewards, gamma: float) -> float:
    """Discounted sum ``sum_t gamma**(t-1) * r_t``; rewards already carry their sign."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        return 0.0
    return float(np.dot(gamma ** np.arange(r.size), r))


@dataclass
class Episode:
    """One rollout on a sample.

    Train episodes start on the true contour at ``start_index`` and are scored
    against ``contour[(start_index + t) % T]`` after step ``t``. Test episodes
    start at a landing spot and never look at the contour.
    """

    sample: Sample
    config: EnvConfig = field(default_factory=EnvConfig)
    start_index: int | None = None
    landing_spot: Pixel | None = None
    position: Pixel = field(init=False)
    step_count: int = field(init=False, default=0)
    trace: list = field(init=False)
    rewards: list = field(init=False)
    done: bool = field(init=False, default=False)
    termination_reason: str | None = field(init=False, default=None)

    def __post_init__(self):
        if (self.start_index is None) == (self.landing_spot is None):
            raise ValueError("give exactly one of start_index (train) or landing_spot (test)")
        h, w = self.sample.shape
        if self.start_index is not None:
            T = len(self.sample.contour)
            self.start_index = int(self.start_index) % T
            start = self.sample.contour[self.start_index]
        else:
            start = Pixel(int(self.landing_spot[0]), int(self.landing_spot[1]))
        if not (0 <= start.row < h and 0 <= start.col < w):
            raise PositionOutOfImage(f"start {tuple(start)} outside the {h}x{w} image")
        self.position = start
        self.trace = [start]
        self.rewards = []

    @property
    def mode(self) -> str:
        return TRAIN if self.start_index is not None else TEST

    @property
    def contour_length(self) -> int:
        return len(self.sample.contour)

    def reference(self, t: int | None = None) -> Pixel:
        """True-contour point the agent should occupy after ``t`` steps (train mode)."""
        if self.mode != TRAIN:
            raise ValueError("test episodes have no reference contour")
        t = self.step_count if t is None else t
        return self.sample.contour[self.start_index + t]

    def observation(self) -> np.ndarray:
        return observe(self.sample.image, self.position, self.config.patch_size)

    def step(self, action: int):
        if self.done:
            raise EpisodeFinished(f"episode already ended ({self.termination_reason})")
        dr, dc = ACTIONS[int(action)]
        nr, nc = self.position.row + dr, self.position.col + dc
        h, w = self.sample.shape
        self.step_count += 1
        if not (0 <= nr < h and 0 <= nc < w):
            reward = float(self.config.out_of_image_penalty)
            self.rewards.append(reward)
            self.done = True
            self.termination_reason = OUT_OF_IMAGE
            return self.observation(), reward, True

        self.position = Pixel(nr, nc)
        self.trace.append(self.position)
        if self.mode == TRAIN:
            ref = self.reference()
            reward = -math.hypot(nr - ref.row, nc - ref.col)
            if self.step_count >= self.contour_length:
                self.done = True
                self.termination_reason = CONTOUR_LENGTH
        else:
            reward = 0.0
            if home_terminated(self):
                self.done = True
                self.termination_reason = HOME
            elif self.step_count >= self.config.max_test_steps:
                self.done = True
                self.termination_reason = MAX_STEPS
        self.rewards.append(reward)
        return self.observation(), reward, self.done

    def total_return(self, gamma: float | None = None) -> float:
        return total_return(self.rewards, self.config.gamma if gamma is None else gamma)


def home_terminated(episode: Episode) -> bool:
    """True once the agent re-enters the 3x3 neighbourhood of its first positions."""
    cfg = episode.config
    if episode.step_count < cfg.home_warmup:
        return False
    r, c = episode.position
    for hr, hc in episode.trace[:cfg.home_window]:
        if abs(r - hr) <= 1 and abs(c - hc) <= 1:
            return True
    return False


def oracle_policy_action(episode: Episode) -> int:
    """Action that steps from the current reference point to the next contour point."""
    here = episode.reference()
    nxt = episode.reference(episode.step_count + 1)
    return action_for((nxt.row - here.row, nxt.col - here.col))


def export_trace(episode: Episode, csv_path, json_path) -> None:
    from .io import write_points_csv

    write_points_csv(csv_path, np.array(episode.trace, dtype=np.int64))
    record = {
        "termination_reason": episode.termination_reason,
        "steps": episode.step_count,
        "return": episode.total_return(),
    }
    with open(json_path, "w") as f:
        json.dump(record, f, indent=2)
        f.write("\n")


def config_dict(cfg: EnvConfig) -> dict:
    return asdict(cfg)
