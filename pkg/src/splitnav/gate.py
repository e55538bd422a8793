"""Branch selection: the gate policy, its environment, and its reports.

The gate watches the same navigation features as the flight policy plus the
four most recent branch choices, and emits one scalar in [-1, 1] that maps
onto the branch menu.  Every intermediate step pays a penalty proportional
to the normalised choice, so cheap branches win wherever they do not cost
mission success.  The first observation of an episode always uses the most
expensive student branch; the teacher never appears on the menu.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from . import world as W
from .errors import ConfigurationError
from .nn import MLP
from .policy import (
    HISTORY_LENGTH, EpisodeResult, MultiBranchSource, NavEnv, NavEnvConfig,
    build_features, feature_length,
)
from .quantize import round_half_away
from .tensor import Tensor

log = logging.getLogger(__name__)

GATE_HISTORY = 4


# ---------------------------------------------------------------------------
# scalar <-> menu index


def norm_to_index(value: float, menu_size: int) -> int:
    """Map a scalar in [-1, 1] to a menu index, halves rounding away from zero."""
    if menu_size < 1:
        raise ConfigurationError("menu must have at least one branch")
    if menu_size == 1:
        return 0
    v = float(np.clip(value, -1.0, 1.0))
    idx = int(round_half_away((v + 1.0) / 2.0 * (menu_size - 1)))
    return min(max(idx, 0), menu_size - 1)


def index_to_cost(index: int, menu_size: int) -> float:
    """Normalised cost of a menu index: 0 for the cheapest, 1 for the dearest."""
    if menu_size <= 1:
        return 0.0
    return index / (menu_size - 1)


def gate_feature_length(pool_hw: tuple[int, int],
                        history: int = HISTORY_LENGTH) -> int:
    return feature_length(pool_hw, history) + GATE_HISTORY


class AuxNet:
    """Two hidden ReLU layers, then tanh down to the selection scalar."""

    def __init__(self, feature_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (32, 32)):
        self.mlp = MLP(feature_dim, hidden, 1, "tanh", rng=rng, final_bound=3e-3)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)

    def named_parameters(self, prefix: str = ""):
        yield from self.mlp.named_parameters(prefix)


def select_branch(aux: AuxNet, gate_feature: np.ndarray, menu_size: int) -> tuple[float, int]:
    """Deterministic selection: the aux scalar and the menu index it lands on."""
    with T.no_grad():
        value = float(aux(Tensor(np.asarray(gate_feature, dtype=np.float32))).data[0])
    return value, norm_to_index(value, menu_size)


def gate_reward(base_reward: float, terminal: bool, cost01: float, alpha5: float) -> float:
    """Navigation reward minus the transmission penalty on intermediate steps."""
    if terminal:
        return base_reward
    return base_reward - alpha5 * cost01


# ---------------------------------------------------------------------------
# environment


class GateEnv:
    """Gate-selection episodes over a frozen per-branch navigation ensemble.

    The action is the selection scalar for the NEXT observation; the inner
    navigation action comes from the chosen branch's own frozen actor.  The
    feature handed to the gate is the freshest navigation feature with the
    four most recent normalised choices appended, the pre-episode slots
    padded with the most expensive student branch.
    """

    def __init__(self, cam: W.CameraSpec, source: MultiBranchSource,
                 actors: Sequence, env_cfg: NavEnvConfig | None = None,
                 alpha5: float | None = None):
        cfg = env_cfg or NavEnvConfig()
        if len(actors) != source.menu_size:
            raise ConfigurationError("need one navigation actor per menu branch")
        self.nav = NavEnv(cam, source, cfg)
        self.source = source
        self.actors = list(actors)
        self.alpha5 = cfg.rewards.transmission_penalty if alpha5 is None else alpha5
        self.action_dim = 1
        self.feature_dim = gate_feature_length(cfg.pool_hw, cfg.history_length)

    def _gate_feature(self, nav_feature: np.ndarray) -> np.ndarray:
        hist = self.c_hist[-GATE_HISTORY:]
        while len(hist) < GATE_HISTORY:
            hist.insert(0, hist[0])
        costs = np.array([index_to_cost(c, self.source.menu_size) for c in hist],
                         dtype=np.float32)
        return np.concatenate([nav_feature, costs])

    def reset(self, world: W.World, spec: W.EpisodeSpec) -> np.ndarray:
        start = self.source.menu_size - 1
        self.source.select(start)
        self.c_hist = [start]
        nav_feature = self.nav.reset(world, spec)
        # the first flight action is taken immediately, under the default branch
        reward, done = self.nav.advance(self.actors[start](nav_feature))
        self._pending_reward = gate_reward(reward, self.nav.flags.collision
                                           or self.nav.flags.goal,
                                           index_to_cost(start, self.source.menu_size),
                                           self.alpha5)
        self._done_on_reset = done
        return self._gate_feature(nav_feature)

    def step(self, action: np.ndarray):
        if self._done_on_reset:
            # episode collapsed on its opening move; report and terminate
            feature = self._gate_feature(
                build_features(self.nav.history, self.nav.cfg.pool_hw,
                               self.nav.cfg.history_length))
            return feature, self._pending_reward, True, self.nav.info(True)
        index = norm_to_index(float(np.asarray(action).ravel()[0]),
                              self.source.menu_size)
        self.c_hist.append(index)
        self.source.select(index)
        nav_feature = self.nav.sense()
        reward, done = self.nav.advance(self.actors[index](nav_feature))
        terminal = self.nav.flags.collision or self.nav.flags.goal
        total = self._pending_reward + gate_reward(
            reward, terminal, index_to_cost(index, self.source.menu_size), self.alpha5)
        self._pending_reward = 0.0
        return self._gate_feature(nav_feature), total, done, self.nav.info(done)

    def result(self) -> EpisodeResult:
        return self.nav.result()


# ---------------------------------------------------------------------------
# reports


@dataclass
class ConstraintReport:
    """Did the gated system keep enough of the full-cost success rate?"""
    beta: float
    gate_success_rate: float
    cmax_success_rate: float
    gate_mean_c: float
    satisfied: bool


def constraint_report(gate_summary, cmax_summary, beta: float) -> ConstraintReport:
    if not 0.0 < beta <= 1.0:
        raise ConfigurationError("beta must lie in (0, 1]")
    ok = gate_summary.success_rate >= beta * cmax_summary.success_rate
    return ConstraintReport(beta, gate_summary.success_rate,
                            cmax_summary.success_rate, gate_summary.mean_c, bool(ok))


def write_constraint_csv(path: str, reports: Sequence[ConstraintReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "gate_success_rate", "cmax_success_rate",
                         "gate_mean_c", "satisfied"])
        for r in reports:
            writer.writerow([repr(r.beta), repr(r.gate_success_rate),
                             repr(r.cmax_success_rate), repr(r.gate_mean_c),
                             int(r.satisfied)])


# ---------------------------------------------------------------------------
# choice heat map


def choice_grid(results: Sequence[EpisodeResult], arena_xy: tuple[float, float, float, float],
                cell_m: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """Mean branch choice per ground cell over all logged steps.

    Returns (mean, count); cells nobody visited hold NaN.
    """
    x0, y0, x1, y1 = arena_xy
    if not (x1 > x0 and y1 > y0 and cell_m > 0):
        raise ConfigurationError("degenerate arena for the choice grid")
    nx = int(math.ceil((x1 - x0) / cell_m))
    ny = int(math.ceil((y1 - y0) / cell_m))
    total = np.zeros((ny, nx), dtype=np.float64)
    count = np.zeros((ny, nx), dtype=np.int64)
    for r in results:
        for t, c in enumerate(r.c_per_step):
            x, y, _ = r.positions[t]
            ix = min(max(int((x - x0) / cell_m), 0), nx - 1)
            iy = min(max(int((y - y0) / cell_m), 0), ny - 1)
            total[iy, ix] += c
            count[iy, ix] += 1
    with np.errstate(invalid="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def write_choice_csv(path: str, mean: np.ndarray, count: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "mean_c", "count"])
        ny, nx = mean.shape
        for iy in range(ny):
            for ix in range(nx):
                if count[iy, ix] > 0:
                    writer.writerow([iy, ix, repr(float(mean[iy, ix])),
                                     int(count[iy, ix])])


def write_choice_pgm(path: str, mean: np.ndarray, c_max: int) -> None:
    """Binary PGM: 0 for unvisited cells, 1..255 scaled by mean choice."""
    if c_max < 1:
        raise ConfigurationError("c_max must be at least 1 for the grey scale")
    ny, nx = mean.shape
    grey = np.zeros((ny, nx), dtype=np.uint8)
    visited = ~np.isnan(mean)
    scaled = np.zeros_like(mean)
    scaled[visited] = mean[visited] / c_max
    grey[visited] = 1 + round_half_away(254.0 * scaled[visited]).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(grey.tobytes(order="C"))
