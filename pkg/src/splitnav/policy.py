"""Navigation features, TD3, episode environments, and evaluation.

A navigation feature stacks the four most recent (min-pooled depth map,
state vector) pairs, oldest first, duplicating the oldest entry while the
episode is younger than the stack.  Environments follow a small gym-like
protocol -- ``reset(*args) -> feature`` and ``step(action) -> (feature,
reward, done, info)`` -- so the same TD3 trainer drives navigation, gate
selection, and test bandits.

Inside an episode the loop is sense -> act -> advance: ``sense`` renders
the camera, runs the active branch end to end (quantized), pools, and
charges the branch's payload bytes; ``advance`` applies the action to the
world.  Collision and goal are true terminals; a timeout ends the episode
but still bootstraps, so its transition is stored as non-terminal.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from . import world as W
from .errors import ConfigurationError, TrainingFault
from .nn import MLP, param_dict, snapshot, restore, soft_update
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)

HISTORY_LENGTH = 4
ACTION_DIM = 4


# ---------------------------------------------------------------------------
# features


def pooled_entry(depth_map: np.ndarray, state_vec: np.ndarray,
                 pool_hw: tuple[int, int]) -> np.ndarray:
    """One history entry: min-pooled depth (row-major) plus the state vector."""
    pooled = T.min_pool2d(depth_map, *pool_hw).data
    return np.concatenate([pooled.ravel(), state_vec]).astype(np.float32)


def build_features(history: Sequence[tuple[np.ndarray, np.ndarray]],
                   pool_hw: tuple[int, int],
                   length: int = HISTORY_LENGTH) -> np.ndarray:
    """Stack the ``length`` most recent entries, duplicating the oldest."""
    if not history:
        raise ConfigurationError("cannot build features from an empty history")
    entries = [pooled_entry(z, s, pool_hw) for z, s in history[-length:]]
    while len(entries) < length:
        entries.insert(0, entries[0])
    return np.concatenate(entries)


def feature_length(pool_hw: tuple[int, int], length: int = HISTORY_LENGTH) -> int:
    return (pool_hw[0] * pool_hw[1] + 4) * length


# ---------------------------------------------------------------------------
# networks


class ActorNet:
    """tanh policy head: outputs stay inside (-1, 1)^dim."""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (32, 32, 32)):
        self.mlp = MLP(state_dim, hidden, action_dim, "tanh", rng=rng, final_bound=3e-3)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)

    def named_parameters(self, prefix: str = ""):
        yield from self.mlp.named_parameters(prefix)


class CriticNet:
    """Q(s, a) on the concatenated state-action vector."""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (32, 32, 32)):
        self.mlp = MLP(state_dim + action_dim, hidden, 1, None, rng=rng, final_bound=3e-3)

    def __call__(self, state: Tensor, action: Tensor) -> Tensor:
        return self.mlp(T.concat([state, action], axis=-1))

    def named_parameters(self, prefix: str = ""):
        yield from self.mlp.named_parameters(prefix)


@dataclass(frozen=True)
class TD3Config:
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_noise: float = 0.1
    batch_size: int = 128
    buffer_capacity: int = 100_000
    lr: float = 1e-3
    warmup_steps: int = 1000


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ConfigurationError("replay capacity must be positive")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.actions = np.zeros((capacity, action_dim), dtype=np.float32)
        self.rewards = np.zeros((capacity, 1), dtype=np.float32)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float32)
        self.dones = np.zeros((capacity, 1), dtype=np.float32)
        self.count = 0

    def __len__(self) -> int:
        return min(self.count, self.capacity)

    def add(self, s, a, r, s2, done: bool) -> None:
        i = self.count % self.capacity
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s2
        self.dones[i] = 1.0 if done else 0.0
        self.count += 1

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self), size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


class TD3Agent:
    """Twin critics, target smoothing, delayed policy updates."""

    def __init__(self, state_dim: int, action_dim: int, rng: np.random.Generator,
                 cfg: TD3Config = TD3Config(), hidden: tuple[int, ...] = (32, 32, 32)):
        self.cfg = cfg
        self.action_dim = action_dim
        self.actor = ActorNet(state_dim, action_dim, rng, hidden)
        self.critic1 = CriticNet(state_dim, action_dim, rng, hidden)
        self.critic2 = CriticNet(state_dim, action_dim, rng, hidden)
        self.target_actor = ActorNet(state_dim, action_dim, rng, hidden)
        self.target_critic1 = CriticNet(state_dim, action_dim, rng, hidden)
        self.target_critic2 = CriticNet(state_dim, action_dim, rng, hidden)
        for target, source in ((self.target_actor, self.actor),
                               (self.target_critic1, self.critic1),
                               (self.target_critic2, self.critic2)):
            soft_update(param_dict(target), param_dict(source), tau=1.0)
        self.actor_opt = Adam([p for _, p in self.actor.named_parameters()], lr=cfg.lr)
        self.critic_opt = Adam([p for _, p in self.critic1.named_parameters()]
                               + [p for _, p in self.critic2.named_parameters()], lr=cfg.lr)
        self.update_count = 0

    def act(self, feature: np.ndarray, noise_sigma: float = 0.0,
            rng: np.random.Generator | None = None) -> np.ndarray:
        with T.no_grad():
            action = self.actor(Tensor(np.asarray(feature, dtype=np.float32))).data.copy()
        if noise_sigma > 0.0:
            if rng is None:
                raise ConfigurationError("exploration noise needs a generator")
            action = action + rng.normal(0.0, noise_sigma, size=action.shape)
        return np.clip(action, -1.0, 1.0).astype(np.float32)

    def update(self, batch, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        s, a, r, s2, done = batch
        with T.no_grad():
            noise = np.clip(rng.normal(0.0, cfg.target_noise, size=a.shape),
                            -cfg.noise_clip, cfg.noise_clip).astype(np.float32)
            a2 = np.clip(self.target_actor(Tensor(s2)).data + noise, -1.0, 1.0)
            q1t = self.target_critic1(Tensor(s2), Tensor(a2)).data
            q2t = self.target_critic2(Tensor(s2), Tensor(a2)).data
            q_used = np.minimum(q1t, q2t)
            y = r + cfg.gamma * (1.0 - done) * q_used
        if not np.isfinite(y).all():
            raise TrainingFault("non-finite TD3 target values")

        target = Tensor(y.astype(np.float32))
        self.critic_opt.zero_grad()
        critic_loss = T.add(T.l2_loss(self.critic1(Tensor(s), Tensor(a)), target),
                            T.l2_loss(self.critic2(Tensor(s), Tensor(a)), target))
        critic_loss.backward()
        self.critic_opt.step()
        self.update_count += 1

        info = {
            "critic_loss": critic_loss.item(),
            "target_q1": q1t.copy(),
            "target_q2": q2t.copy(),
            "target_q_used": q_used.copy(),
        }
        if self.update_count % cfg.policy_delay == 0:
            self.actor_opt.zero_grad()
            actor_loss = T.neg(T.mean(self.critic1(Tensor(s), self.actor(Tensor(s)))))
            actor_loss.backward()
            self.actor_opt.step()
            soft_update(param_dict(self.target_actor), param_dict(self.actor), cfg.tau)
            soft_update(param_dict(self.target_critic1), param_dict(self.critic1), cfg.tau)
            soft_update(param_dict(self.target_critic2), param_dict(self.critic2), cfg.tau)
            info["actor_loss"] = actor_loss.item()
        return info


# ---------------------------------------------------------------------------
# depth sources


class OracleDepthSource:
    """Ground-truth depth straight from the ray caster; transmits nothing."""

    payload_bytes = 0
    branch_id = None

    def __init__(self, cam: W.CameraSpec):
        self.cam = cam

    def depth(self, world: W.World, state: W.DroneState) -> tuple[np.ndarray, int, int | None]:
        return (W.render_depth(world, state.position, state.yaw, self.cam), 0, None)


class BranchDepthSource:
    """Render RGB, run one branch end to end with quantization in the loop."""

    def __init__(self, branch, cam: W.CameraSpec):
        self.branch = branch
        self.cam = cam

    @property
    def payload_bytes(self) -> int:
        return self.branch.payload_bytes

    @property
    def branch_id(self) -> int:
        return self.branch.branch_id

    def depth(self, world: W.World, state: W.DroneState) -> tuple[np.ndarray, int, int | None]:
        rgb = W.render_rgb(world, state.position, state.yaw, self.cam)
        return (self.branch.infer_depth(rgb), self.branch.payload_bytes,
                self.branch.branch_id)


class MultiBranchSource:
    """A switchable menu of branch sources; the gate selects per step."""

    def __init__(self, branches: Sequence, cam: W.CameraSpec):
        if not branches:
            raise ConfigurationError("branch menu cannot be empty")
        self.sources = [BranchDepthSource(b, cam) for b in branches]
        self.current = len(self.sources) - 1

    @property
    def menu_size(self) -> int:
        return len(self.sources)

    def select(self, index: int) -> None:
        if not 0 <= index < len(self.sources):
            raise ConfigurationError(f"branch index {index} outside menu")
        self.current = index

    @property
    def payload_bytes(self) -> int:
        return self.sources[self.current].payload_bytes

    @property
    def branch_id(self) -> int:
        return self.sources[self.current].branch_id

    def depth(self, world: W.World, state: W.DroneState):
        return self.sources[self.current].depth(world, state)


# ---------------------------------------------------------------------------
# environments


@dataclass
class NavEnvConfig:
    pool_hw: tuple[int, int] = (6, 8)
    history_length: int = HISTORY_LENGTH
    pos_scale: float = 20.0
    limits: W.ActionLimits = W.ActionLimits()
    drone_radius: float = W.DRONE_RADIUS_M
    rewards: W.RewardParams = W.RewardParams()


class NavEnv:
    """Single-drone navigation with a pluggable depth source.

    ``reset(world, spec)`` senses the first observation; ``step`` applies the
    action, then senses from the new state (except after a hard terminal).
    """

    def __init__(self, cam: W.CameraSpec, source, cfg: NavEnvConfig = NavEnvConfig()):
        self.cam = cam
        self.source = source
        self.cfg = cfg
        self.action_dim = ACTION_DIM
        self.feature_dim = feature_length(cfg.pool_hw, cfg.history_length)

    # -- episode bookkeeping ------------------------------------------------

    def reset(self, world: W.World, spec: W.EpisodeSpec) -> np.ndarray:
        self.world = world
        self.spec = spec
        self.state = W.DroneState(np.asarray(spec.start, dtype=np.float64), spec.start_yaw)
        self.target = np.asarray(spec.target, dtype=np.float64)
        self.steps = 0
        self.bytes_sent = 0
        self.total_reward = 0.0
        self.history: list[tuple[np.ndarray, np.ndarray]] = []
        self.positions: list[tuple[float, float, float]] = [tuple(self.state.position)]
        self.c_log: list[int] = []
        self.flags = W.StepFlags()
        self.timeout = False
        return self.sense()

    def sense(self) -> np.ndarray:
        depth, nbytes, c = self.source.depth(self.world, self.state)
        self.bytes_sent += nbytes
        if c is not None:
            self.c_log.append(c)
        sv = W.state_vector(self.state, self.target, self.cfg.pos_scale)
        self.history.append((depth, sv))
        if len(self.history) > self.cfg.history_length:
            self.history.pop(0)
        return build_features(self.history, self.cfg.pool_hw, self.cfg.history_length)

    def advance(self, action: np.ndarray) -> tuple[float, bool]:
        new_state, flags, progress = W.step(self.world, self.state, action, self.target,
                                            self.cfg.limits, self.cfg.drone_radius,
                                            self.spec.goal_radius)
        self.state = new_state
        self.steps += 1
        self.positions.append(tuple(new_state.position))
        self.flags = flags
        self.timeout = (not flags.collision and not flags.goal
                        and self.steps >= self.spec.max_steps)
        reward = W.navigation_reward(flags, progress, self.cfg.rewards)
        self.total_reward += reward
        return reward, flags.collision or flags.goal or self.timeout

    def step(self, action: np.ndarray):
        reward, done = self.advance(action)
        if done and not self.timeout:
            # hard terminal: the next feature is never used for bootstrapping
            feature = build_features(self.history, self.cfg.pool_hw, self.cfg.history_length)
        else:
            feature = self.sense()
        return feature, reward, done, self.info(done)

    def info(self, done: bool) -> dict:
        return {
            "success": self.flags.goal,
            "collision": self.flags.collision,
            "timeout": self.timeout,
            "terminal": self.flags.goal or self.flags.collision,
            "done": done,
            "steps": self.steps,
            "bytes": self.bytes_sent,
        }

    def result(self) -> "EpisodeResult":
        c_arr = self.c_log[:self.steps]  # one observation per executed action
        return EpisodeResult(
            success=self.flags.goal, collision=self.flags.collision,
            timeout=self.timeout, steps=self.steps,
            initial_distance_m=self.spec.initial_distance,
            bytes_sent=self.bytes_sent,
            mean_c=float(np.mean(c_arr)) if c_arr else float("nan"),
            total_reward=self.total_reward,
            positions=list(self.positions),
            c_per_step=list(c_arr))


class BanditEnv:
    """One-step continuous bandit: reward -(action - optimum)^2."""

    def __init__(self, optimum: float = 0.5):
        self.optimum = optimum
        self.action_dim = 1
        self.feature_dim = 1

    def reset(self) -> np.ndarray:
        return np.zeros(1, dtype=np.float32)

    def step(self, action: np.ndarray):
        reward = -float((action[0] - self.optimum) ** 2)
        return np.zeros(1, dtype=np.float32), reward, True, {"success": True}


# ---------------------------------------------------------------------------
# episode results and evaluation


@dataclass
class EpisodeResult:
    success: bool
    collision: bool
    timeout: bool
    steps: int
    initial_distance_m: float
    bytes_sent: int
    mean_c: float
    total_reward: float
    positions: list[tuple[float, float, float]] = field(default_factory=list)
    c_per_step: list[int] = field(default_factory=list)
    infra_failure: bool = False


@dataclass
class EvalSummary:
    episodes: int
    successes: int
    success_rate: float
    steps_per_meter: float
    kb_per_meter: float
    mean_c: float
    mean_return: float
    infra_failures: int = 0

    def score(self) -> tuple[float, float]:
        return (self.success_rate, self.mean_return)


def summarize(results: Sequence[EpisodeResult]) -> EvalSummary:
    """Aggregate episode results.

    Success rate is over episodes without infrastructure failures; the
    normalised per-meter columns average only successful episodes (NaN when
    there are none).  Mean ĉ spans every logged step of every episode.
    """
    usable = [r for r in results if not r.infra_failure]
    succ = [r for r in usable if r.success]
    all_c = [c for r in usable for c in r.c_per_step]
    return EvalSummary(
        episodes=len(usable),
        successes=len(succ),
        success_rate=len(succ) / len(usable) if usable else float("nan"),
        steps_per_meter=(float(np.mean([r.steps / r.initial_distance_m for r in succ]))
                         if succ else float("nan")),
        kb_per_meter=(float(np.mean([r.bytes_sent / 1024.0 / r.initial_distance_m
                                     for r in succ])) if succ else float("nan")),
        mean_c=float(np.mean(all_c)) if all_c else float("nan"),
        mean_return=float(np.mean([r.total_reward for r in usable])) if usable else float("nan"),
        infra_failures=sum(r.infra_failure for r in results))


def run_episode(env, actor_fn: Callable[[np.ndarray], np.ndarray],
                reset_args: tuple) -> EpisodeResult:
    feature = env.reset(*reset_args)
    done = False
    while not done:
        feature, _, done, _ = env.step(actor_fn(feature))
    return env.result()


def evaluate_policy(env, actor_fn, episodes: Sequence[tuple]) -> tuple[list[EpisodeResult], EvalSummary]:
    """Deterministic rollout of a fixed episode list; same inputs, same metrics."""
    results = [run_episode(env, actor_fn, ep) for ep in episodes]
    return results, summarize(results)


def build_eval_episodes(cfg: W.WorldConfig, schedule: W.CurriculumSchedule,
                        levels: Sequence[int], root_seed: int,
                        stream: str = "eval", **episode_kw) -> list[tuple[W.World, W.EpisodeSpec]]:
    """A reproducible episode list: one substream per episode index."""
    from .rng import substream
    episodes = []
    for i, level in enumerate(levels):
        rng = substream(root_seed, stream, i)
        episodes.append(W.sample_episode(cfg, schedule, level, rng, **episode_kw))
    return episodes


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainPolicyResult:
    evals: list[tuple[int, EvalSummary]] = field(default_factory=list)
    episodes: int = 0
    final_level: int = 0
    best_step: int = -1
    promotions: list[tuple[int, int]] = field(default_factory=list)


def train_policy(env, episode_sampler, agent: TD3Agent, total_steps: int,
                 rl_rng: np.random.Generator, tracker: W.CurriculumTracker | None = None,
                 eval_fn=None, eval_every: int = 0, log_name: str = "td3") -> TrainPolicyResult:
    """Generic TD3 driver over a gym-like env.

    ``episode_sampler(level, index)`` returns the env's reset arguments.
    Timeout transitions are stored non-terminal so they bootstrap.  With
    ``eval_fn`` given, the best-scoring actor snapshot is restored at the
    end; training that never promotes past a level just returns the best
    actor found, with a warning.
    """
    cfg = agent.cfg
    buffer = ReplayBuffer(cfg.buffer_capacity, env.feature_dim, env.action_dim)
    out = TrainPolicyResult()
    level = tracker.level if tracker else 0
    feature = env.reset(*episode_sampler(level, out.episodes))
    actor_params = param_dict(agent.actor)
    best_score: tuple | None = None
    best_actor = None

    def maybe_eval(step_index: int) -> None:
        nonlocal best_score, best_actor
        if eval_fn is None:
            return
        summary = eval_fn(agent)
        out.evals.append((step_index, summary))
        score = summary.score()
        if best_score is None or score > best_score:
            best_score = score
            best_actor = snapshot(actor_params)
            out.best_step = step_index
        log.info("%s: step %d eval success %.2f return %.2f", log_name, step_index,
                 summary.success_rate, summary.mean_return)

    for step_i in range(1, total_steps + 1):
        if step_i <= cfg.warmup_steps:
            action = rl_rng.uniform(-1.0, 1.0, env.action_dim).astype(np.float32)
        else:
            action = agent.act(feature, cfg.exploration_noise, rl_rng)
        next_feature, reward, done, info = env.step(action)
        # timeouts bootstrap; only collision/goal are absorbing
        buffer.add(feature, action, reward, next_feature, info.get("terminal", done))
        feature = next_feature
        if step_i > cfg.warmup_steps and len(buffer) >= cfg.batch_size:
            agent.update(buffer.sample(cfg.batch_size, rl_rng), rl_rng)
        if done:
            out.episodes += 1
            if tracker is not None:
                if tracker.record(bool(info.get("success", False))):
                    out.promotions.append((step_i, tracker.level))
                    log.info("%s: promoted to level %d at step %d",
                             log_name, tracker.level, step_i)
                level = tracker.level
            feature = env.reset(*episode_sampler(level, out.episodes))
        if eval_every > 0 and step_i % eval_every == 0:
            maybe_eval(step_i)
    if eval_every == 0 or total_steps % eval_every != 0:
        maybe_eval(total_steps)
    if tracker is not None:
        out.final_level = tracker.level
        if tracker.level < len(tracker.schedule.levels) - 1:
            log.warning("%s: step budget exhausted at level %d of %d", log_name,
                        tracker.level, len(tracker.schedule.levels) - 1)
    if best_actor is not None:
        restore(actor_params, best_actor)
    return out


# ---------------------------------------------------------------------------
# CSV logs


def write_episode_csv(path: str, results: Sequence[EpisodeResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "initial_distance_m", "steps", "success",
                         "collision", "bytes", "mean_c"])
        for i, r in enumerate(results):
            writer.writerow([i, repr(r.initial_distance_m), r.steps, int(r.success),
                             int(r.collision), r.bytes_sent,
                             "" if math.isnan(r.mean_c) else repr(r.mean_c)])


def write_steps_csv(path: str, results: Sequence[EpisodeResult]) -> None:
    """Per-step positions and branch choices (for coverage heat maps)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "step", "x", "y", "z", "c"])
        for i, r in enumerate(results):
            for t in range(r.steps):
                x, y, z = r.positions[t]
                c = r.c_per_step[t] if t < len(r.c_per_step) else ""
                writer.writerow([i, t, repr(x), repr(y), repr(z), c])
