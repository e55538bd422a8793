"""End-to-end run orchestration: dataset to report, with resumable stages.

Each stage leaves a marker file after its artifacts are safely on disk, so
an interrupted run resumes where it stopped.  Every random decision flows
from the root seed through named substreams, which makes a finished run
reproducible from its config snapshot alone.  Metric files carry no
wall-clock values; timing lives in the logs.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import world as W
from .config import Config, save_config
from .depthnet import StudentSpec, TeacherDepthNet, build_branches, build_student
from .distill import FitConfig, train_head, train_tail, train_teacher
from .errors import ConfigurationError, MissingPrerequisiteError
from .gate import (
    GateEnv, choice_grid, constraint_report, write_choice_csv, write_choice_pgm,
    write_constraint_csv,
)
from .policy import (
    ActorNet, BranchDepthSource, EvalSummary, MultiBranchSource, NavEnv,
    NavEnvConfig, TD3Agent, TD3Config, evaluate_policy, feature_length,
    train_policy, write_episode_csv, write_steps_csv,
)
from .rng import substream
from .storage import generate_dataset, load_dataset, load_model, save_dataset, save_model
from .tensor import Tensor, no_grad
from .world import CameraSpec, CurriculumTracker, default_curriculum

log = logging.getLogger(__name__)

STAGES = ("dataset", "teacher", "students", "nav", "gate", "eval")

# substream index blocks per consumer; the stream name picks the family
INIT_TEACHER = 0
INIT_STUDENT_BASE = 10
INIT_ACTOR_BASE = 20
INIT_GATE = 40
WORLD_NAV_BASE = 100
WORLD_GATE = 200
RL_NAV_BASE = 0
RL_GATE = 40


class RunPaths:
    """File layout of one experiment directory."""

    def __init__(self, root: str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "markers").mkdir(exist_ok=True)

    def marker(self, stage: str) -> Path:
        return self.root / "markers" / f"{stage}.done"

    def dataset(self, split: str) -> Path:
        return self.root / f"{split}.nsds"

    @property
    def teacher(self) -> Path:
        return self.root / "teacher.nspt"

    def student(self, name: str) -> Path:
        return self.root / f"student-{name}.nspt"

    def actor(self, name: str) -> Path:
        return self.root / f"actor-{name}.nspt"

    def history(self, name: str) -> Path:
        return self.root / f"history-{name}.csv"

    def episodes(self, name: str) -> Path:
        return self.root / f"episodes-{name}.csv"

    @property
    def report(self) -> Path:
        return self.root / "report.csv"

    @property
    def config_snapshot(self) -> Path:
        return self.root / "config-resolved.ini"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"{path} is missing; run the {hint} stage first")
    return path


def _camera(cfg: Config) -> CameraSpec:
    _, h, w = cfg.geometry().input_shape
    return CameraSpec(h, w)


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            writer.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.lr)])


def _write_policy_history(path: Path, result) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "success_rate", "steps_per_meter", "kb_per_meter",
                         "mean_c", "mean_return"])
        for step, s in result.evals:
            writer.writerow([step, repr(s.success_rate), repr(s.steps_per_meter),
                             repr(s.kb_per_meter), repr(s.mean_c), repr(s.mean_return)])


# ---------------------------------------------------------------------------
# model plumbing


def build_teacher(cfg: Config) -> TeacherDepthNet:
    return TeacherDepthNet(cfg.geometry(),
                           rng=substream(cfg.experiment.root_seed, "init", INIT_TEACHER))


def load_teacher(cfg: Config, paths: RunPaths) -> TeacherDepthNet:
    teacher = build_teacher(cfg)
    load_model(str(_require(paths.teacher, "teacher")), teacher)
    return teacher


def _build_student(cfg: Config, teacher: TeacherDepthNet, i: int, spec: StudentSpec):
    rng = substream(cfg.experiment.root_seed, "init", INIT_STUDENT_BASE + i)
    return build_student(teacher, spec, rng=rng)


def load_branches(cfg: Config, paths: RunPaths):
    teacher = load_teacher(cfg, paths)
    students = []
    for i, spec in enumerate(cfg.student_specs()):
        student = _build_student(cfg, teacher, i, spec)
        load_model(str(_require(paths.student(spec.name), "students")), student)
        students.append(student)
    return build_branches(teacher, students)


def _actor_fn(actor: ActorNet):
    def act(feature: np.ndarray) -> np.ndarray:
        with no_grad():
            out = actor(Tensor(np.asarray(feature, dtype=np.float32))).data
        return np.clip(out, -1.0, 1.0).astype(np.float32)
    return act


def load_actor_fn(cfg: Config, paths: RunPaths, name: str, feature_dim: int,
                  action_dim: int, hidden: tuple[int, ...] = (32, 32, 32)):
    actor = ActorNet(feature_dim, action_dim,
                     substream(cfg.experiment.root_seed, "init", INIT_ACTOR_BASE),
                     hidden)
    load_model(str(_require(paths.actor(name), "nav" if action_dim == 4 else "gate")),
               actor)
    return _actor_fn(actor)


# ---------------------------------------------------------------------------
# episode sampling


def _weighted_level(rng: np.random.Generator, weights: Sequence[float],
                    n_levels: int) -> int:
    w = np.asarray(list(weights)[:n_levels], dtype=np.float64)
    if w.size < n_levels:
        w = np.pad(w, (0, n_levels - w.size))
    total = w.sum()
    if total <= 0:
        return 0
    return int(rng.choice(n_levels, p=w / total))


def build_eval_set(cfg: Config, count: int, stream: str = "eval"):
    """The shared held-out episode list; every model sees the same worlds."""
    schedule = default_curriculum()
    weights = cfg.level_weights()
    episodes = []
    for i in range(count):
        rng = substream(cfg.experiment.root_seed, stream, i)
        level = _weighted_level(rng, weights, len(schedule.levels))
        episodes.append(W.sample_episode(W.WorldConfig(), schedule, level, rng))
    return episodes


def _nav_episode_sampler(cfg: Config, world_index: int):
    schedule = default_curriculum()

    def sampler(level: int, episode_index: int):
        rng = substream(cfg.experiment.root_seed, "world", world_index, episode_index)
        return W.sample_episode(W.WorldConfig(), schedule, level, rng)

    return sampler


def _gate_episode_sampler(cfg: Config):
    schedule = default_curriculum()
    weights = cfg.level_weights()

    def sampler(level: int, episode_index: int):
        rng = substream(cfg.experiment.root_seed, "world", WORLD_GATE, episode_index)
        drawn = _weighted_level(rng, weights, len(schedule.levels))
        return W.sample_episode(W.WorldConfig(), schedule, drawn, rng)

    return sampler


# ---------------------------------------------------------------------------
# stages


def stage_dataset(cfg: Config, paths: RunPaths) -> None:
    cam = _camera(cfg)
    params = W.SceneParams()
    for split, count in (("train", cfg.dataset.train), ("val", cfg.dataset.val),
                         ("test", cfg.dataset.test)):
        log.info("dataset: rendering %d %s frames", count, split)
        ds = generate_dataset(W.WorldConfig(), cam, params, count,
                              cfg.experiment.root_seed, f"data-{split}")
        save_dataset(str(paths.dataset(split)), ds)


def stage_teacher(cfg: Config, paths: RunPaths) -> None:
    train = load_dataset(str(_require(paths.dataset("train"), "dataset")))
    val = load_dataset(str(_require(paths.dataset("val"), "dataset")))
    teacher = build_teacher(cfg)
    fit = FitConfig(lr=cfg.teacher.lr, batch_size=cfg.teacher.batch_size,
                    max_epochs=cfg.teacher.epochs, patience=cfg.teacher.patience)
    history = train_teacher(teacher, train, val, fit,
                            substream(cfg.experiment.root_seed, "rl", 90))
    save_model(str(paths.teacher), teacher)
    _write_history(paths.history("teacher"), history)


def stage_students(cfg: Config, paths: RunPaths) -> None:
    train = load_dataset(str(_require(paths.dataset("train"), "dataset")))
    val = load_dataset(str(_require(paths.dataset("val"), "dataset")))
    teacher = load_teacher(cfg, paths)
    for i, spec in enumerate(cfg.student_specs()):
        student = _build_student(cfg, teacher, i, spec)
        head_fit = FitConfig(lr=cfg.students.lr, batch_size=cfg.students.batch_size,
                             max_epochs=cfg.students.head_epochs,
                             patience=cfg.students.patience)
        tail_fit = FitConfig(lr=cfg.students.lr, batch_size=cfg.students.batch_size,
                             max_epochs=cfg.students.tail_epochs,
                             patience=cfg.students.patience)
        head_hist = train_head(student, teacher, train, val, head_fit,
                               substream(cfg.experiment.root_seed, "rl", 91, i))
        tail_hist = train_tail(student, teacher, train, val, tail_fit,
                               substream(cfg.experiment.root_seed, "rl", 92, i))
        save_model(str(paths.student(spec.name)), student)
        _write_history(paths.history(f"head-{spec.name}"), head_hist)
        _write_history(paths.history(f"tail-{spec.name}"), tail_hist)


def _nav_td3(cfg: Config) -> TD3Config:
    return TD3Config(batch_size=cfg.nav.batch_size, warmup_steps=cfg.nav.warmup_steps,
                     lr=cfg.nav.lr, exploration_noise=cfg.nav.exploration_noise)


def stage_nav(cfg: Config, paths: RunPaths) -> None:
    cam = _camera(cfg)
    branches = load_branches(cfg, paths)
    env_cfg = NavEnvConfig(pool_hw=cfg.pool_hw())
    eval_eps = build_eval_set(cfg, cfg.nav.eval_episodes, stream="eval-train")
    for branch in branches:
        log.info("nav: training the %s policy", branch.name)
        env = NavEnv(cam, BranchDepthSource(branch, cam), env_cfg)
        agent = TD3Agent(env.feature_dim, env.action_dim,
                         substream(cfg.experiment.root_seed, "init",
                                   INIT_ACTOR_BASE + branch.branch_id),
                         _nav_td3(cfg))
        tracker = CurriculumTracker(default_curriculum())

        def eval_fn(agent_, _env_cfg=env_cfg, _branch=branch):
            eval_env = NavEnv(cam, BranchDepthSource(_branch, cam), _env_cfg)
            return evaluate_policy(eval_env, _actor_fn(agent_.actor), eval_eps)[1]

        result = train_policy(
            env, _nav_episode_sampler(cfg, WORLD_NAV_BASE + branch.branch_id),
            agent, cfg.nav.total_steps,
            substream(cfg.experiment.root_seed, "rl", RL_NAV_BASE + branch.branch_id),
            tracker=tracker, eval_fn=eval_fn, eval_every=cfg.nav.eval_every,
            log_name=f"nav[{branch.name}]")
        save_model(str(paths.actor(branch.name)), agent.actor)
        _write_policy_history(paths.history(f"nav-{branch.name}"), result)


def stage_gate(cfg: Config, paths: RunPaths) -> None:
    cam = _camera(cfg)
    branches = load_branches(cfg, paths)
    students = [b for b in branches if b.trainable]
    env_cfg = NavEnvConfig(pool_hw=cfg.pool_hw())
    nav_dim = feature_length(cfg.pool_hw())
    actors = [load_actor_fn(cfg, paths, b.name, nav_dim, 4) for b in students]
    source = MultiBranchSource(students, cam)
    env = GateEnv(cam, source, actors, env_cfg, alpha5=cfg.gate.alpha5)
    agent = TD3Agent(env.feature_dim, 1,
                     substream(cfg.experiment.root_seed, "init", INIT_GATE),
                     TD3Config(batch_size=cfg.nav.batch_size,
                               warmup_steps=cfg.gate.warmup_steps, lr=cfg.nav.lr,
                               exploration_noise=cfg.nav.exploration_noise),
                     hidden=(32, 32))
    eval_eps = build_eval_set(cfg, cfg.nav.eval_episodes, stream="eval-train")

    def eval_fn(agent_):
        eval_env = GateEnv(cam, MultiBranchSource(students, cam), actors, env_cfg,
                           alpha5=cfg.gate.alpha5)
        return evaluate_policy(eval_env, _actor_fn(agent_.actor), eval_eps)[1]

    result = train_policy(env, _gate_episode_sampler(cfg), agent, cfg.gate.total_steps,
                          substream(cfg.experiment.root_seed, "rl", RL_GATE),
                          eval_fn=eval_fn, eval_every=cfg.nav.eval_every,
                          log_name="gate")
    save_model(str(paths.actor("gate")), agent.actor)
    _write_policy_history(paths.history("gate"), result)


@dataclass
class ReportRow:
    model: str
    nav_accuracy_pct: float
    steps_per_meter: float
    kb_per_meter: float
    mean_c: float


def _row(name: str, s: EvalSummary) -> ReportRow:
    return ReportRow(name, s.success_rate * 100.0, s.steps_per_meter,
                     s.kb_per_meter, s.mean_c)


def write_report(path: Path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "nav_accuracy_pct", "steps_per_meter",
                         "kb_per_meter", "mean_c"])
        for r in rows:
            writer.writerow([r.model, repr(r.nav_accuracy_pct), repr(r.steps_per_meter),
                             repr(r.kb_per_meter), repr(r.mean_c)])


def read_report(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def stage_eval(cfg: Config, paths: RunPaths) -> None:
    cam = _camera(cfg)
    branches = load_branches(cfg, paths)
    students = [b for b in branches if b.trainable]
    env_cfg = NavEnvConfig(pool_hw=cfg.pool_hw())
    feature_dim = feature_length(cfg.pool_hw())
    episodes = build_eval_set(cfg, cfg.eval.episodes)
    rows: list[ReportRow] = []
    summaries: dict[str, EvalSummary] = {}

    for branch in branches:
        env = NavEnv(cam, BranchDepthSource(branch, cam), env_cfg)
        actor = load_actor_fn(cfg, paths, branch.name, feature_dim, 4)
        results, summary = evaluate_policy(env, actor, episodes)
        summaries[branch.name] = summary
        rows.append(_row(branch.name, summary))
        write_episode_csv(str(paths.episodes(branch.name)), results)
        log.info("eval[%s]: success %.1f%% kb/m %.3f", branch.name,
                 summary.success_rate * 100, summary.kb_per_meter)

    source = MultiBranchSource(students, cam)
    actors = [load_actor_fn(cfg, paths, b.name, feature_dim, 4) for b in students]
    gate_env = GateEnv(cam, source, actors, env_cfg, alpha5=cfg.gate.alpha5)
    gate_actor = load_actor_fn(cfg, paths, "gate", gate_env.feature_dim, 1,
                               hidden=(32, 32))
    gate_results, gate_summary = evaluate_policy(gate_env, gate_actor, episodes)
    summaries["gate"] = gate_summary
    rows.append(_row("gate", gate_summary))
    write_episode_csv(str(paths.episodes("gate")), gate_results)
    write_steps_csv(str(paths.root / "steps-gate.csv"), gate_results)
    log.info("eval[gate]: success %.1f%% kb/m %.3f mean_c %.2f",
             gate_summary.success_rate * 100, gate_summary.kb_per_meter,
             gate_summary.mean_c)

    # constraint versus the dearest student branch the gate may pick
    cmax_name = students[-1].name
    report = constraint_report(gate_summary, summaries[cmax_name], cfg.gate.beta)
    write_constraint_csv(str(paths.root / "constraint.csv"), [report])

    wcfg = W.WorldConfig()
    mean, count = choice_grid(gate_results,
                              (wcfg.arena_min[0], wcfg.arena_min[1],
                               wcfg.arena_max[0], wcfg.arena_max[1]),
                              cell_m=cfg.eval.cell_m)
    write_choice_csv(str(paths.root / "choices.csv"), mean, count)
    write_choice_pgm(str(paths.root / "choices.pgm"), mean,
                     c_max=max(len(students) - 1, 1))
    write_report(paths.report, rows)


_STAGE_FN = {
    "dataset": stage_dataset,
    "teacher": stage_teacher,
    "students": stage_students,
    "nav": stage_nav,
    "gate": stage_gate,
    "eval": stage_eval,
}


def run_stage(cfg: Config, paths: RunPaths, stage: str, force: bool = False) -> bool:
    """Run one stage unless its marker says it already finished."""
    if stage not in _STAGE_FN:
        raise ConfigurationError(f"unknown stage {stage!r}; choose from {STAGES}")
    marker = paths.marker(stage)
    if marker.exists() and not force:
        log.info("%s: marker present, skipping", stage)
        return False
    _STAGE_FN[stage](cfg, paths)
    marker.write_text("done\n")
    return True


def run_pipeline(cfg: Config, root: str, force: bool = False,
                 stages: Sequence[str] | None = None) -> RunPaths:
    paths = RunPaths(root)
    save_config(cfg, str(paths.config_snapshot))
    for stage in stages or STAGES:
        run_stage(cfg, paths, stage, force=force)
    return paths
