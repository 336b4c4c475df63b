"""Closed-loop rollouts, the success judge and the experiment drivers."""

from __future__ import annotations

import itertools
import logging
import math
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import expert, policy, sim
from .errors import ConfigurationError
from .expert import Dataset
from .train import Checkpoint, TrainConfig, train_loop

log = logging.getLogger(__name__)

OUTCOMES = ("success", "wrong_goal", "stopped_outside", "timeout")


@dataclass(frozen=True)
class EvalConfig:
    v_stop: float = 1.0
    stop_steps: int = 5
    max_steps: int = 300
    trials_per_goal: int = 20
    seed: int = 0
    chunk: int = 256


# --------------------------------------------------------------------------
# controllers


class NetworkController:
    """Learned policy; computes tau for each rollout from its layout and goal."""

    def __init__(self, checkpoint: Checkpoint):
        self.checkpoint = checkpoint
        self.arch = checkpoint.arch
        self.params = checkpoint.params
        self.encoding = checkpoint.arch.encoding
        onehot = checkpoint.metadata.get("onehot_assignment")
        self.onehot_assignment = tuple(onehot) if onehot is not None else None
        policy.check_params(self.params, self.arch)

    @property
    def resolution(self):
        return tuple(self.arch.resolution)

    def check(self, layout: sim.Layout) -> None:
        sim.encode_tau(layout, 0, self.encoding, self.onehot_assignment)

    def __call__(self, layout, goal_ids, positions, rgb, depth, hist, chunk: int = 256):
        taus = {g: sim.encode_tau(layout, g, self.encoding, self.onehot_assignment).vector for g in set(goal_ids)}
        tau = np.stack([taus[g] for g in goal_ids]).reshape(len(goal_ids), -1)
        out = []
        for lo in range(0, len(goal_ids), chunk):
            sl = slice(lo, lo + chunk)
            u, _, _ = policy.forward_batch(self.params, self.arch, rgb[sl], depth[sl], hist[sl], tau[sl])
            out.append(u)
        return np.concatenate(out).astype(np.float64)


class ExpertController:
    """The scripted demonstrator behind the same interface (harness oracle)."""

    def __init__(self, params: expert.ExpertParams = expert.ExpertParams(), resolution=(80, 60)):
        self.params = params
        self.resolution = tuple(resolution)

    def check(self, layout: sim.Layout) -> None:
        pass

    def __call__(self, layout, goal_ids, positions, rgb, depth, hist, chunk: int = 256):
        goals = np.array([sim.goal_center(layout, g) for g in goal_ids], np.float64)
        return expert.expert_actions(positions, goals, self.params.speed, self.params.stop_radius)


def as_controller(policy_like) -> Callable:
    if isinstance(policy_like, Checkpoint):
        return NetworkController(policy_like)
    return policy_like


# --------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutResult:
    goal_id: int
    start: tuple[float, float]
    positions: np.ndarray  # (steps + 1) x 2, starting with the start position
    controls: np.ndarray  # steps x 2, as applied (norm-clipped)
    outcome: str

    @property
    def steps(self) -> int:
        return len(self.controls)


def judge(positions, controls, layout: sim.Layout, goal_id: int, v_stop: float = 1.0, k: int = 5) -> str:
    """Classify a terminated rollout from its trailing window.

    ``positions[i]`` is the agent position after applying ``controls[i]``.
    """
    controls = np.asarray(controls, np.float64).reshape(-1, 2)
    if len(controls) < k or k < 1:
        return "timeout"
    if not np.all(np.linalg.norm(controls[-k:], axis=1) < v_stop):
        return "timeout"
    hit = layout.button_at(np.asarray(positions)[-1])
    if hit == goal_id:
        return "success"
    if hit is not None:
        return "wrong_goal"
    return "stopped_outside"


def rollout_batch(controller, layout: sim.Layout, goal_ids: Sequence[int], starts,
                  config: EvalConfig = EvalConfig()) -> list[RolloutResult]:
    """Run one closed-loop episode per (goal, start) pair in lockstep."""
    controller = as_controller(controller)
    controller.check(layout)
    goal_ids = [int(g) for g in goal_ids]
    for g in goal_ids:
        layout.button(g)
    starts = np.asarray(starts, np.float64).reshape(-1, 2)
    n = len(goal_ids)
    resolution = controller.resolution
    traj = np.zeros((n, config.max_steps + 1, 2))
    traj[:, 0] = starts
    applied = np.zeros((n, config.max_steps, 2))
    steps = np.zeros(n, int)
    quiet = np.zeros(n, int)
    active = np.ones(n, bool)
    scale = np.array(layout.scene_size, np.float64)
    for t in range(config.max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pos = traj[idx, t]
        rgb = sim.render_rgb(layout, pos, resolution)
        depth = np.zeros(rgb.shape[:3], np.float32)
        hist_idx = np.maximum(np.arange(t - sim.HISTORY_LEN, t), 0)
        hist = (traj[idx][:, hist_idx] / scale).reshape(len(idx), -1).astype(np.float32)
        u = controller(layout, [goal_ids[i] for i in idx], pos, rgb, depth, hist, config.chunk)
        u = sim.clip_norm(u)
        traj[idx, t + 1] = sim.step_positions(pos, u, layout.scene_size)
        applied[idx, t] = u
        steps[idx] += 1
        slow = np.linalg.norm(u, axis=1) < config.v_stop
        quiet[idx] = np.where(slow, quiet[idx] + 1, 0)
        active[idx[quiet[idx] >= config.stop_steps]] = False
    results = []
    for i in range(n):
        s = steps[i]
        pos = traj[i, :s + 1].copy()
        ctl = applied[i, :s].copy()
        outcome = judge(pos[1:], ctl, layout, goal_ids[i], config.v_stop, config.stop_steps) if s else "timeout"
        results.append(RolloutResult(goal_ids[i], (float(starts[i, 0]), float(starts[i, 1])), pos, ctl, outcome))
    return results


def rollout(controller, layout: sim.Layout, goal_id: int, start, config: EvalConfig = EvalConfig()) -> RolloutResult:
    return rollout_batch(controller, layout, [goal_id], [start], config)[0]


# --------------------------------------------------------------------------
# reports


@dataclass
class GoalStats:
    goal_id: int
    trials: int
    successes: int
    seen: bool
    outcomes: dict[str, int] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


@dataclass
class EvalReport:
    goals: list[GoalStats]
    config: dict = field(default_factory=dict)

    @property
    def trials(self) -> int:
        return sum(g.trials for g in self.goals)

    @property
    def successes(self) -> int:
        return sum(g.successes for g in self.goals)

    @property
    def aggregate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    def _rate(self, seen: bool) -> float | None:
        sel = [g for g in self.goals if g.seen == seen]
        trials = sum(g.trials for g in sel)
        return sum(g.successes for g in sel) / trials if trials else None

    @property
    def seen_rate(self) -> float | None:
        return self._rate(True)

    @property
    def unseen_rate(self) -> float | None:
        return self._rate(False)

    @property
    def seen_goals(self) -> list[int]:
        return [g.goal_id for g in self.goals if g.seen]

    @property
    def unseen_goals(self) -> list[int]:
        return [g.goal_id for g in self.goals if not g.seen]

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "trials": self.trials,
            "successes": self.successes,
            "seen_rate": self.seen_rate,
            "unseen_rate": self.unseen_rate,
            "seen_goals": self.seen_goals,
            "unseen_goals": self.unseen_goals,
            "goals": [{**asdict(g), "rate": g.rate} for g in self.goals],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        goals = [
            GoalStats(g["goal_id"], g["trials"], g["successes"], g["seen"], dict(g.get("outcomes", {})))
            for g in d["goals"]
        ]
        return cls(goals, dict(d.get("config", {})))

    def __eq__(self, other) -> bool:
        return isinstance(other, EvalReport) and self.to_dict() == other.to_dict()

    def rows(self) -> list[dict]:
        """One flat row per goal, for CSV export."""
        return [
            {"goal_id": g.goal_id, "seen": int(g.seen), "trials": g.trials, "successes": g.successes,
             "rate": g.rate, **{o: g.outcomes.get(o, 0) for o in OUTCOMES}}
            for g in self.goals
        ]

    def summary(self) -> str:
        parts = [f"aggregate {self.aggregate:.3f}"]
        if self.seen_rate is not None:
            parts.append(f"seen {self.seen_rate:.3f}")
        if self.unseen_rate is not None:
            parts.append(f"unseen {self.unseen_rate:.3f}")
        per = " ".join(f"{g.goal_id}:{g.rate:.2f}" for g in self.goals)
        return ", ".join(parts) + f" | {per}"


def evaluate_goals(controller, layout: sim.Layout, goal_ids: Sequence[int] = range(9),
                   config: EvalConfig = EvalConfig(), train_goals: Sequence[int] | None = None,
                   echo: dict | None = None) -> EvalReport:
    """Success rates over ``trials_per_goal`` rollouts per goal from edge starts."""
    if config.trials_per_goal < 1:
        raise ConfigurationError("trials_per_goal must be >= 1")
    controller = as_controller(controller)
    if train_goals is None and isinstance(controller, NetworkController):
        train_goals = controller.checkpoint.train_goals
    seen = set(train_goals or ())
    rng = np.random.default_rng([int(config.seed), 3])
    goal_ids = [int(g) for g in goal_ids]
    goals, starts = [], []
    for g in goal_ids:
        for _ in range(config.trials_per_goal):
            goals.append(g)
            starts.append(sim.sample_start(layout.scene_size, rng))
    results = rollout_batch(controller, layout, goals, starts, config)
    stats = []
    for g in goal_ids:
        rs = [r for r in results if r.goal_id == g]
        outcomes = {o: sum(r.outcome == o for r in rs) for o in OUTCOMES}
        stats.append(GoalStats(g, len(rs), outcomes["success"], g in seen, outcomes))
    meta = {"layout": layout.kind, "layout_seed": layout.seed, **asdict(config)}
    if isinstance(controller, NetworkController):
        meta.update(
            encoding=controller.encoding,
            train_goals=list(controller.checkpoint.train_goals),
            checkpoint=controller.checkpoint.metadata,
        )
    else:
        meta["controller"] = type(controller).__name__
    meta.update(echo or {})
    return EvalReport(stats, meta)


@dataclass
class SubsetResult:
    subset: tuple[int, ...]
    report: EvalReport | None
    error: str | None = None

    @property
    def aggregate(self) -> float | None:
        return None if self.report is None else self.report.aggregate


@dataclass
class SweepReport:
    encoding: str
    results: dict[int, list[SubsetResult]]
    config: dict = field(default_factory=dict)

    def stats(self, k: int) -> dict:
        rates = [r.aggregate for r in self.results[k] if r.aggregate is not None]
        if not rates:
            return {"median": None, "min": None, "max": None, "n": 0}
        return {"median": statistics.median(rates), "min": min(rates), "max": max(rates), "n": len(rates)}

    def to_dict(self) -> dict:
        return {
            "encoding": self.encoding,
            "config": self.config,
            "sizes": {
                str(k): {
                    **self.stats(k),
                    "subsets": [
                        {"subset": list(r.subset), "error": r.error,
                         "report": None if r.report is None else r.report.to_dict()}
                        for r in rs
                    ],
                }
                for k, rs in self.results.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> SweepReport:
        results = {
            int(k): [
                SubsetResult(tuple(s["subset"]), None if s["report"] is None else EvalReport.from_dict(s["report"]),
                             s["error"])
                for s in v["subsets"]
            ]
            for k, v in d["sizes"].items()
        }
        return cls(d["encoding"], results, dict(d.get("config", {})))

    def __eq__(self, other) -> bool:
        return isinstance(other, SweepReport) and self.to_dict() == other.to_dict()

    def rows(self) -> list[dict]:
        out = []
        for k, rs in self.results.items():
            for r in rs:
                out.append({
                    "encoding": self.encoding, "k": k, "subset": " ".join(map(str, r.subset)),
                    "aggregate": r.aggregate,
                    "seen_rate": None if r.report is None else r.report.seen_rate,
                    "unseen_rate": None if r.report is None else r.report.unseen_rate,
                    "error": r.error,
                })
        return out


def sample_subsets(k: int, m: int, seed: int) -> list[tuple[int, ...]]:
    """Up to ``m`` distinct uniformly random k-subsets of the nine goals."""
    if not 1 <= k <= 9:
        raise ConfigurationError(f"subset size must be in 1..9, got {k}")
    total = math.comb(9, k)
    if total <= m:
        return [tuple(c) for c in itertools.combinations(range(9), k)]
    rng = np.random.default_rng([int(seed), 4, k])
    chosen: list[tuple[int, ...]] = []
    while len(chosen) < m:
        s = tuple(sorted(int(g) for g in rng.choice(9, k, replace=False)))
        if s not in chosen:
            chosen.append(s)
    return chosen


_WORK: dict = {}


def _train_and_eval(task):
    subset, encoding = task
    dataset, template, eval_config, arch = _WORK["dataset"], _WORK["template"], _WORK["eval"], _WORK["arch"]
    try:
        ds = dataset if dataset.manifest.encoding == encoding else dataset.with_encoding(encoding)
        cfg = replace(template, encoding=encoding, train_goals=tuple(subset))
        a = None if arch is None else replace(arch, encoding=encoding, tau_dim=sim.tau_dim(encoding))
        ckpt, _ = train_loop(ds, cfg, a)
        rep = evaluate_goals(NetworkController(ckpt), ds.layout, range(9), eval_config)
        return SubsetResult(tuple(subset), rep)
    except Exception as exc:  # recorded per subset; the sweep carries on
        log.warning("subset %s failed: %s", subset, exc)
        return SubsetResult(tuple(subset), None, "".join(traceback.format_exception_only(type(exc), exc)).strip())


def _map(tasks, dataset, template, eval_config, arch, jobs: int):
    _WORK.update(dataset=dataset, template=template, eval=eval_config, arch=arch)
    try:
        if jobs <= 1:
            return [_train_and_eval(t) for t in tasks]
        import multiprocessing

        with ProcessPoolExecutor(jobs, mp_context=multiprocessing.get_context("fork")) as pool:
            return list(pool.map(_train_and_eval, tasks))
    finally:
        _WORK.clear()


def subset_sweep(dataset: Dataset, sizes: Sequence[int] = range(1, 10), subsets_per_size: int = 5,
                 template: TrainConfig = TrainConfig(), eval_config: EvalConfig = EvalConfig(),
                 sweep_seed: int = 0, arch: policy.ArchConfig | None = None, jobs: int = 1) -> SweepReport:
    """Train and evaluate one fresh policy per random goal subset of each size."""
    if sorted(dataset.manifest.goal_ids) != list(range(9)):
        raise ConfigurationError("subset sweeps need a dataset covering all nine goals")
    tasks = [(s, template.encoding) for k in sizes for s in sample_subsets(k, subsets_per_size, sweep_seed)]
    done = _map(tasks, dataset, template, eval_config, arch, jobs)
    results: dict[int, list[SubsetResult]] = {k: [] for k in sizes}
    for r in done:
        results[len(r.subset)].append(r)
    config = {"subsets_per_size": subsets_per_size, "sweep_seed": sweep_seed,
              "train": _train_echo(template), "eval": asdict(eval_config)}
    return SweepReport(template.encoding, results, config)


@dataclass
class AblationReport:
    rows: list[tuple[str, tuple[int, ...], SubsetResult]]

    @property
    def dominance_violations(self) -> list[tuple[str, tuple[int, ...]]]:
        """(encoding, subset) pairs where unseen goals beat seen goals."""
        out = []
        for enc, subset, r in self.rows:
            rep = r.report
            if rep and rep.seen_rate is not None and rep.unseen_rate is not None and rep.unseen_rate > rep.seen_rate:
                out.append((enc, subset))
        return out

    def table(self) -> str:
        lines = [f"{'encoding':<8} {'subset':<20} {'all':>6} {'seen':>6} {'unseen':>6}"]
        fmt = lambda v: "   -  " if v is None else f"{v:6.3f}"  # noqa: E731
        for enc, subset, r in self.rows:
            rep = r.report
            if rep is None:
                lines.append(f"{enc:<8} {str(list(subset)):<20} error: {r.error}")
                continue
            lines.append(
                f"{enc:<8} {str(list(subset)):<20} {fmt(rep.aggregate)} {fmt(rep.seen_rate)} {fmt(rep.unseen_rate)}"
            )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "rows": [
                {"encoding": e, "subset": list(s), "error": r.error,
                 "report": None if r.report is None else r.report.to_dict()}
                for e, s, r in self.rows
            ],
            "dominance_violations": [[e, list(s)] for e, s in self.dominance_violations],
        }

    @classmethod
    def from_dict(cls, d: dict) -> AblationReport:
        rows = []
        for r in d["rows"]:
            subset = tuple(r["subset"])
            rep = None if r["report"] is None else EvalReport.from_dict(r["report"])
            rows.append((r["encoding"], subset, SubsetResult(subset, rep, r["error"])))
        return cls(rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, AblationReport) and self.to_dict() == other.to_dict()

    def rows_flat(self) -> list[dict]:
        return [
            {"encoding": e, "subset": " ".join(map(str, s)), "aggregate": r.aggregate,
             "seen_rate": None if r.report is None else r.report.seen_rate,
             "unseen_rate": None if r.report is None else r.report.unseen_rate, "error": r.error}
            for e, s, r in self.rows
        ]


def ablation_suite(dataset: Dataset, encodings: Sequence[str] = ("none", "onehot", "rowcol", "pixel"),
                   subsets: Sequence[Sequence[int]] = ((4, 5, 7),), template: TrainConfig = TrainConfig(),
                   eval_config: EvalConfig = EvalConfig(), arch: policy.ArchConfig | None = None,
                   jobs: int = 1) -> AblationReport:
    """One policy per (encoding, subset), reported side by side."""
    for enc in encodings:
        sim.tau_dim(enc)
    tasks = [(tuple(sorted(s)), enc) for enc in encodings for s in subsets]
    done = _map(tasks, dataset, template, eval_config, arch, jobs)
    report = AblationReport([(enc, s, r) for (s, enc), r in zip(tasks, done)])
    for enc, subset in report.dominance_violations:
        log.warning("seen-goal dominance violated for %s on %s", enc, subset)
    return report


def layout_transfer(checkpoint: Checkpoint, kinds: Sequence[str] = ("column", "scramble", "shift", "clump"),
                    layout_seed: int = 0, config: EvalConfig = EvalConfig()) -> dict[str, EvalReport]:
    """Evaluate a pixel-tau checkpoint on unseen layouts without retraining."""
    if checkpoint.arch.encoding != "pixel":
        raise ConfigurationError("layout transfer needs a pixel-encoded checkpoint")
    trained_on = checkpoint.metadata.get("train_layout", "grid3x3")
    if trained_on != "grid3x3":
        raise ConfigurationError(f"checkpoint was trained on {trained_on!r}, not the grid")
    ctl = NetworkController(checkpoint)
    return {
        kind: evaluate_goals(ctl, sim.make_layout(kind, layout_seed), range(9), config, train_goals=())
        for kind in kinds
    }


def _train_echo(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["train_goals"] = None if cfg.train_goals is None else list(cfg.train_goals)
    return d
