"""Scripted demonstrator and the on-disk demonstration dataset."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import sim
from .errors import ConfigurationError, FormatError, GenerationError

log = logging.getLogger(__name__)

DATASET_MAGIC = "PSKL-DATASET"
DATASET_VERSION = 1

_S = 1.0 / np.sqrt(2.0)
# Compass order used for tie-breaking; y points down so "N" is -y.
COMPASS = np.array(
    [[1, 0], [_S, -_S], [0, -1], [-_S, -_S], [-1, 0], [-_S, _S], [0, 1], [_S, _S]], np.float64
)
COMPASS_NAMES = ("E", "NE", "N", "NW", "W", "SW", "S", "SE")


@dataclass(frozen=True)
class ExpertParams:
    speed: float = 10.0
    stop_radius: float = 8.0
    max_steps: int = 300
    noise_std: float = 0.0


def expert_actions(positions, goals, speed: float = 10.0, stop_radius: float = 8.0) -> np.ndarray:
    """Batched 8-direction greedy controller. ``positions``/``goals`` are (N, 2)."""
    if speed <= 0:
        raise ConfigurationError("expert speed must be positive")
    delta = np.asarray(goals, np.float64) - np.asarray(positions, np.float64)
    best = np.argmax(delta @ COMPASS.T, axis=-1)  # first max wins ties
    u = speed * COMPASS[best]
    arrived = np.linalg.norm(delta, axis=-1) <= stop_radius
    u[arrived] = 0.0
    return u


def expert_action(position, goal_center, speed: float = 10.0, stop_radius: float = 8.0) -> np.ndarray:
    return expert_actions(np.reshape(position, (1, 2)), np.reshape(goal_center, (1, 2)), speed, stop_radius)[0]


@dataclass(frozen=True)
class StepRecord:
    observation: sim.Observation
    tau: sim.GoalParam
    control: np.ndarray
    agent_position: np.ndarray


@dataclass(eq=False)
class Trajectory:
    """One demonstration, stored column-wise (one row per step)."""

    goal_id: int
    start: tuple[float, float]
    rgb: np.ndarray  # T x H x W x 3
    depth: np.ndarray  # T x H x W
    ee_history: np.ndarray  # T x 10
    controls: np.ndarray  # T x 2
    positions: np.ndarray  # T x 2
    tau: sim.GoalParam = field(default_factory=lambda: sim.GoalParam("none", np.zeros(0, np.float32)))

    def __len__(self) -> int:
        return len(self.controls)

    @property
    def final_position(self) -> tuple[float, float]:
        return (float(self.positions[-1, 0]), float(self.positions[-1, 1]))

    def aux_target(self, scene_size=sim.SCENE_SIZE) -> np.ndarray:
        return (self.positions[-1] / np.asarray(scene_size, np.float64)).astype(np.float32)

    @property
    def steps(self) -> list[StepRecord]:
        return [
            StepRecord(
                sim.Observation(self.rgb[t], self.depth[t], self.ee_history[t]),
                self.tau,
                self.controls[t],
                self.positions[t],
            )
            for t in range(len(self))
        ]

    def equals(self, other: Trajectory) -> bool:
        return (
            self.goal_id == other.goal_id
            and tuple(self.start) == tuple(other.start)
            and self.tau == other.tau
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                and getattr(self, k).dtype == getattr(other, k).dtype
                for k in ("rgb", "depth", "ee_history", "controls", "positions")
            )
        )


def generate_demo(
    layout: sim.Layout,
    goal_id: int,
    start,
    params: ExpertParams = ExpertParams(),
    rng: np.random.Generator | None = None,
    resolution=(80, 60),
    tau: sim.GoalParam | None = None,
) -> Trajectory:
    """Roll the scripted expert from ``start`` to ``goal_id``.

    The recorded control is always the clean expert action; Gaussian noise
    (``params.noise_std``) only perturbs the executed motion.
    """
    goal = np.asarray(sim.goal_center(layout, goal_id), np.float64)
    if params.noise_std > 0 and rng is None:
        raise ConfigurationError("action noise needs an explicit generator")
    positions = [np.asarray(start, np.float64)]
    controls = []
    while True:
        pos = positions[-1]
        u = expert_action(pos, goal, params.speed, params.stop_radius)
        controls.append(u)
        if not u.any():
            break
        if len(positions) >= params.max_steps:
            raise GenerationError(
                f"expert did not reach goal {goal_id} from {tuple(start)} within {params.max_steps} steps"
            )
        applied = u if params.noise_std <= 0 else u + rng.normal(0.0, params.noise_std, 2)
        positions.append(sim.step_positions(pos, applied, layout.scene_size, sim.AGENT_RADIUS, sim.V_MAX))

    pos_arr = np.stack(positions)
    if len(pos_arr) < 2:
        raise GenerationError(f"start {tuple(start)} is already at goal {goal_id}")
    if not layout.button(goal_id).contains(pos_arr[-1]):
        raise GenerationError(f"expert stopped outside goal {goal_id}")
    rgb = sim.render_rgb(layout, pos_arr, resolution)
    hist = np.stack(
        [sim.normalize_history(sim.history_window(pos_arr, t), layout.scene_size) for t in range(len(pos_arr))]
    )
    return Trajectory(
        goal_id=int(goal_id),
        start=(float(start[0]), float(start[1])),
        rgb=rgb,
        depth=np.zeros(rgb.shape[:3], np.float32),
        ee_history=hist,
        controls=np.stack(controls).astype(np.float32),
        positions=pos_arr,
        tau=tau if tau is not None else sim.GoalParam("none", np.zeros(0, np.float32)),
    )


@dataclass(frozen=True)
class Manifest:
    layout: dict
    encoding: str
    onehot_assignment: tuple[int, ...] | None
    demos_per_goal: int
    seed: int
    resolution: tuple[int, int]
    v_max: float
    goal_ids: tuple[int, ...]
    expert: dict = field(default_factory=lambda: asdict(ExpertParams()))
    image_format: str = "raw-f32"
    format_version: int = DATASET_VERSION

    @property
    def layout_obj(self) -> sim.Layout:
        return sim.Layout.from_dict(self.layout)


@dataclass(eq=False)
class Dataset:
    trajectories: list[Trajectory]
    manifest: Manifest

    def __post_init__(self):
        present = sorted({t.goal_id for t in self.trajectories})
        if present != sorted(self.manifest.goal_ids):
            raise ConfigurationError(f"manifest goals {self.manifest.goal_ids} != goals present {tuple(present)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.manifest == other.manifest
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
        )

    @property
    def layout(self) -> sim.Layout:
        return self.manifest.layout_obj

    def subset(self, goal_ids: Iterable[int]) -> Dataset:
        keep = sorted(set(int(g) for g in goal_ids))
        missing = set(keep) - set(self.manifest.goal_ids)
        if missing:
            raise ConfigurationError(f"goals {sorted(missing)} are not in the dataset")
        trajs = [t for t in self.trajectories if t.goal_id in keep]
        return Dataset(trajs, replace(self.manifest, goal_ids=tuple(keep)))

    def with_encoding(self, encoding: str, onehot_assignment: Sequence[int] | None = None) -> Dataset:
        """Same demonstrations with every tau re-derived from the manifest layout."""
        layout = self.layout
        if encoding == "onehot":
            onehot_assignment = sim.check_onehot_assignment(
                onehot_assignment or self.manifest.onehot_assignment or default_onehot_assignment(self.manifest.seed)
            )
        else:
            onehot_assignment = None
        trajs = [
            replace(t, tau=sim.encode_tau(layout, t.goal_id, encoding, onehot_assignment)) for t in self.trajectories
        ]
        return Dataset(trajs, replace(self.manifest, encoding=encoding, onehot_assignment=onehot_assignment))


def default_onehot_assignment(seed: int) -> tuple[int, ...]:
    return tuple(int(v) for v in np.random.default_rng([int(seed), 0x0E]).permutation(9))


def build_dataset(
    layout: sim.Layout,
    goal_ids: Sequence[int],
    demos_per_goal: int,
    encoding: str,
    seed: int = 0,
    params: ExpertParams = ExpertParams(),
    resolution=(80, 60),
    onehot_assignment: Sequence[int] | None = None,
) -> Dataset:
    """Generate ``demos_per_goal`` demonstrations for each goal.

    Every demo draws from its own stream seeded by (seed, goal_id, demo_index),
    so any single trajectory can be regenerated in isolation.
    """
    goal_ids = tuple(int(g) for g in goal_ids)
    if not goal_ids:
        raise ConfigurationError("goal_ids must be non-empty")
    if demos_per_goal < 1:
        raise ConfigurationError("demos_per_goal must be >= 1")
    sim.tau_dim(encoding)
    if encoding == "onehot":
        onehot_assignment = sim.check_onehot_assignment(onehot_assignment or default_onehot_assignment(seed))
    else:
        onehot_assignment = None
    trajectories = []
    for gid in goal_ids:
        tau = sim.encode_tau(layout, gid, encoding, onehot_assignment)
        for k in range(demos_per_goal):
            rng = np.random.default_rng([int(seed), gid, k])
            start = sim.sample_start(layout.scene_size, rng)
            try:
                trajectories.append(generate_demo(layout, gid, start, params, rng, resolution, tau))
            except GenerationError as exc:
                raise GenerationError(f"goal {gid}, demo {k}: {exc}") from exc
    manifest = Manifest(
        layout=layout.to_dict(),
        encoding=encoding,
        onehot_assignment=onehot_assignment,
        demos_per_goal=int(demos_per_goal),
        seed=int(seed),
        resolution=(int(resolution[0]), int(resolution[1])),
        v_max=float(sim.V_MAX),
        goal_ids=tuple(sorted(set(goal_ids))),
        expert=asdict(params),
    )
    log.info("built dataset: %d trajectories, %d steps", len(trajectories), sum(len(t) for t in trajectories))
    return Dataset(trajectories, manifest)


# --------------------------------------------------------------------------
# persistence


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, t in enumerate(dataset.trajectories):
        name = f"traj_{i:05d}.npz"
        np.savez_compressed(
            directory / name,
            rgb=t.rgb, depth=t.depth, ee_history=t.ee_history,
            controls=t.controls, positions=t.positions, tau=t.tau.vector,
        )
        entries.append({"file": name, "goal_id": t.goal_id, "start": list(t.start), "steps": len(t)})
    doc = {"magic": DATASET_MAGIC, **asdict(dataset.manifest), "trajectories": entries}
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, directory / "manifest.json")
    return directory


def load_manifest(directory) -> tuple[Manifest, list[dict]]:
    path = Path(directory) / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if doc.pop("magic", None) != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset manifest")
    if doc.get("format_version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {doc.get('format_version')}")
    if doc.get("image_format") != "raw-f32":
        raise FormatError(f"{path}: unsupported image format {doc.get('image_format')!r}")
    entries = doc.pop("trajectories")
    onehot = doc.get("onehot_assignment")
    manifest = Manifest(
        layout=doc["layout"],
        encoding=doc["encoding"],
        onehot_assignment=None if onehot is None else tuple(onehot),
        demos_per_goal=doc["demos_per_goal"],
        seed=doc["seed"],
        resolution=tuple(doc["resolution"]),
        v_max=doc["v_max"],
        goal_ids=tuple(doc["goal_ids"]),
        expert=doc["expert"],
        image_format=doc["image_format"],
        format_version=doc["format_version"],
    )
    return manifest, entries


def load_dataset(directory, goal_ids: Iterable[int] | None = None) -> Dataset:
    """Load a dataset directory, optionally only the trajectories of ``goal_ids``."""
    directory = Path(directory)
    manifest, entries = load_manifest(directory)
    if goal_ids is not None:
        keep = set(int(g) for g in goal_ids)
        missing = keep - set(manifest.goal_ids)
        if missing:
            raise ConfigurationError(f"goals {sorted(missing)} are not in the dataset at {directory}")
        entries = [e for e in entries if e["goal_id"] in keep]
        manifest = replace(manifest, goal_ids=tuple(sorted(keep)))
    trajectories = []
    for e in entries:
        with np.load(directory / e["file"]) as z:
            trajectories.append(
                Trajectory(
                    goal_id=int(e["goal_id"]),
                    start=(float(e["start"][0]), float(e["start"][1])),
                    rgb=z["rgb"], depth=z["depth"], ee_history=z["ee_history"],
                    controls=z["controls"], positions=z["positions"],
                    tau=sim.GoalParam(manifest.encoding, z["tau"]),
                )
            )
    return Dataset(trajectories, manifest)
