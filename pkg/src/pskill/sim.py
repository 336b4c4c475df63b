"""Deterministic 2D button-grid world.

Coordinates are canonical scene pixels: x grows to the right, y grows down,
and the scene is 800x600. Network observations are area-averaged downscales
of the canonical frame.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError, UnsupportedEncodingError

SCENE_SIZE = (800, 600)
AGENT_RADIUS = 20.0
V_MAX = 10.0
HISTORY_LEN = 5

BACKGROUND_COLOR = (0.9, 0.9, 0.9)
BUTTON_COLOR = (0.1, 0.3, 0.9)
AGENT_COLOR = (0.0, 0.0, 0.0)

LAYOUT_KINDS = ("grid3x3", "column", "scramble", "shift", "clump")
ENCODINGS = ("none", "rowcol", "onehot", "pixel")
TAU_DIMS = {"none": 0, "rowcol": 2, "onehot": 9, "pixel": 2}

GRID_XS = (200.0, 400.0, 600.0)
GRID_YS = (150.0, 300.0, 450.0)
GRID_HALF_SIZE = 50.0


@dataclass(frozen=True)
class Button:
    goal_id: int
    center: tuple[float, float]
    half_size: float

    def contains(self, position: Sequence[float]) -> bool:
        x, y = position
        cx, cy = self.center
        return abs(x - cx) <= self.half_size and abs(y - cy) <= self.half_size

    def overlaps(self, other: Button) -> bool:
        reach = self.half_size + other.half_size
        return (
            abs(self.center[0] - other.center[0]) < reach
            and abs(self.center[1] - other.center[1]) < reach
        )


@dataclass(frozen=True)
class Layout:
    kind: str
    buttons: tuple[Button, ...]
    scene_size: tuple[int, int] = SCENE_SIZE
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.buttons) != 9:
            raise ConfigurationError(f"layout needs 9 buttons, got {len(self.buttons)}")
        if sorted(b.goal_id for b in self.buttons) != list(range(9)):
            raise ConfigurationError("button goal ids must be exactly 0..8")
        width, height = self.scene_size
        for b in self.buttons:
            cx, cy = b.center
            if not (b.half_size <= cx <= width - b.half_size and b.half_size <= cy <= height - b.half_size):
                raise ConfigurationError(f"button {b.goal_id} leaves the scene")
        for i, a in enumerate(self.buttons):
            for b in self.buttons[i + 1:]:
                if a.overlaps(b):
                    raise ConfigurationError(f"buttons {a.goal_id} and {b.goal_id} overlap")

    def button(self, goal_id: int) -> Button:
        if not 0 <= goal_id <= 8:
            raise ValueError(f"goal id out of range: {goal_id}")
        for b in self.buttons:
            if b.goal_id == goal_id:
                return b
        raise ValueError(f"no button with goal id {goal_id}")

    def button_at(self, position: Sequence[float]) -> int | None:
        """Goal id of the button whose rectangle contains ``position``, if any."""
        for b in self.buttons:
            if b.contains(position):
                return b.goal_id
        return None

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "scene_size": list(self.scene_size),
            "buttons": [
                {"goal_id": b.goal_id, "center": list(b.center), "half_size": b.half_size}
                for b in self.buttons
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> Layout:
        buttons = tuple(
            Button(int(b["goal_id"]), (float(b["center"][0]), float(b["center"][1])), float(b["half_size"]))
            for b in data["buttons"]
        )
        return cls(data["kind"], buttons, tuple(int(v) for v in data["scene_size"]), int(data["seed"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> Layout:
        return cls.from_dict(json.loads(text))


def _grid_buttons(xs, ys, half_size, ids=None) -> tuple[Button, ...]:
    buttons = []
    for row, y in enumerate(ys):
        for col, x in enumerate(xs):
            idx = 3 * row + col
            gid = idx if ids is None else int(ids[idx])
            buttons.append(Button(gid, (float(x), float(y)), float(half_size)))
    return tuple(buttons)


def make_layout(kind: str = "grid3x3", seed: int = 0) -> Layout:
    """Build one of the supported button arrangements.

    ``grid3x3`` is the fixed training grid (seed ignored). The other kinds are
    the transfer layouts; each is a deterministic function of ``seed``:

    * ``column``: a zig-zag column of smaller buttons down the middle.
    * ``scramble``: grid cells jittered in place with goal ids permuted.
    * ``shift``: the whole grid translated by a random offset.
    * ``clump``: a tightly packed grid at a random offset from the center.
    """
    if kind not in LAYOUT_KINDS:
        raise ConfigurationError(f"unsupported layout kind {kind!r}; expected one of {LAYOUT_KINDS}")
    if kind == "grid3x3":
        return Layout(kind, _grid_buttons(GRID_XS, GRID_YS, GRID_HALF_SIZE), SCENE_SIZE, 0)

    rng = np.random.default_rng([int(seed), LAYOUT_KINDS.index(kind)])
    if kind == "column":
        side = 1.0 if rng.random() < 0.5 else -1.0
        dx = float(rng.integers(-40, 41))
        buttons = tuple(
            Button(i, (400.0 + dx + side * 50.0 * (-1) ** i, 120.0 + 45.0 * i), 40.0) for i in range(9)
        )
    elif kind == "scramble":
        ids = rng.permutation(9)
        jx = rng.integers(-45, 46, size=9)
        jy = rng.integers(-20, 21, size=9)
        buttons = tuple(
            Button(int(ids[k]), (GRID_XS[k % 3] + float(jx[k]), GRID_YS[k // 3] + float(jy[k])), GRID_HALF_SIZE)
            for k in range(9)
        )
    elif kind == "shift":
        dx = float(rng.integers(-75, 76))
        dy = float(rng.integers(-50, 51))
        buttons = _grid_buttons([x + dx for x in GRID_XS], [y + dy for y in GRID_YS], GRID_HALF_SIZE)
    else:  # clump
        spacing = 115.0
        cx = 400.0 + float(rng.integers(-60, 61))
        cy = 300.0 + float(rng.integers(-40, 41))
        buttons = _grid_buttons(
            [cx - spacing, cx, cx + spacing], [cy - spacing, cy, cy + spacing], GRID_HALF_SIZE
        )
    return Layout(kind, buttons, SCENE_SIZE, int(seed))


def goal_center(layout: Layout, goal_id: int) -> tuple[float, float]:
    return layout.button(goal_id).center


# --------------------------------------------------------------------------
# goal parameters


@dataclass(frozen=True)
class GoalParam:
    kind: str
    vector: np.ndarray = field(compare=False)

    def __eq__(self, other):
        return (
            isinstance(other, GoalParam)
            and self.kind == other.kind
            and np.array_equal(self.vector, other.vector)
        )

    def __hash__(self):
        return hash((self.kind, self.vector.tobytes()))


def tau_dim(encoding: str) -> int:
    try:
        return TAU_DIMS[encoding]
    except KeyError:
        raise ConfigurationError(f"unknown goal encoding {encoding!r}; expected one of {ENCODINGS}") from None


def check_onehot_assignment(assignment: Sequence[int]) -> tuple[int, ...]:
    assignment = tuple(int(v) for v in assignment)
    if sorted(assignment) != list(range(9)):
        raise ConfigurationError(f"one-hot assignment must be a permutation of 0..8, got {assignment}")
    return assignment


def encode_tau(
    layout: Layout,
    goal_id: int,
    encoding: str,
    onehot_assignment: Sequence[int] | None = None,
    raw_pixels: bool = False,
) -> GoalParam:
    tau_dim(encoding)
    button = layout.button(goal_id)
    if encoding == "none":
        vec = np.zeros(0, np.float32)
    elif encoding == "rowcol":
        if layout.kind != "grid3x3":
            raise UnsupportedEncodingError(f"row/col indices are undefined for layout kind {layout.kind!r}")
        vec = np.array([goal_id // 3, goal_id % 3], np.float32)
    elif encoding == "onehot":
        assignment = check_onehot_assignment(range(9) if onehot_assignment is None else onehot_assignment)
        vec = np.zeros(9, np.float32)
        vec[assignment[goal_id]] = 1.0
    else:
        cx, cy = button.center
        if raw_pixels:
            vec = np.array([cx, cy], np.float32)
        else:
            width, height = layout.scene_size
            vec = np.array([cx / width, cy / height], np.float32)
    return GoalParam(encoding, vec)


# --------------------------------------------------------------------------
# agent kinematics


@dataclass(frozen=True)
class AgentState:
    position: tuple[float, float]
    radius: float = AGENT_RADIUS


def sample_start(scene_size=SCENE_SIZE, rng: np.random.Generator | None = None, radius: float = AGENT_RADIUS):
    """Uniform point on the top edge or the right edge, inset by the agent radius."""
    if rng is None:
        raise ConfigurationError("sample_start needs an explicit seeded generator")
    width, height = scene_size
    top = rng.random() < 0.5
    u = rng.random()
    if top:
        return (radius + u * (width - 2 * radius), radius)
    return (width - radius, radius + u * (height - 2 * radius))


def clip_norm(u: np.ndarray, v_max: float = V_MAX) -> np.ndarray:
    """Scale rows of ``u`` down so that none exceeds ``v_max`` in Euclidean norm."""
    u = np.asarray(u, np.float64)
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    scale = np.where(norm > v_max, v_max / np.maximum(norm, 1e-300), 1.0)
    return u * scale


def step_positions(positions, controls, scene_size=SCENE_SIZE, radius=AGENT_RADIUS, v_max=V_MAX) -> np.ndarray:
    """Vectorised kinematics: ``positions`` and ``controls`` are (..., 2)."""
    width, height = scene_size
    nxt = np.asarray(positions, np.float64) + clip_norm(controls, v_max)
    nxt[..., 0] = np.clip(nxt[..., 0], radius, width - radius)
    nxt[..., 1] = np.clip(nxt[..., 1], radius, height - radius)
    return nxt


def step_agent(state: AgentState, u, scene_size=SCENE_SIZE, v_max: float = V_MAX) -> AgentState:
    nxt = step_positions(np.asarray(state.position), np.asarray(u, np.float64), scene_size, state.radius, v_max)
    return AgentState((float(nxt[0]), float(nxt[1])), state.radius)


def history_window(positions: Sequence[Sequence[float]], t: int, length: int = HISTORY_LEN) -> np.ndarray:
    """Positions at steps t-length..t-1, front-padded with the start position."""
    idx = [max(i, 0) for i in range(t - length, t)]
    return np.array([positions[i] for i in idx], np.float64)


def normalize_history(window: np.ndarray, scene_size=SCENE_SIZE) -> np.ndarray:
    scale = np.array(scene_size, np.float64)
    return (np.asarray(window) / scale).reshape(*np.shape(window)[:-2], -1).astype(np.float32)


# --------------------------------------------------------------------------
# rendering


@dataclass(frozen=True)
class Observation:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray  # H x W, identically zero here
    ee_history: np.ndarray  # 2 * HISTORY_LEN values in [0, 1]


def _scale_factor(scene_size, resolution) -> int:
    width, height = scene_size
    w, h = resolution
    if w <= 0 or h <= 0 or width % w or height % h or width // w != height // h:
        raise ShapeError(f"resolution {tuple(resolution)} does not divide the {width}x{height} scene isotropically")
    return width // w


def _downscale(img: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return img
    h, w = img.shape[0] // f, img.shape[1] // f
    return img.reshape(h, f, w, f, 3).mean(axis=(1, 3), dtype=np.float32)


@functools.lru_cache(maxsize=16)
def canonical_frame(layout: Layout) -> np.ndarray:
    """Full-resolution scene without the agent, H x W x 3 float32."""
    width, height = layout.scene_size
    img = np.empty((height, width, 3), np.float32)
    img[:] = BACKGROUND_COLOR
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    for b in layout.buttons:
        cx, cy = b.center
        cols = np.abs(xs - cx) <= b.half_size
        rows = np.abs(ys - cy) <= b.half_size
        img[np.ix_(rows, cols)] = BUTTON_COLOR
    img.setflags(write=False)
    return img


@functools.lru_cache(maxsize=32)
def _background(layout: Layout, resolution: tuple[int, int]) -> np.ndarray:
    img = _downscale(canonical_frame(layout), _scale_factor(layout.scene_size, resolution))
    img.setflags(write=False)
    return img


def _paint_agent(out: np.ndarray, layout: Layout, position, radius: float, f: int) -> None:
    canvas = canonical_frame(layout)
    height, width = canvas.shape[:2]
    cx, cy = float(position[0]), float(position[1])
    bx0 = max(int(math.floor((cx - radius) / f)), 0)
    by0 = max(int(math.floor((cy - radius) / f)), 0)
    bx1 = min(int(math.ceil((cx + radius) / f)), width // f)
    by1 = min(int(math.ceil((cy + radius) / f)), height // f)
    if bx1 <= bx0 or by1 <= by0:
        return
    patch = np.array(canvas[by0 * f:by1 * f, bx0 * f:bx1 * f])
    xs = np.arange(bx0 * f, bx1 * f) + 0.5 - cx
    ys = np.arange(by0 * f, by1 * f) + 0.5 - cy
    disc = ys[:, None] ** 2 + xs[None, :] ** 2 <= radius * radius
    patch[disc] = AGENT_COLOR
    out[by0:by1, bx0:bx1] = _downscale(patch, f)


def render_rgb(layout: Layout, positions, resolution=(80, 60), radius: float = AGENT_RADIUS) -> np.ndarray:
    """Render one frame per row of ``positions`` (N x 2) -> N x H x W x 3."""
    f = _scale_factor(layout.scene_size, resolution)
    base = _background(layout, tuple(resolution))
    positions = np.asarray(positions, np.float64).reshape(-1, 2)
    frames = np.repeat(base[None], len(positions), axis=0)
    for frame, pos in zip(frames, positions):
        _paint_agent(frame, layout, pos, radius, f)
    return frames


def render(layout: Layout, agent: AgentState, resolution=(80, 60)) -> tuple[np.ndarray, np.ndarray]:
    """RGB (H x W x 3) and depth (H x W) planes for a single agent state."""
    rgb = render_rgb(layout, [agent.position], resolution, agent.radius)[0]
    depth = np.zeros(rgb.shape[:2], np.float32)
    return rgb, depth


def observe(layout: Layout, positions: Sequence[Sequence[float]], t: int, resolution=(80, 60),
            radius: float = AGENT_RADIUS) -> Observation:
    """Observation at step ``t`` of a position sequence (positions[t] is the current one)."""
    rgb, depth = render(layout, AgentState(tuple(positions[t]), radius), resolution)
    hist = normalize_history(history_window(positions, t), layout.scene_size)
    return Observation(rgb, depth, hist)


def save_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)).save(path)
