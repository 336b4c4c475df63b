"""Run configuration: documented defaults, YAML file, command-line overrides.

The file is a flat YAML mapping whose keys are the field names of
:class:`RunConfig`. Precedence is defaults <- profile <- file <- flags.
Profile-dependent fields default to ``None`` and are filled from the chosen
profile unless set explicitly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import evaluation, expert, policy, sim, train
from .errors import ConfigurationError

PROFILES = {
    "fast": {"resolution": (80, 60), "demos_per_goal": 30, "conv": ((16, 7, 2), (32, 3, 1), (16, 3, 1))},
    "full": {"resolution": (160, 120), "demos_per_goal": 100, "conv": ((16, 7, 2), (32, 3, 1), (32, 3, 1))},
}


@dataclass(frozen=True)
class RunConfig:
    profile: str = "fast"
    seed: int = 0
    jobs: int = 1
    # simulator
    layout: str = "grid3x3"
    layout_seed: int = 0
    resolution: tuple[int, int] | None = None
    # expert and data
    expert_speed: float = 10.0
    stop_radius: float = 8.0
    expert_max_steps: int = 300
    expert_noise: float = 0.0
    demos_per_goal: int | None = None
    encoding: str = "rowcol"
    goals: tuple[int, ...] = tuple(range(9))
    # architecture
    conv: tuple[tuple[int, int, int], ...] | None = None
    aux_hidden: int = 64
    control_hidden: tuple[int, ...] = (128, 128)
    temperature: float = 1.0
    # training
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-2
    lr_schedule: str = "constant"
    beta1: float = 0.95
    beta2: float = 0.98
    weight_decay: float = 0.0
    eps: float = 1e-8
    w_l1: float = 1.0
    w_l2: float = 0.01
    w_acos: float = 0.005
    w_aux: float = 1.0
    train_goals: tuple[int, ...] | None = None
    # evaluation
    v_stop: float = 1.0
    stop_steps: int = 5
    max_steps: int = 300
    trials_per_goal: int = 20
    sizes: tuple[int, ...] = tuple(range(1, 10))
    subsets_per_size: int = 5
    encodings: tuple[str, ...] = ("none", "onehot", "rowcol", "pixel")
    ablation_subsets: tuple[tuple[int, ...], ...] = ((4, 5, 7),)

    def __post_init__(self):
        validate(self)

    # profile-resolved values -------------------------------------------------

    @property
    def render_resolution(self) -> tuple[int, int]:
        return tuple(self.resolution or PROFILES[self.profile]["resolution"])

    @property
    def demos(self) -> int:
        return int(self.demos_per_goal or PROFILES[self.profile]["demos_per_goal"])

    @property
    def conv_stack(self) -> tuple[tuple[int, int, int], ...]:
        return tuple(self.conv or PROFILES[self.profile]["conv"])

    # builders ------------------------------------------------------------------

    def make_layout(self) -> sim.Layout:
        return sim.make_layout(self.layout, self.layout_seed)

    def expert_params(self) -> expert.ExpertParams:
        return expert.ExpertParams(self.expert_speed, self.stop_radius, self.expert_max_steps, self.expert_noise)

    def arch(self, encoding: str | None = None, resolution=None) -> policy.ArchConfig:
        enc = encoding or self.encoding
        return policy.ArchConfig(
            resolution=tuple(resolution or self.render_resolution), conv=self.conv_stack,
            aux_hidden=self.aux_hidden, control_hidden=self.control_hidden, encoding=enc,
            tau_dim=sim.tau_dim(enc), temperature=self.temperature,
        )

    def train_config(self, encoding: str | None = None) -> train.TrainConfig:
        return train.TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            weights=train.LossWeights(self.w_l1, self.w_l2, self.w_acos, self.w_aux),
            optimizer=train.NovoGradConfig(self.lr, self.beta1, self.beta2, self.weight_decay, self.eps),
            encoding=encoding or self.encoding, train_goals=self.train_goals, lr_schedule=self.lr_schedule,
        )

    def eval_config(self) -> evaluation.EvalConfig:
        return evaluation.EvalConfig(self.v_stop, self.stop_steps, self.max_steps, self.trials_per_goal, self.seed)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))
_DEFAULTS = {f.name: f.default for f in fields(RunConfig)}


# --------------------------------------------------------------------------
# parsing and coercion


def parse_goals(value) -> tuple[int, ...]:
    """Goal ids from ``"4,5,7"``, ``"1,1;1,2;2,1"`` (row,col pairs) or lists of either."""
    if isinstance(value, str):
        text = value.strip()
        if not text:
            raise ConfigurationError("empty goal list")
        if ";" in text:
            value = [p.split(",") for p in text.split(";") if p.strip()]
        else:
            value = text.split(",")
    out = []
    for item in value:
        if isinstance(item, (list, tuple)):
            if len(item) != 2:
                raise ConfigurationError(f"goal pair must be (row, col), got {item!r}")
            r, c = (_as_int(v, "goal row/col") for v in item)
            if not (0 <= r < 3 and 0 <= c < 3):
                raise ConfigurationError(f"row/col ({r}, {c}) outside the 3x3 grid")
            out.append(3 * r + c)
        else:
            out.append(_as_int(item, "goal id"))
    for g in out:
        if not 0 <= g < 9:
            raise ConfigurationError(f"goal id {g} outside 0..8")
    if len(set(out)) != len(out):
        raise ConfigurationError(f"duplicate goals in {value!r}")
    return tuple(sorted(out))


def _as_int(v, what: str) -> int:
    if isinstance(v, bool):
        raise ConfigurationError(f"{what}: expected an integer, got {v!r}")
    try:
        f = float(str(v).strip())
    except ValueError:
        raise ConfigurationError(f"{what}: expected an integer, got {v!r}") from None
    if f != int(f):
        raise ConfigurationError(f"{what}: expected an integer, got {v!r}")
    return int(f)


def _as_float(v, what: str) -> float:
    if isinstance(v, bool):
        raise ConfigurationError(f"{what}: expected a number, got {v!r}")
    try:
        return float(str(v).strip()) if isinstance(v, str) else float(v)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{what}: expected a number, got {v!r}") from None


def _int_tuple(v, what: str) -> tuple[int, ...]:
    if isinstance(v, str):
        v = [p for p in v.replace(" ", "").split(",") if p]
    if not isinstance(v, (list, tuple)):
        v = [v]
    return tuple(_as_int(x, what) for x in v)


def _coerce(name: str, value: Any):
    """Convert a file or flag value to the field's type."""
    if value is None:
        if _DEFAULTS[name] is None:
            return None
        raise ConfigurationError(f"{name}: a value is required")
    if name in ("profile", "layout", "encoding", "lr_schedule"):
        return str(value)
    if name in ("resolution",):
        if isinstance(value, str):
            value = value.lower().replace("x", ",")
        r = _int_tuple(value, name)
        if len(r) != 2:
            raise ConfigurationError(f"resolution: expected WIDTHxHEIGHT, got {value!r}")
        return r
    if name == "demos_per_goal":
        return _as_int(value, name)
    if name in ("goals", "train_goals"):
        return parse_goals(value)
    if name in ("control_hidden", "sizes"):
        return _int_tuple(value, name)
    if name == "encodings":
        items = value.split(",") if isinstance(value, str) else list(value)
        return tuple(str(x).strip() for x in items)
    if name == "conv":
        if isinstance(value, str):
            value = [p.split(",") for p in value.split(";") if p.strip()]
        layers = tuple(_int_tuple(layer, name) for layer in value)
        if any(len(layer) != 3 for layer in layers):
            raise ConfigurationError("conv: each layer is (out_channels, kernel, stride)")
        return layers
    if name == "ablation_subsets":
        if isinstance(value, str):
            value = [p for p in value.split("|") if p.strip()]
        return tuple(parse_goals(s) for s in value)
    default = _DEFAULTS[name]
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        return _as_int(value, name)
    if isinstance(default, float):
        return _as_float(value, name)
    return value


def validate(cfg: RunConfig) -> None:
    """Check every field; errors name the offending field."""
    if cfg.profile not in PROFILES:
        raise ConfigurationError(f"profile: must be one of {sorted(PROFILES)}, got {cfg.profile!r}")
    if cfg.layout not in sim.LAYOUT_KINDS:
        raise ConfigurationError(f"layout: must be one of {list(sim.LAYOUT_KINDS)}, got {cfg.layout!r}")
    for name in ("encoding",):
        if getattr(cfg, name) not in sim.ENCODINGS:
            raise ConfigurationError(f"{name}: must be one of {list(sim.ENCODINGS)}, got {getattr(cfg, name)!r}")
    if cfg.lr_schedule not in train.LR_SCHEDULES:
        raise ConfigurationError(f"lr_schedule: must be one of {list(train.LR_SCHEDULES)}, got {cfg.lr_schedule!r}")
    for enc in cfg.encodings:
        if enc not in sim.ENCODINGS:
            raise ConfigurationError(f"encodings: unknown encoding {enc!r}")
    positive = ("jobs", "expert_speed", "stop_radius", "expert_max_steps", "aux_hidden", "temperature",
                "batch_size", "lr", "v_stop", "stop_steps", "trials_per_goal", "subsets_per_size")
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigurationError(f"{name}: must be positive, got {getattr(cfg, name)!r}")
    non_negative = ("epochs", "max_steps", "expert_noise", "weight_decay", "eps",
                    "w_l1", "w_l2", "w_acos", "w_aux")
    for name in non_negative:
        if not getattr(cfg, name) >= 0:
            raise ConfigurationError(f"{name}: must be >= 0, got {getattr(cfg, name)!r}")
    for name in ("beta1", "beta2"):
        if not 0 <= getattr(cfg, name) < 1:
            raise ConfigurationError(f"{name}: must lie in [0, 1), got {getattr(cfg, name)!r}")
    if cfg.demos_per_goal is not None and cfg.demos_per_goal < 1:
        raise ConfigurationError(f"demos_per_goal: must be >= 1, got {cfg.demos_per_goal}")
    if not cfg.goals:
        raise ConfigurationError("goals: must not be empty")
    if cfg.train_goals is not None and not cfg.train_goals:
        raise ConfigurationError("train_goals: must not be empty")
    if any(not 1 <= k <= 9 for k in cfg.sizes):
        raise ConfigurationError(f"sizes: subset sizes must lie in 1..9, got {cfg.sizes}")
    if any(h < 1 for h in cfg.control_hidden):
        raise ConfigurationError("control_hidden: widths must be positive")
    w, h = cfg.render_resolution
    cw, ch = sim.SCENE_SIZE
    if w < 1 or h < 1 or cw % w or ch % h or cw // w != ch // h:
        raise ConfigurationError(f"resolution: {w}x{h} must divide the {cw}x{ch} scene by the same integer factor")
    try:
        cfg.arch()
    except ConfigurationError as exc:
        raise ConfigurationError(f"conv: {exc}") from None


# --------------------------------------------------------------------------
# loading


def read_config_file(path) -> dict:
    """Parse a YAML config file into a raw mapping (no validation)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigurationError(f"{path}:{where}: parse error: {problem}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping of key: value pairs")
    return doc


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Merge defaults <- profile <- file <- overrides into a validated RunConfig.

    ``overrides`` entries whose value is ``None`` are ignored, so unset
    command-line flags fall through to the file.
    """
    raw = read_config_file(path) if path is not None else {}
    flags = {k: v for k, v in (overrides or {}).items() if v is not None}
    merged: dict[str, Any] = {}
    for source, values in (("config file", raw), ("override", flags)):
        for key, value in values.items():
            if key not in _DEFAULTS:
                raise ConfigurationError(f"unknown key {key!r} in {source}")
            merged[key] = _coerce(key, value)
    return RunConfig(**merged)


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **{k: _coerce(k, v) for k, v in changes.items()})
