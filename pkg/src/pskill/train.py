"""Behavioral-cloning objective, NovoGrad, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import policy, sim
from .errors import ConfigurationError, FormatError, IntegrityError, TrainingError
from .expert import Dataset

log = logging.getLogger(__name__)

ACOS_CLAMP = 1e-6
ACOS_MIN_NORM = 1e-6


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 0.01
    acos: float = 0.005
    aux: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ConfigurationError(f"loss weight {k} must be >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    acos: float
    aux: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def loss_terms(u_pred, a_pred, u_target, a_target, weights: LossWeights = LossWeights()):
    """Batch-mean loss terms and their gradients w.r.t. the two network outputs.

    The arc-cosine term clamps the cosine to [-1 + 1e-6, 1 - 1e-6] and skips
    samples where either velocity is shorter than 1e-6 (expert stop steps).
    Gradients are exact for this clamped objective.

    Returns ``(LossBreakdown, dL/du_pred, dL/da_pred)``.
    """
    n = len(u_pred)
    if n == 0:
        raise ValueError("empty batch")
    p = np.asarray(u_pred, np.float64)
    u = np.asarray(u_target, np.float64)
    a = np.asarray(a_pred, np.float64)
    at = np.asarray(a_target, np.float64)

    diff = p - u
    l1 = np.abs(diff).sum() / n
    l2 = np.square(diff).sum() / n
    adiff = a - at
    aux = np.square(adiff).sum() / n

    nu = np.linalg.norm(u, axis=1)
    npred = np.linalg.norm(p, axis=1)
    valid = (nu >= ACOS_MIN_NORM) & (npred >= ACOS_MIN_NORM)
    denom = np.where(valid, nu * npred, 1.0)
    cos = np.where(valid, (u * p).sum(axis=1) / denom, 0.0)
    lo, hi = -1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP
    cos_c = np.clip(cos, lo, hi)
    acos = np.where(valid, np.arccos(cos_c), 0.0).sum() / n

    live = valid & (cos > lo) & (cos < hi)
    dldc = np.where(live, -1.0 / np.sqrt(1.0 - np.square(cos_c)), 0.0)
    safe_np = np.where(valid, npred, 1.0)
    dcdp = u / denom[:, None] - cos[:, None] * p / np.square(safe_np)[:, None]
    g_acos = (dldc[:, None] * dcdp) / n

    du = weights.l1 * np.sign(diff) / n + weights.l2 * 2.0 * diff / n + weights.acos * g_acos
    da = weights.aux * 2.0 * adiff / n
    total = weights.l1 * l1 + weights.l2 * l2 + weights.acos * acos + weights.aux * aux
    breakdown = LossBreakdown(float(l1), float(l2), float(acos), float(aux), float(total))
    dtype = np.asarray(u_pred).dtype
    return breakdown, du.astype(dtype), da.astype(dtype)


@dataclass
class Batch:
    rgb: np.ndarray  # N x H x W x 3
    depth: np.ndarray  # N x H x W
    hist: np.ndarray  # N x 10
    tau: np.ndarray  # N x |tau|
    u_target: np.ndarray  # N x 2
    a_target: np.ndarray  # N x 2

    def __len__(self) -> int:
        return len(self.u_target)

    def take(self, idx) -> Batch:
        return Batch(*(getattr(self, k)[idx] for k in ("rgb", "depth", "hist", "tau", "u_target", "a_target")))


def compute_loss(params: policy.Params, arch: policy.ArchConfig, batch: Batch,
                 weights: LossWeights = LossWeights()):
    """Loss breakdown and exact gradients w.r.t. every parameter tensor."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    u, a, cache = policy.forward_batch(params, arch, batch.rgb, batch.depth, batch.hist, batch.tau, keep_cache=True)
    breakdown, du, da = loss_terms(u, a, batch.u_target, batch.a_target, weights)
    grads, _ = policy.backward_batch(params, arch, cache, du, da)
    return breakdown, grads


def loss_kinks(u_pred, u_target) -> bytes:
    """Signature of the non-smooth regimes of the loss (l1 signs, acos skip/clamp)."""
    p = np.asarray(u_pred, np.float64)
    u = np.asarray(u_target, np.float64)
    nu, npred = np.linalg.norm(u, axis=1), np.linalg.norm(p, axis=1)
    valid = (nu >= ACOS_MIN_NORM) & (npred >= ACOS_MIN_NORM)
    cos = np.where(valid, (u * p).sum(axis=1) / np.where(valid, nu * npred, 1.0), 0.0)
    clamped = np.abs(cos) >= 1.0 - ACOS_CLAMP
    return np.sign(p - u).astype(np.int8).tobytes() + valid.tobytes() + clamped.tobytes()


def policy_unit(arch: policy.ArchConfig, batch: Batch, weights: LossWeights | None = None,
                rng: np.random.Generator | None = None):
    """Scalar function of (parameters, inputs) for ``nn.grad_check``.

    With ``weights`` the scalar is the training loss; without, a fixed random
    projection of both network outputs. The kink signature covers every relu
    mask and the loss's non-smooth regimes, so probes that cross one are skipped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n = len(batch)
    proj_u = rng.standard_normal((n, arch.control_dim))
    proj_a = rng.standard_normal((n, arch.aux_dim))
    names = list(arch.param_shapes())

    def fn(arrays):
        params = {k: arrays[k] for k in names}
        u, a, cache = policy.forward_batch(
            params, arch, arrays["rgb"], arrays["depth"], arrays["hist"], arrays["tau"], keep_cache=True
        )
        if weights is None:
            loss = float(np.sum(proj_u * u) + np.sum(proj_a * a))
            du, da, extra = proj_u.astype(u.dtype), proj_a.astype(a.dtype), b""
        else:
            bd, du, da = loss_terms(u, a, batch.u_target, batch.a_target, weights)
            loss, extra = bd.total, loss_kinks(u, batch.u_target)
        grads, inputs = policy.backward_batch(params, arch, cache, du, da, image_grad=True)
        masks = [c for part in (cache.vision, cache.aux, cache.control) for c in part
                 if isinstance(c, np.ndarray) and c.dtype == bool]
        sig = b"".join(m.tobytes() for m in masks) + extra
        image = inputs["image"]
        grads.update(rgb=image[..., :3], depth=image[..., 3], hist=inputs["hist"], tau=inputs["tau"])
        return loss, grads, sig

    return fn


def policy_unit_arrays(params: policy.Params, batch: Batch, dtype=np.float64) -> dict[str, np.ndarray]:
    arrays = {k: v.astype(dtype) for k, v in params.items()}
    arrays.update(
        rgb=batch.rgb.astype(dtype), depth=batch.depth.astype(dtype),
        hist=batch.hist.astype(dtype), tau=batch.tau.astype(dtype),
    )
    return arrays


# --------------------------------------------------------------------------
# NovoGrad


@dataclass(frozen=True)
class NovoGradConfig:
    lr: float = 0.0005
    beta1: float = 0.95
    beta2: float = 0.98
    weight_decay: float = 0.0
    eps: float = 1e-8


@dataclass
class OptimState:
    config: NovoGradConfig = field(default_factory=NovoGradConfig)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, float] = field(default_factory=dict)
    step: int = 0


def novograd_step(params: policy.Params, grads: policy.Params, state: OptimState, lr: float | None = None):
    """One NovoGrad update with a scalar second moment per named tensor.

    ``lr`` overrides the configured learning rate for this step only (used by
    schedules). Returns ``(new_params, new_state)``; inputs are left untouched.
    """
    cfg = state.config
    lr = cfg.lr if lr is None else lr
    new_params, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        g2 = float(np.sum(np.square(g, dtype=np.float64)))
        if state.step == 0:
            v = g2
            m = g / (math.sqrt(v) + cfg.eps)
        else:
            v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g2
            m = cfg.beta1 * state.m[name] + g / (math.sqrt(v) + cfg.eps)
            if cfg.weight_decay:
                m = m + cfg.weight_decay * w
        m = m.astype(w.dtype, copy=False)
        new_m[name], new_v[name] = m, v
        new_params[name] = w - w.dtype.type(lr) * m
    return new_params, OptimState(cfg, new_m, new_v, state.step + 1)


# --------------------------------------------------------------------------
# training loop


LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(base: float, schedule: str, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step`` of ``total_steps``.

    ``cosine`` decays from ``base`` towards zero over the run.
    """
    if schedule == "constant" or total_steps <= 0:
        return base
    if schedule == "cosine":
        return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    raise ConfigurationError(f"unknown lr schedule {schedule!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: NovoGradConfig = field(default_factory=NovoGradConfig)
    encoding: str = "rowcol"
    train_goals: tuple[int, ...] | None = None  # None = every goal in the dataset
    checkpoint_every_epoch: str | None = None  # path template with {epoch}
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        sim.tau_dim(self.encoding)


def flatten(dataset: Dataset, goal_ids: Sequence[int] | None = None) -> Batch:
    """Stack every step of the selected trajectories into one sample table."""
    keep = set(dataset.manifest.goal_ids if goal_ids is None else goal_ids)
    trajs = [t for t in dataset.trajectories if t.goal_id in keep]
    if not trajs:
        raise ConfigurationError(f"no trajectories for goals {sorted(keep)}")
    scene = dataset.layout.scene_size
    reps = [len(t) for t in trajs]
    return Batch(
        rgb=np.concatenate([t.rgb for t in trajs]),
        depth=np.concatenate([t.depth for t in trajs]),
        hist=np.concatenate([t.ee_history for t in trajs]),
        tau=np.repeat(np.stack([t.tau.vector for t in trajs]).reshape(len(trajs), -1), reps, axis=0),
        u_target=np.concatenate([t.controls for t in trajs]),
        a_target=np.repeat(np.stack([t.aux_target(scene) for t in trajs]), reps, axis=0),
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), 2, int(epoch)]).permutation(n)


def evaluate_loss(params, arch, samples: Batch, weights: LossWeights, batch_size: int = 128) -> LossBreakdown:
    sums = np.zeros(5)
    for lo in range(0, len(samples), batch_size):
        b = samples.take(slice(lo, lo + batch_size))
        u, a, _ = policy.forward_batch(params, arch, b.rgb, b.depth, b.hist, b.tau)
        bd, _, _ = loss_terms(u, a, b.u_target, b.a_target, weights)
        sums += len(b) * np.array(astuple_loss(bd))
    return LossBreakdown(*(sums / len(samples)).tolist())


def astuple_loss(bd: LossBreakdown):
    return (bd.l1, bd.l2, bd.acos, bd.aux, bd.total)


@dataclass
class Checkpoint:
    arch: policy.ArchConfig
    params: policy.Params
    metadata: dict = field(default_factory=dict)

    @property
    def train_goals(self) -> tuple[int, ...]:
        return tuple(self.metadata.get("train_goals", ()))

    def equals(self, other: Checkpoint) -> bool:
        return (
            self.arch == other.arch
            and self.metadata == other.metadata
            and self.params.keys() == other.params.keys()
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def train_loop(dataset: Dataset, config: TrainConfig, arch: policy.ArchConfig | None = None,
               progress: bool = False):
    """Train a fresh policy on the configured goal subset.

    Returns ``(Checkpoint, log_rows)``. Row 0 is the loss of the initial
    parameters over the training samples; row ``e`` is the running mean of
    the batch losses during epoch ``e``.
    """
    if dataset.manifest.encoding != config.encoding:
        raise ConfigurationError(
            f"dataset encoding {dataset.manifest.encoding!r} does not match config encoding {config.encoding!r}"
        )
    goals = tuple(sorted(dataset.manifest.goal_ids if config.train_goals is None else set(config.train_goals)))
    if not goals:
        raise ConfigurationError("train-goal subset is empty")
    missing = set(goals) - set(dataset.manifest.goal_ids)
    if missing:
        raise ConfigurationError(f"train goals {sorted(missing)} are not in the dataset")
    if arch is None:
        arch = policy.ArchConfig.fast(config.encoding, resolution=tuple(dataset.manifest.resolution))
    if arch.encoding != config.encoding:
        raise ConfigurationError(f"arch encoding {arch.encoding!r} != config encoding {config.encoding!r}")
    if tuple(arch.resolution) != tuple(dataset.manifest.resolution):
        raise ConfigurationError(f"arch resolution {arch.resolution} != dataset {dataset.manifest.resolution}")

    samples = flatten(dataset, goals)
    params = policy.init_params(arch, np.random.default_rng([config.seed, 1]))
    log.info("training %d params on %d samples from goals %s", policy.param_count(params), len(samples), goals)
    state = OptimState(config.optimizer)
    t0 = time.perf_counter()
    rows = [{"epoch": 0, **evaluate_loss(params, arch, samples, config.weights).as_dict(), "wall": 0.0}]
    per_epoch = -(-len(samples) // config.batch_size)
    total_steps = per_epoch * config.epochs
    for epoch in range(1, config.epochs + 1):
        order = epoch_order(config.seed, epoch, len(samples))
        sums = np.zeros(5)
        for lo in range(0, len(order), config.batch_size):
            batch = samples.take(order[lo:lo + config.batch_size])
            bd, grads = compute_loss(params, arch, batch, config.weights)
            lr = scheduled_lr(config.optimizer.lr, config.lr_schedule, state.step, total_steps)
            params, state = novograd_step(params, grads, state, lr)
            sums += len(batch) * np.array(astuple_loss(bd))
        row = {"epoch": epoch, **LossBreakdown(*(sums / len(samples)).tolist()).as_dict(),
               "wall": round(time.perf_counter() - t0, 3)}
        rows.append(row)
        if progress:
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items()})
        if config.checkpoint_every_epoch:
            ckpt = _make_checkpoint(arch, params, dataset, config, goals, epoch)
            checkpoint_save(ckpt, config.checkpoint_every_epoch.format(epoch=epoch))
    return _make_checkpoint(arch, params, dataset, config, goals, config.epochs), rows


def _make_checkpoint(arch, params, dataset: Dataset, config: TrainConfig, goals, epochs_done) -> Checkpoint:
    m = dataset.manifest
    meta = {
        "encoding": config.encoding,
        "onehot_assignment": list(m.onehot_assignment) if m.onehot_assignment is not None else None,
        "train_goals": list(goals),
        "train_layout": m.layout["kind"],
        "epochs": int(epochs_done),
        "seed": int(config.seed),
        "dataset_seed": int(m.seed),
        "demos_per_goal": int(m.demos_per_goal),
        "weights": asdict(config.weights),
        "optimizer": asdict(config.optimizer),
        "batch_size": int(config.batch_size),
        "lr_schedule": config.lr_schedule,
    }
    return Checkpoint(arch, {k: np.array(v, np.float32) for k, v in params.items()}, meta)


# --------------------------------------------------------------------------
# checkpoint file format
#
#   "PSKL" | u32 version | u32 header_len | header JSON | u32 crc32(all preceding)
#   u32 n_tensors, then per tensor: u16 name_len | name | u8 ndim | u32 dims... | f32 LE payload
#   u32 crc32(tensor section)
# All integers little-endian.

CKPT_MAGIC = b"PSKL"
CKPT_VERSION = 1


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"arch": ckpt.arch.to_dict(), "metadata": ckpt.metadata}, sort_keys=True).encode()
    head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header
    head += struct.pack("<I", zlib.crc32(head))
    body = [struct.pack("<I", len(ckpt.params))]
    for name, arr in ckpt.params.items():
        raw = name.encode()
        body.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(body)
    return head + body + struct.pack("<I", zlib.crc32(body))


def checkpoint_save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes, pos: int = 0):
        self.data, self.pos = data, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IntegrityError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes, expected_encoding: str | None = None) -> Checkpoint:
    if len(data) < 12:
        raise IntegrityError("checkpoint truncated inside the fixed header")
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    r = _Reader(data, 4)
    version, hlen = r.unpack("<II")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = r.take(hlen)
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(data[:r.pos - 4]):
        raise FormatError("checkpoint header checksum mismatch")
    try:
        doc = json.loads(header)
        arch = policy.ArchConfig.from_dict(doc["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    body_start = r.pos
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(data[body_start:body_end]):
        raise IntegrityError("checkpoint payload checksum mismatch")
    if r.pos != len(data):
        raise IntegrityError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    policy.check_params(params, arch)
    ckpt = Checkpoint(arch, params, doc.get("metadata", {}))
    if expected_encoding is not None:
        if sim.tau_dim(expected_encoding) != arch.tau_dim or expected_encoding != arch.encoding:
            raise ConfigurationError(
                f"checkpoint was trained with encoding {arch.encoding!r} (tau length {arch.tau_dim}), "
                f"requested {expected_encoding!r} (tau length {sim.tau_dim(expected_encoding)})"
            )
    return ckpt


def checkpoint_load(path, expected_encoding: str | None = None) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes(), expected_encoding)


def save_log(rows: list[dict], path) -> None:
    """Training log as JSON lines, one row per epoch."""
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows))


def with_train_goals(config: TrainConfig, goals) -> TrainConfig:
    return replace(config, train_goals=tuple(sorted(int(g) for g in goals)))
