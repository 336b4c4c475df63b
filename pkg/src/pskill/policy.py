"""Goal-parameterized visuomotor policy.

Three modules share one flat parameter dict keyed by ``<module>.<layer>.<tensor>``:

* vision: conv + relu stack followed by a spatial softmax -> feature points f
* aux: two dense layers on [f; tau] -> predicted final position a
* control: dense stack on [f; history; tau; a] -> planar velocity u
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
import numpy as np

from . import nn, sim
from .errors import ConfigurationError, ShapeError

Params = dict[str, np.ndarray]
MODULES = ("vision", "aux", "control")


@dataclass(frozen=True)
class ArchConfig:
    resolution: tuple[int, int] = (80, 60)  # (width, height)
    in_channels: int = 4
    conv: tuple[tuple[int, int, int], ...] = ((16, 7, 2), (32, 3, 1), (16, 3, 1))  # (out, kernel, stride)
    aux_hidden: int = 32
    aux_dim: int = 2
    control_hidden: tuple[int, ...] = (64, 64)
    control_dim: int = 2
    encoding: str = "rowcol"
    tau_dim: int = 2
    history_len: int = sim.HISTORY_LEN
    temperature: float = 1.0

    def __post_init__(self):
        self.validate()

    @classmethod
    def fast(cls, encoding: str = "rowcol", **overrides) -> ArchConfig:
        return cls(encoding=encoding, tau_dim=sim.tau_dim(encoding), **overrides)

    @classmethod
    def full(cls, encoding: str = "rowcol", **overrides) -> ArchConfig:
        kw = dict(resolution=(160, 120), conv=((16, 7, 2), (32, 3, 1), (32, 3, 1)))
        kw.update(overrides)
        return cls(encoding=encoding, tau_dim=sim.tau_dim(encoding), **kw)

    def validate(self) -> None:
        if sim.tau_dim(self.encoding) != self.tau_dim:
            raise ConfigurationError(
                f"tau_dim {self.tau_dim} does not match encoding {self.encoding!r} ({sim.tau_dim(self.encoding)})"
            )
        if self.in_channels != 4:
            raise ConfigurationError("input is RGB + depth: in_channels must be 4")
        if not self.conv:
            raise ConfigurationError("need at least one conv layer")
        if self.temperature <= 0:
            raise ConfigurationError("spatial softmax temperature must be positive")
        h, w = self.feature_map_hw()
        if h < 1 or w < 1:
            raise ConfigurationError(f"conv stack collapses {self.resolution} to {w}x{h}")

    def feature_map_hw(self) -> tuple[int, int]:
        w, h = self.resolution
        for _, k, s in self.conv:
            h, w = (h - k) // s + 1, (w - k) // s + 1
        return h, w

    @property
    def feature_points(self) -> int:
        return self.conv[-1][0]

    @property
    def f_dim(self) -> int:
        return 2 * self.feature_points

    @property
    def history_dim(self) -> int:
        return 2 * self.history_len

    @property
    def aux_in(self) -> int:
        return self.f_dim + self.tau_dim

    @property
    def control_in(self) -> int:
        return self.f_dim + self.history_dim + self.tau_dim + self.aux_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["conv"] = [list(c) for c in self.conv]
        d["control_hidden"] = list(self.control_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        d = dict(d)
        d["resolution"] = tuple(d["resolution"])
        d["conv"] = tuple(tuple(c) for c in d["conv"])
        d["control_hidden"] = tuple(d["control_hidden"])
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for i, (out, k, _) in enumerate(self.conv):
            shapes[f"vision.conv{i}.weight"] = (out, cin, k, k)
            shapes[f"vision.conv{i}.bias"] = (out,)
            cin = out
        widths = [self.aux_in, self.aux_hidden, self.aux_dim]
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            shapes[f"aux.fc{i}.weight"] = (a, b)
            shapes[f"aux.fc{i}.bias"] = (b,)
        widths = [self.control_in, *self.control_hidden, self.control_dim]
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            shapes[f"control.fc{i}.weight"] = (a, b)
            shapes[f"control.fc{i}.bias"] = (b,)
        return shapes


def init_params(arch: ArchConfig, rng: np.random.Generator | int) -> Params:
    """Fan-in scaled uniform weights (variance 2/fan_in), zero biases."""
    arch.validate()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = nn.he_uniform(rng, shape, fan_in)
    return params


def param_count(params: Params) -> int:
    return int(sum(p.size for p in params.values()))


def check_params(params: Params, arch: ArchConfig) -> None:
    expected = arch.param_shapes()
    if set(params) != set(expected):
        raise ConfigurationError(f"parameter names differ from arch: {sorted(set(params) ^ set(expected))}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: got shape {params[name].shape}, expected {shape}")


def _vision_layers(params: Params, arch: ArchConfig):
    layers = []
    for i, (_, _, s) in enumerate(arch.conv):
        p = f"vision.conv{i}"
        layers.append((p, nn.Conv2D(params[p + ".weight"], params[p + ".bias"], s)))
        layers.append((None, nn.ReLU()))
    layers.append((None, nn.SpatialSoftmax(arch.temperature)))
    return layers


def _mlp_layers(params: Params, prefix: str, n_dense: int):
    layers = []
    for i in range(n_dense):
        p = f"{prefix}.fc{i}"
        layers.append((p, nn.Dense(params[p + ".weight"], params[p + ".bias"])))
        if i < n_dense - 1:
            layers.append((None, nn.ReLU()))
    return layers


def _run(layers, x, keep_cache: bool):
    caches = []
    for _, layer in layers:
        x, cache = layer.forward(x)
        if keep_cache:
            caches.append(cache)
    return x, caches


def _unrun(layers, caches, dy, grads: dict, need_input_grad: bool = True):
    for idx in range(len(layers) - 1, -1, -1):
        prefix, layer = layers[idx]
        need = need_input_grad or idx > 0
        dy, g = layer.backward(caches[idx], dy, need)
        for k, v in g.items():
            grads[f"{prefix}.{k}"] = v
    return dy


def _image_input(rgb: np.ndarray, depth: np.ndarray, arch: ArchConfig) -> np.ndarray:
    w, h = arch.resolution
    if rgb.ndim == 3:
        rgb, depth = rgb[None], depth[None]
    if rgb.shape[1:] != (h, w, 3) or depth.shape[1:] != (h, w) or len(depth) != len(rgb):
        raise ShapeError(f"image planes {rgb.shape}/{depth.shape} do not match resolution {w}x{h}")
    return np.concatenate([rgb, depth[..., None]], axis=-1)


def vision_forward(rgb, depth, params: Params, arch: ArchConfig) -> np.ndarray:
    """Feature points (N, 2C) for a batch (N, H, W, 3) + (N, H, W), or (2C,) for one frame."""
    single = np.ndim(rgb) == 3
    x = _image_input(np.asarray(rgb), np.asarray(depth), arch)
    f, _ = _run(_vision_layers(params, arch), x, False)
    return f[0] if single else f


def _as_batch(v, width: int, what: str) -> np.ndarray:
    v = np.asarray(v, np.float32)
    v = v.reshape(1, -1) if v.ndim <= 1 else v
    if v.shape[1] != width:
        raise ShapeError(f"{what}: got width {v.shape[1]}, expected {width}")
    return v


def aux_forward(f, tau, params: Params, arch: ArchConfig) -> np.ndarray:
    single = np.ndim(f) == 1
    f = _as_batch(f, arch.f_dim, "feature points")
    tau = _as_batch(tau, arch.tau_dim, "tau").reshape(len(f), -1)
    a, _ = _run(_mlp_layers(params, "aux", 2), np.concatenate([f, tau], axis=1), False)
    return a[0] if single else a


def control_forward(f, hist, tau, a, params: Params, arch: ArchConfig) -> np.ndarray:
    single = np.ndim(f) == 1
    f = _as_batch(f, arch.f_dim, "feature points")
    n = len(f)
    x = np.concatenate(
        [
            f,
            _as_batch(hist, arch.history_dim, "history"),
            _as_batch(tau, arch.tau_dim, "tau").reshape(n, -1),
            _as_batch(a, arch.aux_dim, "aux prediction"),
        ],
        axis=1,
    )
    u, _ = _run(_mlp_layers(params, "control", len(arch.control_hidden) + 1), x, False)
    return u[0] if single else u


@dataclass
class ForwardCache:
    vision: list
    aux: list
    control: list
    n: int
    dtype: np.dtype = field(default=np.dtype(np.float32))


def forward_batch(params: Params, arch: ArchConfig, rgb, depth, hist, tau, keep_cache: bool = False):
    """Batched forward through vision -> aux -> control.

    Returns ``(u, a, cache)``; ``cache`` is None unless ``keep_cache``.
    """
    x = _image_input(np.asarray(rgb), np.asarray(depth), arch)
    n = len(x)
    vis = _vision_layers(params, arch)
    f, c_vis = _run(vis, x, keep_cache)
    tau = np.asarray(tau, f.dtype).reshape(n, arch.tau_dim)
    hist = np.asarray(hist, f.dtype).reshape(n, arch.history_dim)
    aux = _mlp_layers(params, "aux", 2)
    a, c_aux = _run(aux, np.concatenate([f, tau], axis=1), keep_cache)
    ctl = _mlp_layers(params, "control", len(arch.control_hidden) + 1)
    u, c_ctl = _run(ctl, np.concatenate([f, hist, tau, a], axis=1), keep_cache)
    cache = ForwardCache(c_vis, c_aux, c_ctl, n, f.dtype) if keep_cache else None
    return u, a, cache


def backward_batch(params: Params, arch: ArchConfig, cache: ForwardCache, du, da, image_grad: bool = False):
    """Gradients of a scalar objective given dL/du and dL/da.

    Returns ``(param_grads, input_grads)``; ``input_grads`` carries the
    gradients w.r.t. ``tau`` and ``hist`` (and the stacked image if
    ``image_grad``).
    """
    grads: dict[str, np.ndarray] = {}
    fd, hd, td = arch.f_dim, arch.history_dim, arch.tau_dim
    ctl = _mlp_layers(params, "control", len(arch.control_hidden) + 1)
    dx = _unrun(ctl, cache.control, np.asarray(du, cache.dtype), grads)
    df = dx[:, :fd]
    dhist = dx[:, fd:fd + hd]
    dtau = dx[:, fd + hd:fd + hd + td]
    da_total = np.asarray(da, cache.dtype) + dx[:, fd + hd + td:]
    aux = _mlp_layers(params, "aux", 2)
    dx = _unrun(aux, cache.aux, da_total, grads)
    df = df + dx[:, :fd]
    dtau = dtau + dx[:, fd:]
    vis = _vision_layers(params, arch)
    dimg = _unrun(vis, cache.vision, df, grads, need_input_grad=image_grad)
    inputs = {"tau": dtau, "hist": dhist}
    if image_grad:
        inputs["image"] = dimg
    return {k: grads[k] for k in params}, inputs


def policy_forward(observation: sim.Observation, tau, params: Params, arch: ArchConfig):
    """Single-observation policy: returns ``(u, a)``."""
    tau_vec = tau.vector if isinstance(tau, sim.GoalParam) else np.asarray(tau, np.float32)
    if isinstance(tau, sim.GoalParam) and tau.kind != arch.encoding:
        raise ConfigurationError(f"tau encoding {tau.kind!r} does not match arch encoding {arch.encoding!r}")
    if tau_vec.size != arch.tau_dim:
        raise ShapeError(f"tau has {tau_vec.size} entries, arch expects {arch.tau_dim}")
    u, a, _ = forward_batch(
        params, arch, observation.rgb[None], observation.depth[None],
        observation.ee_history[None], tau_vec[None],
    )
    return u[0], a[0]


def module_params(params: Params, module: str) -> Params:
    if module not in MODULES:
        raise ValueError(module)
    return {k: v for k, v in params.items() if k.startswith(module + ".")}


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}

