"""Gradient-check suite shared by the ``grad-check`` command and the test suite."""

from __future__ import annotations

import numpy as np

from . import nn, policy, sim
from .train import Batch, LossWeights, policy_unit, policy_unit_arrays

LAYER_EPS = 1e-6
NETWORK_EPS = 1e-3


def reduced_arch(encoding: str = "rowcol") -> policy.ArchConfig:
    """8x8 input, two feature points (C=2)."""
    return policy.ArchConfig(
        resolution=(8, 8), conv=((3, 3, 1), (2, 3, 1)), aux_hidden=5, control_hidden=(6, 6),
        encoding=encoding, tau_dim=sim.tau_dim(encoding),
    )


def random_batch(arch: policy.ArchConfig, n: int, rng: np.random.Generator) -> Batch:
    w, h = arch.resolution
    u = rng.standard_normal((n, 2)) * 5
    u[0] = 0.0  # one stop sample, so the arc-cosine skip path is exercised
    return Batch(
        rgb=rng.uniform(0, 1, (n, h, w, 3)),
        depth=rng.uniform(0, 1, (n, h, w)),
        hist=rng.uniform(0, 1, (n, arch.history_dim)),
        tau=rng.uniform(0, 2, (n, arch.tau_dim)),
        u_target=u,
        a_target=rng.uniform(0, 1, (n, 2)),
    )


def _layer_case(name, layer, x, rng):
    for k, v in layer.params.items():
        setattr(layer, k, np.asarray(v, np.float64))
    y = nn.layer_forward(layer, x)
    fn = nn.layer_unit(layer, rng, y.shape)
    return name, nn.grad_check(fn, {"input": x, **layer.params}, eps=LAYER_EPS, threshold=1e-3, rng=rng)


def gradient_suite(seed: int = 0, threshold: float = 1e-3) -> list[tuple[str, nn.GradCheckReport]]:
    """Check every layer type, the reduced policy, and each loss term in float64."""
    rng = np.random.default_rng([seed, 5])
    out = [
        _layer_case("dense", nn.Dense(rng.standard_normal((5, 3)), rng.standard_normal(3)),
                    rng.standard_normal((4, 5)), rng),
        _layer_case("conv2d stride 1", nn.Conv2D(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), 1),
                    rng.standard_normal((2, 4, 4, 2)), rng),
        _layer_case("conv2d stride 2", nn.Conv2D(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), 2),
                    rng.standard_normal((2, 7, 7, 2)), rng),
        _layer_case("relu", nn.ReLU(), rng.uniform(0.01, 2, (3, 6)) * rng.choice([-1, 1], (3, 6)), rng),
        _layer_case("spatial softmax", nn.SpatialSoftmax(), rng.standard_normal((2, 5, 6, 3)) * 2, rng),
    ]
    arch = reduced_arch()
    params = policy.init_params(arch, rng)
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.uniform(-0.1, 0.1, params[k].shape)
    batch = random_batch(arch, 4, rng)
    arrays = policy_unit_arrays(params, batch)
    cases = [("policy (8x8, C=2)", None)]
    for term in ("l1", "l2", "acos", "aux"):
        cases.append((f"loss {term}", LossWeights(**{k: float(k == term) for k in ("l1", "l2", "acos", "aux")})))
    cases.append(("loss total", LossWeights()))
    for name, weights in cases:
        fn = policy_unit(arch, batch, weights, rng)
        out.append((name, nn.grad_check(fn, arrays, eps=NETWORK_EPS, threshold=threshold, rng=rng)))
    return out
