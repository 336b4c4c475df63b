"""Small shared builders for the test suite."""

import numpy as np

from pskill import policy, sim, train


def tiny_arch(encoding="rowcol"):
    """8x8 input, two feature points: small enough for exhaustive grad checks."""
    return policy.ArchConfig(
        resolution=(8, 8), conv=((3, 3, 1), (2, 3, 1)), aux_hidden=5, control_hidden=(6, 6),
        encoding=encoding, tau_dim=sim.tau_dim(encoding),
    )


def random_batch(arch, n, seed=0):
    r = np.random.default_rng(seed)
    w, h = arch.resolution
    return train.Batch(
        rgb=r.uniform(0, 1, (n, h, w, 3)),
        depth=r.uniform(0, 1, (n, h, w)),
        hist=r.uniform(0, 1, (n, arch.history_dim)),
        tau=r.uniform(0, 2, (n, arch.tau_dim)),
        u_target=r.standard_normal((n, 2)) * 5,
        a_target=r.uniform(0, 1, (n, 2)),
    )
