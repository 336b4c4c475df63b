import dataclasses
import math

import numpy as np
import pytest

from pskill import expert, nn, policy, sim, train
from pskill.errors import ConfigurationError, FormatError, IntegrityError, TrainingError

from helpers import random_batch, tiny_arch


@pytest.fixture(scope="module")
def grid():
    return sim.make_layout("grid3x3")


@pytest.fixture(scope="module")
def small_ds(grid):
    return expert.build_dataset(grid, [4], 5, "rowcol", seed=0)


# loss ----------------------------------------------------------------------


def only(term):
    return train.LossWeights(**{k: float(k == term) for k in ("l1", "l2", "acos", "aux")})


def test_loss_hand_values():
    bd, _, _ = train.loss_terms(np.array([[1.0, 2.0]]), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)))
    assert bd.l1 == 3.0 and bd.l2 == 5.0 and bd.aux == 0.0
    # zero target: acos term is skipped
    assert bd.acos == 0.0


def test_loss_acos_orthogonal():
    bd, _, _ = train.loss_terms(np.array([[0.0, 3.0]]), np.zeros((1, 2)), np.array([[2.0, 0.0]]), np.zeros((1, 2)))
    assert bd.acos == pytest.approx(math.pi / 2)


def test_loss_acos_parallel_is_clamped_not_nan():
    bd, du, _ = train.loss_terms(np.array([[5.0, 0.0]]), np.zeros((1, 2)), np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert bd.acos == pytest.approx(math.acos(1 - 1e-6))
    assert np.isfinite(du).all()


def test_loss_weighting():
    # pred/target chosen so every unweighted term equals 1
    p = np.array([[1.0, 0.0]])
    u = np.array([[0.0, 0.0]])
    bd, _, _ = train.loss_terms(p, np.array([[1.0, 0.0]]), u, np.zeros((1, 2)))
    assert (bd.l1, bd.l2, bd.aux) == (1.0, 1.0, 1.0)
    w = train.LossWeights()
    assert bd.total == pytest.approx(w.l1 + w.l2 + w.aux)
    assert w.l1 + w.l2 + w.acos + w.aux == pytest.approx(2.015)


def test_loss_is_batch_mean():
    p = np.array([[1.0, 2.0], [1.0, 2.0]])
    bd, _, _ = train.loss_terms(p, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    assert bd.l1 == 3.0


def test_negative_weight_rejected():
    with pytest.raises(ConfigurationError):
        train.LossWeights(l1=-1)


@pytest.mark.parametrize("term", ["l1", "l2", "acos", "aux", None])
def test_gradcheck_loss_terms(term):
    arch = tiny_arch()
    params = policy.init_params(arch, 3)
    batch = random_batch(arch, 4, seed=1)
    batch.u_target[1] = 0.0  # one stop sample exercises the acos skip
    weights = train.LossWeights() if term is None else only(term)
    fn = train.policy_unit(arch, batch, weights)
    report = nn.grad_check(fn, train.policy_unit_arrays(params, batch), eps=1e-3, threshold=1e-3)
    assert report.passed, str(report)


def test_loss_output_gradients_match_finite_differences():
    r = np.random.default_rng(0)
    p, a = r.standard_normal((3, 2)), r.standard_normal((3, 2))
    u, at = r.standard_normal((3, 2)), r.standard_normal((3, 2))

    def fn(arrays):
        bd, du, da = train.loss_terms(arrays["p"], arrays["a"], u, at)
        return bd.total, {"p": du, "a": da}, train.loss_kinks(arrays["p"], u)

    report = nn.grad_check(fn, {"p": p, "a": a}, eps=1e-7)
    assert report.passed, str(report)


# NovoGrad ------------------------------------------------------------------


def test_novograd_first_step_hand_values():
    params = {"w": np.zeros(2)}
    new, state = train.novograd_step(params, {"w": np.array([3.0, 4.0])}, train.OptimState())
    assert state.v["w"] == 25.0
    np.testing.assert_allclose(state.m["w"], [0.6, 0.8], rtol=1e-7)
    np.testing.assert_allclose(new["w"], [-0.0003, -0.0004], rtol=1e-6)
    assert state.step == 1
    assert not params["w"].any()


def test_novograd_second_step():
    cfg = train.NovoGradConfig()
    params = {"w": np.zeros(2)}
    p1, s1 = train.novograd_step(params, {"w": np.array([3.0, 4.0])}, train.OptimState(cfg))
    g2 = np.array([0.0, 1.0])
    p2, s2 = train.novograd_step(p1, {"w": g2}, s1)
    v = 0.98 * 25 + 0.02 * 1
    m = 0.95 * np.array([0.6, 0.8]) + g2 / (math.sqrt(v) + 1e-8)
    assert s2.v["w"] == pytest.approx(v)
    np.testing.assert_allclose(p2["w"], p1["w"] - 5e-4 * m, rtol=1e-7)


def test_novograd_zero_gradient():
    params = {"w": np.ones(3)}
    new, _ = train.novograd_step(params, {"w": np.zeros(3)}, train.OptimState())
    np.testing.assert_array_equal(new["w"], params["w"])


def test_novograd_scale_invariant_first_step():
    g = np.array([0.3, -1.2, 2.0])
    _, s1 = train.novograd_step({"w": np.zeros(3)}, {"w": g}, train.OptimState())
    _, s2 = train.novograd_step({"w": np.zeros(3)}, {"w": 1000 * g}, train.OptimState())
    # equal up to the eps in the denominator
    np.testing.assert_allclose(s1.m["w"], s2.m["w"], rtol=1e-7)


def test_novograd_weight_decay():
    cfg = train.NovoGradConfig(weight_decay=0.1)
    p1, s1 = train.novograd_step({"w": np.ones(1)}, {"w": np.ones(1)}, train.OptimState(cfg))
    p2, s2 = train.novograd_step(p1, {"w": np.zeros(1)}, s1)
    assert s2.m["w"][0] == pytest.approx(0.95 * s1.m["w"][0] + 0.1 * p1["w"][0])


def test_novograd_rejects_non_finite():
    with pytest.raises(TrainingError, match="bad"):
        train.novograd_step({"bad": np.zeros(2)}, {"bad": np.array([np.nan, 0.0])}, train.OptimState())


def test_novograd_per_tensor_second_moment():
    params = {"a": np.zeros(1), "b": np.zeros(1)}
    _, s = train.novograd_step(params, {"a": np.array([2.0]), "b": np.array([0.5])}, train.OptimState())
    assert s.v == {"a": 4.0, "b": 0.25}


def test_novograd_lr_override():
    new, state = train.novograd_step({"w": np.zeros(2)}, {"w": np.array([3.0, 4.0])}, train.OptimState(), lr=0.01)
    np.testing.assert_allclose(new["w"], [-0.006, -0.008], rtol=1e-6)
    assert state.config.lr == 0.0005


@pytest.mark.parametrize("step,expected", [(0, 1.0), (50, 0.5), (25, 0.5 + 0.5 * math.sqrt(0.5)), (100, 0.0)])
def test_cosine_schedule(step, expected):
    assert train.scheduled_lr(2.0, "cosine", step, 100) == pytest.approx(2.0 * expected, abs=1e-12)
    assert train.scheduled_lr(2.0, "constant", step, 100) == 2.0


def test_unknown_schedule_rejected():
    with pytest.raises(ConfigurationError, match="lr_schedule"):
        train.TrainConfig(lr_schedule="step")


# training loop -------------------------------------------------------------


def test_flatten(small_ds):
    s = train.flatten(small_ds)
    total = sum(len(t) for t in small_ds.trajectories)
    assert len(s) == total and s.rgb.shape[0] == total
    t0 = small_ds.trajectories[0]
    np.testing.assert_array_equal(s.tau[0], t0.tau.vector)
    np.testing.assert_allclose(s.a_target[0], t0.aux_target())


def test_training_reduces_loss(small_ds):
    ckpt, rows = train.train_loop(small_ds, train.TrainConfig(epochs=5, seed=0))
    assert len(rows) == 6 and rows[0]["epoch"] == 0
    assert rows[-1]["total"] < rows[0]["total"]
    assert ckpt.metadata["train_goals"] == [4]
    assert ckpt.metadata["epochs"] == 5


def test_zero_controls_l1_decreases(small_ds):
    trajs = [dataclasses.replace(t, controls=np.zeros_like(t.controls)) for t in small_ds.trajectories]
    ds = expert.Dataset(trajs, small_ds.manifest)
    _, rows = train.train_loop(ds, train.TrainConfig(epochs=5, seed=1))
    l1 = [r["l1"] for r in rows]
    assert all(b < a for a, b in zip(l1, l1[1:])), l1


def test_zero_epochs_returns_init(small_ds):
    ckpt, rows = train.train_loop(small_ds, train.TrainConfig(epochs=0, seed=7))
    init = policy.init_params(ckpt.arch, np.random.default_rng([7, 1]))
    assert all(np.array_equal(ckpt.params[k], init[k]) for k in init)
    assert len(rows) == 1


def test_training_deterministic(small_ds):
    cfg = train.TrainConfig(epochs=1, seed=3)
    a, ra = train.train_loop(small_ds, cfg)
    b, rb = train.train_loop(small_ds, cfg)
    assert a.equals(b)
    assert [r["total"] for r in ra] == [r["total"] for r in rb]


def test_training_config_errors(small_ds):
    with pytest.raises(ConfigurationError, match="encoding"):
        train.train_loop(small_ds, train.TrainConfig(epochs=1, encoding="pixel"))
    with pytest.raises(ConfigurationError, match="not in the dataset"):
        train.train_loop(small_ds, train.TrainConfig(epochs=1, train_goals=(0,)))
    with pytest.raises(ConfigurationError):
        train.train_loop(small_ds, train.TrainConfig(epochs=1, train_goals=()))
    with pytest.raises(ConfigurationError):
        train.TrainConfig(epochs=-1)


def test_per_epoch_checkpoints(small_ds, tmp_path):
    cfg = train.TrainConfig(epochs=2, checkpoint_every_epoch=str(tmp_path / "e{epoch}.pskl"))
    final, _ = train.train_loop(small_ds, cfg)
    assert train.checkpoint_load(tmp_path / "e2.pskl").equals(final)
    assert train.checkpoint_load(tmp_path / "e1.pskl").metadata["epochs"] == 1


def test_save_log(tmp_path):
    train.save_log([{"epoch": 0, "total": 1.5}], tmp_path / "log.jsonl")
    assert (tmp_path / "log.jsonl").read_text() == '{"epoch": 0, "total": 1.5}\n'


# checkpoints ---------------------------------------------------------------


@pytest.fixture(scope="module")
def ckpt():
    arch = policy.ArchConfig.fast("onehot")
    return train.Checkpoint(arch, policy.init_params(arch, 11), {"encoding": "onehot", "train_goals": [1, 2]})


def test_checkpoint_roundtrip(ckpt, tmp_path):
    path = train.checkpoint_save(ckpt, tmp_path / "c.pskl")
    back = train.checkpoint_load(path)
    assert back.equals(ckpt)
    assert back.train_goals == (1, 2)
    assert train.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_layout(ckpt):
    data = train.checkpoint_bytes(ckpt)
    assert data[:4] == b"PSKL"
    assert int.from_bytes(data[4:8], "little") == 1


def test_checkpoint_corrupt_header(ckpt):
    data = bytearray(train.checkpoint_bytes(ckpt))
    data[14] ^= 0xFF
    with pytest.raises(FormatError):
        train.checkpoint_from_bytes(bytes(data))


def test_checkpoint_bad_magic(ckpt):
    with pytest.raises(FormatError):
        train.checkpoint_from_bytes(b"NOPE" + train.checkpoint_bytes(ckpt)[4:])


def test_checkpoint_corrupt_payload(ckpt):
    data = bytearray(train.checkpoint_bytes(ckpt))
    data[-100] ^= 0x01
    with pytest.raises(IntegrityError):
        train.checkpoint_from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [5, 40, 0.5, 1])
def test_checkpoint_truncated(ckpt, cut):
    data = train.checkpoint_bytes(ckpt)
    n = int(len(data) * cut) if isinstance(cut, float) else len(data) - cut if cut == 1 else cut
    with pytest.raises(IntegrityError):
        train.checkpoint_from_bytes(data[:n])


def test_checkpoint_encoding_mismatch(ckpt, tmp_path):
    path = train.checkpoint_save(ckpt, tmp_path / "c.pskl")
    with pytest.raises(ConfigurationError, match="tau length 9"):
        train.checkpoint_load(path, expected_encoding="rowcol")
    assert train.checkpoint_load(path, expected_encoding="onehot").equals(ckpt)


def test_checkpoint_save_is_atomic(ckpt, tmp_path):
    path = train.checkpoint_save(ckpt, tmp_path / "c.pskl")
    assert not list(tmp_path.glob("*.tmp"))
    assert path.exists()
