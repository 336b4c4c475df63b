import dataclasses
import itertools
import json
import math

import numpy as np
import pytest

from pskill import evaluation as ev
from pskill import expert, policy, sim, train
from pskill.errors import ConfigurationError


@pytest.fixture(scope="module")
def grid():
    return sim.make_layout("grid3x3")


def still(n, k=5):
    return np.vstack([np.full((n - k, 2), 10.0), np.zeros((k, 2))])


# judge ---------------------------------------------------------------------


def test_judge_success(grid):
    pos = np.array([[400.0, 300.0]] * 10)
    assert ev.judge(pos, still(10), grid, 4) == "success"


def test_judge_wrong_goal(grid):
    pos = np.array([[600.0, 300.0]] * 10)
    assert ev.judge(pos, still(10), grid, 4) == "wrong_goal"


def test_judge_stopped_outside(grid):
    pos = np.array([[300.0, 225.0]] * 10)
    assert ev.judge(pos, still(10), grid, 4) == "stopped_outside"


def test_judge_needs_k_slow_steps(grid):
    pos = np.array([[400.0, 300.0]] * 10)
    controls = still(10, 4)
    assert ev.judge(pos, controls, grid, 4) == "timeout"
    controls[-1] = [0.9, 0.0]  # under v_stop still counts as stopped
    controls[-5] = [0.0, 0.99]
    assert ev.judge(pos, controls, grid, 4) == "success"
    assert ev.judge(pos[:3], np.zeros((3, 2)), grid, 4) == "timeout"


def test_judge_button_edge_is_inside(grid):
    pos = np.array([[450.0, 350.0]])
    assert ev.judge(pos, np.zeros((5, 2)), grid, 4) == "success"


# rollouts ------------------------------------------------------------------


class Frozen:
    """Controller that never moves."""

    resolution = (80, 60)

    def check(self, layout):
        pass

    def __call__(self, layout, goal_ids, positions, rgb, depth, hist, chunk=256):
        return np.zeros((len(goal_ids), 2))


class Misdirected(ev.ExpertController):
    """Expert that heads for the next goal id instead of the requested one."""

    def __call__(self, layout, goal_ids, *args, **kw):
        return super().__call__(layout, [(g + 1) % 9 for g in goal_ids], *args, **kw)


def test_expert_controller_succeeds_everywhere(grid):
    rep = ev.evaluate_goals(ev.ExpertController(), grid, range(9), ev.EvalConfig(trials_per_goal=6, seed=2))
    assert rep.aggregate == 1.0 and rep.trials == 54


@pytest.mark.parametrize("kind", ["column", "scramble", "shift", "clump"])
def test_expert_controller_on_other_layouts(kind):
    lay = sim.make_layout(kind, 0)
    rep = ev.evaluate_goals(ev.ExpertController(), lay, range(9), ev.EvalConfig(trials_per_goal=3))
    assert rep.aggregate == 1.0


def test_frozen_controller_stops_outside(grid):
    rep = ev.evaluate_goals(Frozen(), grid, [0, 8], ev.EvalConfig(trials_per_goal=3))
    assert rep.aggregate == 0.0
    assert all(g.outcomes["stopped_outside"] == 3 for g in rep.goals)
    r = ev.rollout(Frozen(), grid, 0, (780.0, 20.0))
    assert r.steps == 5


def test_misdirected_controller_hits_wrong_goal(grid):
    rep = ev.evaluate_goals(Misdirected(), grid, [2, 3], ev.EvalConfig(trials_per_goal=2))
    assert all(g.outcomes["wrong_goal"] == 2 for g in rep.goals)


def test_max_steps_zero_is_timeout(grid):
    r = ev.rollout(ev.ExpertController(), grid, 0, (780.0, 20.0), ev.EvalConfig(max_steps=0))
    assert r.outcome == "timeout" and r.steps == 0


def test_rollout_timeout_length(grid):
    r = ev.rollout(ev.ExpertController(), grid, 6, (780.0, 20.0), ev.EvalConfig(max_steps=7))
    assert r.outcome == "timeout" and r.steps == 7
    assert len(r.positions) == 8 and tuple(r.positions[0]) == (780.0, 20.0)


def test_rollout_expert_path_matches_demo(grid):
    start = (650.0, 20.0)
    r = ev.rollout(ev.ExpertController(), grid, 3, start)
    demo = expert.generate_demo(grid, 3, start)
    assert r.outcome == "success"
    # the rollout keeps issuing zero controls until the stop window fills
    np.testing.assert_allclose(r.controls[: len(demo)], demo.controls, atol=1e-5)
    assert r.steps == len(demo) + 4


def test_network_rollouts_deterministic(grid):
    arch = policy.ArchConfig.fast("rowcol")
    ckpt = train.Checkpoint(arch, policy.init_params(arch, 0), {"train_goals": [4]})
    cfg = ev.EvalConfig(trials_per_goal=2, max_steps=15, seed=5)
    a = ev.evaluate_goals(ckpt, grid, [4, 5], cfg)
    b = ev.evaluate_goals(ckpt, grid, [4, 5], cfg)
    assert a == b
    assert a.seen_goals == [4] and a.unseen_goals == [5]
    assert a.config["encoding"] == "rowcol"


def test_network_controller_matches_policy_forward(grid):
    arch = policy.ArchConfig.fast("pixel")
    params = policy.init_params(arch, 1)
    ctl = ev.NetworkController(train.Checkpoint(arch, params, {}))
    positions = [(780.0, 20.0), (700.0, 20.0)]
    rgb = sim.render_rgb(grid, positions, arch.resolution)
    depth = np.zeros(rgb.shape[:3], np.float32)
    hist = np.stack([sim.normalize_history(sim.history_window([p], 0)) for p in positions])
    u = ctl(grid, [2, 6], np.array(positions), rgb, depth, hist)
    for i, g in enumerate([2, 6]):
        obs = sim.Observation(rgb[i], depth[i], hist[i])
        ui, _ = policy.policy_forward(obs, sim.encode_tau(grid, g, "pixel"), params, arch)
        np.testing.assert_allclose(u[i], ui, rtol=1e-5, atol=1e-6)


def test_rowcol_network_rejected_off_grid():
    arch = policy.ArchConfig.fast("rowcol")
    ckpt = train.Checkpoint(arch, policy.init_params(arch, 0), {})
    with pytest.raises(sim.UnsupportedEncodingError):
        ev.evaluate_goals(ckpt, sim.make_layout("shift", 1), [0], ev.EvalConfig(trials_per_goal=1))


def test_trials_must_be_positive(grid):
    with pytest.raises(ConfigurationError):
        ev.evaluate_goals(Frozen(), grid, [0], ev.EvalConfig(trials_per_goal=0))


# reports -------------------------------------------------------------------


def make_report():
    goals = [
        ev.GoalStats(0, 10, 9, True, {"success": 9, "timeout": 1}),
        ev.GoalStats(1, 10, 5, True, {"success": 5, "wrong_goal": 5}),
        ev.GoalStats(2, 20, 2, False, {"success": 2, "stopped_outside": 18}),
    ]
    return ev.EvalReport(goals, {"seed": 1})


def test_report_rates():
    rep = make_report()
    assert rep.aggregate == pytest.approx(16 / 40)
    assert rep.seen_rate == pytest.approx(14 / 20)
    assert rep.unseen_rate == pytest.approx(2 / 20)
    assert "aggregate 0.400" in rep.summary()


def test_report_roundtrip():
    rep = make_report()
    back = ev.EvalReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back == rep


def test_report_without_unseen_goals():
    rep = ev.EvalReport([ev.GoalStats(0, 4, 4, True)])
    assert rep.unseen_rate is None and rep.seen_rate == 1.0


# subset sweeps ---------------------------------------------------------------


def test_sample_subsets_full_and_single():
    assert ev.sample_subsets(9, 5, 0) == [tuple(range(9))]
    assert ev.sample_subsets(8, 20, 0) == [tuple(c) for c in itertools.combinations(range(9), 8)]
    s = ev.sample_subsets(3, 5, 7)
    assert len(s) == 5 and len(set(s)) == 5
    assert all(len(x) == 3 and list(x) == sorted(x) for x in s)
    assert s == ev.sample_subsets(3, 5, 7)
    assert s != ev.sample_subsets(3, 5, 8)


def test_sample_subsets_bad_size():
    with pytest.raises(ConfigurationError):
        ev.sample_subsets(0, 5, 0)
    with pytest.raises(ConfigurationError):
        ev.sample_subsets(10, 5, 0)


@pytest.fixture(scope="module")
def all_goals_ds(grid):
    return expert.build_dataset(grid, range(9), 1, "rowcol", seed=0)


TINY_TRAIN = train.TrainConfig(epochs=1, batch_size=64)
TINY_EVAL = ev.EvalConfig(trials_per_goal=1, max_steps=6)


def test_subset_sweep_small(all_goals_ds):
    rep = ev.subset_sweep(all_goals_ds, sizes=[1, 9], subsets_per_size=2, template=TINY_TRAIN,
                          eval_config=TINY_EVAL, sweep_seed=3)
    assert [len(rep.results[1]), len(rep.results[9])] == [2, 1]
    r9 = rep.results[9][0]
    assert r9.error is None and r9.report.unseen_rate is None
    stats = rep.stats(1)
    assert stats["n"] == 2 and stats["min"] <= stats["median"] <= stats["max"]
    assert ev.SweepReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
    assert len(rep.rows()) == 3


def test_subset_sweep_records_errors(all_goals_ds):
    bad = train.TrainConfig(epochs=1, batch_size=64, encoding="rowcol")
    layout = sim.make_layout("shift", 0)
    ds = expert.Dataset(all_goals_ds.trajectories, dataclasses.replace(
        all_goals_ds.manifest, layout=layout.to_dict()))
    rep = ev.subset_sweep(ds, sizes=[9], subsets_per_size=1, template=bad, eval_config=TINY_EVAL)
    assert rep.results[9][0].report is None
    assert "UnsupportedEncodingError" in rep.results[9][0].error


def test_subset_sweep_needs_all_goals(grid):
    ds = expert.build_dataset(grid, [0, 1], 1, "rowcol")
    with pytest.raises(ConfigurationError):
        ev.subset_sweep(ds, sizes=[1])


def test_ablation_suite_small(all_goals_ds):
    rep = ev.ablation_suite(all_goals_ds, encodings=("none", "pixel"), subsets=[(4,)],
                            template=TINY_TRAIN, eval_config=TINY_EVAL)
    assert [(e, s) for e, s, _ in rep.rows] == [("none", (4,)), ("pixel", (4,))]
    assert all(r.report is not None for _, _, r in rep.rows)
    assert "pixel" in rep.table()
    json.dumps(rep.to_dict())


def test_dominance_violation_flagged():
    rep = ev.EvalReport([ev.GoalStats(0, 10, 1, True), ev.GoalStats(1, 10, 9, False)])
    ab = ev.AblationReport([("rowcol", (0,), ev.SubsetResult((0,), rep))])
    assert ab.dominance_violations == [("rowcol", (0,))]


def test_layout_transfer_requires_pixel_grid_checkpoint():
    arch = policy.ArchConfig.fast("rowcol")
    ckpt = train.Checkpoint(arch, policy.init_params(arch, 0), {})
    with pytest.raises(ConfigurationError):
        ev.layout_transfer(ckpt)
    arch = policy.ArchConfig.fast("pixel")
    ckpt = train.Checkpoint(arch, policy.init_params(arch, 0), {"train_layout": "shift"})
    with pytest.raises(ConfigurationError):
        ev.layout_transfer(ckpt)


def test_layout_transfer_runs():
    arch = policy.ArchConfig.fast("pixel")
    ckpt = train.Checkpoint(arch, policy.init_params(arch, 0), {"train_layout": "grid3x3"})
    out = ev.layout_transfer(ckpt, kinds=("column",), config=ev.EvalConfig(trials_per_goal=1, max_steps=3))
    assert set(out) == {"column"} and out["column"].trials == 9
    assert out["column"].config["layout"] == "column"
    assert math.isclose(out["column"].aggregate, 0.0)
