import numpy as np
import pytest

from oasis import model as M
from oasis import protocol as PR
from oasis import strategies as S
from oasis import world as W
from oasis.metrics import count_classes, frame_miou

from oracles import miou_sets


# ---------------------------------------------------------------------------
# frame mIoU
# ---------------------------------------------------------------------------

def test_miou_perfect_and_disjoint():
    gt = np.zeros((4, 4), dtype=np.int64)
    assert frame_miou(gt, gt, 8) == 1.0
    pred = np.full((4, 4), 3, dtype=np.int64)
    assert frame_miou(pred, gt, 8) == 0.0


def test_miou_worked_2x2_example():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    # IoU_0 = 1/2, IoU_1 = 2/3 -> mean 7/12
    assert frame_miou(pred, gt, 2) == pytest.approx(7 / 12, abs=1e-15)


def test_miou_excludes_classes_absent_from_gt():
    gt = np.zeros((3, 3), dtype=np.int64)
    pred = np.zeros((3, 3), dtype=np.int64)
    pred[0, 0] = 5  # predicted but absent from gt
    # only class 0 is averaged: IoU_0 = 8/9
    assert frame_miou(pred, gt, 8) == pytest.approx(8 / 9, abs=1e-15)


@pytest.mark.parametrize("seed", range(30))
def test_miou_matches_set_oracle_exactly(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 8, size=(8, 8))
    pred = rng.integers(0, 8, size=(8, 8))
    assert frame_miou(pred, gt, 8) == miou_sets(pred, gt, 8)


def test_miou_invariant_under_joint_class_permutation():
    rng = np.random.default_rng(5)
    gt = rng.integers(0, 8, size=(10, 10))
    pred = rng.integers(0, 8, size=(10, 10))
    perm = rng.permutation(8)
    assert frame_miou(perm[pred], perm[gt], 8) == pytest.approx(frame_miou(pred, gt, 8), abs=1e-15)


def test_miou_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        frame_miou(np.zeros((2, 2), dtype=int), np.zeros((3, 3), dtype=int), 8)


# ---------------------------------------------------------------------------
# run_episode
# ---------------------------------------------------------------------------

def test_run_episode_record_count_and_determinism(mini_benchmark, mini_model):
    ep = mini_benchmark.val_episodes[0]
    cfg = S.default_config("NA")
    s1, r1 = PR.run_episode(ep, cfg, mini_model, seed=3)
    s2, r2 = PR.run_episode(ep, cfg, mini_model, seed=3)
    assert len(r1) == ep.total_frames
    assert [r.miou for r in r1] == [r.miou for r in r2]
    assert s1.mean_miou == s2.mean_miou
    assert s1.mean_miou == pytest.approx(np.mean([r.miou for r in r1]))
    assert len(s1.sub_mean_miou) == len(ep.subsequences)


def test_run_episode_stateless_strategy_is_permutation_equivariant(mini_benchmark, mini_model):
    ep = W.MaterializedEpisode(mini_benchmark.val_episodes[0])
    cfg = S.default_config("N_BN")
    _, base = PR.run_episode(ep, cfg, mini_model, seed=3)

    perm = np.random.default_rng(0).permutation(len(ep.items))
    shuffled = W.MaterializedEpisode(mini_benchmark.val_episodes[0])
    # keep each frame's own index so per-frame seeds travel with the frame
    shuffled.items = [ep.items[i] for i in perm]
    _, perm_records = PR.run_episode(shuffled, cfg, mini_model, seed=3)

    base_by_index = {r.frame_index: r.miou for r in base}
    for rec in perm_records:
        assert rec.miou == base_by_index[rec.frame_index]


def test_run_episode_aborts_on_strategy_error(mini_benchmark, mini_model):
    ep = mini_benchmark.val_episodes[0]
    broken = M.snapshot(mini_model)
    cfg = S.default_config("C_TENT", eta=float("nan"))
    summary, records = PR.run_episode(ep, cfg, broken, seed=3)
    assert summary.failed
    assert 0 < len(records) <= ep.total_frames
    assert records[-1].miou == 0.0


def test_theta0_bit_identical_after_every_strategy(mini_benchmark, mini_model):
    ref = M.snapshot(mini_model)
    mem = S.SourceMemory(mini_benchmark.source_memory, feature_model=mini_model)
    ep = W.MaterializedEpisode(mini_benchmark.val_episodes[1])
    for kind in S.ALL_KINDS:
        cfg = S.default_config(kind)
        source = mem if kind in S.SR_KINDS + S.ST_KINDS else None
        PR.run_episode(ep, cfg, mini_model, seed=2, source=source)
        assert M.states_equal(mini_model, ref), kind


def test_oracle_reset_start_model_achieves_max(mini_benchmark, mini_model):
    # instrument: at every frame the oracle's start model must match
    # max(miou(theta0), miou(current)) computed before adaptation
    ep = W.MaterializedEpisode(mini_benchmark.deploy_episodes[0])
    cfg = S.default_config("ORACLE_R_PL", eta=2e-3)
    state = S.init_adapt_state(mini_model, cfg, 11)
    for idx, sub_idx, frame in ep:
        fired = S.reset_check(state, frame, idx)
        m0 = state.diagnostics["miou0"]
        mc = state.diagnostics["miou_cur"]
        start_pred = M.predict(state.current, frame.image).argmax(axis=0)
        start_miou = frame_miou(start_pred, frame.mask, 8)
        assert start_miou == pytest.approx(max(m0, mc), abs=1e-12)
        S.adapt_step(state, frame, frame_index=idx)  # continue adapting continually


# ---------------------------------------------------------------------------
# validate / deploy
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_grid():
    return [
        S.default_config("NA"),
        S.default_config("N_BN", bn_momentum=0.1),
        S.default_config("N_PL", eta=1e-4),
        S.default_config("N_PL", eta=0.0),  # NA clone, strictly dominated tie-breaker
    ]


def test_validate_cross_product_and_winners(mini_benchmark, mini_model, mini_dr_model, tiny_grid):
    report, records = PR.validate(tiny_grid, mini_benchmark.val_episodes,
                                  [("erm", mini_model), ("dr3", mini_dr_model)], seed=5)
    assert len(report.results) == len(tiny_grid) * 2
    n_frames = sum(ep.total_frames for ep in mini_benchmark.val_episodes)
    assert len(records) == len(tiny_grid) * 2 * n_frames
    assert set(report.winners) == {"NA", "N_BN", "N_PL"}
    assert report.selected_model in ("erm", "dr3")
    assert report.model_ranking[0][1] >= report.model_ranking[-1][1]
    # a winner never comes from a failed cell
    assert not any(res.failed for res in report.winners.values())


def test_validate_grid_of_one(mini_benchmark, mini_model):
    grid = [S.default_config("N_BN")]
    report, _ = PR.validate(grid, mini_benchmark.val_episodes[:1], [("erm", mini_model)], seed=5)
    assert report.winners["N_BN"].config == grid[0]


def test_validate_eta_zero_clone_never_beats_positive_improvement(mini_benchmark, mini_model, tiny_grid):
    report, _ = PR.validate(tiny_grid, mini_benchmark.val_episodes, [("erm", mini_model)], seed=5)
    winner = report.winners["N_PL"]
    clone_mean = next(r.mean_miou for r in report.results
                      if r.config.kind == "N_PL" and r.config.eta == 0.0)
    if winner.config.eta == 0.0:
        # ties break toward lower eta only when no config improves on the clone
        assert all(r.mean_miou <= clone_mean + 1e-12 for r in report.results
                   if r.config.kind == "N_PL")


def test_deploy_improvements_and_na_zero(mini_benchmark, mini_model):
    winners = {
        "NA": S.default_config("NA"),
        "N_PL": S.default_config("N_PL", eta=0.0),  # behaves exactly like NA
        "N_BN": S.default_config("N_BN"),
    }
    result, records, _ = PR.deploy(winners, mini_benchmark.deploy_episodes, mini_model, seed=9)
    assert result["rows"]["NA"]["mean_improvement"] == 0.0
    assert result["rows"]["NA"]["std_improvement"] == 0.0
    assert result["rows"]["N_PL"]["mean_improvement"] == pytest.approx(0.0, abs=1e-12)
    assert len(result["rows"]) == 3


def test_deploy_tamper_guard(mini_benchmark, mini_model):
    winners = {"NA": S.default_config("NA"), "N_PL": S.default_config("N_PL", eta=1e-4)}
    tampered = dict(winners)
    tampered["N_PL"] = S.default_config("N_PL", eta=9e-3)
    with pytest.raises(ValueError, match="refused"):
        PR.deploy(tampered, mini_benchmark.deploy_episodes, mini_model, seed=9,
                  expected_configs=winners)


def test_deploy_improvement_invariant_to_episode_order(mini_benchmark, mini_model):
    winners = {"NA": S.default_config("NA"), "N_BN": S.default_config("N_BN")}
    fwd, _, _ = PR.deploy(winners, mini_benchmark.deploy_episodes, mini_model, seed=9)
    rev, _, _ = PR.deploy(winners, list(reversed(mini_benchmark.deploy_episodes)), mini_model, seed=9)
    assert fwd["rows"]["N_BN"]["mean_improvement"] == pytest.approx(
        rev["rows"]["N_BN"]["mean_improvement"], abs=1e-12)
    assert fwd["rows"]["N_BN"]["std_improvement"] == pytest.approx(
        rev["rows"]["N_BN"]["std_improvement"], abs=1e-12)
