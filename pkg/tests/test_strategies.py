import numpy as np
import pytest

from oasis import model as M
from oasis import strategies as S
from oasis import tensor as T
from oasis import world as W
from oasis.metrics import frame_miou
from oasis.seeding import rng_for

from oracles import entropy_longdouble


def frame_at(benchmark, episode_idx, frame_idx, deploy=False):
    eps = benchmark.deploy_episodes if deploy else benchmark.val_episodes
    for i, s, f in W.episode_frames(eps[episode_idx]):
        if i == frame_idx:
            return f
    raise IndexError


@pytest.fixture(scope="module")
def memory(mini_benchmark, mini_model):
    return S.SourceMemory(mini_benchmark.source_memory, feature_model=mini_model)


# ---------------------------------------------------------------------------
# losses / pseudo-labels
# ---------------------------------------------------------------------------

def test_entropy_loss_uniform_and_onehot():
    p_uni = np.full((4, 5, 5), 0.25)
    assert abs(S.entropy_loss(p_uni).item() - 25 * np.log(4)) < 1e-10
    p_hot = np.zeros((4, 3, 3))
    p_hot[1] = 1.0
    assert abs(S.entropy_loss(p_hot).item()) < 1e-10 * 9


def test_entropy_loss_matches_extended_precision():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(8, 6, 7))
    e = np.exp(z - z.max(axis=0))
    p = e / e.sum(axis=0)
    got = S.entropy_loss(p).item()
    want = entropy_longdouble(p)
    assert abs(got - want) <= 1e-10 * abs(want)


def test_pseudo_label_dominant_and_tiebreak():
    p = np.zeros((4, 2, 2))
    p[2] = 0.9
    p[0] = 0.1 / 3
    assert (S.pseudo_label(p) == 2).all()
    tie = np.zeros((4, 1, 1))
    tie[1] = tie[3] = 0.5
    assert S.pseudo_label(tie)[0, 0] == 1  # lowest index wins the tie


# ---------------------------------------------------------------------------
# BN strategies
# ---------------------------------------------------------------------------

def test_bn_alpha_zero_equals_na(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    na_probs, _ = S.adapt_step(S.init_adapt_state(mini_model, S.default_config("NA"), 1), frame)
    for kind in ("N_BN", "C_BN"):
        cfg = S.default_config(kind, bn_momentum=0.0)
        probs, _ = S.adapt_step(S.init_adapt_state(mini_model, cfg, 1), frame)
        assert np.array_equal(probs, na_probs), kind


def test_n_bn_is_stateless(mini_benchmark, mini_model):
    cfg = S.default_config("N_BN")
    state = S.init_adapt_state(mini_model, cfg, 1)
    for idx in range(3):
        S.adapt_step(state, frame_at(mini_benchmark, 0, idx), frame_index=idx)
    assert np.array_equal(state.current.bn1.running_mean, mini_model.bn1.running_mean)
    assert np.array_equal(state.current.bn2.running_var, mini_model.bn2.running_var)


def test_c_bn_stats_converge_geometrically(mini_benchmark, mini_model):
    # constant domain: layer-1 running mean approaches the domain mean with
    # |mu_t - mu*| <= (1-alpha)^t |mu_0 - mu*| + tolerance
    spec = W.DomainSpec("town", "clear")
    frames = [W.render(spec, float(t), 99, 24, 32) for t in range(40)]
    sample_means = []
    for f in frames:
        probe = M.snapshot(mini_model)
        M.update_bn_stats(probe, f.image, 1.0)  # alpha=1 reads off the sample stats
        sample_means.append(probe.bn1.running_mean.copy())
    domain_mean = np.mean(sample_means, axis=0)

    alpha = 0.25
    cfg = S.default_config("C_BN", bn_momentum=alpha)
    state = S.init_adapt_state(mini_model, cfg, 1)
    gap0 = np.linalg.norm(mini_model.bn1.running_mean - domain_mean)
    spread = max(np.linalg.norm(m - domain_mean) for m in sample_means)
    for t, f in enumerate(frames):
        S.adapt_step(state, f, frame_index=t)
        gap = np.linalg.norm(state.current.bn1.running_mean - domain_mean)
        assert gap <= (1 - alpha) ** (t + 1) * gap0 + spread + 1e-9


def test_bn_mix_alpha_one_adopts_frame_stats(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    cfg = S.default_config("C_BN", bn_momentum=1.0)
    state = S.init_adapt_state(mini_model, cfg, 1)
    S.adapt_step(state, frame)
    probe = M.snapshot(mini_model)
    M.update_bn_stats(probe, frame.image, 1.0)
    np.testing.assert_allclose(state.current.bn1.running_mean, probe.bn1.running_mean, atol=1e-12)


# ---------------------------------------------------------------------------
# TENT / PL
# ---------------------------------------------------------------------------

def test_eta_zero_tent_and_pl_match_na(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    na_probs, _ = S.adapt_step(S.init_adapt_state(mini_model, S.default_config("NA"), 1), frame)
    for kind in ("N_TENT", "C_TENT", "N_PL", "C_PL"):
        cfg = S.default_config(kind, eta=0.0)
        probs, _ = S.adapt_step(S.init_adapt_state(mini_model, cfg, 1), frame)
        np.testing.assert_array_equal(probs, na_probs, err_msg=kind)


def test_n_tent_changes_only_bn_affine(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0, deploy=True)
    cfg = S.default_config("N_TENT", eta=0.05)
    state = S.init_adapt_state(mini_model, cfg, 1)
    S.adapt_step(state, frame)
    affine = {"bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta"}
    theta0_arrays = dict(mini_model.named_arrays())
    changed = {name for name, arr in state.current.named_arrays()
               if not np.array_equal(arr, theta0_arrays[name])}
    assert changed <= affine
    assert changed  # something did adapt


def test_tent_descends_entropy_on_most_frames(mini_benchmark, mini_dr_model):
    # one eta=1e-2 step should not increase the entropy objective
    spec_pool = [W.DomainSpec(e, c) for e in W.VAL_ENVIRONMENTS for c in W.VAL_CONDITIONS]
    wins = total = 0
    for i in range(40):
        spec = spec_pool[i % len(spec_pool)]
        frame = W.render(spec, float(3 * i), 1000 + i, 24, 32)
        before = S.entropy_loss(M.predict(mini_dr_model, frame.image)).item()
        cfg = S.default_config("N_TENT", eta=1e-2)
        state = S.init_adapt_state(mini_dr_model, cfg, i)
        probs, _ = S.adapt_step(state, frame)
        after = S.entropy_loss(probs).item()
        wins += after <= before + 1e-9
        total += 1
    assert wins / total >= 0.95, f"descent on {wins}/{total} frames"


def test_c_pl_is_stateful_vs_n_pl(mini_benchmark, mini_model):
    f0 = frame_at(mini_benchmark, 0, 0)
    f1 = frame_at(mini_benchmark, 0, 5)
    eta = 3e-3

    n_state = S.init_adapt_state(mini_model, S.default_config("N_PL", eta=eta), 1)
    S.adapt_step(n_state, f0, frame_index=0)
    n_probs, _ = S.adapt_step(n_state, f1, frame_index=1)

    c_state = S.init_adapt_state(mini_model, S.default_config("C_PL", eta=eta), 1)
    S.adapt_step(c_state, f0, frame_index=0)
    c_probs, _ = S.adapt_step(c_state, f1, frame_index=1)
    assert not np.array_equal(n_probs, c_probs)


def test_naive_prediction_independent_of_other_frames(mini_benchmark, mini_model):
    # same frame, same index, different surrounding frames -> identical output
    target = frame_at(mini_benchmark, 0, 7)
    other_a = frame_at(mini_benchmark, 0, 2)
    other_b = frame_at(mini_benchmark, 1, 3)
    for kind in ("N_TENT", "N_PL", "N_BN", "N_ST_RANDOM"):
        cfg = S.default_config(kind, eta=0.01) if kind in ("N_TENT", "N_PL") else S.default_config(kind)
        source = S.SourceMemory(mini_benchmark.source_memory, mini_model) if kind.startswith("N_ST") else None
        outs = []
        for other in (other_a, other_b):
            state = S.init_adapt_state(mini_model, cfg, seed=5, source=source)
            S.adapt_step(state, other, frame_index=0)
            probs, _ = S.adapt_step(state, target, frame_index=1)
            outs.append(probs)
        assert np.array_equal(outs[0], outs[1]), kind


def test_multi_iteration_pl_differs_and_recomputes_labels(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0, deploy=True)
    one = S.adapt_step(S.init_adapt_state(mini_model, S.default_config("N_PL", eta=1e-3), 1), frame)[0]
    three = S.adapt_step(S.init_adapt_state(mini_model, S.default_config("N_PL", eta=1e-3, adapt_iters=3), 1), frame)[0]
    assert not np.array_equal(one, three)


def test_sr_with_large_weight_preserves_source_miou(mini_benchmark, mini_model, memory):
    cfg = S.default_config("C_PL_SR", eta=1e-3, sr_weight=50.0)
    state = S.init_adapt_state(mini_model, cfg, 1, source=memory)
    frames = [frame_at(mini_benchmark, 0, i, deploy=True) for i in range(10)]
    for rep in range(50):
        S.adapt_step(state, frames[rep % len(frames)], frame_index=rep)

    def source_miou(model):
        vals = [frame_miou(M.predict(model, f.image).argmax(axis=0), f.mask, 8)
                for f in mini_benchmark.source_eval]
        return float(np.mean(vals))

    base = source_miou(mini_model)
    adapted = source_miou(state.current)
    assert adapted >= base * 0.98, (base, adapted)


def test_theta0_never_mutates(mini_benchmark, mini_model, memory):
    reference = M.snapshot(mini_model)
    frames = [frame_at(mini_benchmark, 0, i) for i in range(4)]
    for kind in S.ALL_KINDS:
        cfg = S.default_config(kind)
        source = memory if kind in S.SR_KINDS + S.ST_KINDS else None
        state = S.init_adapt_state(mini_model, cfg, 3, source=source)
        for idx, f in enumerate(frames):
            S.adapt_step(state, f, frame_index=idx)
        assert M.states_equal(mini_model, reference), kind


# ---------------------------------------------------------------------------
# reset logic
# ---------------------------------------------------------------------------

def test_class_reset_spec_example(mini_benchmark, mini_model):
    # K=1 window {i-1, i}: theta0 counts (5,5), current counts (4,3)
    # -> psi = 10-7 = 3 > 1 -> reset
    cfg = S.default_config("CLASS_R_PL")
    state = S.init_adapt_state(mini_model, cfg, 1)
    state.window.append((5, 4))
    state.window.append((5, 3))
    psi = sum(a for a, _ in state.window) - sum(b for _, b in state.window)
    assert psi == 3 and psi > cfg.reset_threshold


def test_class_reset_equal_counts_no_fire(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    cfg = S.default_config("CLASS_R_PL", eta=0.0)
    state = S.init_adapt_state(mini_model, cfg, 1)
    # current model equals theta0, so per-frame counts match and psi == 0
    for idx in range(3):
        fired = S.reset_check(state, frame, idx)
        assert not fired
        assert state.diagnostics["psi"] == 0


def test_class_reset_fires_when_current_collapses(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    cfg = S.default_config("CLASS_R_PL")
    state = S.init_adapt_state(mini_model, cfg, 1)
    # collapse the current model to a constant prediction
    state.current.head.weight.data[:] = 0.0
    state.current.head.bias.data[:] = 0.0
    state.current.head.bias.data[0] = 50.0
    fired = S.reset_check(state, frame, 0)
    assert fired
    assert M.states_equal(state.current, mini_model)
    assert state.reset_count == 1


def test_oracle_reset_requires_ground_truth(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    broken = W.LabeledFrame(image=frame.image, mask=None, domain_tag=frame.domain_tag)
    state = S.init_adapt_state(mini_model, S.default_config("ORACLE_R_PL"), 1)
    with pytest.raises(S.StrategyError, match="ground truth"):
        S.reset_check(state, broken, 0)


def test_oracle_reset_keeps_strictly_better_adapted_model(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    state = S.init_adapt_state(mini_model, S.default_config("ORACLE_R_PL"), 1)
    # pretend theta0 scored 0 on this frame: psi = 0 - miou_cur <= 0
    state.theta0_reference = [(8, 0.0)]
    assert not S.reset_check(state, frame, 0)
    assert state.reset_count == 0


def test_oracle_reset_restores_on_regression(mini_benchmark, mini_model):
    frame = frame_at(mini_benchmark, 0, 0)
    state = S.init_adapt_state(mini_model, S.default_config("ORACLE_R_PL"), 1)
    state.current.head.weight.data[:] = 0.0  # strictly worse than theta0
    fired = S.reset_check(state, frame, 0)
    assert fired and M.states_equal(state.current, mini_model)


# ---------------------------------------------------------------------------
# style transfer
# ---------------------------------------------------------------------------

def test_style_match_fixed_point(mini_benchmark, mini_model):
    frame = mini_benchmark.source_memory[0]
    mem = S.SourceMemory([frame], feature_model=mini_model)
    out, idx = S.style_match(frame.image, mem, "random", rng_for(1, "x"))
    np.testing.assert_allclose(out, frame.image, atol=1e-6)


def test_style_match_transfers_channel_stats(mini_benchmark, mini_model, memory):
    content = frame_at(mini_benchmark, 0, 0, deploy=True).image
    rng = rng_for(2, "style")
    out, idx = S.style_match(content, memory, "random", rng)
    style = memory.frames[idx].image
    # compare on the unclamped transform
    raw = (content - content.mean((0, 1))) / (content.std((0, 1)) + 1e-8) \
        * style.std((0, 1)) + style.mean((0, 1))
    np.testing.assert_allclose(raw.mean((0, 1)), style.mean((0, 1)), atol=1e-6)


def test_style_nn_selects_exact_duplicate(mini_benchmark, mini_model):
    dup = mini_benchmark.source_memory[3]
    mem = S.SourceMemory(mini_benchmark.source_memory, feature_model=mini_model)
    out, idx = S.style_match(dup.image, mem, "nn", rng_for(3, "style"), feature_model=mini_model)
    assert idx == 3


def test_style_match_empty_memory_errors():
    with pytest.raises(S.StrategyError):
        S.style_match(np.zeros((4, 4, 3)), None, "random", rng_for(1, "y"))
