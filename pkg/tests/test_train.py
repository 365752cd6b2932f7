import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from warpnorm import model as M
from warpnorm import synth as S
from warpnorm import tensor as T
from warpnorm import train as TR
from warpnorm.errors import ConfigError, ContractError, TrainingAborted

TINY = TR.TrainConfig(seed=0, steps=3, batch=2, H=32, W=32, widths=(8, 8, 16),
                      style_widths=(4, 4, 4), n_heldout=2, eval_every=2, dtype="float64",
                      stpr_steps=2, free_steps=2)
nonneg = st.floats(0, 100, allow_nan=False)


# --- pixel losses -----------------------------------------------------------


def test_l1_basic():
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
    assert TR.l1_loss(x, x) == 0
    assert TR.l1_loss(np.array([0.0, 2.0]), np.array([1.0, 0.0])) == 1.5


def test_masked_l1():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 1, 3, 4, 4))
    assert TR.masked_l1(a, b, np.ones((1, 1, 4, 4))) == pytest.approx(TR.l1_loss(a, b))
    m = np.zeros((1, 1, 4, 4))
    m[..., 0, 0] = 1
    assert TR.masked_l1(a, b, m) == pytest.approx(np.abs(a - b)[..., 0, 0].mean())
    with pytest.raises(ContractError):
        TR.masked_l1(a, b, np.zeros((1, 1, 4, 4)))
    with pytest.raises(ContractError):
        TR.l1_loss(a, b[..., :3])


# --- projector losses -------------------------------------------------------


@pytest.fixture(scope="module")
def proj():
    return TR.FeatureProjector.create(7)


def test_projector_frozen(proj):
    assert all(not w.flags.writeable for w in proj.weights)
    with pytest.raises(ValueError):
        proj.weights[0][0, 0, 0, 0] = 1.0


def test_style_and_content_zero_on_identical(proj):
    x = np.random.default_rng(2).uniform(size=(2, 3, 8, 8))
    assert TR.gram_style_loss(x, x, proj) == 0
    assert TR.content_loss(x, x, proj) == 0


def test_gram_hand_oracle():
    f = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.0, 1.0], [1.0, 0.0]]])[None]
    g = TR.gram(f)[0]
    # channel dot products / (C*H*W) = /8
    assert g[0, 0] == pytest.approx(30 / 8)
    assert g[0, 1] == g[1, 0] == pytest.approx(5 / 8)
    assert g[1, 1] == pytest.approx(2 / 8)
    zero = np.zeros_like(f)
    loss, _ = TR._style_terms([f], [zero])
    assert loss == pytest.approx(((30 / 8) ** 2 + 2 * (5 / 8) ** 2 + (2 / 8) ** 2))


def test_gram_ignores_spatial_permutation():
    f = np.random.default_rng(3).standard_normal((1, 4, 5, 5))
    perm = np.random.default_rng(4).permutation(25)
    g = f.reshape(1, 4, 25)[:, :, perm].reshape(f.shape)
    assert np.allclose(TR.gram(f), TR.gram(g), atol=1e-14)


def test_content_homogeneous(proj):
    a = np.random.default_rng(5).uniform(size=(1, 3, 8, 8))
    zero = np.zeros_like(a)
    assert TR.content_loss(2 * a, zero, proj) == pytest.approx(4 * TR.content_loss(a, zero, proj))


def test_content_matches_direct_evaluation(proj):
    rng = np.random.default_rng(6)
    a, b = rng.uniform(size=(2, 1, 3, 8, 8))
    fa, fb = proj.features(a)[0], proj.features(b)[0]
    expected = sum(((x - y) ** 2).mean() for x, y in zip(fa, fb))
    assert TR.content_loss(a, b, proj) == pytest.approx(expected)
    f0 = T.relu(T.conv2d(a, T.ConvKernel(proj.weights[0], np.zeros(8))))
    assert np.array_equal(fa[0], f0)


def test_perceptual_gradients_match_differences(proj):
    rng = np.random.default_rng(8)
    a, b = rng.uniform(size=(2, 1, 3, 8, 8))
    _, _, (gs, gc, cache) = TR.perceptual_terms(a, b, proj)
    for grads, fn in ((gs, TR.gram_style_loss), (gc, TR.content_loss)):
        da = proj.backward(cache, grads)
        for idx in rng.choice(a.size, 6, replace=False):
            x = a.copy()
            x.flat[idx] += 1e-6
            fp = fn(x, b, proj)
            x.flat[idx] -= 2e-6
            fm = fn(x, b, proj)
            num = (fp - fm) / 2e-6
            assert da.flat[idx] == pytest.approx(num, rel=1e-4, abs=1e-9)


# --- adversarial ------------------------------------------------------------


@pytest.fixture(scope="module")
def critic():
    return TR.init_critic(0)


def test_critic_emits_patch_map(critic):
    score, _ = TR.critic_forward(critic, np.zeros((2, 3, 32, 32)))
    assert score.shape == (2, 1, 4, 4)


def test_generator_loss_zero_iff_scores_one():
    cp = {k: np.zeros_like(v) for k, v in TR.init_critic(0).items()}
    cp["critic.2.b"][:] = 1.0
    x = np.random.default_rng(0).uniform(size=(1, 3, 16, 16))
    assert TR.adv_loss(cp, x, x, "generator") == 0
    cp["critic.2.b"][:] = 0.9
    assert TR.adv_loss(cp, x, x, "generator") > 0


def test_critic_loss_on_equal_inputs_bounded(critic):
    x = np.random.default_rng(1).uniform(size=(2, 3, 16, 16))
    assert TR.adv_loss(critic, x, x, "critic") >= 0.5
    cp = {k: np.zeros_like(v) for k, v in critic.items()}
    cp["critic.2.b"][:] = 0.5
    assert TR.adv_loss(cp, x, x, "critic") == pytest.approx(0.5)


def test_adv_finite_and_side_checked(critic):
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 1, 3, 16, 16))
    assert math.isfinite(TR.adv_loss(critic, a, b, "critic"))
    with pytest.raises(ContractError):
        TR.adv_loss(critic, a, b, "referee")


def test_critic_input_gradient(critic):
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(1, 3, 16, 16))
    loss, dx = TR._generator_adv(critic, x)
    for idx in rng.choice(x.size, 5, replace=False):
        y = x.copy()
        y.flat[idx] += 1e-6
        fp = TR.adv_loss(critic, None, y, "generator")
        y.flat[idx] -= 2e-6
        fm = TR.adv_loss(critic, None, y, "generator")
        assert dx.flat[idx] == pytest.approx((fp - fm) / 2e-6, rel=1e-4, abs=1e-10)


# --- total loss -------------------------------------------------------------


def test_total_loss_examples():
    w = TR.LossWeights()
    assert (w.adv, w.recon, w.style, w.content) == (2.0, 5.0, 0.5, 0.0025)
    ones = dict.fromkeys(TR.TERMS, 1.0)
    assert TR.total_loss(ones, w) == pytest.approx(7.5025)
    assert TR.total_loss(dict.fromkeys(TR.TERMS, 0.0), w) == 0
    assert TR.total_loss(ones, TR.LossWeights(0, 0, 0, 0)) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(nonneg, min_size=4, max_size=4), st.lists(nonneg, min_size=4, max_size=4),
       st.sampled_from(TR.TERMS), st.floats(0, 10))
def test_total_loss_linear_in_each_term(weights, terms, name, delta):
    w = TR.LossWeights(*weights)
    t = dict(zip(TR.TERMS, terms))
    base = TR.total_loss(t, w)
    bumped = TR.total_loss({**t, name: t[name] + delta}, w)
    assert bumped - base == pytest.approx(getattr(w, name) * delta, rel=1e-9, abs=1e-9)


def test_total_loss_names_nan_term():
    with pytest.raises(TrainingAborted, match="style"):
        TR.total_loss({"recon": 1.0, "style": float("nan")})


def test_negative_weight_rejected():
    with pytest.raises(ConfigError):
        TR.LossWeights(recon=-1)


# --- Adam -------------------------------------------------------------------


def test_adam_zero_grads():
    p = {"w": np.array([1.0, -2.0])}
    p2, s = TR.adam_step(p, {"w": np.zeros(2)}, TR.OptimState())
    assert np.array_equal(p2["w"], p["w"]) and s.step == 1


def test_adam_first_step_scalar_oracle():
    lr, g, x = 1e-4, 0.3, 2.0
    p2, s = TR.adam_step({"x": np.array(x)}, {"x": np.array(g)}, TR.OptimState())
    m = (1 - 0.5) * g
    v = (1 - 0.999) * g * g
    mhat, vhat = m / (1 - 0.5), v / (1 - 0.999)
    assert float(p2["x"]) == pytest.approx(x - lr * mhat / (math.sqrt(vhat) + 1e-8), abs=1e-15)
    assert float(p2["x"]) == pytest.approx(x - lr, rel=1e-7)  # sign-like first step


def test_adam_hand_stepped_two_steps():
    st_ = TR.OptimState(lr=0.1)
    p = {"x": np.array(1.0)}
    m = v = 0.0
    x = 1.0
    for t, g in enumerate((0.5, -0.2), start=1):
        p, st_ = TR.adam_step(p, {"x": np.array(g)}, st_)
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.5 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert float(p["x"]) == pytest.approx(x, abs=1e-14)


def test_adam_deterministic_and_pure():
    rng = np.random.default_rng(0)
    p = {"a": rng.standard_normal(5)}
    g = {"a": rng.standard_normal(5)}
    s = TR.OptimState()
    r1, s1 = TR.adam_step(p, g, s)
    r2, s2 = TR.adam_step(p, g, s)
    assert np.array_equal(r1["a"], r2["a"]) and s1.step == s2.step == 1 and s.step == 0


def test_adam_lr_zero_identity():
    rng = np.random.default_rng(1)
    p = {"a": rng.standard_normal((3, 3))}
    out, _ = TR.adam_step(p, {"a": rng.standard_normal((3, 3))}, TR.OptimState(lr=0.0))
    assert np.array_equal(out["a"], p["a"])


def test_adam_rejects_bad_grads():
    p = {"a": np.zeros(2)}
    with pytest.raises(TrainingAborted):
        TR.adam_step(p, {"a": np.array([1.0, np.inf])}, TR.OptimState())
    with pytest.raises(ContractError):
        TR.adam_step(p, {"a": np.zeros(3)}, TR.OptimState())
    with pytest.raises(ContractError):
        TR.adam_step(p, {"b": np.zeros(2)}, TR.OptimState())


# --- config -----------------------------------------------------------------


def test_parse_config_round_trip():
    cfg = TR.parse_config("steps = 7\nvariant=saws  # comment\nwidths=16,32,64\n"
                          "lambda_style=0.25\nadversarial=true\n")
    assert cfg.steps == 7 and cfg.variant == "saws" and cfg.widths == (16, 32, 64)
    assert cfg.weights.style == 0.25 and cfg.weights.recon == 5.0 and cfg.adversarial
    assert TR.parse_config(TR.format_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["nosuch=1", "steps", "lambda_gan=1", "variant=FOO",
                                  "H=20", "adversarial=maybe", "widths=30,64,128"])
def test_parse_config_errors(text):
    with pytest.raises((ConfigError, ContractError, ValueError)):
        TR.parse_config(text)


def test_default_config_values():
    cfg = TR.TrainConfig()
    assert (cfg.steps, cfg.batch, cfg.H, cfg.W, cfg.widths) == (300, 4, 64, 64, (32, 64, 128))
    assert cfg.stpr_steps == 100 and not cfg.adversarial
    assert TR.OptimState().lr == 1e-4


# --- procedures -------------------------------------------------------------


def test_zero_steps_returns_initial_metrics():
    res = TR.train_pose_transfer(replace(TINY, steps=0))
    assert len(res.trace) == 1 and res.trace[0]["step"] == 0
    assert res.heldout_l1 == res.trace[0]["heldout_l1"]


def test_training_deterministic_and_projector_untouched():
    proj_before = TR.FeatureProjector.create(TINY.projector_seed, dtype="float64")
    a = TR.train_pose_transfer(TINY)
    b = TR.train_pose_transfer(TINY)
    assert a.csv() == b.csv()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    proj_after = TR.FeatureProjector.create(TINY.projector_seed, dtype="float64")
    assert all(np.array_equal(x, y) for x, y in zip(proj_before.weights, proj_after.weights))
    cols = a.csv().splitlines()[0].split(",")
    assert cols == list(TR.TRACE_COLUMNS)
    assert len(a.trace) == TINY.steps + 1


def test_adversarial_training_runs():
    res = TR.train_pose_transfer(replace(TINY, adversarial=True, steps=2))
    assert res.critic is not None and "adv" in res.trace[-1] and "critic" in res.trace[-1]


def test_divergence_aborts_with_trace():
    cfg = replace(TINY, steps=2, weights=TR.LossWeights(recon=1e6))
    with pytest.raises(TrainingAborted) as info:
        TR.train_pose_transfer(cfg)
    assert info.value.trace and info.value.trace[0]["step"] == 0


def test_finetune_reports_metrics():
    pre = TR.train_pose_transfer(TINY)
    res = TR.finetune_stpr(pre.params, TINY)
    assert set(res.before) == {"target_l1", "nontarget_l1", "heldout_l1"}
    assert len(res.trace) == TINY.stpr_steps + 1
    assert res.csv().splitlines()[0] == "metric,before,after,ratio"
    again = TR.finetune_stpr(pre.params, TINY)
    assert again.csv() == res.csv()


def test_finetune_freeze_encoders():
    pre = TR.train_pose_transfer(replace(TINY, steps=1))
    res = TR.finetune_stpr(pre.params, replace(TINY, freeze_encoders=True))
    for k in pre.params:
        frozen = k.startswith(("pose.", "style.", "block."))
        same = np.array_equal(M.cast_params(pre.params, "float64")[k], res.params[k])
        assert same == frozen or (not frozen and same is False), k


def test_self_replacement_batch_is_reconstruction():
    mcfg = TINY.model_config()
    scenes = TR.scenes_for([1, 2], TINY.scene_spec())
    b = TR._self_batch(scenes, mcfg, [1, 2])
    plain = M.make_batch(scenes, mcfg, "pose_transfer")
    assert np.array_equal(b.parts, plain.parts)
    assert all(np.all(f == 0) for f in b.pyr.flows)
    assert np.array_equal(b.target, np.concatenate([s.x_s for s in scenes]))


def test_ablation_rows_and_csv():
    rep = TR.ablate(replace(TINY, steps=1, identity_task=True))
    keys = {(r["mode"], r["task"], r["variant"]) for r in rep.rows}
    for v in ("SAN", "SAWS", "SAWN"):
        assert {("encoder", "misaligned", v), ("encoder", "identity", v),
                ("free", "generalize", v)} <= keys
    assert rep.csv().splitlines()[0] == ",".join(TR.ABLATION_COLUMNS)
    assert len(rep.csv().splitlines()) == 10


def test_identity_task_variants_tie():
    """Without misalignment the three normalisations compute the same function."""
    rep = TR.ablate(replace(TINY, steps=2, identity_task=True), free=False)
    vals = [rep.get("encoder", "identity", v) for v in ("SAN", "SAWS", "SAWN")]
    assert max(vals) - min(vals) <= 1e-12 * max(vals)
