import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tempclip import tensor as tc
from tempclip.checks import perturbed, random_batch
from tempclip.data import VideoSet
from tempclip.model import VideoBatch, init_params
from tempclip.training import AdamW, StepContext, TrainConfig, _targets, check_grad_identity, contrastive_loss, \
    cosine_lr, iwr_step, l2_penalty_grad, l2_reg_step, loss_and_grad, plain_step, relative_deviation, \
    sample_alpha, total_steps, train
from tempclip.weightspace import ParamVector, param_distance


class Recorder:
    """Optimizer stand-in that keeps the gradient it was handed."""

    def step(self, theta, grad, lr):
        self.grad = grad
        return theta


def _ctx(tiny, theta, bank):
    cands = bank.class_ids
    return StepContext(tiny, bank.matrix(cands).astype(np.float32), cands, theta, Recorder())


def _batch(tiny, seed=0, n=4):
    return random_batch(tiny, n, np.random.default_rng(seed), n_classes=4)


def test_loss_is_log_k_when_all_prompts_tie(tiny, tiny_theta):
    batch = _batch(tiny)
    text = np.tile(np.eye(tiny.embed_dim)[:1], (4, 1))  # four identical prompts
    loss, _ = loss_and_grad(tiny_theta, batch, text, _targets(batch, range(4)), tiny)
    assert loss == pytest.approx(math.log(4), rel=1e-6)


def test_loss_is_a_mean_over_the_batch(tiny, tiny_theta, tiny_bank):
    one = _batch(tiny, n=1)
    many = VideoBatch(np.repeat(one.pixels, 5, axis=0), np.repeat(one.class_ids, 5))
    a = contrastive_loss(one, tiny_bank, tiny_theta, tiny)
    b = contrastive_loss(many, tiny_bank, tiny_theta, tiny)
    assert a == pytest.approx(b, rel=1e-5)


def test_sample_alpha_range_and_mean():
    rng = np.random.default_rng(0)
    draws = np.array([sample_alpha(0.6, rng) for _ in range(20000)])
    assert draws.min() > 0 and draws.max() < 0.6
    assert draws.mean() == pytest.approx(0.3, abs=0.005)
    again = [sample_alpha(0.6, np.random.default_rng(0)) for _ in range(1)]
    assert again[0] == draws[0]
    with pytest.raises(ValueError):
        sample_alpha(1.0, rng)


def test_iwr_with_zero_c_is_plain(tiny, tiny_theta, tiny_bank):
    batch = _batch(tiny)
    theta = perturbed(tiny_theta, np.random.default_rng(1))
    ctx = _ctx(tiny, tiny_theta, tiny_bank)
    plain_step(theta, batch, ctx, 1e-3)
    g_plain = ctx.optimizer.grad.to_flat()
    iwr_step(theta, batch, ctx, 1e-3, C=0.0, alpha=0.3)
    np.testing.assert_array_equal(ctx.optimizer.grad.to_flat(), g_plain)


def test_iwr_at_alpha_zero_scales_gradient(tiny, tiny_theta, tiny_bank):
    batch = _batch(tiny)
    theta = perturbed(tiny_theta, np.random.default_rng(1))
    ctx = _ctx(tiny, tiny_theta, tiny_bank)
    plain_step(theta, batch, ctx, 1e-3)
    g_plain = ctx.optimizer.grad.to_flat()
    _, report = iwr_step(theta, batch, ctx, 1e-3, C=0.5, alpha=0.0)
    np.testing.assert_allclose(ctx.optimizer.grad.to_flat(), 1.5 * g_plain, rtol=1e-5, atol=1e-7)
    assert report.reg_loss == pytest.approx(report.base_loss)


def test_beta_example(tiny, tiny_theta, tiny_bank):
    _, report = iwr_step(tiny_theta, _batch(tiny), _ctx(tiny, tiny_theta, tiny_bank), 1e-3, C=0.5, alpha=0.5)
    assert report.beta == 1.0


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.59])
def test_gradient_identity(tiny, tiny_theta, tiny_bank, alpha):
    theta = perturbed(tiny_theta, np.random.default_rng(2))
    assert check_grad_identity(theta, tiny_theta, _batch(tiny), tiny_bank, tiny, alpha, 0.5) <= 1e-9


def test_l2_with_zero_mu_is_plain(tiny, tiny_theta, tiny_bank):
    batch = _batch(tiny)
    theta = perturbed(tiny_theta, np.random.default_rng(1))
    ctx = _ctx(tiny, tiny_theta, tiny_bank)
    plain_step(theta, batch, ctx, 1e-3)
    g_plain = ctx.optimizer.grad.to_flat()
    l2_reg_step(theta, batch, ctx, 1e-3, mu=0.0)
    np.testing.assert_array_equal(ctx.optimizer.grad.to_flat(), g_plain)
    with pytest.raises(ValueError):
        l2_reg_step(theta, batch, ctx, 1e-3, mu=-1.0)


def test_l2_penalty_gradient_matches_differences(tiny):
    rng = np.random.default_rng(0)
    with tc.precision("float64"):
        clip = init_params(tiny, 0).astype(np.float64)
        theta = perturbed(clip, rng)
        g = l2_penalty_grad(theta, clip, 0.7).to_flat()
        base = clip.to_flat()
        idx = rng.choice(base.size, 20, replace=False)
        fd = tc.finite_difference_gradient(lambda f: 0.7 * float(np.sum((f - base) ** 2)), theta.to_flat(),
                                           coords=idx)
    np.testing.assert_allclose(g[idx], fd, rtol=1e-7, atol=1e-10)


def test_l2_step_adds_penalty_gradient(tiny, tiny_theta, tiny_bank):
    batch = _batch(tiny)
    theta = perturbed(tiny_theta, np.random.default_rng(1))
    ctx = _ctx(tiny, tiny_theta, tiny_bank)
    plain_step(theta, batch, ctx, 1e-3)
    g_plain = ctx.optimizer.grad.to_flat()
    _, report = l2_reg_step(theta, batch, ctx, 1e-3, mu=1e3)
    want = g_plain + 2e3 * (theta.to_flat() - tiny_theta.to_flat())
    np.testing.assert_allclose(ctx.optimizer.grad.to_flat(), want, rtol=1e-5, atol=1e-6)
    dist = param_distance(theta, tiny_theta)
    assert report.reg_loss == pytest.approx(1e3 * dist ** 2, rel=1e-5)


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(lr_init=1.0, lr_final=0.1, warmup_lr=0.0, warmup_epochs=1, epochs=2)
    spe = 10
    assert total_steps(cfg, spe) == 30
    assert cosine_lr(0, cfg, spe) == 0.0
    assert cosine_lr(5, cfg, spe) == pytest.approx(0.5)
    assert cosine_lr(10, cfg, spe) == pytest.approx(1.0)
    assert cosine_lr(29, cfg, spe) == pytest.approx(0.1)
    mid = 10 + 19 / 2
    assert cosine_lr(int(mid), cfg, spe) == pytest.approx(0.1 + 0.45 * (1 + math.cos(math.pi * 9 / 19)))


@given(st.integers(0, 200))
def test_schedule_stays_in_range(step):
    cfg = TrainConfig(lr_init=1e-3, lr_final=1e-5, warmup_lr=1e-6, warmup_epochs=2, epochs=8)
    assert 1e-6 <= cosine_lr(step, cfg, 10) <= 1e-3


@pytest.mark.parametrize("kw", [dict(R=1.0), dict(R=0.0), dict(C=-1.0), dict(lr_final=1.0), dict(batch=1),
                                dict(mode="other"), dict(epochs=-1), dict(swa_cycle=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_round_trip():
    cfg = TrainConfig(C=0.25, betas=(0.8, 0.9))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})


def _small_run(tiny, **kw):
    rng = np.random.default_rng(3)
    data = VideoSet(rng.uniform(0, 1, size=(8, 3, 8, 8, 3)).astype(np.float32), np.arange(8) % 4)
    base = dict(lr_init=3e-3, lr_final=3e-4, warmup_lr=3e-4, warmup_epochs=1, epochs=4, batch=4, swa_cycle=2,
                swa_start=2)
    return TrainConfig(**{**base, **kw}), data


def test_zero_epochs_returns_start(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny, epochs=0)
    res = train(cfg, data, tiny_theta, tiny_bank, tiny)
    assert res.theta.equal(tiny_theta) and res.reports == [] and res.swa_params.equal(tiny_theta)


def test_training_is_deterministic(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny)
    a = train(cfg, data, tiny_theta, tiny_bank, tiny)
    b = train(cfg, data, tiny_theta, tiny_bank, tiny)
    assert a.theta.equal(b.theta) and a.swa_params.equal(b.swa_params)
    c = train(cfg.replace(seed=1), data, tiny_theta, tiny_bank, tiny)
    assert not a.theta.equal(c.theta)


def test_stop_and_resume_is_seamless(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny)
    full = train(cfg, data, tiny_theta, tiny_bank, tiny)
    first = train(cfg, data, tiny_theta, tiny_bank, tiny, stop_after=5)
    rest = train(cfg, data, tiny_theta, tiny_bank, tiny, resume=first.state)
    assert rest.theta.equal(full.theta) and rest.swa_params.equal(full.swa_params)
    assert [r.alpha for r in first.reports + rest.reports] == [r.alpha for r in full.reports]


def test_loss_goes_down(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny, mode="plain", epochs=20, lr_init=1e-2, lr_final=1e-3)
    res = train(cfg, data, tiny_theta, tiny_bank, tiny)
    first = np.mean([r.base_loss for r in res.reports[:4]])
    last = np.mean([r.base_loss for r in res.reports[-4:]])
    assert last < first - 0.3


def test_swa_equals_mean_of_snapshots(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny, keep_snapshots=True)
    res = train(cfg, data, tiny_theta, tiny_bank, tiny)
    snaps = res.swa.snapshots
    assert len(snaps) == res.swa.count == 4  # steps 4, 6, 8, 10 of 10
    for n in res.theta:
        np.testing.assert_allclose(res.swa.mean[n], np.mean([s[n] for s in snaps], axis=0), rtol=1e-5, atol=1e-6)


def test_iwr_reports_alpha_and_beta(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny)
    res = train(cfg, data, tiny_theta, tiny_bank, tiny)
    for r in res.reports:
        assert 0 < r.alpha < cfg.R
        assert r.beta == pytest.approx(cfg.C / (1 - r.alpha))


def test_unknown_label_rejected(tiny, tiny_theta, tiny_bank):
    cfg, data = _small_run(tiny)
    with pytest.raises(KeyError):
        train(cfg, data, tiny_theta, tiny_bank, tiny, candidates=[0, 1])


def test_relative_deviation_floor():
    assert relative_deviation([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_deviation([1.1, 0.0], [1.0, 0.0]) == pytest.approx(0.1)
    assert relative_deviation([1.0, 1e-3], [1.0, 0.0], floor=1e-3) == pytest.approx(1.0)


def test_adamw_first_step_moves_by_lr():
    theta = ParamVector({"w": np.array([1.0, -1.0])})
    grad = ParamVector({"w": np.array([0.5, -2.0])})
    opt = AdamW()
    out = opt.step(theta, grad, 0.1)
    np.testing.assert_allclose(out["w"], [0.9, -0.9], rtol=1e-6)
