import numpy as np
import pytest

from debiasdiff import autodiff as ad
from debiasdiff import diffusion, invtrain, io
from debiasdiff.invtrain import InvTrainConfig, invariant_loss, train_guidance
from debiasdiff.models import Denoiser, Guidance


def _nets(rng):
    den = Denoiser(seed=1)
    for p in den.params:
        p.value = p.value + 0.2 * rng.normal(size=p.shape)
    g = Guidance(seed=2)
    for p in g.params:
        p.value = p.value + 0.2 * rng.normal(size=p.shape)
    return den, g


def _batch(rng, n=8):
    x0 = rng.normal(size=(n, 4))
    y = rng.integers(0, 2, n)
    W = ad.softmax(ad.Tensor(rng.normal(size=(n, 4)))).data
    draw = diffusion.draw_noise(rng, n, 4, 100)
    return x0, y, W, draw


def test_lambda_zero_is_erm(schedule, rng):
    den, g = _nets(rng)
    x0, y, W, draw = _batch(rng)
    out = invariant_loss(x0, y, W, g, den, schedule, 0.3, 0.0, draw=draw)
    assert float(out.loss.data) == float(out.erm.data)


def test_zero_guidance_matches_ddpm_residuals(schedule, rng):
    den, _ = _nets(rng)
    x0, y, W, draw = _batch(rng)
    out = invariant_loss(x0, y, W, Guidance(), den, schedule, 0.3, 1.0, draw=draw)
    _, resid = diffusion.ddpm_loss(den, x0, y, schedule, draw=draw)
    np.testing.assert_array_equal(out.residuals.data, resid.data)


def test_uniform_weights_give_zero_variance(schedule, rng):
    den, g = _nets(rng)
    x0, y, _, draw = _batch(rng)
    out = invariant_loss(x0, y, np.full((8, 4), 0.25), g, den, schedule, 0.3, 5.0, draw=draw)
    assert float(out.var.data) == pytest.approx(0.0, abs=1e-24)
    assert float(out.loss.data) == pytest.approx(float(out.erm.data), rel=1e-14)


def test_massless_group_is_skipped(schedule, rng):
    den, g = _nets(rng)
    x0, y, _, draw = _batch(rng)
    W = np.zeros((8, 3))
    W[:4, 0] = 1.0
    W[4:, 1] = 1.0
    out = invariant_loss(x0, y, W, g, den, schedule, 0.3, 1.0, draw=draw)
    assert out.skipped == [2]
    r = out.residuals.data
    assert float(out.var.data) == pytest.approx(((r[:4].sum() - r[4:].sum()) / (4 + invtrain.MASS_EPS) / 2) ** 2, rel=1e-12)


def test_invariant_loss_gradcheck(schedule, rng):
    den, g = _nets(rng)
    x0, y, W, draw = _batch(rng)
    res = ad.gradcheck(lambda tape: invariant_loss(x0, y, W, g, den, schedule, 0.3, 2.0, tape=tape, draw=draw).loss,
                       g.params, max_coords=300, rng=rng)
    assert res.ok, res


def test_full_variant_gradcheck(schedule, rng):
    den, g = _nets(rng)
    x0, y, W, draw = _batch(rng)
    res = ad.gradcheck(lambda tape: invariant_loss(x0, y, W, g, den, schedule, 0.5, 1.0, tape=tape, draw=draw,
                                                   train_denoiser=True).loss,
                       den.params + g.params, max_coords=200, rng=rng)
    assert res.ok, res


def test_weights_rows_must_match(schedule, rng):
    den, g = _nets(rng)
    x0, y, _, draw = _batch(rng)
    with pytest.raises(ad.ShapeError):
        invariant_loss(x0, y, np.full((7, 4), 0.25), g, den, schedule, 0.3, 1.0, draw=draw)


@pytest.mark.parametrize("kw", [{"delta": 1.2}, {"lam": -1.0}, {"w_source": "both"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        InvTrainConfig(**kw)


def test_delta_zero_leaves_guidance_untouched(pretrained, biased_data, schedule, inferred_groups):
    net, _ = pretrained
    _, ga = inferred_groups
    fresh = Guidance(seed=0).snapshot()
    g, _ = train_guidance(biased_data, net, ga.W, schedule, InvTrainConfig(delta=0.0, steps=30), io.stream(0, "t"))
    for name, value in g.snapshot().items():
        np.testing.assert_array_equal(value, fresh[name])
        np.testing.assert_array_equal(g.param(name).grad, 0.0)


def test_guidance_gradient_exactly_zero_at_delta_zero(pretrained, biased_data, schedule):
    net, _ = pretrained
    g = Guidance(seed=0)
    tape = ad.Tape()
    rng = np.random.default_rng(0)
    idx = rng.integers(0, biased_data.n, 16)
    out = invariant_loss(biased_data.samples[idx], biased_data.y[idx], np.full((16, 4), 0.25), g, net,
                         schedule, 0.0, 1.0, rng, tape=tape)
    # nothing the loss depends on is a guidance parameter, so no gradient can reach them
    assert out.loss.tape is None and tape.records == []


def test_denoiser_frozen(pretrained, biased_data, schedule, inferred_groups):
    net, _ = pretrained
    _, ga = inferred_groups
    before = io.canonical_json(net.to_doc())
    train_guidance(biased_data, net, ga.W, schedule, InvTrainConfig(steps=50), io.stream(0, "t"))
    assert io.canonical_json(net.to_doc()) == before


def test_hard_source_and_log(pretrained, biased_data, schedule, inferred_groups):
    net, _ = pretrained
    _, ga = inferred_groups
    _, log = train_guidance(biased_data, net, ga.W, schedule, InvTrainConfig(steps=120, w_source="hard"),
                            io.stream(0, "t"))
    lines = log.to_csv().splitlines()
    assert lines[0] == "step,erm,var,loss" and len(lines) == 121
    assert log.skipped_groups > 0  # tiny hardened groups are often absent from a batch


def test_assignment_size_checked(pretrained, biased_data, schedule):
    net, _ = pretrained
    with pytest.raises(ValueError):
        train_guidance(biased_data, net, np.full((10, 4), 0.25), schedule, InvTrainConfig(steps=1), io.stream(0, "t"))


def test_non_finite_loss_aborts_with_last_good(pretrained, biased_data, schedule, inferred_groups, monkeypatch):
    net, _ = pretrained
    _, ga = inferred_groups
    real = invtrain.invariant_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        if kw.get("tape") is None:  # full-dataset evaluation, not a training step
            return real(*args, **kw)
        calls["n"] += 1
        if calls["n"] > 150:
            raise ad.NumericalError("tensor contains non-finite values")
        return real(*args, **kw)

    monkeypatch.setattr(invtrain, "invariant_loss", flaky)
    with pytest.raises(invtrain.TrainingAborted) as err:
        train_guidance(biased_data, net, ga.W, schedule, InvTrainConfig(steps=300), io.stream(0, "t"))
    assert "step 150" in str(err.value)
    assert len(err.value.history.loss) == 150
    assert set(err.value.last_good) == {p.name for p in Guidance().params}


def test_default_training_halves_variance(pretrained, biased_data, schedule, inferred_groups):
    net, _ = pretrained
    _, ga = inferred_groups
    conf = InvTrainConfig()
    _, log = train_guidance(biased_data, net, ga.W, schedule, conf, io.stream(0, "invtrain"))
    assert log.var_final <= 0.5 * log.var_initial
    assert not log.unstable
