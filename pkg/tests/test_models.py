import numpy as np
import pytest

from debiasdiff import autodiff as ad
from debiasdiff import io
from debiasdiff.autodiff import Tensor
from debiasdiff.models import (GUIDANCE_WIDTHS, NULL, Denoiser, Guidance, effective_noise,
                               guidance_param_count, time_embedding)


def _batch(r, n=6, d=4):
    return r.normal(size=(n, d)), r.integers(1, 101, size=n), r.integers(0, 2, size=n)


def test_fresh_denoiser_outputs_zero(rng):
    x, t, y = _batch(rng)
    np.testing.assert_array_equal(Denoiser(seed=3)(x, t, y), 0.0)


def test_fresh_guidance_outputs_zero(rng):
    x, t, y = _batch(rng)
    np.testing.assert_array_equal(Guidance(seed=3)(x, t, y), 0.0)


def _perturbed(net, r, scale=0.3):
    for p in net.params:
        p.value = p.value + scale * r.normal(size=p.shape)
    return net


def test_deterministic_and_shape(rng):
    net = _perturbed(Denoiser(seed=1), rng)
    x, t, y = _batch(rng)
    a = net(x, t, y)
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, net(x.copy(), t.copy(), y.copy()))


def test_timestep_range(rng):
    net = Denoiser()
    x, _, y = _batch(rng, 2)
    with pytest.raises(ValueError):
        net(x, np.array([0, 5]), y)
    with pytest.raises(ValueError):
        net(x, np.array([5, 101]), y)


def test_null_label_accepted_guidance_rejects_it(rng):
    x, t, _ = _batch(rng, 3)
    Denoiser()(x, t, NULL)
    with pytest.raises(ValueError):
        Guidance()(x, t, NULL)


def test_time_embedding_range_and_injective():
    e = time_embedding(np.arange(1, 101), 100)
    assert e.shape == (100, 16)
    assert np.all(np.abs(e) <= 1.0)
    d = np.sqrt(((e[:, None] - e[None]) ** 2).sum(-1))
    assert np.all(d[~np.eye(100, dtype=bool)] > 1e-6)


def test_guidance_param_counts_ordered():
    counts = [guidance_param_count(w) for w in sorted(GUIDANCE_WIDTHS)]
    assert counts == sorted(set(counts))
    for w in GUIDANCE_WIDTHS:
        assert Guidance(width=w).n_params == guidance_param_count(w)


@pytest.mark.parametrize("cls", [Denoiser, Guidance])
def test_output_gradients(cls, rng):
    net = _perturbed(cls(seed=2), rng)
    x, t, y = _batch(rng, 5)
    w = rng.normal(size=(5, 4))

    def loss(tape):
        return ad.sum(ad.mul(net.predict(x, t, y, tape=tape), Tensor(w)))

    res = ad.gradcheck(loss, net.params, max_coords=200, rng=rng)
    assert res.ok, res


def test_input_gradient(rng):
    net = _perturbed(Denoiser(seed=2), rng)
    x, t, y = _batch(rng, 3)
    tape = ad.Tape()
    xt = tape.input(x)
    tape.backward(ad.sum(net.predict(xt, t, y, tape=tape)))
    h = 1e-6
    num = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        num[i] = (net(up, t, y).sum() - net(down, t, y).sum()) / (2 * h)
    np.testing.assert_allclose(xt.grad, num, atol=1e-6)


def test_effective_noise_identities(rng):
    den = _perturbed(Denoiser(seed=4), rng)
    g = _perturbed(Guidance(seed=5), rng)
    x, t, _ = _batch(rng, 4)
    y = 1
    base = den(x, t, y)
    np.testing.assert_array_equal(effective_noise(den, g, x, t, y, 0.0, 0.0), base)
    np.testing.assert_allclose(effective_noise(den, g, x, t, y, 0.4, 0.0), base - 0.4 * g(x, t, y), rtol=0, atol=1e-14)
    e0, e1, e2 = (effective_noise(den, g, x, t, y, 0.3, w) for w in (0.0, 1.0, 2.0))
    np.testing.assert_allclose(e2 - e1, e1 - e0, atol=1e-12)


def test_delta_zero_ignores_guidance(rng):
    den = _perturbed(Denoiser(seed=4), rng)
    x, t, _ = _batch(rng, 4)
    a = effective_noise(den, _perturbed(Guidance(seed=1), rng), x, t, 0, 0.0, 1.5)
    b = effective_noise(den, None, x, t, 0, 0.0, 1.5)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("delta,w", [(1.5, 0.0), (-0.1, 0.0), (0.3, -1.0)])
def test_effective_noise_ranges(delta, w, rng):
    x, t, _ = _batch(rng, 2)
    with pytest.raises(ValueError):
        effective_noise(Denoiser(), Guidance(), x, t, 0, delta, w)


@pytest.mark.parametrize("cls", [Denoiser, Guidance])
def test_checkpoint_round_trip(cls, tmp_path, rng):
    net = _perturbed(cls(seed=9), rng)
    net.save(tmp_path / "c.json")
    back = cls.load(tmp_path / "c.json")
    for a, b in zip(net.params, back.params):
        assert a.name == b.name
        np.testing.assert_array_equal(a.value, b.value)


def test_checkpoint_kind_checked(tmp_path):
    Guidance().save(tmp_path / "g.json")
    with pytest.raises(io.ArtifactError):
        Denoiser.load(tmp_path / "g.json")
