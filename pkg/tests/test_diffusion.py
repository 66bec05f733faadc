import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssdnf import autodiff as ad
from ssdnf import diffusion as df
from ssdnf.autodiff import Tape, Tensor
from ssdnf.autodiff.gradcheck import check_gradients


def toy_schedule(alpha, sigma):
    return df.NoiseSchedule(np.array([1.0, alpha]), np.array([0.0, sigma]))


def randomize(net, rng, scale=0.2):
    for p in net.parameters():
        p.data = (p.data + rng.normal(0, scale, p.shape)).astype(p.dtype)
    return net


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 2000), b0=st.floats(1e-5, 0.05), span=st.floats(1e-4, 0.5))
def test_schedule_invariants(T, b0, span):
    s = df.make_linear_schedule(T, b0, min(b0 + span, 0.9))
    assert np.max(np.abs(s.alpha ** 2 + s.sigma ** 2 - 1)) <= 1e-6
    assert np.all(np.diff(s.alpha) <= 0) and np.all(np.diff(s.sigma) >= 0)
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0


def test_schedule_examples():
    s = df.make_linear_schedule(1000, 1e-4, 0.02)
    assert s.T == 1000 and s.alpha[1000] < 0.1
    s1 = df.make_linear_schedule(1, 1e-4, 0.02)
    assert s1.alpha[1] == pytest.approx(np.sqrt(1 - 1e-4), rel=1e-15)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 0.1, 1.0)])
def test_schedule_rejects_bad_ranges(args):
    with pytest.raises(ValueError):
        df.make_linear_schedule(*args)


def test_ddim_grid():
    s = df.make_linear_schedule(1000)
    g = s.ddim_grid(50)
    assert g[0] == 1000 and g[-1] == 0 and len(g) == 51
    assert np.all(np.diff(g) < 0)


def test_perturb_examples():
    s = df.make_linear_schedule(10)
    x = np.array([0.3, -1.2])
    np.testing.assert_array_equal(df.perturb(x, 0, np.ones(2), s).data, x)
    np.testing.assert_allclose(df.perturb(x, 5, np.zeros(2), s).data, s.alpha[5] * x)
    with ad.precision(np.float64):
        assert df.perturb(np.array([1.0]), 1, np.array([1.0]), toy_schedule(0.8, 0.6)).item() == pytest.approx(1.4)
    with pytest.raises(ValueError):
        df.perturb(x, 11, np.zeros(2), s)


def test_v_roundtrip_hand_example():
    x, e, a, s = 2.0, 0.0, 0.6, 0.8
    x_t = a * x + s * e
    v = a * e - s * x
    assert x_t == pytest.approx(1.2) and v == pytest.approx(-1.6)
    assert df.x0_from_v(x_t, v, a, s) == pytest.approx(2.0)


@settings(max_examples=50, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 1000))
def test_v_roundtrip_and_eps_recovery(t, seed):
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, 20)
    e = rng.standard_normal(20)
    a, s = sched.alpha[t], sched.sigma[t]
    x_t = a * x + s * e
    v = a * e - s * x
    x0 = df.x0_from_v(x_t, v, a, s)
    np.testing.assert_allclose(x0, x, rtol=1e-5, atol=1e-5 * np.max(np.abs(x)))
    np.testing.assert_allclose(df.eps_from_x0(x_t, x, a, s), e, atol=1e-5)


def test_snr_weight():
    assert df.snr_weight(1, 0.37, toy_schedule(np.sqrt(0.5), np.sqrt(0.5))) == pytest.approx(1.0)
    assert df.snr_weight(1, 0.5, toy_schedule(0.8, 0.6)) == pytest.approx(4 / 3)
    with pytest.raises(ValueError):
        df.snr_weight(0, 0.5, df.make_linear_schedule(10))


@pytest.mark.parametrize("r", [4, 8, 12, 16])
def test_unet_shape_preserved(r):
    net = df.UNet(12, base=8, groups=4)
    out = net(Tensor(np.zeros((2, 12, r, r), dtype=np.float32)), np.array([3, 7]))
    assert out.shape == (2, 12, r, r)


def test_unet_rejects_odd_size():
    net = df.UNet(12, base=8, groups=4)
    with pytest.raises(ad.ShapeError):
        net(Tensor(np.zeros((1, 12, 5, 5), dtype=np.float32)), 3)


def test_fresh_unet_predicts_zero_v():
    sched = df.make_linear_schedule(100)
    net = df.UNet(6, base=8, groups=4)
    rng = np.random.default_rng(0)
    x_t = rng.standard_normal((2, 3, 2, 4, 4)).astype(np.float32)
    den = df.denoise(net, Tensor(x_t), np.array([10, 90]), sched)
    np.testing.assert_array_equal(den.v.data, 0)
    np.testing.assert_allclose(den.x0.data, sched.alpha[[10, 90]].reshape(2, 1, 1, 1, 1) * x_t, rtol=1e-6)


def test_denoise_rejects_t0():
    with pytest.raises(ValueError):
        df.denoise(df.UNet(6, base=8, groups=4), Tensor(np.zeros((1, 3, 2, 4, 4))), 0,
                   df.make_linear_schedule(10))


class OracleNet:
    """Returns the exact v for known (x, eps)."""

    def __init__(self, x, eps, sched):
        self.x, self.eps, self.sched = x, eps, sched

    def __call__(self, stacked, t):
        a = self.sched.alpha[t].reshape(-1, 1, 1, 1, 1)
        s = self.sched.sigma[t].reshape(-1, 1, 1, 1, 1)
        v = a * self.eps - s * self.x
        return Tensor(v.reshape(stacked.shape).astype(stacked.dtype))


def test_diffusion_loss_oracle_is_zero():
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(1)
    with ad.precision(np.float64):
        x = rng.uniform(-1, 1, (3, 3, 2, 4, 4))
        t, eps = df.draw_noise(rng, x.shape, sched.T)
        loss = df.diffusion_loss(OracleNet(x, eps, sched), Tensor(x), sched, t=t, eps=eps)
    assert loss.item() == pytest.approx(0.0, abs=1e-20)


def test_diffusion_loss_zero_v_zero_code():
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(2)
    with ad.precision(np.float64):
        net = df.UNet(6, base=8, groups=4)
        x = np.zeros((2, 3, 2, 4, 4))
        t, eps = df.draw_noise(rng, x.shape, sched.T)
        loss = df.diffusion_loss(net, Tensor(x), sched, omega=0.5, t=t, eps=eps).item()
    direct = []
    for i in range(2):
        a, s = sched.alpha[t[i]], sched.sigma[t[i]]
        x_t = s * eps[i]
        direct.append(0.5 * (a / s) ** 1.0 * np.sum((a * x_t) ** 2))
    assert loss == pytest.approx(np.mean(direct), rel=1e-12)


def test_diffusion_loss_permutation_invariant():
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(3)
    with ad.precision(np.float64):
        net = randomize(df.UNet(6, base=8, groups=4), rng)
        x = rng.uniform(-1, 1, (4, 3, 2, 4, 4))
        t, eps = df.draw_noise(rng, x.shape, sched.T)
        perm = np.array([2, 0, 3, 1])
        a = df.diffusion_loss(net, Tensor(x), sched, t=t, eps=eps).item()
        b = df.diffusion_loss(net, Tensor(x[perm]), sched, t=t[perm], eps=eps[perm]).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_diffusion_loss_code_gradient_fd():
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(4)
    with ad.precision(np.float64):
        net = randomize(df.UNet(3, base=8, mults=(1,), groups=4), rng)  # 2x2 planes: one level
        x = rng.uniform(-1, 1, (1, 3, 1, 2, 2))
        t = np.array([300])
        eps = rng.standard_normal(x.shape)
        errs = check_gradients(lambda c: df.diffusion_loss(net, c, sched, t=t, eps=eps), [x],
                               h=1e-5, max_entries=None)
    assert errs[0] < 1e-3


def test_diffusion_loss_param_gradient_fd():
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(5)
    with ad.precision(np.float64):
        net = randomize(df.UNet(6, base=8, groups=4), rng)
        x = rng.uniform(-1, 1, (2, 3, 2, 4, 4))
        t = np.array([100, 700])
        eps = rng.standard_normal(x.shape)
        names = [n for n in net.names() if n.endswith(".w")][::5]

        def fn(*ws):
            for n, w in zip(names, ws):
                net.params[n] = w
            return df.diffusion_loss(net, Tensor(x), sched, t=t, eps=eps)
        errs = check_gradients(fn, [net.params[n].data.copy() for n in names], h=1e-5, max_entries=6)
    assert max(errs) < 1e-3, dict(zip(names, errs))


def test_denoise_differentiable_wrt_input():
    sched = df.make_linear_schedule(1000)
    rng = np.random.default_rng(6)
    with ad.precision(np.float64):
        net = randomize(df.UNet(6, base=8, groups=4), rng)
        x_t = rng.standard_normal((1, 3, 2, 4, 4))
        errs = check_gradients(lambda z: df.denoise(net, z, 500, sched).x0, [x_t], h=1e-5, max_entries=24)
    assert errs[0] < 1e-4
