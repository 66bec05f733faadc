import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssdnf import autodiff as ad
from ssdnf import field
from ssdnf.autodiff import Tape, Tensor
from ssdnf.autodiff.gradcheck import check_gradients


def test_tanh_map_examples():
    assert field.tanh_map(np.array(0.0), 2.0).item() == 0.0
    assert field.tanh_map(np.array(50.0), 2.0).item() == pytest.approx(2.0)
    with ad.precision(np.float64):
        assert field.tanh_map(np.array(np.arctanh(0.5)), 2.0).item() == pytest.approx(1.0, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (7,), elements=st.floats(-15, 15)))
def test_tanh_map_strictly_bounded(raw):
    out = field.tanh_map(Tensor(raw), 2.0).data
    assert np.all(np.abs(out) < 2.0)


def test_tanh_map_rejects_nonpositive_bound():
    with pytest.raises(ValueError):
        field.tanh_map(np.zeros(2), 0.0)


def _const_code(vals, c=3, r=4):
    code = np.zeros((3, c, r, r))
    for k, v in enumerate(vals):
        code[k] = v
    return code


@pytest.mark.parametrize("vals,expected", [((0, 0, 0), 0.0), ((1, 0, 0), 1.0), ((1, 2, 3), 6.0)])
def test_triplane_constant_planes(vals, expected):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, (10, 3))
    out = field.triplane_features(Tensor(_const_code(vals)), pts).data
    assert out.shape == (10, 3)
    np.testing.assert_allclose(out, expected, rtol=1e-6)


def test_triplane_projections_use_the_right_axes():
    # XY plane varies along x only; YZ plane varies along z only
    r = 5
    code = np.zeros((3, 1, r, r))
    lin = np.linspace(-1, 1, r)
    code[0, 0] = lin[None, :]          # XY plane: width axis = x
    code[2, 0] = 10 * lin[:, None]     # YZ plane: height axis = z
    pts = np.array([[0.5, -0.3, 0.25], [-1.0, 0.9, -0.5]])
    out = field.triplane_features(Tensor(code), pts).data[:, 0]
    np.testing.assert_allclose(out, pts[:, 0] + 10 * pts[:, 2], rtol=1e-6)


def test_decode_zero_weights():
    dec = field.Decoder(4, hidden=16).zero_()
    rho, c = field.decode(dec, np.ones(4), [0.0, 0.0, 1.0])
    assert rho.item() == pytest.approx(np.log(2.0), rel=1e-6)
    np.testing.assert_allclose(c.data, 0.5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_decoder_output_ranges(seed):
    rng = np.random.default_rng(seed)
    dec = field.Decoder(4, hidden=16, rng=rng)
    feat = Tensor(rng.normal(0, 5, (32, 4)).astype(np.float32))
    d = rng.normal(size=(32, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rho, c = dec(feat, d)
    assert np.all(rho.data >= 0)
    assert np.all((c.data >= 0) & (c.data <= 1))


def test_composite_zero_density_renders_background():
    dens = Tensor(np.zeros((2, 5)))
    rgb = Tensor(np.full((2, 5, 3), 0.3))
    color, w = field.composite(dens, rgb, np.full((2, 5), 0.1))
    np.testing.assert_allclose(color.data, 1.0)
    np.testing.assert_allclose(w.data, 0.0)


def test_composite_opaque_first_sample():
    dens = Tensor(np.array([[1e6, 0.5, 0.5]]))
    rgb = Tensor(np.array([[[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]]]))
    color, _ = field.composite(dens, rgb, np.full((1, 3), 0.1))
    np.testing.assert_allclose(color.data, [[1.0, 0.0, 0.0]], atol=1e-9)


def test_composite_single_segment_ln2():
    with ad.precision(np.float64):
        dens = Tensor(np.array([[np.log(2.0)]]))
        rgb = Tensor(np.zeros((1, 1, 3)))
        color, w = field.composite(dens, rgb, np.ones((1, 1)))
    assert w.data[0, 0] == pytest.approx(0.5)
    np.testing.assert_allclose(color.data, 0.5)


def test_render_ray_zero_density_is_white():
    dec = field.Decoder(2, hidden=8).zero_()
    dec.params["bd"].data[:] = -1e4  # softplus -> 0
    ray = field.Ray([0, 0, 2.5], [0, 0, -1.0], 0.5, 4.5)
    out = field.render_ray(np.zeros((3, 2, 4, 4)), dec, ray, n_samples=8).data
    np.testing.assert_allclose(out, 1.0, atol=1e-6)


def test_render_ray_opaque_red():
    dec = field.Decoder(2, hidden=8).zero_()
    dec.params["bd"].data[:] = 1e5
    dec.params["bc2"].data[:] = [50.0, -50.0, -50.0]
    ray = field.Ray([0, 0, 2.5], [0, 0, -1.0], 0.5, 4.5)
    out = field.render_ray(np.zeros((3, 2, 4, 4)), dec, ray, n_samples=8).data
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0], atol=1e-6)


def test_ray_validation():
    with pytest.raises(ValueError):
        field.Ray([0, 0, 0], [0, 0, 1.0], 2.0, 1.0)
    with pytest.raises(ValueError):
        field.Ray([0, 0, 0], [0, 0, 2.0], 0.5, 1.0)
    with pytest.raises(ValueError):
        field.sample_along(np.zeros(1), np.ones(1), 1)


def _random_setup(seed=0, b=2, n=6, c=3, r=4, dtype=np.float64):
    rng = np.random.default_rng(seed)
    code = rng.uniform(-1, 1, (b, 3, c, r, r)).astype(dtype)
    origins = rng.normal(size=(b, n, 3))
    origins = 2.5 * origins / np.linalg.norm(origins, axis=-1, keepdims=True)
    target = rng.uniform(-0.3, 0.3, (b, n, 3))
    dirs = target - origins
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return rng, code, origins, dirs


def test_transmittance_monotone_and_weights_bounded():
    with ad.precision(np.float64):
        rng, code, o, d = _random_setup(1)
        dec = field.Decoder(3, hidden=16, rng=rng, density_bias=1.0)
        color, w = field.render_rays(Tensor(code), dec, o, d, 0.5, 4.5, 16, return_weights=True)
        wsum = w.data.sum(-1)
        assert np.all(wsum >= 0) and np.all(wsum <= 1 + 1e-12)
        assert np.all((color.data >= 0) & (color.data <= 1))
        # reconstruct T_k = exp(-cumsum) from weights: T_{k+1} = T_k - w_k
        trans = 1.0 - np.concatenate([np.zeros(w.shape[:-1] + (1,)), np.cumsum(w.data, -1)[..., :-1]], -1)
        assert np.all(np.diff(trans, axis=-1) <= 1e-12)


def _loss_fixture(seed=2, n_ray_total=(100, 40)):
    rng, code, o, d = _random_setup(seed)
    batch = field.RayBatch(o, d, rng.uniform(0, 1, o.shape), np.array(n_ray_total))
    dec = field.Decoder(3, hidden=8, rng=rng)
    return code, dec, batch


def test_rendering_loss_zero_when_prediction_matches():
    with ad.precision(np.float64):
        code, dec, batch = _loss_fixture()
        pred = field.render_rays(Tensor(code), dec, batch.origins, batch.dirs, 0.5, 4.5, 4).data
        batch.targets = pred
        assert field.rendering_loss(Tensor(code), dec, batch, 4).item() == pytest.approx(0.0, abs=1e-20)


def test_rendering_loss_rescale_hand_value():
    with ad.precision(np.float64):
        code, dec, batch = _loss_fixture()
        o, d = batch.origins[:1, :1], batch.dirs[:1, :1]
        pred = field.render_rays(Tensor(code[:1]), dec, o, d, 0.5, 4.5, 4).data
        one = field.RayBatch(o, d, pred + np.array([0.1, 0, 0]), np.array([100]))
        assert field.rendering_loss(Tensor(code[:1]), dec, one, 4).item() == pytest.approx(0.5, rel=1e-9)


def test_full_batch_equals_direct_sum():
    with ad.precision(np.float64):
        code, dec, batch = _loss_fixture(n_ray_total=(6, 6))
        loss = field.rendering_loss(Tensor(code), dec, batch, 5).item()
        direct = []
        for i in range(2):
            total = 0.0
            for j in range(6):
                ray = field.Ray(batch.origins[i, j], batch.dirs[i, j], 0.5, 4.5)
                y = field.render_ray(code[i], dec, ray, 5).data
                total += 0.5 * np.sum((batch.targets[i, j] - y) ** 2)
            direct.append(total)
        assert loss == pytest.approx(np.mean(direct), rel=1e-6)


def test_rendering_loss_gradient_wrt_raw_code_fd():
    code, dec, batch = _loss_fixture(seed=4)
    raw = np.arctanh(code / 2.5)
    with ad.precision(np.float64):
        dec64 = field.Decoder(3, hidden=8, rng=np.random.default_rng(9))
        errs = check_gradients(
            lambda r: field.rendering_loss(field.tanh_map(r, 2.0), dec64, batch, 4), [raw],
            h=1e-6, max_entries=48)
    assert errs[0] < 1e-3


def test_rendering_loss_gradient_wrt_decoder_fd():
    code, _, batch = _loss_fixture(seed=5)
    with ad.precision(np.float64):
        dec = field.Decoder(3, hidden=8, rng=np.random.default_rng(3))
        names = dec.names()

        def fn(*ws):
            for k, w in zip(names, ws):
                dec.params[k] = w
            return field.rendering_loss(Tensor(code), dec, batch, 4)
        arrays_ = [dec.params[k].data.copy() for k in names]
        errs = check_gradients(fn, arrays_, h=1e-6, max_entries=16)
    assert max(errs) < 1e-3, dict(zip(names, errs))


# -- cameras -------------------------------------------------------------------

def _intr(f, w, h):
    return np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])


def test_principal_point_ray_is_optical_axis():
    rays = field.rays_for_pose(np.eye(4), _intr(4.0, 5, 5), 5, 5)
    np.testing.assert_allclose(rays.dirs[2, 2], [0, 0, -1.0], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(rays.dirs, axis=-1), 1.0, atol=1e-12)
    assert rays.dirs[0, 4, 0] > 0 and rays.dirs[0, 4, 1] > 0  # top-right pixel looks up-right


def test_rays_equivariant_under_world_rotation():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    pose = np.eye(4)
    pose[:3, 3] = [0.3, -0.2, 2.5]
    Q = np.eye(4)
    Q[:3, :3] = q
    a = field.rays_for_pose(pose, _intr(6, 8, 6), 6, 8)
    b = field.rays_for_pose(Q @ pose, _intr(6, 8, 6), 6, 8)
    np.testing.assert_allclose(b.dirs, a.dirs @ q.T, atol=1e-12)
    np.testing.assert_allclose(b.origins, a.origins @ q.T, atol=1e-12)


def test_degenerate_intrinsics_rejected():
    with pytest.raises(ValueError):
        field.rays_for_pose(np.eye(4), _intr(0.0, 4, 4), 4, 4)


def test_clip_to_cube_miss_has_zero_length():
    o = np.array([[0.0, 5.0, 2.5]])
    d = np.array([[0.0, 0.0, -1.0]])
    t0, t1 = field.clip_to_cube(o, d, 0.5, 4.5)
    assert t0[0] == t1[0]
    o = np.array([[0.0, 0.0, 2.5]])
    t0, t1 = field.clip_to_cube(o, d, 0.5, 4.5)
    np.testing.assert_allclose([t0[0], t1[0]], [1.5, 3.5])
