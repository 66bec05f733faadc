import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ssdnf import formats, metrics


def test_ntc_empty_roundtrip(tmp_path):
    formats.ntc_write(tmp_path / "e.ntc", {})
    assert formats.ntc_read(tmp_path / "e.ntc") == {}
    assert (tmp_path / "e.ntc").read_bytes() == b"NTC1\x00\x00\x00\x00"


def test_ntc_single_f32_bit_identical(tmp_path):
    a = np.array([[1.5, -0.0], [np.float32(1e-38), np.nan]], dtype=np.float32)
    formats.ntc_write(tmp_path / "a.ntc", {"a": a})
    b = formats.ntc_read(tmp_path / "a.ntc")["a"]
    assert b.dtype == np.float32 and b.shape == (2, 2)
    assert b.tobytes() == a.tobytes()


def test_ntc_layout_by_hand():
    data = formats.ntc_dumps({"xy": np.array([7], dtype=np.uint8)})
    expected = b"NTC1" + struct.pack("<I", 1) + struct.pack("<H", 2) + b"xy" + bytes([2, 1]) \
        + struct.pack("<I", 1) + bytes([7])
    assert data == expected


@settings(max_examples=40, deadline=None)
@given(arrays=st.lists(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint8]),
                                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
                       max_size=4))
def test_ntc_roundtrip_bytes(arrays):
    rec = {f"t{i}": a for i, a in enumerate(arrays)}
    blob = formats.ntc_dumps(rec)
    back = formats.ntc_loads(blob)
    assert list(back) == list(rec)
    for k in rec:
        assert back[k].dtype == rec[k].dtype and back[k].shape == rec[k].shape
        assert back[k].tobytes() == rec[k].tobytes()
    assert formats.ntc_dumps(back) == blob


def test_ntc_bad_magic():
    with pytest.raises(formats.NtcError, match="magic"):
        formats.ntc_loads(b"NTC2\x00\x00\x00\x00")


@pytest.mark.parametrize("cut", [9, 14, 20, 30])
def test_ntc_truncated_names_record(cut):
    blob = formats.ntc_dumps({"weights": np.arange(6, dtype=np.float32)})
    with pytest.raises(formats.NtcError, match="truncated record"):
        formats.ntc_loads(blob[:cut])
    if cut >= 17:
        with pytest.raises(formats.NtcError, match="weights"):
            formats.ntc_loads(blob[:cut])


def test_ntc_duplicate_names():
    one = formats.ntc_dumps({"a": np.zeros(1, np.float32)})[8:]
    blob = b"NTC1" + struct.pack("<I", 2) + one + one
    with pytest.raises(formats.NtcError, match="duplicate"):
        formats.ntc_loads(blob)


def test_ntc_rejects_unsupported_dtype():
    with pytest.raises(formats.NtcError):
        formats.ntc_dumps({"i": np.zeros(2, dtype=np.int32)})


def test_ppm_white_pixel():
    data, clamped = formats.export_ppm(np.ones((1, 1, 3)))
    assert data == b"P6\n1 1\n255\n\xff\xff\xff" and clamped == 0


def test_ppm_half_rounds_up_and_header():
    data, _ = formats.export_ppm(np.full((32, 32, 3), 0.5))
    assert data.startswith(b"P6\n32 32\n255\n")
    assert set(data[len(b"P6\n32 32\n255\n"):]) == {128}


def test_ppm_clamps_and_counts(caplog):
    img = np.array([[[-0.2, 1.7, 0.25]]])
    with caplog.at_level(logging.WARNING):
        data, clamped = formats.export_ppm(img)
    assert data[-3:] == bytes([0, 255, 64]) and clamped == 2
    assert "clamped 2" in caplog.text


def test_ppm_row_major_order():
    img = np.zeros((2, 3, 3))
    img[0, 2] = [1, 0, 0]
    img[1, 0] = [0, 0, 1]
    body = formats.export_ppm(img)[0][len(b"P6\n3 2\n255\n"):]
    assert body[6:9] == bytes([255, 0, 0]) and body[9:12] == bytes([0, 0, 255])


# -- metrics ---------------------------------------------------------------------

def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0)
    assert metrics.psnr(a, a) == metrics.PSNR_CAP
    assert metrics.psnr(a, np.ones_like(a)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        metrics.psnr(a, np.zeros((4, 3, 3)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_psnr_ssim_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert metrics.psnr(a, b) == metrics.psnr(b, a)
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    assert -1 <= metrics.ssim(a, b) <= 1


def structured(n=32):
    y, x = np.mgrid[0:n, 0:n] / n
    g = 0.5 + 0.4 * np.sin(6 * x) * np.cos(4 * y)
    return np.repeat(g[..., None], 3, axis=-1)


def test_ssim_identical_is_one():
    a = structured()
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_inverted_is_low():
    a = structured()
    assert metrics.ssim(a, 1 - a) < 0.5


def test_ssim_constant_images_luminance_only():
    m1, m2 = 0.2, 0.7
    c1 = 0.01 ** 2
    expected = (2 * m1 * m2 + c1) / (m1 ** 2 + m2 ** 2 + c1)
    got = metrics.ssim(np.full((12, 12, 3), m1), np.full((12, 12, 3), m2))
    assert got == pytest.approx(expected, rel=1e-9)


def test_ssim_matches_direct_window_evaluation():
    # one 11x11 window: SSIM equals the closed form with Gaussian-weighted moments
    rng = np.random.default_rng(0)
    a, b = rng.random((11, 11)), rng.random((11, 11))
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    ma, mb = (w * a).sum(), (w * b).sum()
    va, vb = (w * a * a).sum() - ma ** 2, (w * b * b).sum() - mb ** 2
    cov = (w * a * b).sum() - ma * mb
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ref = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    assert metrics.ssim(a, b) == pytest.approx(ref, rel=1e-10)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))
