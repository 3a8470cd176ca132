import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ad2bench.imaging import (
    IDENTITY, DecodeError, Frame, Kernel2D, convolve, decode_ppm, encode_ppm, gaussian_kernel,
    laplacian, load_ppm, quantize, save_ppm,
)

frames = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12), st.just(3)))


def test_frame_invariants():
    with pytest.raises(ValueError):
        Frame(np.zeros((4, 4), dtype=np.uint8))
    f = Frame(np.zeros((2, 5, 3), dtype=np.uint8))
    assert (f.width, f.height) == (5, 2)


def test_ppm_two_pixel_roundtrip(tmp_path):
    f = Frame(np.array([[[255, 0, 0], [0, 255, 0]]], dtype=np.uint8))
    p = tmp_path / "a.ppm"
    save_ppm(f, p)
    raw = p.read_bytes()
    assert raw[:-6] == b"P6\n2 1\n255\n"
    assert raw[-6:] == bytes([255, 0, 0, 0, 255, 0])
    assert load_ppm(p) == f


def test_ppm_zero_frame(tmp_path):
    p = tmp_path / "z.ppm"
    save_ppm(Frame(np.zeros((8, 8, 3), dtype=np.uint8)), p)
    raw = p.read_bytes()
    assert raw.endswith(bytes(192)) and len(raw) == len(b"P6\n8 8\n255\n") + 192


@pytest.mark.parametrize("buf, where", [
    (b"", "offset 0"),
    (b"P5\n1 1\n255\nabc", "offset 0"),
    (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
    (b"P6\n2 2\n255\n" + bytes(5), "offset 16"),
    (b"P6\nx 1\n255\n", "offset 3"),
])
def test_ppm_decode_errors(buf, where):
    with pytest.raises(DecodeError, match=where):
        decode_ppm(buf)


def test_ppm_header_comments():
    assert decode_ppm(b"P6\n# hi\n1 1\n255\n\x01\x02\x03").data.tolist() == [[[1, 2, 3]]]


@settings(max_examples=200, deadline=None)
@given(frames)
def test_ppm_roundtrip_property(arr):
    f = Frame(arr)
    assert encode_ppm(decode_ppm(encode_ppm(f))) == encode_ppm(f)
    assert decode_ppm(encode_ppm(f)) == f


@settings(max_examples=100, deadline=None)
@given(frames)
def test_identity_convolution_exact(arr):
    assert np.array_equal(quantize(convolve(Frame(arr), IDENTITY)).data, arr)


def test_box_on_constant_and_hand_case():
    box = Kernel2D(np.full((3, 3), 1 / 9))
    c = Frame(np.full((5, 6, 3), 77, dtype=np.uint8))
    assert np.allclose(convolve(c, box), 77.0)
    img = np.array([[1, 2, 3], [4, 5, 6], [7, 8, 10]], dtype=float)
    # scalar loop oracle for the centre pixel
    acc = 0.0
    for r in range(3):
        for q in range(3):
            acc += img[r, q]
    assert convolve(img, box)[1, 1] == pytest.approx(acc / 9, abs=1e-12)


def test_convolve_replicates_border():
    img = np.zeros((3, 3))
    img[0, 0] = 9.0
    box = Kernel2D(np.full((3, 3), 1 / 9))
    # corner window sees the replicated 9 four times
    assert convolve(img, box)[0, 0] == pytest.approx(4.0)


def test_convolve_kernel_too_large():
    with pytest.raises(ValueError):
        convolve(np.zeros((4, 8)), gaussian_kernel(1.0, 5))


def test_kernel_size_must_be_odd():
    with pytest.raises(ValueError):
        Kernel2D(np.ones((2, 2)))


def test_laplacian_examples():
    assert not np.any(laplacian(Frame(np.full((6, 6, 3), 200, dtype=np.uint8))))
    ramp = np.tile(np.arange(8, dtype=float), (5, 1))
    assert np.allclose(laplacian(ramp)[1:-1, 1:-1], 0.0)
    spot = np.zeros((5, 5))
    spot[2, 2] = 7.0
    lap = laplacian(spot)
    assert lap[2, 2] == -28.0
    assert [lap[1, 2], lap[3, 2], lap[2, 1], lap[2, 3]] == [7.0] * 4
    with pytest.raises(ValueError):
        laplacian(np.zeros((2, 5)))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 50.0), st.sampled_from([1, 3, 5, 7, 13]))
def test_gaussian_kernel_properties(sigma, size):
    k = gaussian_kernel(sigma, size)
    assert abs(k.weights.sum() - 1.0) < 1e-9
    assert k.weights[size // 2, size // 2] == k.weights.max()
    assert np.allclose(k.weights, k.weights.T, atol=1e-12)


def test_gaussian_kernel_wide_limit_and_errors():
    assert np.allclose(gaussian_kernel(100.0, 3).weights, 1 / 9, atol=1e-3)
    with pytest.raises(ValueError):
        gaussian_kernel(0.0, 3)
    with pytest.raises(ValueError):
        gaussian_kernel(1.0, 4)


def test_quantize_rounds_half_up_and_clamps():
    q = quantize(np.array([[[0.5, 254.5, 300.0]], [[-3.0, 1.49, 2.5]]]))
    assert q.data.tolist() == [[[1, 255, 255]], [[0, 1, 3]]]
