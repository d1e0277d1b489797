import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2me.errors import ShapeError
from s2me.numerics import ComplexSpectrum, Parameter, Tensor, grad_check, irfft2, precision, rfft2
from s2me.numerics.spectral import _hermitian_weights


def test_constant_image_has_only_dc():
    spectrum = rfft2(np.full((1, 1, 4, 6), 2.5)).to_complex()
    assert spectrum.shape == (1, 1, 4, 4)
    assert spectrum[0, 0, 0, 0] == pytest.approx(2.5 * 4 * 6)
    rest = spectrum.copy()
    rest[0, 0, 0, 0] = 0
    np.testing.assert_allclose(np.abs(rest), 0.0, atol=1e-4)


def test_dc_only_spectrum_inverts_to_ones():
    h, w = 4, 6
    real = np.zeros((1, 1, h, w // 2 + 1))
    real[0, 0, 0, 0] = h * w
    out = irfft2(ComplexSpectrum(Tensor(real), Tensor(np.zeros_like(real))), out_width=w).numpy()
    np.testing.assert_allclose(out, 1.0, atol=1e-6)


def test_zero_spectrum_inverts_to_zeros():
    zeros = Tensor(np.zeros((2, 3, 5, 3)))
    out = irfft2(ComplexSpectrum(zeros, zeros), out_width=5)
    assert out.shape == (2, 3, 5, 5)
    assert np.all(out.numpy() == 0.0)


@pytest.mark.parametrize("h,w", list(itertools.product(range(2, 17), repeat=2)))
def test_roundtrip_and_parseval(h, w):
    x = np.random.default_rng(h * 100 + w).normal(size=(1, 2, h, w))
    with precision(np.float64):
        spectrum = rfft2(x)
        back = irfft2(spectrum, out_width=w).numpy()
    np.testing.assert_allclose(back, x, atol=1e-4)
    power = np.abs(spectrum.to_complex()) ** 2
    parseval = (power * _hermitian_weights(w, power.shape[-1])).sum() / (h * w)
    assert parseval == pytest.approx((x ** 2).sum(), rel=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 10_000))
def test_spectrum_roundtrip_from_real_signal(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(1, 1, h, w))
    with precision(np.float64):
        s = rfft2(x)
        again = rfft2(irfft2(s, out_width=w))
    np.testing.assert_allclose(again.to_complex(), s.to_complex(), atol=1e-8)


def test_shape_errors():
    with pytest.raises(ShapeError):
        rfft2(np.ones((1, 1, 1, 4)))
    spectrum = rfft2(np.ones((1, 1, 4, 6)))
    with pytest.raises(ShapeError, match="width"):
        irfft2(spectrum, out_width=8)
    with pytest.raises(ShapeError):
        ComplexSpectrum(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 3))))


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (1, 2, 5, 6), (2, 1, 4, 7)])
def test_rfft2_gradients(shape):
    rng = np.random.default_rng(sum(shape))
    x = Parameter(rng.normal(size=shape), name="x")

    def f():
        s = rfft2(x)
        r = np.random.default_rng(1)
        return (s.real * r.normal(size=s.shape)).sum() + (s.imag * r.normal(size=s.shape)).sum()

    report = grad_check(f, [x])
    assert report.passed, report.summary()


@pytest.mark.parametrize("h,w", [(2, 2), (5, 7), (4, 6)])
def test_irfft2_gradients(h, w):
    half = w // 2 + 1
    rng = np.random.default_rng(h * w)
    real = Parameter(rng.normal(size=(1, 2, h, half)), name="real")
    imag = Parameter(rng.normal(size=(1, 2, h, half)), name="imag")

    def f():
        out = irfft2(ComplexSpectrum(real, imag), out_width=w)
        return (out * np.random.default_rng(2).normal(size=out.shape)).sum()

    report = grad_check(f, [real, imag])
    assert report.passed, report.summary()
