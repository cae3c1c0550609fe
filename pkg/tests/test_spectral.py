import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opreslab.spectral import (
    GridField, alias_of, energy_spectra, energy_spectrum, lowpass, lowpass_values,
    report_from_arrays, resample, resample_values, spectrum_report,
)


def grid(n):
    return np.arange(n) / n


def fft_peak_bin(signal):
    mag = np.abs(np.fft.rfft(signal))
    return int(np.argmax(mag))


@pytest.mark.parametrize("n,r,expected", [(20, 16, 4), (9, 16, 7), (5, 16, 5), (24, 16, 8)])
def test_alias_examples(n, r, expected):
    assert alias_of(n, r) == expected


def test_alias_nyquist_fold_matches_fft():
    # sin(2*pi*24x) vanishes on a 16-point grid, so the fold is checked with a cosine
    assert fft_peak_bin(np.cos(2 * np.pi * 24 * grid(16))) == alias_of(24, 16) == 8


def test_alias_rejects_low_rate():
    with pytest.raises(ValueError):
        alias_of(3, 1)


@settings(max_examples=200, deadline=None)
@given(r=st.integers(2, 256), data=st.data())
def test_nyquist_fixed_points(r, data):
    n = data.draw(st.integers(0, (r - 1) // 2))
    assert alias_of(n, r) == n


@pytest.mark.parametrize("r", [8, 16, 32])
def test_alias_oracle_against_fft(r):
    for n in range(0, 3 * r + 1):
        m = n % r
        if m == 0:
            # the sine vanishes on the grid; the fold is bin 0
            assert alias_of(n, r) == 0
            continue
        if 2 * m == r:
            continue
        assert fft_peak_bin(np.sin(2 * np.pi * n * grid(r))) == alias_of(n, r)


# lowpass ------------------------------------------------------------------------------

def test_lowpass_keeps_band_limited_signal():
    x = grid(128)
    f = GridField(np.sin(2 * np.pi * 3 * x))
    np.testing.assert_allclose(lowpass(f, 8).values, f.values, atol=1e-10)


def test_lowpass_removes_high_mode():
    x = grid(128)
    f = GridField(np.sin(2 * np.pi * 12 * x))
    np.testing.assert_allclose(lowpass(f, 8).values, 0.0, atol=1e-10)


def test_lowpass_mixed_against_fft_oracle():
    x = grid(128)
    u = np.sin(2 * np.pi * 3 * x) + np.sin(2 * np.pi * 12 * x)
    c = np.fft.fft(u)
    k = np.fft.fftfreq(128, 1 / 128)
    c[np.abs(k) > 8] = 0
    oracle = np.fft.ifft(c).real
    out = lowpass(GridField(u), 8).values
    np.testing.assert_allclose(out, oracle, atol=1e-10)
    np.testing.assert_allclose(out, np.sin(2 * np.pi * 3 * x), atol=1e-10)


def test_lowpass_2d_square_band(rng):
    u = rng.standard_normal((32, 32))
    out = lowpass_values(u, 5, 2)
    c = np.fft.fft2(out)
    k = np.abs(np.fft.fftfreq(32, 1 / 32))
    outside = (k[:, None] > 5) | (k[None, :] > 5)
    assert np.max(np.abs(c[outside])) < 1e-10
    inside = ~outside
    np.testing.assert_allclose(c[inside], np.fft.fft2(u)[inside], atol=1e-10)
    assert np.isrealobj(out)


def test_lowpass_limit_beyond_nyquist_fails():
    with pytest.raises(ValueError):
        lowpass(GridField(np.zeros(16)), 9)


def test_lowpass_idempotent_exact(rng):
    f = GridField(rng.standard_normal((64, 64)))
    once = lowpass(f, 8)
    twice = lowpass(once, 8)
    assert np.array_equal(once.values, twice.values)
    assert once.meta["lowpass_limit"] == 8


def test_lowpass_idempotent_numerically(rng):
    u = rng.standard_normal((4, 64))
    once = lowpass_values(u, 10, 1)
    np.testing.assert_allclose(lowpass_values(once, 10, 1), once, rtol=0, atol=1e-14)


# resample -----------------------------------------------------------------------------

@pytest.mark.parametrize("new", [2, 7, 16, 33, 256])
def test_resample_preserves_constant(new):
    out = resample(GridField(np.ones((32, 32))), new)
    np.testing.assert_allclose(out.values, 1.0, atol=1e-12)
    assert out.resolution == new


def test_resample_roundtrip_band_limited():
    x = grid(128)
    u = np.sin(2 * np.pi * 4 * x)
    down = resample_values(u, 32, 1)
    np.testing.assert_allclose(down, np.sin(2 * np.pi * 4 * grid(32)), atol=1e-10)
    np.testing.assert_allclose(resample_values(down, 128, 1), u, atol=1e-10)


def test_resample_same_resolution_is_bitwise_copy(rng):
    u = rng.standard_normal((16, 16))
    out = resample_values(u, 16, 2)
    assert np.array_equal(out, u) and out is not u


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), limit=st.integers(1, 7), up=st.sampled_from([16, 20, 32, 64]))
def test_resample_roundtrips_property(seed, limit, up):
    u = lowpass_values(np.random.default_rng(seed).standard_normal((16, 16)), limit, 2)
    # up-then-down is exact for any content at the coarse resolution
    np.testing.assert_allclose(resample_values(resample_values(u, up, 2), 16, 2), u, atol=1e-10)
    # down-then-up needs the band strictly below the coarse Nyquist
    big = resample_values(u, 64, 2)
    np.testing.assert_allclose(resample_values(resample_values(big, 16, 2), 64, 2), big, atol=1e-10)


def test_filtered_downsample_equals_stride(rng):
    u = lowpass_values(rng.standard_normal((3, 128, 128)), 8, 2)
    np.testing.assert_allclose(resample_values(u, 16, 2), u[:, ::8, ::8], atol=1e-10)
    np.testing.assert_allclose(resample_values(u, 32, 2), u[:, ::4, ::4], atol=1e-10)


# energy spectrum ----------------------------------------------------------------------

def test_spectrum_single_mode():
    e = energy_spectrum(GridField(np.sin(2 * np.pi * 5 * grid(64))))
    assert np.argmax(e) == 5
    assert np.all(np.delete(e, 5) < 1e-12 * e[5])
    assert e.size == 33


def test_spectrum_zero_field():
    assert np.all(energy_spectrum(GridField(np.zeros((16, 16)))) == 0)


@pytest.mark.parametrize("shape", [(64,), (65,), (32, 32), (17, 17)])
def test_parseval(rng, shape):
    u = rng.standard_normal(shape)
    e = energy_spectra(u, len(shape))
    direct = np.sum(u * u) / u.size
    assert abs(e.sum() - direct) <= 1e-10 * direct


def test_radial_bins_against_brute_force(rng):
    n = 12
    u = rng.standard_normal((n, n))
    c = np.fft.fft2(u) / n**2
    oracle = np.zeros(n // 2 + 1)
    for i in range(n):
        for j in range(n):
            k1 = i if i <= n // 2 else i - n
            k2 = j if j <= n // 2 else j - n
            shell = min(int(round(np.hypot(k1, k2))), n // 2)
            oracle[shell] += abs(c[i, j]) ** 2
    np.testing.assert_allclose(energy_spectra(u, 2), oracle, rtol=1e-12)


def test_spectra_consistent_across_resolutions(rng):
    u = lowpass_values(rng.standard_normal((128, 128)), 8, 2)
    e128 = energy_spectra(u, 2)
    e16 = energy_spectra(resample_values(u, 16, 2), 2)
    np.testing.assert_allclose(e16[:8], e128[:8], rtol=1e-9, atol=1e-14)


# spectrum report -----------------------------------------------------------------------

def test_report_identical_predictions(rng):
    labels = [GridField(rng.standard_normal((16, 16))) for _ in range(3)]
    rep = spectrum_report(labels, labels)
    assert np.all(rep.residual_energy == 0)
    assert rep.n_samples == 3


def test_report_residual_peak():
    x = grid(64)
    labels = [GridField(np.sin(2 * np.pi * 2 * x)), GridField(np.cos(2 * np.pi * 3 * x))]
    preds = [GridField(y.values + np.sin(2 * np.pi * 9 * x)) for y in labels]
    rep = spectrum_report(preds, labels)
    assert np.argmax(rep.residual_energy) == 9
    assert np.all(np.delete(rep.residual_energy, 9) < 1e-20)
    # label has no energy at bin 9: normalized residual is absent, not infinite
    assert np.isnan(rep.normalized_residual[9])


def test_report_two_sample_average(rng):
    preds = rng.standard_normal((2, 32))
    labels = rng.standard_normal((2, 32))
    both = report_from_arrays(preds, labels, 1)
    one = report_from_arrays(preds[:1], labels[:1], 1)
    two = report_from_arrays(preds[1:], labels[1:], 1)
    for name in ("label_energy", "pred_energy", "residual_energy"):
        np.testing.assert_allclose(getattr(both, name), 0.5 * (getattr(one, name) + getattr(two, name)), rtol=1e-12)
    np.testing.assert_allclose(both.normalized_residual, both.residual_energy / both.label_energy)


def test_report_mismatch_fails():
    with pytest.raises(ValueError):
        spectrum_report([GridField(np.zeros(8))], [])
    with pytest.raises(ValueError):
        spectrum_report([GridField(np.zeros(8))], [GridField(np.zeros(16))])


def test_report_csv_roundtrip(rng):
    rep = report_from_arrays(rng.standard_normal((2, 16)), rng.standard_normal((2, 16)), 1)
    text = rep.to_csv()
    assert text.splitlines()[0] == "mode,label_energy,pred_energy,residual_energy,normalized_residual"
    back = type(rep).from_csv(text)
    np.testing.assert_array_equal(back.residual_energy, rep.residual_energy)


def test_gridfield_validation():
    with pytest.raises(ValueError):
        GridField(np.zeros((4, 5)))
    with pytest.raises(ValueError):
        GridField(np.array([1.0, np.nan]))
    f = GridField(np.zeros((8, 8)))
    assert f.dims == 2 and f.resolution == 8


def test_energy_above_square_band(rng):
    from opreslab.spectral import energy_above, lowpass_values
    x = lowpass_values(rng.standard_normal((2, 32, 32)), 5, 2)
    assert energy_above(x, 5, 2) < 1e-28
    assert energy_above(x, 3, 2) > 0.1
    assert energy_above(np.zeros((16,)), 2, 1) == 0.0
