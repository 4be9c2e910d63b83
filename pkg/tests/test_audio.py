import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepunfold.audio import (
    F_BINS,
    HOP,
    RATE,
    WIN,
    WINDOW,
    Waveform,
    features,
    interior,
    n_frames,
    read_wav,
    reconstruct_wave,
    stack_context,
    stft,
    stft_magnitude,
    write_wav,
)
from oracles import rel_err


def roundtrip_error(x):
    s = stft(x)
    y = reconstruct_wave(s.magnitude, s.phase, s.length, s.nyquist).samples
    keep = interior(x.size)
    return rel_err(y[keep], x[keep])


def test_single_frame():
    mag, phase = stft_magnitude(np.ones(400))
    assert mag.shape == (200, 1) and phase.shape == (200, 1)


@given(st.integers(400, 5000))
def test_frame_count(n):
    assert n_frames(n) == 1 + (n - 400) // 160
    assert stft(np.zeros(n)).n_frames == n_frames(n)


def test_too_short():
    with pytest.raises(ValueError):
        stft(np.zeros(399))


def test_sine_peaks_at_bin_25():
    t = np.arange(RATE) / RATE
    mag, _ = stft_magnitude(np.sin(2 * np.pi * 1000 * t))
    assert np.all(mag.argmax(axis=0) == 25)


def test_zero_input():
    mag, phase = stft_magnitude(np.zeros(2000))
    assert not mag.any()
    np.testing.assert_array_equal(np.abs(phase), 1.0)


def test_window_is_sqrt_periodic_hann():
    n = np.arange(WIN)
    np.testing.assert_allclose(WINDOW**2, 0.5 - 0.5 * np.cos(2 * np.pi * n / WIN), atol=1e-15)


def test_interior_is_covered():
    n = 16000
    norm = np.zeros((n_frames(n) - 1) * HOP + WIN)
    for t in range(n_frames(n)):
        norm[t * HOP:t * HOP + WIN] += WINDOW**2
    assert norm[interior(n)].min() > 0.5


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(800, 8000))
def test_roundtrip_random(seed, n):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    assert roundtrip_error(x) < 1e-6


@pytest.mark.parametrize("freq", [50.0, 440.0, 1000.0, 3999.0, 7777.0])
def test_roundtrip_sine(freq):
    t = np.arange(3 * RATE) / RATE
    assert roundtrip_error(0.5 * np.sin(2 * np.pi * freq * t + 0.3)) < 1e-6


def test_zero_nyquist_roundtrip_on_band_limited_signal():
    t = np.arange(RATE) / RATE
    x = np.sin(2 * np.pi * 440 * t) + 0.3 * np.sin(2 * np.pi * 2000 * t)
    s = stft(x)
    y = reconstruct_wave(s.magnitude, s.phase, s.length).samples
    keep = interior(x.size)
    # only window leakage reaches the dropped Nyquist bin
    assert rel_err(y[keep], x[keep]) < 1e-4


def test_zero_magnitudes_give_silence():
    y = reconstruct_wave(np.zeros((F_BINS, 20)), np.ones((F_BINS, 20)), 5000)
    assert y.samples.shape == (5000,) and not y.samples.any()


def test_reconstruct_shape_errors():
    with pytest.raises(ValueError):
        reconstruct_wave(np.zeros((F_BINS, 3)), np.ones((F_BINS, 4)), 1000)
    with pytest.raises(ValueError):
        reconstruct_wave(np.zeros((10, 3)), np.ones((10, 3)), 1000)


def test_reconstruct_pads_and_truncates():
    x = np.random.default_rng(1).standard_normal(1000)
    s = stft(x)
    assert len(reconstruct_wave(s.magnitude, s.phase, 1500)) == 1500
    assert len(reconstruct_wave(s.magnitude, s.phase, 500)) == 500


def test_stack_layout():
    rng = np.random.default_rng(2)
    frames = rng.uniform(0, 1, (5, 12))
    T = 4
    st_ = stack_context(frames, T)
    assert st_.M_stacked.shape == (20, 12)
    np.testing.assert_array_equal(st_.M_stacked[(T - 1) * 5:], frames)
    np.testing.assert_array_equal(st_.M_last, frames)
    for t in range(12):
        for d in range(T):
            src = max(t - (T - 1) + d, 0)
            np.testing.assert_array_equal(st_.M_stacked[d * 5:(d + 1) * 5, t], frames[:, src])


def test_stack_degenerate_cases():
    frames = np.random.default_rng(3).uniform(0, 1, (4, 6))
    np.testing.assert_array_equal(stack_context(frames, 1).M_stacked, frames)
    const = np.repeat(frames[:, :1], 6, axis=1)
    M = stack_context(const, 3).M_stacked
    assert np.all(M == M[:, :1])
    with pytest.raises(ValueError):
        stack_context(np.zeros((4, 0)))


def test_features_identity_mask_gives_mixture():
    x = np.random.default_rng(4).uniform(-0.5, 0.5, 6000)
    stack, spec = features(Waveform(x))
    assert stack.M_stacked.shape == (9 * F_BINS, spec.n_frames)
    y = reconstruct_wave(stack.M_last * 1.0, spec.phase, spec.length, spec.nyquist).samples
    keep = interior(x.size)
    assert rel_err(y[keep], x[keep]) < 1e-6


def test_wav_roundtrip(tmp_path):
    x = np.round(np.random.default_rng(5).uniform(-0.9, 0.9, 1234) * 32768) / 32768
    write_wav(tmp_path / "a.wav", Waveform(x, RATE))
    w = read_wav(tmp_path / "a.wav")
    assert w.rate == RATE
    np.testing.assert_array_equal(w.samples, x)


def test_read_wav_rejects_garbage(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"not a wave file at all")
    with pytest.raises(ValueError):
        read_wav(p)


def test_waveform_rejects_nonfinite():
    with pytest.raises(ValueError):
        Waveform([0.0, np.nan])
