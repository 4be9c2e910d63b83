"""WAV I/O, STFT magnitude features with left-context stacking, and weighted
overlap-add resynthesis.

Analysis and synthesis both use the square root of a periodic Hann window of
400 samples (25 ms at 16 kHz) with a 160-sample hop. Bins 0..199 of the
400-point transform are kept; the Nyquist bin is dropped from the features
but returned alongside them so an exact round trip stays possible.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import atomic_write_bytes

RATE = 16000
WIN = 400
HOP = 160
N_FFT = 400
F_BINS = N_FFT // 2  # Nyquist dropped
CONTEXT = 9

WINDOW = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN) / WIN))
# overlap-add normalizers below this are treated as uncovered
_MIN_NORM = 1e-2


@dataclass
class Waveform:
    samples: np.ndarray
    rate: int = RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform has non-finite samples")
        if self.rate <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self):
        return self.samples.size


@dataclass
class Spectrogram:
    """Magnitudes ``F x T'`` of the kept bins, unit phases of the same shape,
    and the (real) Nyquist-bin values per frame."""

    magnitude: np.ndarray
    phase: np.ndarray
    nyquist: np.ndarray
    length: int

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]


@dataclass
class SpectroFrameStack:
    M_stacked: np.ndarray
    M_last: np.ndarray
    T: int
    F: int
    phase: np.ndarray | None = None


def read_wav(path) -> Waveform:
    """Mono 16-bit PCM WAV, scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise ValueError(f"{path}: expected 16-bit samples")
            rate = fh.getframerate()
            data = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not a PCM WAV file ({exc})") from exc
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def wav_bytes(w: Waveform) -> bytes:
    import io

    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.rate)
        fh.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, w: Waveform) -> None:
    atomic_write_bytes(Path(path), wav_bytes(w))


def n_frames(n_samples: int) -> int:
    if n_samples < WIN:
        raise ValueError(f"need at least {WIN} samples, got {n_samples}")
    return 1 + (n_samples - WIN) // HOP


def interior(n_samples: int) -> slice:
    """Samples away from the first and last window, where every sample is
    covered by several frames."""
    last = (n_frames(n_samples) - 1) * HOP
    return slice(WIN, max(WIN, last))


def stft(w) -> Spectrogram:
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64).ravel()
    T = n_frames(x.size)
    idx = np.arange(WIN)[None, :] + HOP * np.arange(T)[:, None]
    spec = np.fft.rfft(x[idx] * WINDOW, n=N_FFT, axis=1).T  # (N_FFT/2 + 1) x T
    kept = spec[:F_BINS]
    mag = np.abs(kept)
    phase = np.ones_like(kept)
    nz = mag > 0
    phase[nz] = kept[nz] / mag[nz]
    return Spectrogram(mag, phase, spec[F_BINS].real.copy(), x.size)


def stft_magnitude(w) -> tuple[np.ndarray, np.ndarray]:
    """``F x T'`` magnitudes and unit phases of the kept bins."""
    s = stft(w)
    return s.magnitude, s.phase


def stack_context(frames, T: int = CONTEXT, phase=None) -> SpectroFrameStack:
    """Column t holds frames t-T+1 .. t stacked top to bottom; the first
    T-1 columns repeat frame 0 as left padding."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] == 0:
        raise ValueError("need a non-empty F x T' frame matrix")
    if T < 1:
        raise ValueError("context length must be >= 1")
    F, n = frames.shape
    padded = np.concatenate([np.repeat(frames[:, :1], T - 1, axis=1), frames], axis=1)
    M = np.concatenate([padded[:, d:d + n] for d in range(T)], axis=0)
    return SpectroFrameStack(M, frames.copy(), T, F, phase)


def reconstruct_wave(S_hat, phases, length: int, nyquist=None, rate: int = RATE) -> Waveform:
    """Weighted overlap-add resynthesis of ``F x T'`` magnitudes with the
    given unit phases. The Nyquist bin is zero unless ``nyquist`` supplies it.
    Output is zero-padded or truncated to ``length`` samples."""
    S_hat = np.asarray(S_hat, dtype=np.float64)
    phases = np.asarray(phases)
    if S_hat.shape != phases.shape or S_hat.ndim != 2 or S_hat.shape[0] != F_BINS:
        raise ValueError(f"magnitudes {S_hat.shape} and phases {phases.shape} must both be {F_BINS} x T'")
    T = S_hat.shape[1]
    full = np.zeros((F_BINS + 1, T), dtype=np.complex128)
    full[:F_BINS] = S_hat * phases
    if nyquist is not None:
        nyquist = np.asarray(nyquist, dtype=np.float64)
        if nyquist.shape != (T,):
            raise ValueError("one Nyquist value per frame required")
        full[F_BINS] = nyquist
    frames = np.fft.irfft(full.T, n=N_FFT, axis=1) * WINDOW
    total = (T - 1) * HOP + WIN
    y = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        y[t * HOP:t * HOP + WIN] += frames[t]
        norm[t * HOP:t * HOP + WIN] += WINDOW**2
    y = y / np.maximum(norm, _MIN_NORM)
    out = np.zeros(length)
    n = min(length, total)
    out[:n] = y[:n]
    return Waveform(out, rate)


def features(w: Waveform, T: int = CONTEXT) -> tuple[SpectroFrameStack, Spectrogram]:
    """Stacked magnitude features of a waveform together with its STFT."""
    s = stft(w)
    return stack_context(s.magnitude, T, s.phase), s
