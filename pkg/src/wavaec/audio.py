"""WAV I/O, framing/overlap-add and the STFT used by the linear canceller."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile

SAMPLE_RATE = 16000


class WavError(ValueError):
    pass


class UnsupportedFormatError(WavError):
    pass


class SampleRateError(WavError):
    pass


class ChannelCountError(WavError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.sample_rate != SAMPLE_RATE:
            raise SampleRateError(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise ChannelCountError(f"expected mono samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf")

    def __len__(self):
        return len(self.samples)

    def __array__(self, dtype=None, copy=None):
        return self.samples if dtype is None else self.samples.astype(dtype)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def read_wav(path):
    """Read a mono 16 kHz PCM16 or float32 WAV file into a Waveform."""
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as err:
        raise UnsupportedFormatError(f"{path}: {err}") from None
    if data.ndim != 1:
        raise ChannelCountError(f"{path}: expected 1 channel, found {data.shape[1]}")
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"{path}: expected {SAMPLE_RATE} Hz, found {rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: sample type {data.dtype} is not PCM16 or float32")
    return Waveform(samples)


def write_wav(path, wave, fmt="pcm16"):
    """Write a Waveform (or 1-D array) as mono 16 kHz ``pcm16`` or ``float32``."""
    if not isinstance(wave, Waveform):
        wave = Waveform(np.asarray(wave))
    x = np.asarray(wave.samples, dtype=np.float64)
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = x.astype(np.float32)
    else:
        raise UnsupportedFormatError(f"unknown output format {fmt!r}")
    scipy.io.wavfile.write(path, SAMPLE_RATE, data)


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameSpec:
    window_len: int
    hop: int

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"need 0 < hop <= window_len, got {self.hop}, {self.window_len}")

    @property
    def num_bins(self):
        return self.window_len // 2 + 1


NEURAL_FRAMES = FrameSpec(80, 40)
LINEAR_AEC_FRAMES = FrameSpec(2048, 1024)


def num_frames(n, spec):
    if n <= 0:
        raise ValueError("cannot frame an empty signal")
    if n <= spec.window_len:
        return 1
    return -(-(n - spec.window_len) // spec.hop) + 1


def frame_signal(w, spec):
    """Rectangular frames [T, window_len]; the tail is zero-padded."""
    x = np.asarray(w)
    n = len(x)
    t = num_frames(n, spec)
    padded = np.zeros((t - 1) * spec.hop + spec.window_len, dtype=x.dtype if x.dtype.kind == "f" else float)
    padded[:n] = x
    idx = np.arange(t)[:, None] * spec.hop + np.arange(spec.window_len)[None, :]
    return padded[idx]


def overlap_add(frames, spec):
    """Overlap-add frames with gain hop/window_len.

    Inverts :func:`frame_signal` wherever window_len/hop frames overlap.
    Output length is (T-1)*hop + window_len; callers truncate.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[1] != spec.window_len:
        raise ValueError(f"expected frames [T, {spec.window_len}], got {frames.shape}")
    t = frames.shape[0]
    out = np.zeros((t - 1) * spec.hop + spec.window_len, dtype=frames.dtype)
    for k in range(t):
        out[k * spec.hop:k * spec.hop + spec.window_len] += frames[k]
    return out * (spec.hop / spec.window_len)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


@dataclass
class Spectrogram:
    frames: np.ndarray  # complex [num_frames, num_bins]
    spec: FrameSpec
    length: int  # original signal length

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != self.spec.num_bins:
            raise ValueError(
                f"spectrogram needs {self.spec.num_bins} bins, got shape {self.frames.shape}"
            )


def sqrt_hann(n):
    # periodic Hann, so squared windows at 50% overlap sum to exactly 1
    return np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n))


def stft(w, spec=LINEAR_AEC_FRAMES):
    """Square-root-Hann STFT.

    The signal is padded with ``window_len - hop`` zeros on both ends so that
    every sample is covered by the full set of overlapping frames.
    """
    if spec.window_len != 2 * spec.hop:
        raise ValueError("the sqrt-Hann STFT needs 50% overlap")
    x = np.asarray(w, dtype=np.float64)
    lead = spec.window_len - spec.hop
    padded = np.concatenate([np.zeros(lead), x, np.zeros(lead)])
    frames = frame_signal(padded, spec) * sqrt_hann(spec.window_len)
    return Spectrogram(np.fft.rfft(frames, axis=1), spec, len(x))


def istft(s):
    """Weighted overlap-add inverse of :func:`stft`; returns ``s.length`` samples."""
    spec = s.spec
    frames = np.fft.irfft(s.frames, n=spec.window_len, axis=1) * sqrt_hann(spec.window_len)
    t = frames.shape[0]
    out = np.zeros((t - 1) * spec.hop + spec.window_len)
    for k in range(t):
        out[k * spec.hop:k * spec.hop + spec.window_len] += frames[k]
    lead = spec.window_len - spec.hop
    return out[lead:lead + s.length]


def spectrogram_energy(s):
    """Signal energy implied by the spectrogram (Parseval, one-sided bins)."""
    n = s.spec.window_len
    p = np.abs(s.frames) ** 2
    weights = np.full(s.spec.num_bins, 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    # each sample is seen by window_len/hop frames whose squared windows sum to 1
    return float((p * weights).sum() / n)
