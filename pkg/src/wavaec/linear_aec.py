"""Subband linear echo canceller.

Each STFT bin carries its own 4-tap complex NLMS filter over the current and
three previous reference frames.  There is no crossband coupling and no
double-talk detector: adaptation is switched by :meth:`LinearAec.freeze` /
:meth:`LinearAec.resume` or limited to an annotated echo-only preamble.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import SAMPLE_RATE, FrameSpec, Spectrogram, istft, stft

ORDER = 4


@dataclass
class LinearAecConfig:
    stft_frame_ms: float = 128.0
    step_size: float = 0.5
    # loading relative to the long-run reference power, see filter_frame
    regularizer: float = 0.1
    # adapt only while the annotated echo-only preamble lasts
    adapt_preamble_only: bool = False

    def __post_init__(self):
        if not 0 < self.step_size <= 1:
            raise ValueError(f"step_size must be in (0, 1], got {self.step_size}")
        if self.regularizer <= 0:
            raise ValueError("regularizer must be positive")

    @property
    def frame_spec(self):
        n = int(round(self.stft_frame_ms * SAMPLE_RATE / 1000))
        return FrameSpec(n, n // 2)


@dataclass
class SubbandFilterState:
    num_bins: int
    step_size: float = 0.5
    regularizer: float = 0.1
    adaptation_enabled: bool = True
    taps: np.ndarray = field(default=None)
    ref_history: np.ndarray = field(default=None)
    # running mean of |R|^2 per bin, scales the NLMS regularizer
    ref_power: np.ndarray = field(default=None)
    frames_seen: int = 0

    def __post_init__(self):
        if self.taps is None:
            self.taps = np.zeros((self.num_bins, ORDER), dtype=complex)
        if self.ref_history is None:
            self.ref_history = np.zeros((self.num_bins, ORDER), dtype=complex)
        if self.ref_power is None:
            self.ref_power = np.zeros(self.num_bins)


@dataclass
class LinearAecOutput:
    enhanced: np.ndarray
    echo_estimate: np.ndarray
    erle_db: float


def freeze_adaptation(state):
    state.adaptation_enabled = False


def resume_adaptation(state):
    state.adaptation_enabled = True


def erle_db(mixture, enhanced, region=None):
    """Echo return loss enhancement 10*log10(sum x^2 / sum e^2) in dB."""
    x = np.asarray(mixture, dtype=np.float64)
    e = np.asarray(enhanced, dtype=np.float64)
    if region is not None:
        x, e = x[region], e[region]
    num = float(np.sum(x * x))
    den = float(np.sum(e * e))
    if num == 0.0:
        return 0.0
    return 10.0 * np.log10(num / max(den, 1e-30))


def filter_frame(state, mix_bins, ref_bins, adapt):
    """Push one reference frame into the history, filter, and optionally adapt.

    The NLMS denominator is loaded with ``regularizer`` times the history
    energy expected from the running reference power of the bin plus the
    mean over all bins.  The broadband term keeps bins the reference barely
    excites (pauses, gaps between harmonics) from taking huge steps on
    whatever the mixture holds there.

    Returns (error, echo_estimate) bins for this frame.
    """
    hist = state.ref_history
    hist[:, 1:] = hist[:, :-1]
    hist[:, 0] = ref_bins
    state.frames_seen += 1
    state.ref_power += (np.abs(ref_bins) ** 2 - state.ref_power) / state.frames_seen
    echo = np.sum(state.taps * hist, axis=1)
    err = mix_bins - echo
    if adapt and state.adaptation_enabled:
        norm = np.sum(np.abs(hist) ** 2, axis=1)
        load = state.ref_power + np.mean(state.ref_power)
        reg = ORDER * state.regularizer * load + 1e-12
        state.taps += state.step_size * np.conj(hist) * (err / (norm + reg))[:, None]
    return err, echo


class LinearAec:
    """Stateful canceller for one stream.

    ``process`` may be called repeatedly; the filter carries over between
    calls, which is how an adapted-then-frozen filter is reused.
    """

    def __init__(self, config=None):
        self.config = config or LinearAecConfig()
        self.spec = self.config.frame_spec
        self.state = SubbandFilterState(
            self.spec.num_bins, self.config.step_size, self.config.regularizer
        )

    def freeze(self):
        freeze_adaptation(self.state)

    def resume(self):
        resume_adaptation(self.state)

    def process(self, mixture, reference, preamble_ms=None):
        x = np.asarray(mixture, dtype=np.float64)
        r = np.asarray(reference, dtype=np.float64)
        if x.shape != r.shape:
            raise ValueError(f"mixture and reference lengths differ: {x.shape} vs {r.shape}")
        if x.size == 0:
            raise ValueError("empty input")
        mix_spec = stft(x, self.spec)
        ref_spec = stft(r, self.spec)
        adapt_frames = len(mix_spec.frames)
        if self.config.adapt_preamble_only:
            # a frame may adapt only if it ends inside the preamble
            limit = 0 if preamble_ms is None else int(preamble_ms * SAMPLE_RATE / 1000)
            lead = self.spec.window_len - self.spec.hop
            ends = np.arange(adapt_frames) * self.spec.hop + self.spec.window_len - lead
            adapt_frames = int(np.sum(ends <= limit))
        err = np.empty_like(mix_spec.frames)
        echo = np.empty_like(mix_spec.frames)
        for t in range(len(mix_spec.frames)):
            err[t], echo[t] = filter_frame(
                self.state, mix_spec.frames[t], ref_spec.frames[t], t < adapt_frames
            )
        enhanced = istft(Spectrogram(err, self.spec, len(x)))
        echo_est = istft(Spectrogram(echo, self.spec, len(x)))
        region = None
        if preamble_ms:
            region = slice(0, min(len(x), int(preamble_ms * SAMPLE_RATE / 1000)))
        return LinearAecOutput(enhanced, echo_est, erle_db(x, enhanced, region))


def linear_aec_process(mixture, reference, config=None, preamble_ms=None):
    """Cancel the echo of ``reference`` in ``mixture`` with a fresh filter."""
    return LinearAec(config).process(mixture, reference, preamble_ms=preamble_ms)
