"""Training objectives and enhancement metrics.

``sisnr`` and friends accept numpy arrays (returning floats) or Tensors
(returning Tensors that carry gradients back to the estimate).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConformerBlock, Linear, Module
from .tensor import Tensor, checkpoint, no_grad, ops, use_dtype

SAMPLE_RATE = 16000
EPS = 1e-8


def _is_tensor(*xs):
    return any(isinstance(x, Tensor) for x in xs)


def sisnr(target, estimate, eps=EPS):
    """Scale-invariant SNR in dB along the last axis.

    The target is rescaled by the least-squares gain
    ``alpha = <s, s_hat> / ||s||^2`` before the ratio is taken.
    """
    tensor_out = _is_tensor(target, estimate)
    if not tensor_out:
        target = np.asarray(target, dtype=np.float64)
        estimate = np.asarray(estimate, dtype=np.float64)
    if target.shape != estimate.shape:
        raise ValueError(f"target {target.shape} and estimate {estimate.shape} differ in length")
    if tensor_out:
        # a plain array operand follows the Tensor's dtype instead of the default
        if not isinstance(target, Tensor):
            target = Tensor(np.asarray(target), dtype=estimate.dtype)
        if not isinstance(estimate, Tensor):
            estimate = Tensor(np.asarray(estimate), dtype=target.dtype)
    s_data = target.data if isinstance(target, Tensor) else target
    if np.any(np.sum(np.asarray(s_data, dtype=np.float64) ** 2, axis=-1) == 0):
        raise ValueError("SISNR is undefined for an all-zero target")
    if not tensor_out:
        alpha = np.sum(target * estimate, axis=-1, keepdims=True) / np.sum(
            target * target, axis=-1, keepdims=True)
        proj = alpha * target
        num = np.sum(proj * proj, axis=-1) + eps
        den = np.sum((proj - estimate) ** 2, axis=-1) + eps
        out = 10.0 * np.log10(num / den)
        return float(out) if out.ndim == 0 else out
    alpha = ops.div(ops.sum(ops.mul(target, estimate), axis=-1, keepdims=True),
                    ops.sum(ops.mul(target, target), axis=-1, keepdims=True))
    proj = ops.mul(alpha, target)
    resid = ops.sub(proj, estimate)
    num = ops.add(ops.sum(ops.mul(proj, proj), axis=-1), eps)
    den = ops.add(ops.sum(ops.mul(resid, resid), axis=-1), eps)
    return ops.mul(ops.log10(ops.div(num, den)), 10.0)


def optimal_scale(target, estimate):
    """Closed-form minimiser of ||alpha * s - s_hat||^2."""
    s = np.asarray(target, dtype=np.float64)
    return float(np.dot(s, np.asarray(estimate, dtype=np.float64)) / np.dot(s, s))


def sisnr_improvement(mixture, enhanced, target):
    return sisnr(target, enhanced) - sisnr(target, mixture)


# ---------------------------------------------------------------------------
# Logmel frontend
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogmelFrontendConfig:
    num_mels: int = 128
    frame_ms: float = 32.0
    hop_ms: float = 10.0
    stack: int = 4
    subsample: int = 3
    fft_size: int = 512
    mel_low_hz: float = 125.0
    mel_high_hz: float = 7500.0
    log_floor: float = 1e-3

    @property
    def frame_len(self):
        return int(round(self.frame_ms * SAMPLE_RATE / 1000))

    @property
    def hop(self):
        return int(round(self.hop_ms * SAMPLE_RATE / 1000))

    @property
    def output_dim(self):
        return self.num_mels * self.stack


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_filterbank(cfg):
    """HTK-style triangular filters [fft_size//2 + 1, num_mels], DC excluded."""
    n_bins = cfg.fft_size // 2 + 1
    freqs = np.arange(n_bins) * SAMPLE_RATE / cfg.fft_size
    bin_mel = _hz_to_mel(freqs)
    edges = np.linspace(_hz_to_mel(cfg.mel_low_hz), _hz_to_mel(cfg.mel_high_hz), cfg.num_mels + 2)
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (bin_mel[:, None] - lower) / (center - lower)
    down = (upper - bin_mel[:, None]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb[0] = 0.0
    return fb


class LogmelFrontend(Module):
    """Waveform -> stacked, subsampled log-mel features [..., K, 512].

    Fixed DFT/mel matrices only: no trainable parameters, but the whole
    path is differentiable with respect to the input samples.  Each output
    frame stacks the current 10 ms frame with the three before it (missing
    history reads as the log floor) and every third stacked frame is kept.
    """

    def __init__(self, config=None):
        self.config = cfg = config or LogmelFrontendConfig()
        n = cfg.frame_len
        k = np.arange(cfg.fft_size // 2 + 1)
        t = np.arange(n)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * t / n)
        angle = 2 * np.pi * np.outer(t, k) / cfg.fft_size
        self._cos = window[:, None] * np.cos(angle)
        self._sin = window[:, None] * np.sin(angle)
        self._mel = mel_filterbank(cfg)

    def num_output_frames(self, num_samples):
        n = ops.num_frames(num_samples, self.config.frame_len, self.config.hop)
        return -(-n // self.config.subsample)

    def __call__(self, wave):
        cfg = self.config
        x = wave if isinstance(wave, Tensor) else Tensor(np.asarray(wave))
        if x.shape[-1] < cfg.frame_len:
            raise ValueError(
                f"logmel frontend needs at least {cfg.frame_len} samples, got {x.shape[-1]}")
        dt = x.dtype
        frames = ops.frame(x, cfg.frame_len, cfg.hop)
        re = ops.matmul(frames, self._cos.astype(dt))
        im = ops.matmul(frames, self._sin.astype(dt))
        power = ops.add(ops.mul(re, re), ops.mul(im, im))
        mel = ops.matmul(power, self._mel.astype(dt))
        logmel = ops.log(ops.maximum(mel, cfg.log_floor))
        lead = logmel.shape[:-2]
        n = logmel.shape[-2]
        history = np.full(lead + (cfg.stack - 1, cfg.num_mels), np.log(cfg.log_floor), dtype=dt)
        padded = ops.concat([history, logmel], axis=-2)
        stacked = ops.concat(
            [padded[..., j:j + n, :] for j in range(cfg.stack)], axis=-1)
        return stacked[..., ::cfg.subsample, :]


# ---------------------------------------------------------------------------
# Frozen proxy ASR encoder
# ---------------------------------------------------------------------------

PROXY_SEED = 20220607


class ProxyAsrEncoder(Module):
    """Frozen random causal conformer standing in for a pretrained ASR encoder.

    Input [..., K, 512] stacked log-mel, output [..., K, width] scaled by
    ``output_scale``.  Parameters never require gradients; inputs still
    receive them.
    """

    def __init__(self, input_dim=512, width=64, num_layers=2, heads=4,
                 left_context=31, kernel=15, output_scale=1e-3, seed=PROXY_SEED,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        with use_dtype(dtype):
            self.input_projection = Linear(rng, input_dim, width)
            self.layers = [
                ConformerBlock(rng, width, heads, left_context, kernel) for _ in range(num_layers)
            ]
        self.output_scale = output_scale
        self.freeze()

    def __call__(self, features):
        h = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
        lead = h.shape[:-2]
        h = self.input_projection(h)
        if h.ndim == 2:
            h = ops.reshape(h, (1,) + h.shape)
        elif h.ndim > 3:
            h = ops.reshape(h, (-1,) + h.shape[-2:])
        for layer in self.layers:
            h = layer(h)
        h = ops.mul(h, self.output_scale)
        return ops.reshape(h, lead + h.shape[-2:])

    def digest(self):
        return checkpoint.digest(self.state_dict())


# ---------------------------------------------------------------------------
# ASR and total losses
# ---------------------------------------------------------------------------


def asr_loss(target, predicted, encoder, frontend=None, reduction="sum"):
    """Squared L2 distance between encoder outputs on target and predicted
    features, summed over frames (``reduction="mean"`` divides by the
    number of frames).  No gradient reaches ``target``."""
    frontend = frontend or LogmelFrontend()
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    pred = predicted if isinstance(predicted, Tensor) else Tensor(np.asarray(predicted))
    if target_data.shape != pred.shape:
        raise ValueError(f"target {target_data.shape} and predicted {pred.shape} differ in length")
    with no_grad():
        # kept as a Tensor so a float64 graph is not cast down to the default dtype
        ref = Tensor(encoder(frontend(Tensor(target_data.astype(pred.dtype)))).data)
    diff = ops.sub(encoder(frontend(pred)), ref)
    per_frame = ops.sum(ops.mul(diff, diff), axis=-1)
    if reduction == "sum":
        return ops.sum(per_frame, axis=-1)
    if reduction == "mean":
        return ops.mean(per_frame, axis=-1)
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossWeights:
    lam: float = 5e4

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"ASR loss weight must be finite and >= 0, got {self.lam}")


@dataclass
class LossTerms:
    total: Tensor
    neg_sisnr: Tensor
    asr: Tensor

    def values(self):
        return {
            "total": float(np.mean(self.total.data)),
            "neg_sisnr": float(np.mean(self.neg_sisnr.data)),
            "asr": float(np.mean(self.asr.data)),
        }


def total_loss(target, estimate, weights=None, encoder=None, frontend=None,
               reduction="sum"):
    """-SISNR(s, s_hat) + lambda * L_ASR.

    With ``lambda == 0`` the ASR term is still evaluated for logging but is
    kept out of the graph, so no gradient flows through the encoder.
    """
    weights = weights or LossWeights()
    neg = ops.neg(sisnr(target, estimate))
    if encoder is None:
        asr = Tensor(np.zeros_like(neg.data))
        return LossTerms(neg, neg, asr)
    if weights.lam == 0:
        with no_grad():
            asr = asr_loss(target, estimate.detach() if isinstance(estimate, Tensor) else estimate,
                           encoder, frontend, reduction)
        return LossTerms(neg, neg, asr)
    asr = asr_loss(target, estimate, encoder, frontend, reduction)
    return LossTerms(ops.add(neg, ops.mul(asr, weights.lam)), neg, asr)
