"""Waveform-domain masking AEC with a causal conformer mask estimator.

    mixture frames --enc--\\
                           concat -> proj -> conformer x N -> sigmoid mask
    reference frames -enc-/                                        |
    mixture features * mask -> linear decoder -> tanh -> overlap-add
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .tensor import Tensor, checkpoint, no_grad, ops, use_dtype
from .nn import ConformerBlock, Linear, Module

CONFIG_FORMAT = "wavaec-model"
CONFIG_VERSION = 1
SAMPLE_RATE = 16000


@dataclass
class AecModelConfig:
    window_len: int = 80
    hop: int = 40
    feature_dim: int = 128
    num_layers: int = 4
    conv_kernel: int = 15
    attn_heads: int = 8
    attn_left_context: int = 31
    ffn_expansion: int = 4
    seed: int = 0
    # test-only ablation: attention and convolutions also see future frames
    causal: bool = True

    def __post_init__(self):
        for f in ("window_len", "hop", "feature_dim", "num_layers", "conv_kernel",
                  "attn_heads", "ffn_expansion"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.attn_left_context < 0:
            raise ValueError("attn_left_context must be >= 0")
        if self.feature_dim % self.attn_heads:
            raise ValueError("feature_dim must be divisible by attn_heads")
        if self.window_len % self.hop:
            raise ValueError("window_len must be a multiple of hop")

    @property
    def hop_ms(self):
        return 1000.0 * self.hop / SAMPLE_RATE

    def to_text(self):
        lines = [f"format = {CONFIG_FORMAT}", f"version = {CONFIG_VERSION}"]
        lines += [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        if kv.pop("format", None) != CONFIG_FORMAT:
            raise ValueError("not a model config block")
        if int(kv.pop("version", -1)) != CONFIG_VERSION:
            raise ValueError("unsupported model config version")
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, value in kv.items():
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            args[key] = value == "True" if types[key] in (bool, "bool") else int(value)
        return cls(**args)


class AecModel(Module):
    def __init__(self, config=None):
        self.config = config = config or AecModelConfig()
        rng = np.random.default_rng(config.seed)
        d, w = config.feature_dim, config.window_len
        self.mixture_encoder = Linear(rng, w, d)
        self.reference_encoder = Linear(rng, w, d)
        self.stack_projection = Linear(rng, 2 * d, d)
        self.conformer_layers = [
            ConformerBlock(rng, d, config.attn_heads, config.attn_left_context,
                           config.conv_kernel, config.ffn_expansion, config.causal)
            for _ in range(config.num_layers)
        ]
        self.mask_head = Linear(rng, d, d)
        self.decoder = Linear(rng, d, w)

    # -- forward ------------------------------------------------------------
    def mask(self, mix_feat, ref_feat):
        h = self.stack_projection(ops.concat([mix_feat, ref_feat], axis=-1))
        for layer in self.conformer_layers:
            h = layer(h)
        return ops.sigmoid(self.mask_head(h))

    def decode_frames(self, mixture, reference):
        """[B, L] waveforms -> decoded frames [B, T, window_len] in (-1, 1)."""
        cfg = self.config
        mix_frames = ops.frame(mixture, cfg.window_len, cfg.hop)
        ref_frames = ops.frame(reference, cfg.window_len, cfg.hop)
        mix_feat = self.mixture_encoder(mix_frames)
        ref_feat = self.reference_encoder(ref_frames)
        masked = mix_feat * self.mask(mix_feat, ref_feat)
        return ops.tanh(self.decoder(masked))

    def __call__(self, mixture, reference):
        """Batched forward: [B, L] mixture/reference -> [B, L] estimate."""
        mixture, reference = _as_batch(mixture), _as_batch(reference)
        if mixture.shape != reference.shape:
            raise ValueError(f"mixture {mixture.shape} and reference {reference.shape} differ")
        frames = self.decode_frames(mixture, reference)
        cfg = self.config
        out = ops.overlap_add(frames, cfg.hop, gain=cfg.hop / cfg.window_len)
        return out[:, :mixture.shape[-1]]

    def enhance(self, mixture, reference):
        return enhance(self, mixture, reference)

    # -- persistence ----------------------------------------------------------
    def save(self, path):
        tensors = {"__config__": np.frombuffer(self.config.to_text().encode(), dtype=np.uint8)}
        tensors.update(self.state_dict())
        checkpoint.save(path, tensors)

    @classmethod
    def load(cls, path, dtype=np.float32):
        tensors = checkpoint.load(path)
        if "__config__" not in tensors:
            raise checkpoint.CheckpointError(f"{path}: no model config block")
        config = AecModelConfig.from_text(tensors.pop("__config__").tobytes().decode())
        with use_dtype(dtype):
            model = cls(config)
        # training checkpoints also carry optimizer state and run metadata
        model.load_state_dict({k: v for k, v in tensors.items()
                               if not k.startswith(("__", "optim."))})
        return model


def _as_batch(x):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    return x.reshape(1, -1) if x.ndim == 1 else x


def enhance(model, mixture, reference):
    """Enhance one utterance; returns a float64 array the length of the input."""
    if model is None:
        raise ValueError("no model loaded")
    mix = np.asarray(mixture, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if mix.shape != ref.shape:
        raise ValueError(f"mixture and reference lengths differ: {mix.shape} vs {ref.shape}")
    dtype = model.parameters()[0].dtype
    with no_grad():
        out = model(mix.astype(dtype)[None], ref.astype(dtype)[None])
    return out.data[0].astype(np.float64)


def receptive_field_ms(config):
    """Past context in ms: attention alone, and the extra reach of the
    depthwise convolutions, reported separately."""
    attention = config.num_layers * config.attn_left_context * config.hop_ms
    conv = config.num_layers * (config.conv_kernel - 1) * config.hop_ms
    return {"attention_ms": attention, "conv_ms": conv}


def causality_probe(model, mixture, reference, t, scale=1e3, seed=0):
    """True if perturbing every input sample outside frames 0..t leaves the
    decoded frames 0..t bit-identical."""
    cfg = model.config
    mix = np.asarray(mixture, dtype=model.parameters()[0].dtype)
    ref = np.asarray(reference, dtype=mix.dtype)
    n_frames = ops.num_frames(len(mix), cfg.window_len, cfg.hop)
    if not 0 <= t < n_frames - 1:
        raise ValueError(f"t must be in [0, {n_frames - 1}), got {t}")
    start = t * cfg.hop + cfg.window_len
    rng = np.random.default_rng(seed)
    mix2, ref2 = mix.copy(), ref.copy()
    mix2[start:] += scale * rng.standard_normal(len(mix) - start).astype(mix.dtype)
    ref2[start:] += scale * rng.standard_normal(len(ref) - start).astype(ref.dtype)
    with no_grad():
        a = model.decode_frames(Tensor(mix[None]), Tensor(ref[None])).data[0, :t + 1]
        b = model.decode_frames(Tensor(mix2[None]), Tensor(ref2[None])).data[0, :t + 1]
    return bool(np.array_equal(a, b))


def expected_parameter_count(config):
    """Parameter count from layer arithmetic, independent of the Module walk."""
    d, w, e, k = config.feature_dim, config.window_len, config.ffn_expansion, config.conv_kernel
    linear = lambda i, o: i * o + o  # noqa: E731
    norm = 2 * d
    ffn = norm + linear(d, e * d) + linear(e * d, d)
    conv = norm + linear(d, 2 * d) + k * d + d + norm + linear(d, d)
    attn = norm + 4 * linear(d, d)
    block = 2 * ffn + conv + attn + norm
    return (2 * linear(w, d) + linear(2 * d, d) + config.num_layers * block
            + linear(d, d) + linear(d, w))


def summary(model):
    """Rows of (name, shape, count) plus the total."""
    rows = [(name, tuple(p.shape), int(p.size)) for name, p in model.named_parameters()]
    return rows, sum(r[2] for r in rows)
