"""Layers built on the tensor engine: linear, norms, causal conformer block."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, default_dtype, ops


def glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Module:
    """Parameter container; parameters are the Tensor attributes, found
    recursively through sub-modules and lists of sub-modules."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self


def _param(value):
    return Tensor(value, requires_grad=True)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True):
        self.weight = _param(glorot(rng, (n_in, n_out), n_in, n_out))
        self.bias = _param(np.zeros(n_out, dtype=default_dtype())) if bias else None

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = _param(np.ones(dim, dtype=default_dtype()))
        self.beta = _param(np.zeros(dim, dtype=default_dtype()))

    def __call__(self, x):
        return ops.layer_norm(x, self.gamma, self.beta)


class GroupNorm(Module):
    def __init__(self, dim, num_groups=1):
        self.num_groups = num_groups
        self.gamma = _param(np.ones(dim, dtype=default_dtype()))
        self.beta = _param(np.zeros(dim, dtype=default_dtype()))

    def __call__(self, x):
        return ops.group_norm(x, self.num_groups, self.gamma, self.beta)


class FeedForward(Module):
    """LN -> expand x4 -> swish -> project back."""

    def __init__(self, rng, dim, expansion):
        self.norm = LayerNorm(dim)
        self.up = Linear(rng, dim, dim * expansion)
        self.down = Linear(rng, dim * expansion, dim)

    def __call__(self, x):
        return self.down(ops.swish(self.up(self.norm(x))))


class ConvModule(Module):
    """LN -> pointwise (2x) -> GLU -> causal depthwise -> group norm -> swish -> pointwise."""

    def __init__(self, rng, dim, kernel, causal=True):
        self.kernel = kernel
        self.causal = causal
        self.norm = LayerNorm(dim)
        self.pointwise_in = Linear(rng, dim, 2 * dim)
        self.depthwise = _param(glorot(rng, (kernel, dim), kernel, kernel))
        self.depthwise_bias = _param(np.zeros(dim, dtype=default_dtype()))
        self.group_norm = GroupNorm(dim, 1)
        self.pointwise_out = Linear(rng, dim, dim)

    def __call__(self, x):
        h = ops.glu(self.pointwise_in(self.norm(x)))
        left = None if self.causal else self.kernel // 2
        h = ops.depthwise_conv1d_causal(h, self.depthwise, self.depthwise_bias, left=left)
        return self.pointwise_out(ops.swish(self.group_norm(h)))


class LocalSelfAttention(Module):
    """Multi-head self-attention restricted to the current frame and
    ``left_context`` past frames, without positional embedding.

    With ``causal=False`` (ablation only) the window also spans
    ``left_context`` future frames.
    """

    def __init__(self, rng, dim, heads, left_context, causal=True):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.left_context = left_context
        self.causal = causal
        self.norm = LayerNorm(dim)
        self.query = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.value = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def block_mask(self, num_frames):
        """Allowed (query, key) pairs for blocks of ``left_context + 1``
        frames, each query block seeing the previous, current (and, when
        non-causal, next) key block.  Shape [num_blocks, C, span * C]."""
        c = self.left_context + 1
        nb = -(-num_frames // c)
        span = 2 if self.causal else 3
        q = np.arange(nb)[:, None, None] * c + np.arange(c)[None, :, None]
        key = (np.arange(nb)[:, None, None] - 1) * c + np.arange(span * c)[None, None, :]
        ok = (key >= 0) & (key < num_frames) & (q - key <= self.left_context)
        if self.causal:
            ok &= key <= q
        else:
            ok &= key - q <= self.left_context
        return ok

    def __call__(self, x):
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        c = self.left_context + 1
        nb = -(-t // c)
        y = self.norm(x)

        def blocks(z):
            # [B, T, D] -> [B, H, nb, C, dh], zero-padded to a whole block
            z = ops.transpose(ops.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))
            if nb * c > t:
                z = ops.concat([z, np.zeros((b, h, nb * c - t, dh), dtype=z.dtype)], axis=2)
            return ops.reshape(z, (b, h, nb, c, dh))

        def with_neighbours(z):
            zero = np.zeros((b, h, 1, c, dh), dtype=z.dtype)
            parts = [ops.concat([zero, z[:, :, :-1]], axis=2), z]
            if not self.causal:
                parts.append(ops.concat([z[:, :, 1:], zero], axis=2))
            return ops.concat(parts, axis=3)

        q = blocks(self.query(y) * (1.0 / np.sqrt(dh)))
        k = with_neighbours(blocks(self.key(y)))
        v = with_neighbours(blocks(self.value(y)))
        scores = ops.matmul(q, ops.transpose(k, (0, 1, 2, 4, 3)))
        probs = ops.softmax(scores, axis=-1, mask=self.block_mask(t)[None, None])
        ctx = ops.reshape(ops.matmul(probs, v), (b, h, nb * c, dh))[:, :, :t]
        return self.out(ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d)))


class ConformerBlock(Module):
    """Half-FFN, convolution, attention, half-FFN, then a final layer norm.

    Convolution precedes attention so no relative positional embedding is
    needed; every sub-layer is residual.
    """

    def __init__(self, rng, dim, heads, left_context, kernel, expansion=4, causal=True):
        self.ffn1 = FeedForward(rng, dim, expansion)
        self.conv = ConvModule(rng, dim, kernel, causal)
        self.attn = LocalSelfAttention(rng, dim, heads, left_context, causal)
        self.ffn2 = FeedForward(rng, dim, expansion)
        self.final_norm = LayerNorm(dim)

    def __call__(self, x):
        x = x + 0.5 * self.ffn1(x)
        x = x + self.conv(x)
        x = x + self.attn(x)
        x = x + 0.5 * self.ffn2(x)
        return self.final_norm(x)
