"""Finite-difference gradient checks for every differentiable primitive and
for the full training loss on a small float64 model."""

from __future__ import annotations

import numpy as np

from .losses import LogmelFrontend, LossWeights, ProxyAsrEncoder, sisnr, total_loss
from .model import AecModel, AecModelConfig
from .nn import ConformerBlock, LocalSelfAttention
from .tensor import Tensor, ops, use_dtype
from .tensor.gradcheck import check_gradient, random_tensor

TOLERANCE = 1e-4


def _projected(fn, rng):
    """Reduce a tensor-valued fn to a scalar with a fixed random projection."""
    weights = {}

    def scalar(*xs):
        out = fn(*xs)
        if out.shape not in weights:
            weights[out.shape] = rng.standard_normal(out.shape)
        return ops.sum(ops.mul(out, weights[out.shape]))

    return scalar


def primitive_cases(seed=0):
    """(name, fn, inputs) triples, each fn mapping float64 Tensors to a tensor."""
    rng = np.random.default_rng(seed)
    r = lambda *shape, scale=1.0: random_tensor(rng, shape, scale)  # noqa: E731
    pos = lambda *shape: Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True,  # noqa: E731
                                dtype=np.float64)
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    cases = [
        ("add (broadcast)", ops.add, [r(3, 4), r(4)]),
        ("sub (broadcast)", ops.sub, [r(3, 1), r(3, 4)]),
        ("mul (broadcast)", ops.mul, [r(2, 3, 4), r(3, 1)]),
        ("div", ops.div, [r(3, 4), pos(3, 4)]),
        ("neg", ops.neg, [r(5)]),
        ("power", lambda a: ops.power(a, 3.0), [r(4, 3)]),
        ("sqrt", ops.sqrt, [pos(4, 3)]),
        ("exp", ops.exp, [r(4, 3)]),
        ("log", ops.log, [pos(4, 3)]),
        ("log10", ops.log10, [pos(4, 3)]),
        ("maximum (floor)", lambda a: ops.maximum(a, 0.25), [pos(4, 3)]),
        ("sigmoid", ops.sigmoid, [r(4, 3)]),
        ("tanh", ops.tanh, [r(4, 3)]),
        ("swish", ops.swish, [r(4, 3)]),
        ("relu", ops.relu, [pos(4, 3)]),
        ("glu", ops.glu, [r(3, 8)]),
        ("sum (axis)", lambda a: ops.sum(a, axis=1), [r(3, 4, 2)]),
        ("mean (keepdims)", lambda a: ops.mean(a, axis=0, keepdims=True), [r(3, 4)]),
        ("dot", ops.dot, [r(3, 5), r(3, 5)]),
        ("l2_norm", lambda a: ops.l2_norm(a, axis=-1), [r(3, 5)]),
        ("matmul (batched)", ops.matmul, [r(2, 3, 4), r(2, 4, 5)]),
        ("matmul (2-D weight)", ops.matmul, [r(2, 3, 4), r(4, 5)]),
        ("linear", ops.linear, [r(2, 3, 4), r(4, 5), r(5)]),
        ("einsum", lambda a, b: ops.einsum("bij,bjk->bik", a, b), [r(2, 3, 4), r(2, 4, 2)]),
        ("reshape", lambda a: ops.reshape(a, (6, 2)), [r(3, 4)]),
        ("transpose", lambda a: ops.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        ("getitem (slice)", lambda a: a[:, 1:3], [r(3, 4)]),
        ("getitem (fancy)", lambda a: a[[0, 2, 2]], [r(3, 4)]),
        ("concat", lambda a, b: ops.concat([a, b], axis=0), [r(2, 3), r(1, 3)]),
        ("split", lambda a: ops.mul(*ops.split(a, 2, axis=-1)), [r(3, 6)]),
        ("unfold", lambda a: ops.unfold(a, 3, axis=-2), [r(2, 6, 3)]),
        ("softmax (masked)", lambda a: ops.softmax(a, axis=-1, mask=mask), [r(4, 5)]),
        ("normalize", lambda a: ops.normalize(a, axis=-1), [r(3, 6)]),
        ("layer_norm", ops.layer_norm, [r(2, 3, 6), r(6), r(6)]),
        ("group_norm", lambda x, g, b: ops.group_norm(x, 2, g, b), [r(2, 5, 4), r(4), r(4)]),
        ("conv1d_causal", ops.conv1d_causal, [r(2, 7, 3), r(3, 3, 2), r(2)]),
        ("depthwise_conv1d_causal", ops.depthwise_conv1d_causal, [r(2, 7, 3), r(4, 3), r(3)]),
        ("depthwise_conv1d (centred)",
         lambda x, w, b: ops.depthwise_conv1d_causal(x, w, b, left=1), [r(2, 7, 3), r(3, 3), r(3)]),
        ("frame", lambda a: ops.frame(a, 8, 4), [r(2, 30)]),
        ("overlap_add", lambda a: ops.overlap_add(a, 4, gain=0.5), [r(2, 6, 8)]),
        ("sisnr", lambda s, y: sisnr(s, y), [r(2, 40), r(2, 40)]),
    ]
    return cases


def _module_cases(seed=0):
    rng = np.random.default_rng(seed)
    with use_dtype(np.float64):
        attn = LocalSelfAttention(rng, 8, 2, 3)
        block = ConformerBlock(rng, 8, 2, 3, 3)
        frontend = LogmelFrontend()
    x = random_tensor(rng, (2, 9, 8))
    wave = random_tensor(rng, (1, 900), scale=0.1)
    return [
        ("local self-attention", attn, [x] + attn.parameters()),
        ("conformer block", block, [x] + block.parameters()),
        ("logmel frontend", frontend, [wave]),
    ]


def small_model_config():
    return AecModelConfig(window_len=8, hop=4, feature_dim=8, num_layers=1, conv_kernel=3,
                          attn_heads=2, attn_left_context=3, ffn_expansion=2, seed=0)


def end_to_end_case(seed=0, lam=1.0):
    """total_loss through a tiny float64 model and proxy encoder, with
    respect to every model parameter."""
    rng = np.random.default_rng(seed)
    with use_dtype(np.float64):
        model = AecModel(small_model_config())
    encoder = ProxyAsrEncoder(width=8, num_layers=1, heads=2, left_context=3, kernel=3,
                              output_scale=1.0, seed=seed, dtype=np.float64)
    frontend = LogmelFrontend()
    mixture = Tensor(0.1 * rng.standard_normal((1, 600)), dtype=np.float64)
    reference = Tensor(0.1 * rng.standard_normal((1, 600)), dtype=np.float64)
    target = Tensor(0.1 * rng.standard_normal((1, 600)), dtype=np.float64)

    def loss(*_params):
        estimate = model(mixture, reference)
        return total_loss(target, estimate, LossWeights(lam), encoder, frontend).total.mean()

    return "end-to-end total_loss", loss, model.parameters()


def run_suite(seed=0, max_entries=12, rtol=TOLERANCE, include_end_to_end=True, step=1e-5):
    """Run every check; returns a list of GradCheckResult.

    The default step of 1e-5 keeps central-difference truncation error
    well below the 1e-4 tolerance for the strongly curved normalisation
    layers; at 1e-3 the truncation error alone exceeds it.
    """
    results = []
    rng = np.random.default_rng(seed + 1)
    with use_dtype(np.float64):
        for name, fn, inputs in primitive_cases(seed):
            results.append(check_gradient(_projected(fn, rng), inputs, name, step=step,
                                          rtol=rtol, atol=1e-8, max_entries=max_entries,
                                          seed=seed))
        for name, fn, inputs in _module_cases(seed):
            call = (lambda f: lambda x, *_: f(x))(fn)
            results.append(check_gradient(_projected(call, rng), inputs, name, step=step,
                                          rtol=rtol, atol=1e-8, max_entries=max_entries,
                                          seed=seed))
        if include_end_to_end:
            name, fn, inputs = end_to_end_case(seed)
            results.append(check_gradient(fn, inputs, name, step=step, rtol=rtol, atol=1e-8,
                                          max_entries=max_entries, seed=seed))
    return results
