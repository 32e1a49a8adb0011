"""Training loop, cascade inference and batch evaluation."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasim
from .config import dataclass_from_text, dataclass_to_text
from .linear_aec import LinearAecConfig, linear_aec_process
from .losses import (LogmelFrontend, LossWeights, ProxyAsrEncoder, asr_loss,
                     sisnr, total_loss)
from .model import AecModel, enhance
from .tensor import AdamState, Tensor, adam_step, checkpoint, clip_grad_norm, no_grad

TRAIN_FORMAT = "wavaec-train"
TRAIN_VERSION = 1
SAMPLE_RATE = 16000


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    lambda_final: float = 5e4
    ramp_start_step: int = 5000
    ramp_end_step: int = 20000
    # when total_steps < ramp_end_step, scale both breakpoints by
    # total_steps / ramp_end_step
    desk_scale: bool = True
    batch_size: int = 2
    segment_ms: float = 500.0
    total_steps: int = 20000
    eval_every: int = 1000
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip_norm: float = 5.0
    asr_reduction: str = "sum"

    def __post_init__(self):
        if self.lambda_final < 0 or not math.isfinite(self.lambda_final):
            raise ValueError("lambda_final must be finite and >= 0")
        if not 0 <= self.ramp_start_step < self.ramp_end_step:
            raise ValueError("need 0 <= ramp_start_step < ramp_end_step")
        if not self.desk_scale and self.ramp_end_step > self.total_steps:
            raise ValueError("ramp_end_step exceeds total_steps (enable desk_scale)")
        if self.batch_size < 1 or self.total_steps < 1 or self.eval_every < 1:
            raise ValueError("batch_size, total_steps and eval_every must be positive")
        if self.segment_ms <= 0:
            raise ValueError("segment_ms must be positive")

    def ramp(self):
        """Effective (start, end) steps of the lambda ramp."""
        start, end = self.ramp_start_step, self.ramp_end_step
        if self.desk_scale and self.total_steps < end:
            scale = self.total_steps / end
            return start * scale, end * scale
        return float(start), float(end)

    def to_text(self):
        return dataclass_to_text(self, TRAIN_FORMAT, TRAIN_VERSION)

    @classmethod
    def from_text(cls, text, base=None):
        return dataclass_from_text(cls, text, TRAIN_FORMAT, TRAIN_VERSION, base)


def lambda_at_step(config, step):
    """ASR-loss weight at ``step``: 0 up to the ramp start, linear up to the
    ramp end, then ``lambda_final``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    start, end = config.ramp()
    if step <= start:
        return 0.0
    if step >= end:
        return float(config.lambda_final)
    return float(config.lambda_final) * (step - start) / (end - start)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    ser_db: float
    example: datasim.Example
    record: dict = field(default_factory=dict)


def load_utterances(manifest):
    """Render every line of a manifest file (or pass through a list of
    Utterances)."""
    if isinstance(manifest, (list, tuple)):
        if not manifest:
            raise datasim.DataError("empty manifest")
        return list(manifest)
    corpus, records = datasim.read_manifest(manifest)
    return [Utterance(r["id"], r["ser_db"], datasim.example_from_record(r, corpus), r)
            for r in records]


def _crop_batch(utts, config, step):
    """Fixed-length crops for one step, drawn from rng(seed, step) so any
    step can be regenerated without replaying the ones before it."""
    rng = np.random.default_rng([config.seed, step])
    seg = int(config.segment_ms * SAMPLE_RATE / 1000)
    seg = min(seg, min(len(u.example.mixture) for u in utts))
    mix, ref, tgt = [], [], []
    for _ in range(config.batch_size):
        ex = utts[rng.integers(len(utts))].example
        for _attempt in range(50):
            off = int(rng.integers(len(ex.mixture) - seg + 1))
            s = ex.target_reverberant[off:off + seg]
            # skip crops where the target is (nearly) silent
            if np.mean(s * s) > 1e-7:
                break
        mix.append(ex.mixture[off:off + seg])
        ref.append(ex.reference[off:off + seg])
        tgt.append(s)
    return np.stack(mix), np.stack(ref), np.stack(tgt)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: AecModel
    records: list
    checkpoints: list
    optimizer: AdamState


def _optim_tensors(model, optimizer, config, step):
    tensors = {"__config__": np.frombuffer(model.config.to_text().encode(), dtype=np.uint8),
               "__train__": np.frombuffer(config.to_text().encode(), dtype=np.uint8),
               "__step__": np.array([step], dtype=np.int64),
               "__adam_step__": np.array([optimizer.step], dtype=np.int64)}
    tensors.update(model.state_dict())
    names = [n for n, _ in model.named_parameters()]
    for name, m, v in zip(names, optimizer.m, optimizer.v):
        tensors[f"optim.m.{name}"] = m
        tensors[f"optim.v.{name}"] = v
    return tensors


def save_training_checkpoint(path, model, optimizer, config, step):
    checkpoint.save(path, _optim_tensors(model, optimizer, config, step))


def load_training_checkpoint(path):
    """Return (model, optimizer, train_config, step)."""
    tensors = checkpoint.load(path)
    if "__train__" not in tensors:
        raise checkpoint.CheckpointError(f"{path}: not a training checkpoint")
    config = TrainConfig.from_text(tensors["__train__"].tobytes().decode())
    model = AecModel.load(path)
    names = [n for n, _ in model.named_parameters()]
    optimizer = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                          step=int(tensors["__adam_step__"][0]))
    if f"optim.m.{names[0]}" in tensors:
        optimizer.m = [tensors[f"optim.m.{n}"].copy() for n in names]
        optimizer.v = [tensors[f"optim.v.{n}"].copy() for n in names]
    return model, optimizer, config, int(tensors["__step__"][0])


def train(model, manifest, config, out_dir=None, encoder=None, resume_from=None,
          log=None):
    """Train ``model`` in place on crops of the manifest utterances.

    One record per step: step, lambda, neg_sisnr, asr, total, grad_norm.
    Checkpoints (model + optimizer state) are written to ``out_dir`` every
    ``eval_every`` steps and at the end.  ``resume_from`` continues a run
    from a checkpoint written by an earlier call with the same config.
    """
    utts = load_utterances(manifest)
    encoder = encoder or ProxyAsrEncoder()
    frontend = LogmelFrontend()
    optimizer = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    start = 1
    if resume_from is not None:
        restored, optimizer, _, last = load_training_checkpoint(resume_from)
        model.load_state_dict(restored.state_dict())
        start = last + 1
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "loss_log.jsonl", "a", encoding="utf-8") if out else None
    params = model.parameters()
    records, ckpts = [], []
    try:
        for step in range(start, config.total_steps + 1):
            mix, ref, tgt = _crop_batch(utts, config, step)
            lam = lambda_at_step(config, step)
            for p in params:
                p.grad = None
            dtype = params[0].dtype
            estimate = model(Tensor(mix.astype(dtype)), Tensor(ref.astype(dtype)))
            terms = total_loss(Tensor(tgt.astype(dtype)), estimate, LossWeights(lam),
                               encoder, frontend, config.asr_reduction)
            loss = terms.total.mean()
            values = terms.values()
            record = {"step": step, "lambda": lam, **values}
            if not np.isfinite(values["total"]):
                record["error"] = "non-finite loss"
                records.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                raise NumericalError(step, f"non-finite loss at step {step}")
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            record["grad_norm"] = clip_grad_norm(grads, config.clip_norm)
            adam_step(params, grads, optimizer)
            records.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if log:
                log(record)
            if out and (step % config.eval_every == 0 or step == config.total_steps):
                path = out / f"ckpt_{step:06d}.wck"
                save_training_checkpoint(path, model, optimizer, config, step)
                ckpts.append(path)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(model, records, ckpts, optimizer)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


class PassThroughModel:
    """Neural-stage stub that returns its mixture input unchanged."""

    def enhance(self, mixture, reference):
        return np.asarray(mixture, dtype=np.float64).copy()


def _neural(model, mixture, reference):
    if model is None:
        raise ValueError("no model loaded")
    if hasattr(model, "enhance"):
        return model.enhance(mixture, reference)
    return enhance(model, mixture, reference)


def cascade_enhance(linear_cfg, model, mixture, reference, preamble_ms=None):
    """Linear canceller first; its output is the neural stage's mixture
    input, alongside the original reference."""
    linear = linear_aec_process(mixture, reference, linear_cfg, preamble_ms=preamble_ms)
    return _neural(model, linear.enhanced, reference)


SYSTEMS = ("none", "linear", "neural", "cascade")


def run_system(system, mixture, reference, model=None, linear_cfg=None, preamble_ms=None):
    mixture = np.asarray(mixture, dtype=np.float64)
    if system == "none":
        return mixture.copy()
    if system == "linear":
        return linear_aec_process(mixture, reference, linear_cfg, preamble_ms=preamble_ms).enhanced
    if system == "neural":
        return _neural(model, mixture, reference)
    if system == "cascade":
        return cascade_enhance(linear_cfg, model, mixture, reference, preamble_ms=preamble_ms)
    raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

METRICS = ("sisnri_db", "erle_db", "asr_loss")


@dataclass
class EvalReport:
    system: str
    utterances: list
    aggregate: dict
    buckets: dict

    def to_dict(self):
        return {"system": self.system, "aggregate": self.aggregate,
                "buckets": {str(k): v for k, v in self.buckets.items()},
                "utterances": self.utterances}

    def table(self):
        lines = [f"system: {self.system}",
                 f"{'SER (dB)':>9} {'count':>6} {'SISNRi':>8} {'ERLE':>8} {'ASR loss':>10}"]
        rows = list(self.buckets.items()) + [("all", {"count": len(self.utterances),
                                                      **self.aggregate})]
        for key, b in rows:
            lines.append(f"{key!s:>9} {b['count']:>6d} {b['sisnri_db']:>8.2f} "
                         f"{b['erle_db']:>8.2f} {b['asr_loss']:>10.4g}")
        return "\n".join(lines)

    def write(self, path):
        """Write ``path`` (JSON) plus a ``.jsonl`` per-utterance file and a
        ``.txt`` table next to it."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        with open(path.with_suffix(".jsonl"), "w", encoding="utf-8") as fh:
            for u in self.utterances:
                fh.write(json.dumps(u) + "\n")
        path.with_suffix(".txt").write_text(self.table() + "\n")


def residual_erle_db(mixture, enhanced, target):
    """Interference power reduction, treating everything but the target as
    echo: 10*log10(sum (x - s)^2 / sum (y - s)^2)."""
    before = float(np.sum((mixture - target) ** 2))
    after = float(np.sum((enhanced - target) ** 2))
    if before == 0.0:
        return 0.0
    return 10 * np.log10(before / max(after, 1e-30))


def _score(utt, system, model, linear_cfg, encoder, frontend):
    ex = utt.example
    pre = ex.metadata.preamble_ms if ex.metadata else None
    out = run_system(system, ex.mixture, ex.reference, model, linear_cfg, pre or None)
    s = ex.target_reverberant
    sisnri = 0.0 if system == "none" else float(sisnr(s, out) - sisnr(s, ex.mixture))
    erle = 0.0 if system == "none" else residual_erle_db(ex.mixture, out, s)
    with no_grad():
        asr = float(asr_loss(s.astype(np.float32), out.astype(np.float32), encoder, frontend,
                             reduction="mean").data)
    return {"id": utt.id, "ser_db": utt.ser_db, "sisnri_db": sisnri, "erle_db": erle,
            "asr_loss": asr}


def evaluate(system, manifest, model=None, linear_cfg=None, encoder=None, jobs=1):
    """Score ``system`` on every manifest utterance; results are in manifest
    order regardless of ``jobs``."""
    if system not in SYSTEMS:
        raise ValueError(f"unknown system {system!r}; expected one of {SYSTEMS}")
    utts = load_utterances(manifest)
    encoder = encoder or ProxyAsrEncoder()
    frontend = LogmelFrontend()
    linear_cfg = linear_cfg or LinearAecConfig()

    def score(u):
        return _score(u, system, model, linear_cfg, encoder, frontend)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(score, utts))
    else:
        rows = [score(u) for u in utts]
    return make_report(system, rows)


def make_report(system, rows):
    if not rows:
        raise datasim.DataError("empty manifest")
    aggregate = {m: float(np.mean([r[m] for r in rows])) for m in METRICS}
    buckets = {}
    # bucket by SER rounded to whole dB
    for ser in sorted({round(r["ser_db"]) for r in rows}, reverse=True):
        sel = [r for r in rows if round(r["ser_db"]) == ser]
        buckets[ser] = {"count": len(sel),
                        **{m: float(np.mean([r[m] for r in sel])) for m in METRICS}}
    return EvalReport(system, rows, aggregate, buckets)
