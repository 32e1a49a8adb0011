"""Synthetic echo mixtures: toy corpus, shoebox RIRs, SER-controlled mixing,
manifests.

Every example is a pure function of its manifest record, so manifests can be
rendered in any order or in parallel.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from .audio import SAMPLE_RATE, Waveform, read_wav, write_wav

SPEED_OF_SOUND = 343.0
ACTIVITY_FLOOR_DBFS = -60.0
ACTIVITY_FRAME = 320  # 20 ms
# components are rounded to this dyadic grid so that sums and differences
# of them are exact in float64
QUANT = 2.0**-30


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------


def synth_speech(duration_s, rng, f0_range=(90.0, 250.0), level_dbfs=-26.0):
    """Speech-like test signal: harmonic syllables shaped by three moving
    formants, occasional noise bursts, and pauses."""
    n = int(duration_s * SAMPLE_RATE)
    out = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * SAMPLE_RATE)
    while pos < n:
        length = int(rng.uniform(0.12, 0.35) * SAMPLE_RATE)
        seg = min(length, n - pos)
        t = np.arange(seg)
        env = np.sin(np.pi * (t + 0.5) / length) ** 0.6
        if rng.random() < 0.2:
            burst = np.diff(rng.standard_normal(seg + 1))
            syl = 0.3 * burst * env
        else:
            f0 = np.linspace(*rng.uniform(*f0_range, size=2), seg)
            phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
            formants = [
                np.linspace(*rng.uniform(lo, hi, size=2), seg)
                for lo, hi in ((300, 900), (900, 2400), (2300, 3500))
            ]
            widths = rng.uniform(80, 220, size=3)
            syl = np.zeros(seg)
            for k in range(1, int(4000 / f0_range[0]) + 1):
                freq = k * f0
                amp = sum(np.exp(-0.5 * ((freq - fm) / bw) ** 2) for fm, bw in zip(formants, widths))
                amp = (amp + 0.02) * (freq < 7000)
                syl += amp * np.sin(k * phase)
            syl *= env
        out[pos:pos + seg] += syl
        pos += seg + int(rng.uniform(0.03, 0.25) * SAMPLE_RATE)
    return _set_level(out, level_dbfs)


def synth_noise(duration_s, rng, level_dbfs=-40.0):
    """Stationary low-pass coloured noise."""
    n = int(duration_s * SAMPLE_RATE)
    b, a = scipy.signal.butter(1, 1500, fs=SAMPLE_RATE)
    return _set_level(scipy.signal.lfilter(b, a, rng.standard_normal(n)), level_dbfs)


def _set_level(x, level_dbfs):
    p = active_power(x)
    if p == 0:
        return x
    return x * np.sqrt(10 ** (level_dbfs / 10) / p)


def make_toy_corpus(corpus_dir, num_targets=60, num_references=20, num_noise=5,
                    duration_s=2.0, reference_duration_s=12.0, seed=0):
    """Write target/, reference/ and noise/ WAV folders of synthetic audio."""
    root = Path(corpus_dir)
    rng = np.random.default_rng(seed)
    groups = (
        ("target", num_targets, duration_s, lambda r, d: synth_speech(d, r, (110, 260))),
        ("reference", num_references, reference_duration_s,
         lambda r, d: synth_speech(d, r, (80, 180), level_dbfs=-22.0)),
        ("noise", num_noise, reference_duration_s, lambda r, d: synth_noise(d, r)),
    )
    for name, count, dur, fn in groups:
        (root / name).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            write_wav(root / name / f"{name}_{i:04d}.wav", fn(rng, dur), fmt="float32")
    return root


# ---------------------------------------------------------------------------
# Room impulse responses
# ---------------------------------------------------------------------------


@dataclass
class Rir:
    taps: np.ndarray
    rt60_ms: float
    source_distance_m: float
    sample_rate: int = SAMPLE_RATE


def _place(rng, distance_m, margin=0.1):
    for _ in range(1000):
        dims = rng.uniform(3.0, 8.0, size=3)
        mic = rng.uniform(0.5, dims - 0.5)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        src = mic + distance_m * direction
        if np.all(src > margin) and np.all(src < dims - margin):
            return dims, mic, src
    raise DataError(f"could not place a source {distance_m} m from the microphone")


def generate_rir(rt60_ms, distance_m, seed):
    """Image-method RIR of a random shoebox room (sides 3-8 m) with
    frequency-independent wall absorption.  Truncated at ``rt60_ms`` and
    scaled to unit direct-path gain.

    The wall reflection coefficient is tuned so that the energy envelope of
    the reverberant part (direct path excluded) decays 60 dB in ``rt60_ms``; Eyring's formula, which
    overestimates absorption for image-method rooms, only seeds the search.
    ``rt60_ms == 0`` gives the anechoic response: one tap at the
    propagation delay.
    """
    if not 0.1 <= distance_m <= 6.0:
        raise DataError(f"distance_m must be in [0.1, 6], got {distance_m}")
    delay = distance_m / SPEED_OF_SOUND * SAMPLE_RATE
    if rt60_ms == 0:
        taps = np.zeros(int(round(delay)) + 1)
        taps[-1] = 1.0
        return Rir(taps, 0.0, distance_m)
    if not 100 <= rt60_ms <= 900:
        raise DataError(f"rt60_ms must be in [100, 900] (or 0), got {rt60_ms}")
    rng = np.random.default_rng(seed)
    dims, mic, src = _place(rng, distance_m)
    n = int(round(rt60_ms * SAMPLE_RATE / 1000))
    idx, refl, inv_dist = _image_sources(dims, mic, src, n)

    def render(beta):
        h = np.bincount(idx, weights=beta**refl * inv_dist, minlength=n)
        return h * (4 * np.pi * distance_m)

    direct = refl == 0
    tail_idx, tail_refl, tail_inv = idx[~direct], refl[~direct], inv_dist[~direct]

    # bisection on log(1 - beta): decay time falls as absorption grows
    volume = np.prod(dims)
    surface = 2 * (dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
    eyring = 1.0 - np.exp(-0.161 * volume / (surface * rt60_ms / 1000))
    lo, hi = np.log(eyring) - 3.0, np.log(eyring) + 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        beta = np.sqrt(1.0 - min(np.exp(mid), 1.0 - 1e-12))
        tail = np.bincount(tail_idx, weights=beta**tail_refl * tail_inv, minlength=n)
        t60 = _envelope_decay_ms(tail)
        if t60 > rt60_ms:
            lo = mid
        else:
            hi = mid
    beta = np.sqrt(1.0 - min(np.exp(0.5 * (lo + hi)), 1.0 - 1e-12))
    return Rir(render(beta), float(rt60_ms), float(distance_m))


def _image_sources(dims, mic, src, n):
    """Arrival sample, wall-hit count and 1/distance of every image source
    arriving within ``n`` samples."""
    max_dist = n / SAMPLE_RATE * SPEED_OF_SOUND
    axis_terms = []
    for d, s, m in zip(dims, src, mic):
        order = int(np.ceil(max_dist / (2 * d))) + 1
        mm = np.arange(-order, order + 1)
        pos = np.concatenate([2 * mm * d + s, 2 * mm * d - s])
        refl = np.concatenate([np.abs(2 * mm), np.abs(2 * mm - 1)])
        axis_terms.append((pos - m, refl))
    (dx, rx), (dy, ry), (dz, rz) = axis_terms
    yz_sq = (dy[:, None] ** 2 + dz[None, :] ** 2).ravel()
    yz_refl = (ry[:, None] + rz[None, :]).ravel()
    out_idx, out_refl, out_inv = [], [], []
    for ox, kx in zip(dx, rx):
        dist = np.sqrt(ox * ox + yz_sq)
        idx = np.round(dist / SPEED_OF_SOUND * SAMPLE_RATE).astype(np.int64)
        keep = idx < n
        if np.any(keep):
            out_idx.append(idx[keep])
            out_refl.append(kx + yz_refl[keep])
            out_inv.append(1.0 / (4 * np.pi * dist[keep]))
    return np.concatenate(out_idx), np.concatenate(out_refl), np.concatenate(out_inv)


def _envelope_decay_ms(taps, bin_ms=5.0):
    """60 dB decay time from a line fit to the binned log-energy envelope,
    which truncation does not bias the way backward integration does."""
    size = int(bin_ms * SAMPLE_RATE / 1000)
    nb = len(taps) // size
    energy = np.sum(taps[:nb * size].reshape(nb, size) ** 2, axis=1)
    sel = energy > 0
    sel[: max(1, nb // 10)] = False
    if np.count_nonzero(sel) < 2:
        return 0.0
    slope = np.polyfit(np.arange(nb)[sel] * bin_ms, 10 * np.log10(energy[sel]), 1)[0]
    return float(-60.0 / slope) if slope < 0 else float("inf")


def decay_time_ms(taps, fit_range=(-5.0, -35.0)):
    """Time for the Schroeder decay to fall by 60 dB, extrapolated from a
    straight-line fit over ``fit_range`` (T30 by default)."""
    edc = schroeder_decay_db(taps)
    hi, lo = fit_range
    sel = (edc <= hi) & (edc >= lo)
    if np.count_nonzero(sel) < 2:
        return 0.0
    t_ms = np.arange(len(edc)) * 1000.0 / SAMPLE_RATE
    slope = np.polyfit(t_ms[sel], edc[sel], 1)[0]
    return float(-60.0 / slope) if slope < 0 else float("inf")


def schroeder_decay_db(taps):
    """Backward-integrated energy decay curve in dB (0 dB at t = 0)."""
    energy = np.cumsum(np.asarray(taps, dtype=np.float64)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10 * np.log10(energy / energy[0])


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------


def active_power(x, floor_dbfs=ACTIVITY_FLOOR_DBFS):
    """Mean power over 20 ms frames whose power exceeds ``floor_dbfs``."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x) // ACTIVITY_FRAME * ACTIVITY_FRAME
    if n == 0:
        return 0.0
    frames = x[:n].reshape(-1, ACTIVITY_FRAME)
    p = np.mean(frames**2, axis=1)
    active = p > 10 ** (floor_dbfs / 10)
    if not np.any(active):
        return 0.0
    return float(np.mean(p[active]))


def measure_ser_db(target, echo):
    pt, pe = active_power(target), active_power(echo)
    if pt == 0 or pe == 0:
        raise DataError("cannot measure SER: silent target or echo")
    return 10 * np.log10(pt / pe)


def soft_clip(x, drive):
    """Memoryless loudspeaker nonlinearity tanh(drive * x) / drive; drive 0 is identity."""
    if drive <= 0:
        return np.asarray(x, dtype=np.float64)
    return np.tanh(drive * np.asarray(x, dtype=np.float64)) / drive


def _quantize(x):
    return np.round(np.asarray(x, dtype=np.float64) / QUANT) * QUANT


def _fit_to_length(x, n):
    x = np.asarray(x, dtype=np.float64)
    if len(x) >= n:
        return x[:n].copy()
    return np.tile(x, -(-n // len(x)))[:n]


def _scale_to_ratio(fixed, other, ratio_db):
    """Gain g with 10*log10(P(fixed)/P(g*other)) == ratio_db under the
    activity-gated power; iterated because the gate depends on g."""
    pf = active_power(fixed)
    g = 1.0
    for _ in range(20):
        po = active_power(g * other)
        if pf == 0 or po == 0:
            raise DataError("cannot set level ratio: silent signal")
        g *= np.sqrt(pf / po / 10 ** (ratio_db / 10))
        if abs(10 * np.log10(pf / active_power(g * other)) - ratio_db) < 1e-6:
            break
    return g


@dataclass
class MixtureSpec:
    target: np.ndarray
    reference: np.ndarray
    target_rir: Rir
    echo_rir: Rir
    ser_db: float
    noise: np.ndarray = None
    snr_db: float = None
    preamble_ms: float = 0.0
    seed: int = 0
    nonlinear_drive: float = 0.0
    ser_range: tuple = (-40.0, 40.0)

    def __post_init__(self):
        lo, hi = self.ser_range
        if not lo <= self.ser_db <= hi:
            raise DataError(f"ser_db {self.ser_db} outside configured range {self.ser_range}")
        if self.preamble_ms < 0:
            raise DataError("preamble_ms must be >= 0")


@dataclass
class Example:
    mixture: np.ndarray
    reference: np.ndarray
    target_reverberant: np.ndarray
    echo: np.ndarray
    noise: np.ndarray
    metadata: MixtureSpec = field(repr=False, default=None)

    @property
    def preamble_samples(self):
        return int(round(self.metadata.preamble_ms * SAMPLE_RATE / 1000)) if self.metadata else 0


def mix(spec):
    """Render one example: x = s + e + z with the echo scaled to ``ser_db``
    over the region where the target is present."""
    pre = int(round(spec.preamble_ms * SAMPLE_RATE / 1000))
    target = np.asarray(spec.target, dtype=np.float64)
    n = pre + len(target)
    reference = _fit_to_length(spec.reference, n)
    if active_power(target) == 0:
        raise DataError("silent target: cannot set SER")
    if active_power(reference) == 0:
        raise DataError("silent reference: cannot set SER")

    target_rev = np.zeros(n)
    target_rev[pre:] = scipy.signal.fftconvolve(target, spec.target_rir.taps)[:len(target)]
    echo = scipy.signal.fftconvolve(
        soft_clip(reference, spec.nonlinear_drive), spec.echo_rir.taps)[:n]
    overlap = slice(pre, n)
    echo = _quantize(echo * _scale_to_ratio(target_rev[overlap], echo[overlap], spec.ser_db))
    target_rev = _quantize(target_rev)

    noise = np.zeros(n)
    if spec.noise is not None and spec.snr_db is not None:
        z = _fit_to_length(spec.noise, n)
        noise = _quantize(z * _scale_to_ratio(target_rev[overlap], z[overlap], spec.snr_db))
    mixture = target_rev + echo + noise
    return Example(mixture, reference, target_rev, echo, noise, spec)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

# fixed field order of one manifest line (JSON object per line)
MANIFEST_FIELDS = (
    "id", "target", "reference", "noise", "ser_db", "snr_db", "preamble_ms",
    "target_rt60_ms", "target_distance_m", "echo_rt60_ms", "echo_distance_m",
    "nonlinear_drive", "seed",
)


@dataclass
class ManifestConfig:
    """How to draw manifest lines from a corpus.

    ``mode="train"``: ``count`` lines with SER uniform in ``ser_range``.
    ``mode="eval"``: every target crossed with every value in ``ser_values``.
    """

    mode: str = "train"
    count: int = 50
    ser_range: tuple = (-20.0, 5.0)
    ser_values: tuple = (5.0, 0.0, -5.0, -10.0)
    preamble_ms: float = 0.0
    snr_range: tuple = None  # None: no noise
    target_rt60_range: tuple = (100.0, 400.0)
    target_distance_range: tuple = (0.5, 3.0)
    echo_rt60_range: tuple = (100.0, 200.0)
    echo_distance_range: tuple = (0.1, 0.3)
    nonlinear_drive_range: tuple = (0.0, 0.0)

    def to_dict(self):
        return asdict(self)


def _list_wavs(d):
    return sorted(p for p in Path(d).glob("*.wav")) if Path(d).is_dir() else []


def build_manifest_records(corpus_dir, config=None, seed=0):
    config = config or ManifestConfig()
    root = Path(corpus_dir)
    targets = _list_wavs(root / "target")
    references = _list_wavs(root / "reference")
    noises = _list_wavs(root / "noise")
    if not targets or not references:
        raise DataError(f"empty corpus under {root}: need target/ and reference/ WAVs")
    if config.snr_range is not None and not noises:
        raise DataError(f"noise requested but {root / 'noise'} has no WAVs")
    rng = np.random.default_rng(seed)
    if config.mode == "train":
        picks = [(targets[i], float(rng.uniform(*config.ser_range)))
                 for i in rng.integers(len(targets), size=config.count)]
    elif config.mode == "eval":
        picks = [(t, float(s)) for t in targets for s in config.ser_values]
    else:
        raise ValueError(f"unknown manifest mode {config.mode!r}")

    records = []
    for i, (target, ser) in enumerate(picks):
        noise = str(noises[rng.integers(len(noises))].relative_to(root)) if config.snr_range else None
        rec = {
            "id": f"utt{i:05d}",
            "target": str(target.relative_to(root)),
            "reference": str(references[rng.integers(len(references))].relative_to(root)),
            "noise": noise,
            "ser_db": round(ser, 6),
            "snr_db": round(float(rng.uniform(*config.snr_range)), 6) if config.snr_range else None,
            "preamble_ms": float(config.preamble_ms),
            "target_rt60_ms": round(float(rng.uniform(*config.target_rt60_range)), 3),
            "target_distance_m": round(float(rng.uniform(*config.target_distance_range)), 4),
            "echo_rt60_ms": round(float(rng.uniform(*config.echo_rt60_range)), 3),
            "echo_distance_m": round(float(rng.uniform(*config.echo_distance_range)), 4),
            "nonlinear_drive": round(float(rng.uniform(*config.nonlinear_drive_range)), 4),
            "seed": int(rng.integers(2**31)),
        }
        records.append({k: rec[k] for k in MANIFEST_FIELDS})
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def build_manifest(corpus_dir, config=None, seed=0, out_path=None):
    """Draw manifest records and write them as JSON lines.

    Paths in the records are relative to ``corpus_dir``, which is stored in
    a leading header line.
    """
    records = build_manifest_records(corpus_dir, config, seed)
    out_path = Path(out_path) if out_path else Path(corpus_dir) / "manifest.jsonl"
    write_manifest(out_path, records, corpus_dir)
    return out_path


def write_manifest(path, records, corpus_dir):
    header = {"manifest_version": 1, "corpus": os.path.abspath(corpus_dir)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in MANIFEST_FIELDS}) + "\n")


def read_manifest(path):
    """Return (corpus_dir, records)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("manifest_version") != 1:
        raise DataError(f"{path}: missing or unsupported manifest header")
    records = [json.loads(ln) for ln in lines[1:]]
    if not records:
        raise DataError(f"{path}: manifest has no records")
    return header["corpus"], records


def spec_from_record(record, corpus_dir):
    root = Path(corpus_dir)
    seed = record["seed"]
    noise = read_wav(root / record["noise"]).samples if record.get("noise") else None
    return MixtureSpec(
        target=read_wav(root / record["target"]).samples,
        reference=read_wav(root / record["reference"]).samples,
        target_rir=generate_rir(record["target_rt60_ms"], record["target_distance_m"], seed),
        echo_rir=generate_rir(record["echo_rt60_ms"], record["echo_distance_m"], seed + 1),
        ser_db=record["ser_db"],
        noise=noise,
        snr_db=record.get("snr_db"),
        preamble_ms=record["preamble_ms"],
        seed=seed,
        nonlinear_drive=record.get("nonlinear_drive", 0.0),
    )


def example_from_record(record, corpus_dir):
    return mix(spec_from_record(record, corpus_dir))


def write_example(example, out_dir, utt_id, record=None):
    """Cache an example as mixture/reference/target WAVs plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for part, data in (("mixture", example.mixture), ("reference", example.reference),
                       ("target", example.target_reverberant)):
        paths[part] = out / f"{utt_id}_{part}.wav"
        write_wav(paths[part], Waveform(data), fmt="float32")
    meta = dict(record or {})
    meta["measured_ser_db"] = measure_ser_db(
        example.target_reverberant[example.preamble_samples:],
        example.echo[example.preamble_samples:])
    with open(out / f"{utt_id}.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    return paths
