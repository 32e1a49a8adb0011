"""Shared toy data and training runs.

The toy-scale corpora and the two 2000-step training runs are expensive, so
they are built once per session and reused by the pipeline and acceptance
tests.
"""

import time
from types import SimpleNamespace

import pytest

from wavaec import datasim, pipeline
from wavaec.model import AecModel, AecModelConfig

TOY_STEPS = 2000
LAMBDA_FINAL = 5e4


def small_model_config(seed=0):
    return AecModelConfig(feature_dim=32, num_layers=1, attn_heads=4, conv_kernel=5,
                          attn_left_context=7, ffn_expansion=2, seed=seed)


@pytest.fixture(scope="session")
def toy(tmp_path_factory):
    """50 training utterances of 2 s plus held-out evaluation sets drawn from a
    separate corpus."""
    root = tmp_path_factory.mktemp("toy")
    datasim.make_toy_corpus(root / "train_corpus", num_targets=50, num_references=10,
                            num_noise=3, seed=1)
    datasim.make_toy_corpus(root / "test_corpus", num_targets=6, num_references=4,
                            num_noise=2, seed=2)
    train = datasim.build_manifest(
        root / "train_corpus",
        datasim.ManifestConfig(mode="train", count=50, nonlinear_drive_range=(0, 3)),
        seed=1, out_path=root / "train.jsonl")
    heldout = datasim.build_manifest(
        root / "test_corpus",
        datasim.ManifestConfig(mode="eval", ser_values=(5, 0, -5, -10),
                               nonlinear_drive_range=(0, 3)),
        seed=3, out_path=root / "heldout.jsonl")
    # echo-only preamble so the linear stage can adapt before double talk
    nonlinear = datasim.build_manifest(
        root / "test_corpus",
        datasim.ManifestConfig(mode="eval", ser_values=(0, -5, -10), preamble_ms=2000,
                               nonlinear_drive_range=(3, 3)),
        seed=4, out_path=root / "nonlinear.jsonl")
    in_span = datasim.build_manifest(
        root / "test_corpus",
        datasim.ManifestConfig(mode="eval", ser_values=(0, -5, -10), preamble_ms=2000),
        seed=5, out_path=root / "in_span.jsonl")
    return SimpleNamespace(
        root=root,
        train_manifest=train,
        train=pipeline.load_utterances(train),
        heldout=pipeline.load_utterances(heldout),
        nonlinear=pipeline.load_utterances(nonlinear),
        in_span=pipeline.load_utterances(in_span),
    )


@pytest.fixture(scope="session")
def toy_runs(toy):
    """Default-size model trained for 2000 steps with and without the ASR
    loss; ``results`` is keyed by lambda_final."""
    start = time.perf_counter()
    results = {}
    for lam in (0.0, LAMBDA_FINAL):
        model = AecModel(AecModelConfig(seed=0))
        config = pipeline.TrainConfig(total_steps=TOY_STEPS, eval_every=TOY_STEPS,
                                      lambda_final=lam, seed=0)
        results[lam] = pipeline.train(model, toy.train, config)
    return SimpleNamespace(results=results, seconds=time.perf_counter() - start)


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    """Small corpus and manifest for fast training-loop tests."""
    root = tmp_path_factory.mktemp("tiny")
    datasim.make_toy_corpus(root / "corpus", num_targets=6, num_references=2, num_noise=1,
                            duration_s=1.0, reference_duration_s=3.0, seed=7)
    manifest = datasim.build_manifest(root / "corpus", datasim.ManifestConfig(count=6),
                                      seed=7, out_path=root / "train.jsonl")
    return SimpleNamespace(root=root, manifest=manifest,
                           utts=pipeline.load_utterances(manifest))


# ---------------------------------------------------------------------------
# One PASS/FAIL line per acceptance criterion in the terminal summary
# ---------------------------------------------------------------------------

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        _acceptance[report.nodeid] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (status, detail) in _acceptance.items():
        name = nodeid.split("::")[-1].removeprefix("test_")
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
