"""Shared fixtures for the test suite.

The acceptance tests exercise a full pipeline (synthesize a corpus, train an
encoder, evaluate probes). Those stages are expensive, so they are built once
per session here and shared; wall-clock seconds per stage are kept alongside
so runtime budgets can be asserted where a check requires one. Unit-test
modules never request these fixtures and pay nothing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import pytest

from audiotriplet.corpus import Manifest, SynthSpec, read_wav, synth_corpus
from audiotriplet.encoder import EncoderConfig, EncoderModel, build_encoder, save_checkpoint
from audiotriplet.frontend import ClipFeatures, FrontendConfig, stft_logmel
from audiotriplet.triplet import LossConfig, SamplerConfig, TrainConfig, train

# Pinned end-to-end configuration. Everything the expensive fixtures consume
# is frozen here so reruns are reproducible and the acceptance checks can
# reference one authoritative copy.
PINNED_SPEC = SynthSpec(n_speakers=20, clips_per_speaker=20, n_classes=4,
                        clip_seconds=8.0, seed=13)
PINNED_FRONTEND = FrontendConfig()
PINNED_ENCODER = EncoderConfig(seed=1)
PINNED_SAMPLER = SamplerConfig(clips_per_batch=8, windows_per_clip=3, seed=5)
PINNED_LOSS = LossConfig()
PINNED_TRAIN = TrainConfig(steps=2600, learning_rate=0.05, log_every=50, seed=5)


@dataclass
class PinnedCorpus:
    manifest: Manifest
    features: dict[str, ClipFeatures]
    synth_seconds: float
    featurize_seconds: float

    def feature_list(self) -> list[ClipFeatures]:
        return [self.features[e.clip_id] for e in self.manifest.entries]


@dataclass
class PinnedTeacher:
    model: EncoderModel
    trace: list[tuple[int, float]]
    checkpoint: str
    train_seconds: float


@pytest.fixture(scope="session")
def pinned_corpus(tmp_path_factory) -> PinnedCorpus:
    out = tmp_path_factory.mktemp("pinned-corpus")
    t0 = time.perf_counter()
    manifest = synth_corpus(PINNED_SPEC, out)
    t1 = time.perf_counter()
    features = {e.clip_id: stft_logmel(read_wav(e.path), PINNED_FRONTEND)
                for e in manifest.entries}
    t2 = time.perf_counter()
    return PinnedCorpus(manifest=manifest, features=features,
                        synth_seconds=t1 - t0, featurize_seconds=t2 - t1)


@pytest.fixture(scope="session")
def pinned_teacher(pinned_corpus, tmp_path_factory) -> PinnedTeacher:
    t0 = time.perf_counter()
    model = build_encoder(PINNED_ENCODER)
    trained, trace = train(model, pinned_corpus.feature_list(), PINNED_FRONTEND,
                           PINNED_SAMPLER, PINNED_LOSS, PINNED_TRAIN)
    elapsed = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("pinned-teacher") / "teacher.ckpt"
    save_checkpoint(trained, path)
    return PinnedTeacher(model=trained, trace=trace, checkpoint=str(path),
                         train_seconds=elapsed)


@dataclass
class AcceptanceLog:
    lines: list[str] = field(default_factory=list)

    def record(self, number: int, ok: bool, detail: str) -> None:
        status = "PASS" if ok else "FAIL"
        self.lines.append(f"[{status}] criterion {number}: {detail}")


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig) -> AcceptanceLog:
    log = AcceptanceLog()
    pytestconfig._acceptance_log = log
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = getattr(config, "_acceptance_log", None)
    if log and log.lines:
        terminalreporter.section("acceptance criteria")
        for line in log.lines:
            terminalreporter.write_line(line)
