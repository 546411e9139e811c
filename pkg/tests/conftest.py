"""Session fixtures, including the (slow) overfit run."""

from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import settings

from melle.audio import AudioSignal, extract_mel
from melle.model import TINY_CONFIG, MelleModel, ModelConfig
from melle.tokenizer import build_vocab
from melle.trainer import TrainConfig, Trainer, Utterance

from .helpers import FIXTURE_TEXT, SR, harmonic_wave

settings.register_profile("ci", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def fixture_mel() -> np.ndarray:
    return extract_mel(AudioSignal(harmonic_wave(), SR)).frames


@pytest.fixture(scope="session")
def overfit(fixture_mel):
    """Tiny model trained for the default 2000 steps on the single 2 s fixture utterance."""
    vocab = build_vocab([FIXTURE_TEXT])
    model = MelleModel(ModelConfig(vocab_size=len(vocab), **TINY_CONFIG), seed=0)
    trainer = Trainer(model, TrainConfig(checkpoint_interval=0))
    utt = Utterance(np.asarray(vocab.encode(FIXTURE_TEXT)), fixture_mel, "fixture")
    t0 = time.perf_counter()
    trainer.fit([utt])
    return {"trainer": trainer, "model": model, "vocab": vocab, "utt": utt, "seconds": time.perf_counter() - t0}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
