"""Synthetic signals and small-model builders shared by the tests."""

from __future__ import annotations

import numpy as np

from melle.model import TINY_CONFIG, MelleModel, ModelConfig

SR = 16000
FIXTURE_TEXT = "hello world, this is a test."


def harmonic_wave(seconds: float = 2.0) -> np.ndarray:
    """Voiced-speech stand-in: gliding f0 with 19 harmonics under a 3 Hz envelope."""
    t = np.arange(int(seconds * SR)) / SR
    f0 = 120 + 30 * np.sin(2 * np.pi * 1.5 * t)
    phase = 2 * np.pi * np.cumsum(f0) / SR
    env = 0.3 * (0.5 + 0.5 * np.sin(2 * np.pi * 3 * t)) ** 2
    return sum(env * np.sin(k * phase) / k for k in range(1, 20))


def sweep_wave(seconds: float = 2.0) -> np.ndarray:
    """Linear chirp 200 Hz -> 3 kHz at amplitude 0.5."""
    t = np.arange(int(seconds * SR)) / SR
    return 0.5 * np.sin(2 * np.pi * (200 * t + 700 * t**2))


def tiny_model(vocab_size: int = 12, seed: int = 0, **overrides) -> MelleModel:
    cfg = dict(TINY_CONFIG, max_frames=256, max_text_len=64)
    cfg.update(overrides)
    return MelleModel(ModelConfig(vocab_size=vocab_size, **cfg), seed=seed)
