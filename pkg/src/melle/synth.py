"""Prompted autoregressive synthesis (continuation and cross-sentence)."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .audio import FRAME_RATE, HOP_LENGTH, MelSpectrogram, griffin_lim, save_wav, write_melf
from .autograd import NonFiniteError, no_grad
from .model import STOP_THRESHOLD, MelleModel
from .rng import RngState
from .tokenizer import EOS

PROMPT_SECONDS = 3.0
MAX_FRAMES_PER_TOKEN = 20


@dataclass
class SynthesisRequest:
    target_text: Sequence[int]  # x, EOS-terminated
    prompt_mel: np.ndarray  # ~y, (P, 80)
    prompt_text: Sequence[int] = ()  # ~x, EOS-terminated; unused for continuation
    mode: str = "cross_sentence"  # or "continuation"
    sampling: str = "sample"  # or "mean"
    max_frames: int | None = None
    seed: int = 0
    prompt_seconds: float = PROMPT_SECONDS

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([list(map(int, self.target_text)), list(map(int, self.prompt_text)),
                             self.mode, self.sampling, self.max_frames, self.prompt_seconds]).encode())
        h.update(np.ascontiguousarray(self.prompt_mel, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


@dataclass
class SynthesisResult:
    mel: np.ndarray  # y'' (frame_count, 80)
    frame_count: int
    stop_step: int | None  # 1-based decode step at which stop fired
    stop_probs: list[float]
    truncated: bool
    y_prime: np.ndarray = field(repr=False, default=None)
    seed: int = 0
    decode_steps: int = 0


def _strip_eos(ids: Sequence[int]) -> list[int]:
    ids = list(ids)
    while ids and ids[-1] == EOS:
        ids.pop()
    return ids


def assemble_prompt(request: SynthesisRequest, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Token sequence and r-grouped acoustic prefix (P_groups, r*80) for a request.

    Continuation keeps the target transcript and the first ``prompt_seconds``
    of the prompt mel; cross-sentence concatenates prompt and target text
    under a single trailing EOS and keeps the whole prompt mel.  The prefix
    is cut to a whole number of groups.
    """
    mel = np.asarray(request.prompt_mel, dtype=np.float32)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ValueError("prompt audio is empty")
    if request.mode == "continuation":
        tokens = _strip_eos(request.target_text) + [EOS]
        keep = min(int(request.prompt_seconds * FRAME_RATE), len(mel))
        mel = mel[:keep]
    elif request.mode == "cross_sentence":
        tokens = _strip_eos(request.prompt_text) + _strip_eos(request.target_text) + [EOS]
    else:
        raise ValueError(f"unknown prompt mode {request.mode!r}")
    if len(tokens) < 2:
        raise ValueError("target text is empty")
    n_groups = len(mel) // r
    if n_groups < 1:
        raise ValueError(f"prompt has {len(mel)} frames, fewer than one group of r={r}")
    prefix = mel[: n_groups * r].reshape(n_groups, r * mel.shape[1])
    return np.asarray(tokens, dtype=np.int64), prefix


def generate(request: SynthesisRequest, model: MelleModel) -> SynthesisResult:
    """Autoregressive decoding from the prompt; post-net runs once at the end."""
    cfg = model.config
    r, n_mels = cfg.reduction_factor, cfg.n_mels
    tokens, prefix = assemble_prompt(request, r)
    max_frames = request.max_frames or MAX_FRAMES_PER_TOKEN * len(tokens)
    rng = RngState(request.seed)
    generated: list[np.ndarray] = []
    stop_probs: list[float] = []
    stop_step = None
    frames = 0
    with no_grad():
        while frames < max_frames:
            step = len(generated) + 1
            groups = np.concatenate([prefix] + [g[None] for g in generated]) if generated else prefix
            mel_emb = model.prenet_forward(model.acoustic_inputs(groups), rng)
            text_emb = model.embed_text(tokens, rng, training=False)
            try:
                e = model.decoder_forward(text_emb, mel_emb, rng)[-1]
                lat = model.latent_sample(e, rng, request.sampling)
                group = model.latent_to_frame(lat.z).data.reshape(r * n_mels)
                logit = float(model.stop_logit(e).data)
            except NonFiniteError as exc:
                raise NonFiniteError(f"decode step {step}: {exc}") from exc
            generated.append(group.astype(np.float32))
            frames += r
            p = float(1.0 / (1.0 + math.exp(-logit))) if logit > -700 else 0.0
            stop_probs.append(p)
            if p > STOP_THRESHOLD:
                stop_step = step
                break
        frame_count = min(frames, max_frames)
        y_prime = np.concatenate(generated).reshape(-1, n_mels)[:frame_count]
        y2 = model.postnet(ag.Tensor(y_prime.astype(model.dtype))).data.astype(np.float32)
    return SynthesisResult(
        mel=y2,
        frame_count=frame_count,
        stop_step=stop_step,
        stop_probs=stop_probs,
        truncated=stop_step is None,
        y_prime=y_prime,
        seed=request.seed,
        decode_steps=len(generated),
    )


def stop_margin_score(result: SynthesisResult) -> float:
    """Mean distance of the per-step stop probabilities from the 0.5 threshold."""
    return float(np.mean(np.abs(np.asarray(result.stop_probs) - STOP_THRESHOLD)))


def multi_sample(
    request: SynthesisRequest,
    model: MelleModel,
    n: int = 5,
    scorer: Callable[[SynthesisResult], float] = stop_margin_score,
    workers: int = 1,
) -> SynthesisResult:
    """Best of ``n`` generations with seeds ``seed + k``; ties go to the lowest k."""
    if n < 1:
        raise ValueError("n must be >= 1")

    def run(k: int):
        req = SynthesisRequest(**{**request.__dict__, "seed": request.seed + k})
        try:
            return generate(req, model)
        except Exception as exc:  # one failed sample must not sink the rest
            return exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run, range(n)))
    else:
        outcomes = [run(k) for k in range(n)]
    best, best_score = None, -math.inf
    for res in outcomes:
        if isinstance(res, Exception):
            continue
        s = scorer(res)
        if best is None or s > best_score:
            best, best_score = res, s
    if best is None:
        raise RuntimeError(f"all {n} samples failed; first error: {outcomes[0]!r}") from outcomes[0]
    return best


def synthesize_to_wav(
    request: SynthesisRequest,
    model: MelleModel,
    out_wav,
    *,
    n_samples: int = 1,
    gl_iterations: int = 60,
    report_path=None,
    scorer: Callable[[SynthesisResult], float] = stop_margin_score,
) -> SynthesisResult:
    """generate (or multi_sample) -> Griffin-Lim -> 16-bit WAV, plus a MELF sidecar.

    The WAV holds frame_count * hop samples.  When ``report_path`` is given a
    JSON line is appended with the request hash, seed, frame count, stop step,
    truncation flag and score.
    """
    if n_samples > 1:
        result = multi_sample(request, model, n_samples, scorer)
    else:
        result = generate(request, model)
    out_wav = Path(out_wav)
    mel = MelSpectrogram(result.mel)
    write_melf(out_wav.with_suffix(".melf"), mel)
    audio = griffin_lim(mel, gl_iterations, seed=result.seed, trim=True)
    save_wav(out_wav, audio)
    if report_path is not None:
        line = {
            "request": request.digest(),
            "seed": result.seed,
            "frame_count": result.frame_count,
            "stop_step": result.stop_step,
            "truncated": result.truncated,
            "score": scorer(result),
        }
        with open(report_path, "a") as fh:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return result


def expected_samples(frame_count: int) -> int:
    return frame_count * HOP_LENGTH
