"""Teacher-forced training: batching, schedules, optimisation, checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .autograd import NonFiniteError, backward
from .losses import LossBreakdown, model_losses
from .model import MelleModel, ModelConfig
from .optim import AdamWConfig, AdamWState, adamw_step
from .rng import RngState
from .tokenizer import PAD

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1
METRICS_HEADER = "step\treg\tkl\tflux\tstop\ttotal\tlr\tlambda"


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_frames: int = 2000
    peak_lr: float = 5e-4
    warmup_steps: int = 200
    lambda_breakpoint: int = 100
    lambda_value: float = 0.1
    beta: float = 0.5
    gamma: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < steps ({self.steps})")


@dataclass
class Utterance:
    tokens: list[int]
    mel: np.ndarray  # (T, 80)
    name: str = ""


@dataclass
class TrainingBatch:
    tokens: np.ndarray  # (B, L) right-padded with PAD
    text_lengths: np.ndarray
    mel: np.ndarray  # (B, T_pad, 80), T_pad a multiple of r
    mel_lengths: np.ndarray
    frame_mask: np.ndarray  # (B, T_pad)
    stop_targets: np.ndarray  # (B, N)

    @property
    def n_frames(self) -> int:
        return int(self.mel_lengths.sum())


# -- reduction factor -------------------------------------------------------------

def partition_reduction(mel: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Split (T, 80) into ceil(T/r) contiguous groups of r*80, zero-padding the last.

    Returns ``(groups, frame_mask)`` where the mask (ceil(T/r) * r,) marks real frames.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    t, d = mel.shape
    n = math.ceil(t / r)
    padded = np.zeros((n * r, d), dtype=mel.dtype)
    padded[:t] = mel
    mask = np.zeros(n * r, dtype=bool)
    mask[:t] = True
    return padded.reshape(n, r * d), mask


def ungroup(groups: np.ndarray, r: int, length: int | None = None) -> np.ndarray:
    frames = groups.reshape(groups.shape[0] * r, -1)
    return frames if length is None else frames[:length]


# -- schedules ---------------------------------------------------------------------------

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``peak_lr`` then linear decay to 0 at ``cfg.steps``."""
    if step <= 0:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.steps:
        return 0.0
    return cfg.peak_lr * (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)


def lambda_schedule(step: int, cfg: TrainConfig) -> float:
    return 0.0 if step < cfg.lambda_breakpoint else cfg.lambda_value


# -- batching ----------------------------------------------------------------------------------

def collate(items: Sequence[Utterance], r: int) -> TrainingBatch:
    b = len(items)
    text_lengths = np.array([len(u.tokens) for u in items])
    mel_lengths = np.array([len(u.mel) for u in items])
    tokens = np.full((b, text_lengths.max()), PAD, dtype=np.int64)
    t_pad = math.ceil(mel_lengths.max() / r) * r
    mel = np.zeros((b, t_pad, items[0].mel.shape[1]), dtype=np.float32)
    for i, u in enumerate(items):
        tokens[i, : len(u.tokens)] = u.tokens
        mel[i, : len(u.mel)] = u.mel
    frame_mask = np.arange(t_pad)[None, :] < mel_lengths[:, None]
    n = t_pad // r
    stop = np.zeros((b, n))
    stop[np.arange(b), [math.ceil(x / r) - 1 for x in mel_lengths]] = 1.0
    return TrainingBatch(tokens, text_lengths, mel, mel_lengths, frame_mask, stop)


def make_batches(utterances: Sequence[Utterance], batch_frames: int, seed: int, epoch: int) -> list[list[int]]:
    """Length-bucketed batches of at most ``batch_frames`` frames, in seeded random order."""
    rng = np.random.default_rng([seed, epoch])
    lengths = np.array([len(u.mel) for u in utterances])
    # shuffle before the stable sort so equal-length items vary between epochs
    perm = rng.permutation(len(utterances))
    order = perm[np.argsort(lengths[perm], kind="stable")]
    batches: list[list[int]] = []
    cur: list[int] = []
    cur_max = 0
    for i in order:
        new_max = max(cur_max, lengths[i])
        if cur and new_max * (len(cur) + 1) > batch_frames:
            batches.append(cur)
            cur, new_max = [], lengths[i]
        cur.append(int(i))
        cur_max = new_max
    if cur:
        batches.append(cur)
    return [batches[j] for j in rng.permutation(len(batches))]


def batch_stream(utterances: Sequence[Utterance], cfg: TrainConfig, r: int, start_step: int = 0) -> Iterator[TrainingBatch]:
    """Endless batch iterator; skipping ``start_step`` batches reproduces a resumed run."""
    epoch = 0
    produced = 0
    while True:
        for idx in make_batches(utterances, cfg.batch_frames, cfg.seed, epoch):
            if produced >= start_step:
                yield collate([utterances[i] for i in idx], r)
            produced += 1
        epoch += 1


# -- optimisation ---------------------------------------------------------------------------------

def step_rng(seed: int, step: int) -> RngState:
    return RngState(seed).split("train", step)


def train_step(
    batch: TrainingBatch,
    model: MelleModel,
    opt_state: AdamWState,
    rng: RngState,
    step: int,
    cfg: TrainConfig,
) -> tuple[LossBreakdown, float]:
    """One forward/backward/AdamW update at 1-based ``step``.

    Returns the loss breakdown and the global gradient norm.
    """
    lam = lambda_schedule(step, cfg)
    lr = lr_schedule(step, cfg)
    r = model.config.reduction_factor
    try:
        out = model.forward_teacher_forced(
            batch.tokens, batch.mel, rng, text_lengths=batch.text_lengths, mel_lengths=batch.mel_lengths
        )
        total, bd = model_losses(
            out, batch.mel, batch.frame_mask, lam=lam, beta=cfg.beta, gamma=cfg.gamma, reduction_factor=r
        )
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {step}: {exc}") from exc
    if not math.isfinite(bd.total):
        raise NonFiniteError(f"step {step}: non-finite loss {bd}")
    params = model.params
    grads = backward(total, params=params.values())
    gnorm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if not math.isfinite(gnorm):
        raise NonFiniteError(f"step {step}: non-finite gradient norm (loss {bd})")
    hp = AdamWConfig(lr=lr, weight_decay=cfg.weight_decay)
    adamw_step(
        {k: p.data for k, p in params.items()},
        {k: grads[p] for k, p in params.items()},
        opt_state,
        hp,
    )
    for p in params.values():
        p.grad = None
    return bd, gnorm


@dataclass
class Trainer:
    model: MelleModel
    cfg: TrainConfig
    opt_state: AdamWState = field(default_factory=AdamWState)
    step: int = 0
    history: list[LossBreakdown] = field(default_factory=list)

    def fit(
        self,
        utterances: Sequence[Utterance],
        steps: int | None = None,
        metrics_path: Path | None = None,
        checkpoint_dir: Path | None = None,
        on_step: Callable[[int, LossBreakdown], None] | None = None,
    ) -> list[LossBreakdown]:
        """Train until ``steps`` (default ``cfg.steps``) total updates have been made."""
        target = self.cfg.steps if steps is None else steps
        r = self.model.config.reduction_factor
        stream = batch_stream(utterances, self.cfg, r, start_step=self.step)
        metrics = None
        if metrics_path is not None:
            new = not Path(metrics_path).exists() or self.step == 0
            metrics = open(metrics_path, "w" if new else "a")
            if new:
                metrics.write(METRICS_HEADER + "\n")
        try:
            while self.step < target:
                batch = next(stream)
                s = self.step + 1
                bd, _ = train_step(batch, self.model, self.opt_state, step_rng(self.cfg.seed, s), s, self.cfg)
                self.step = s
                self.history.append(bd)
                if metrics is not None:
                    metrics.write(format_metrics(s, bd, lr_schedule(s, self.cfg)) + "\n")
                if on_step is not None:
                    on_step(s, bd)
                if s % 100 == 0:
                    log.info("step %d reg=%.4f kl=%.4f flux=%.4f stop=%.4f total=%.4f",
                             s, bd.reg, bd.kl, bd.flux, bd.stop, bd.total)
                if checkpoint_dir is not None and self.cfg.checkpoint_interval and s % self.cfg.checkpoint_interval == 0:
                    save_checkpoint(self.model, self.opt_state, s, Path(checkpoint_dir) / f"ckpt_{s:07d}.mckp")
        finally:
            if metrics is not None:
                metrics.close()
        return self.history


def format_metrics(step: int, bd: LossBreakdown, lr: float) -> str:
    vals = [bd.reg, bd.kl, bd.flux, bd.stop, bd.total, lr, bd.lam]
    return "\t".join([str(step)] + [repr(float(v)) for v in vals])


# -- checkpoints ---------------------------------------------------------------------------------

def _write_blob(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<I", len(raw)) + raw)
    buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(fh: io.BytesIO) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", fh.read(4))
    name = fh.read(n).decode()
    (ndim,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return name, data


def save_checkpoint(model: MelleModel, opt_state: AdamWState, step: int, path) -> None:
    """MCKP container: header + config JSON, parameters and AdamW moments in sorted name order."""
    buf = io.BytesIO()
    cfg_raw = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg_raw)) + cfg_raw)
    buf.write(struct.pack("<Q", step))
    names = model.parameter_names()
    buf.write(struct.pack("<I", len(names)))
    for n in names:
        _write_blob(buf, n, model.params[n].data)
    buf.write(struct.pack("<Q", opt_state.step))
    for moments in (opt_state.m, opt_state.v):
        for n in names:
            arr = moments.get(n)
            _write_blob(buf, n, np.zeros_like(model.params[n].data) if arr is None else arr)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[MelleModel, AdamWState, int]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    fh = io.BytesIO(path.read_bytes())
    if fh.read(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack("<II", fh.read(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(fh.read(cfg_len)))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from exc
    if expected_config is not None and asdict(expected_config) != asdict(config):
        diff = {k: (v, getattr(config, k)) for k, v in asdict(expected_config).items() if getattr(config, k) != v}
        raise CheckpointError(f"{path}: config mismatch (expected, found): {diff}")
    (step,) = struct.unpack("<Q", fh.read(8))
    (count,) = struct.unpack("<I", fh.read(4))
    state = dict(_read_blob(fh) for _ in range(count))
    model = MelleModel(config)
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    (opt_step,) = struct.unpack("<Q", fh.read(8))
    m = dict(_read_blob(fh) for _ in range(count))
    v = dict(_read_blob(fh) for _ in range(count))
    opt = AdamWState(step=opt_step, m=m, v=v) if opt_step else AdamWState()
    return model, opt, step
