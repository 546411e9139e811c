"""Decoder-only mel-spectrogram language model with latent sampling.

Layout per utterance: ``[text tokens + EOS ; BEGIN ; mel groups ...]`` fed
through a causal pre-LN Transformer.  The hidden state at acoustic position
``t`` predicts mel group ``t`` (``r`` frames): a linear head gives
``(mu, logvar)``, ``z = mu + exp(logvar / 2) * eps``, a residual MLP maps
``z`` to the coarse frames ``y'``, a linear head gives the stop logit, and a
residual conv stack refines the full ``y'`` into ``y''``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .rng import RngState

LOGVAR_MIN = -12.0
LOGVAR_MAX = 6.0
STOP_THRESHOLD = 0.5
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ffn: int = 512
    dropout: float = 0.1
    n_mels: int = 80
    reduction_factor: int = 1
    max_frames: int = 4000
    max_text_len: int = 512
    vocab_size: int = 64
    prenet_dropout: float = 0.5
    postnet_channels: int = 256
    postnet_kernel: int = 5
    postnet_layers: int = 5
    latent_sampling: bool = True

    def __post_init__(self):
        if self.n_mels != 80:
            raise ValueError("n_mels must be 80")
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.postnet_kernel % 2 != 1:
            raise ValueError("postnet_kernel must be odd")
        if self.postnet_layers < 1:
            raise ValueError("postnet_layers must be >= 1")

    @property
    def group_dim(self) -> int:
        return self.reduction_factor * self.n_mels

    @property
    def max_positions(self) -> int:
        # text (+EOS) and BEGIN + groups
        return self.max_text_len + 1 + math.ceil(self.max_frames / self.reduction_factor) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


TINY_CONFIG = dict(n_layers=2, n_heads=2, d_model=64, d_ffn=128, dropout=0.0, postnet_channels=64)


@dataclass
class LatentStats:
    mu: Tensor
    logvar: Tensor | None
    z: Tensor
    eps: np.ndarray | None


@dataclass
class ModelOutputs:
    y_prime: Tensor  # (B, N*r, 80)
    y_double_prime: Tensor
    stop_logits: Tensor  # (B, N)
    latents: LatentStats  # (B, N, r*80)
    lm_states: Tensor  # (B, N, d)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def causal_mask(s: int) -> np.ndarray:
    return np.triu(np.full((s, s), MASK_VALUE), k=1)


class MelleModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = RngState(seed)
        c = config
        d, g = c.d_model, c.group_dim

        self._embedding("text_embedding", c.vocab_size, d, rng)
        self._linear("prenet.0", g, d, rng)
        self._linear("prenet.1", d, d, rng)
        self._linear("prenet.2", d, d, rng)
        for i in range(c.n_layers):
            p = f"decoder.{i}"
            self._layer_norm(f"{p}.ln1", d)
            self._linear(f"{p}.attn.qkv", d, 3 * d, rng)
            self._linear(f"{p}.attn.out", d, d, rng)
            self._layer_norm(f"{p}.ln2", d)
            self._linear(f"{p}.ffn.0", d, c.d_ffn, rng)
            self._linear(f"{p}.ffn.1", c.d_ffn, d, rng)
        self._layer_norm("decoder.ln_f", d)
        self._linear("latent.proj", d, 2 * g if c.latent_sampling else g, rng)
        self._linear("latent.mlp.0", g, d, rng)
        self._linear("latent.mlp.1", d, d, rng)
        self._linear("latent.mlp.2", d, g, rng)
        self._linear("stop", d, 1, rng)
        chans = [c.n_mels] + [c.postnet_channels] * (c.postnet_layers - 1) + [c.n_mels]
        for i in range(c.postnet_layers):
            self._conv(f"postnet.{i}", chans[i], chans[i + 1], c.postnet_kernel, rng)
        self._pe = sinusoidal_positions(c.max_positions, d).astype(self.dtype)

    # -- parameter construction ------------------------------------------------------
    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = ag.parameter(data.astype(self.dtype), name=name)

    def _linear(self, name, n_in, n_out, rng):
        self._add(f"{name}.weight", rng.normal((n_in, n_out)) / math.sqrt(n_in))
        self._add(f"{name}.bias", np.zeros(n_out))

    def _embedding(self, name, n, d, rng):
        self._add(f"{name}.weight", rng.normal((n, d)) * 0.3)

    def _layer_norm(self, name, d):
        self._add(f"{name}.weight", np.ones(d))
        self._add(f"{name}.bias", np.zeros(d))

    def _conv(self, name, c_in, c_out, k, rng):
        self._add(f"{name}.weight", rng.normal((k, c_in, c_out)) / math.sqrt(k * c_in))
        self._add(f"{name}.bias", np.zeros(c_out))

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data for k in self.parameter_names()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ValueError(f"parameter mismatch: missing={missing} unexpected={extra}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- building blocks ----------------------------------------------------------------------
    def linear(self, name: str, x):
        if x.ndim == 1:
            return self.linear(name, x.reshape(1, -1)).reshape(-1)
        return ag.matmul(x, self.params[f"{name}.weight"]) + self.params[f"{name}.bias"]

    def _cast(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def prenet_forward(self, frames, rng: RngState) -> Tensor:
        """(..., r*80) -> (..., d).  Dropout is active in training and inference alike."""
        p = self.config.prenet_dropout
        h = self._cast(frames)
        h = ag.dropout(ag.relu(self.linear("prenet.0", h)), p, rng)
        h = ag.dropout(ag.relu(self.linear("prenet.1", h)), p, rng)
        return self.linear("prenet.2", h)

    def embed_text(self, tokens: np.ndarray, rng: RngState, training: bool) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if np.any(tokens < 0) or np.any(tokens >= self.config.vocab_size):
            raise ValueError("token id outside the vocabulary")
        emb = ag.getitem(self.params["text_embedding.weight"], tokens)
        return ag.dropout(emb, self.config.dropout, rng, training)

    def _attention(self, name: str, x: Tensor, mask: np.ndarray) -> Tensor:
        b, s, d = x.shape
        h = self.config.n_heads
        dh = d // h
        qkv = self.linear(f"{name}.qkv", x).reshape(b, s, 3, h, dh)
        qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, H, S, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + mask
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)).reshape(b, s, d)
        return self.linear(f"{name}.out", ctx)

    def transformer(self, x: Tensor, rng: RngState, training: bool) -> Tensor:
        """Causal pre-LN Transformer over (B, S, d)."""
        s = x.shape[1]
        if s > self.config.max_positions:
            raise ValueError(f"sequence of {s} positions exceeds max_positions={self.config.max_positions}")
        p = self.config.dropout
        x = x + self._pe[:s]
        mask = causal_mask(s).astype(self.dtype)
        for i in range(self.config.n_layers):
            n = f"decoder.{i}"
            a = ag.layer_norm(x, self.params[f"{n}.ln1.weight"], self.params[f"{n}.ln1.bias"])
            x = x + ag.dropout(self._attention(f"{n}.attn", a, mask), p, rng, training)
            f = ag.layer_norm(x, self.params[f"{n}.ln2.weight"], self.params[f"{n}.ln2.bias"])
            f = self.linear(f"{n}.ffn.1", ag.gelu(self.linear(f"{n}.ffn.0", f)))
            x = x + ag.dropout(f, p, rng, training)
        return ag.layer_norm(x, self.params["decoder.ln_f.weight"], self.params["decoder.ln_f.bias"])

    def decoder_forward(
        self,
        text_emb,
        mel_emb,
        rng: RngState,
        training: bool = False,
        text_lengths=None,
        mel_lengths=None,
    ) -> Tensor:
        """Run the LM on ``[text ; acoustic]`` and return the acoustic-position states.

        Accepts single items (L, d) / (M, d) or right-padded batches (B, L, d) /
        (B, M, d) with per-item lengths.  Each item's text is packed directly in
        front of its acoustic rows so padding only ever trails real positions.
        """
        text_emb, mel_emb = self._cast(text_emb), self._cast(mel_emb)
        single = text_emb.ndim == 2
        if single:
            text_emb = text_emb.reshape(1, *text_emb.shape)
            mel_emb = mel_emb.reshape(1, *mel_emb.shape)
        b, lmax, d = text_emb.shape
        mmax = mel_emb.shape[1]
        if lmax == 0 or mmax == 0:
            raise ValueError("text and acoustic inputs must be non-empty")
        tl = np.full(b, lmax) if text_lengths is None else np.asarray(text_lengths)
        s = lmax + mmax
        if np.all(tl == lmax):
            seq = ag.concat([text_emb, mel_emb], axis=1)
            acoustic_idx = lmax + np.arange(mmax)[None, :].repeat(b, axis=0)
        else:
            both = ag.concat([text_emb, mel_emb], axis=1).reshape(b * s, d)
            gather = np.empty((b, s), dtype=np.int64)
            acoustic_idx = np.empty((b, mmax), dtype=np.int64)
            for i in range(b):
                li = int(tl[i])
                src = np.concatenate([np.arange(li), lmax + np.arange(mmax), np.arange(li, lmax)])
                gather[i] = i * s + src
                acoustic_idx[i] = li + np.arange(mmax)
            seq = ag.getitem(both, gather)
        h = self.transformer(seq, rng, training)
        rows = np.arange(b)[:, None]
        e = ag.getitem(h, (rows, acoustic_idx))
        return e.reshape(mmax, d) if single else e

    def latent_sample(self, e, rng: RngState, mode: str = "sample") -> LatentStats:
        """[mu, logvar] = W e + b; z = mu + exp(logvar/2) * eps (mode="sample") or z = mu."""
        if mode not in ("sample", "mean"):
            raise ValueError(f"mode must be 'sample' or 'mean', got {mode!r}")
        g = self.config.group_dim
        out = self.linear("latent.proj", self._cast(e))
        if not self.config.latent_sampling:
            return LatentStats(out, None, out, None)
        mu = out[..., :g]
        logvar = ag.clip(out[..., g:], LOGVAR_MIN, LOGVAR_MAX)
        if mode == "mean":
            return LatentStats(mu, logvar, mu, None)
        eps = rng.normal(mu.shape, dtype=self.dtype)
        z = mu + ag.exp(logvar * 0.5) * eps
        return LatentStats(mu, logvar, z, eps)

    def latent_to_frame(self, z) -> Tensor:
        """y' = z + MLP(z), reshaped from (..., r*80) to (..., r, 80)."""
        z = self._cast(z)
        h = ag.relu(self.linear("latent.mlp.0", z))
        h = ag.relu(self.linear("latent.mlp.1", h))
        y = z + self.linear("latent.mlp.2", h)
        r = self.config.reduction_factor
        return y.reshape(*z.shape[:-1], r, self.config.n_mels)

    def stop_logit(self, e) -> Tensor:
        e = self._cast(e)
        return self.linear("stop", e).reshape(e.shape[:-1])

    def postnet(self, y_prime, rng: RngState | None = None, training: bool = False, frame_mask=None) -> Tensor:
        """y'' = y' + conv-stack(y'); (..., T, 80) in and out.

        ``frame_mask`` (..., T) zeroes padded frames before every conv so that
        padding (and the bias it picks up) never reaches real frames.
        """
        y = self._cast(y_prime)
        m = None if frame_mask is None else np.asarray(frame_mask, dtype=self.dtype)[..., None]
        if m is not None:
            y = y * m
        n = self.config.postnet_layers
        h = y
        for i in range(n):
            h = ag.conv1d(h, self.params[f"postnet.{i}.weight"], self.params[f"postnet.{i}.bias"])
            if i < n - 1:
                h = ag.tanh(h)
                if m is not None:
                    h = h * m
            if training:
                h = ag.dropout(h, self.config.dropout, rng, training)
        return y + h

    # -- full passes -------------------------------------------------------------------------------
    def acoustic_inputs(self, groups) -> Tensor:
        """Prepend the all-zero BEGIN group: (..., N, g) -> (..., N + 1, g)."""
        groups = self._cast(groups)
        begin = np.zeros(groups.shape[:-2] + (1, groups.shape[-1]), dtype=self.dtype)
        return ag.concat([Tensor(begin), groups], axis=-2)

    def forward_teacher_forced(
        self,
        tokens,
        target_mel,
        rng: RngState,
        *,
        mode: str = "sample",
        training: bool = True,
        text_lengths=None,
        mel_lengths=None,
    ) -> ModelOutputs:
        """Teacher-forced pass.

        ``tokens``: (L,) or right-padded (B, L) ids; ``target_mel``: (T, 80) or
        (B, T, 80) with T a multiple of r.  Step t consumes ground-truth group
        t - 1 (step 0 consumes the zero BEGIN group).  With ``mel_lengths``,
        padded frames are held at zero through every post-net layer so
        padding cannot leak into real frames through the convolution window.
        """
        tokens = np.asarray(tokens)
        mel = np.asarray(target_mel, dtype=self.dtype)
        single = tokens.ndim == 1
        if single:
            tokens, mel = tokens[None], mel[None]
        r = self.config.reduction_factor
        b, t, n_mels = mel.shape
        if t % r:
            raise ValueError(f"target length {t} is not a multiple of r={r}")
        if t > self.config.max_frames or tokens.shape[1] > self.config.max_text_len + 1:
            raise ValueError("input exceeds the configured maximum length")
        n = t // r
        groups = mel.reshape(b, n, r * n_mels)
        mel_in = self.acoustic_inputs(Tensor(groups[:, :-1]))
        mel_emb = self.prenet_forward(mel_in, rng)
        text_emb = self.embed_text(tokens, rng, training)
        e = self.decoder_forward(text_emb, mel_emb, rng, training, text_lengths=text_lengths)
        lat = self.latent_sample(e, rng, mode)
        y1 = self.latent_to_frame(lat.z).reshape(b, t, n_mels)
        fmask = None
        if mel_lengths is not None:
            fmask = np.arange(t)[None, :] < np.asarray(mel_lengths).reshape(-1, 1)
        y2 = self.postnet(y1, rng, training, frame_mask=fmask)
        stop = self.stop_logit(e)
        if single:
            lat = LatentStats(
                lat.mu[0], None if lat.logvar is None else lat.logvar[0], lat.z[0], None if lat.eps is None else lat.eps[0]
            )
            return ModelOutputs(y1[0], y2[0], stop[0], lat, e[0])
        return ModelOutputs(y1, y2, stop, lat, e)
