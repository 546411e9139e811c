"""Regression, KL, spectrogram-flux and stop losses and their weighted total.

Every term accepts an optional elementwise ``mask`` (1 on real data, 0 on
padding).  With ``normalize=True`` (the training default) the frame losses
are divided by the number of real elements (T * 80 for an unpadded
utterance) and the stop loss by the number of real decoding steps; with
``normalize=False`` they are the raw sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

STOP_POS_WEIGHT = 100.0
DEFAULT_BETA = 0.5
DEFAULT_GAMMA = 1.0


def _t(x) -> Tensor:
    return ag.as_tensor(x)


def _check_shapes(*xs) -> None:
    shapes = {tuple(x.shape) for x in xs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _reduce(elem: Tensor, mask, normalize: bool) -> Tensor:
    if mask is None:
        total = elem.sum()
        count = elem.size
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=elem.dtype), elem.shape)
        total = (elem * m).sum()
        count = float(m.sum())
    if normalize:
        return total * (1.0 / max(count, 1.0))
    return total


def regression_loss(y, y_prime, y_double_prime, mask=None, normalize: bool = True) -> Tensor:
    """|y - y'|_1 + |y - y'|_2^2 + |y - y''|_1 + |y - y''|_2^2."""
    y, y1, y2 = _t(y), _t(y_prime), _t(y_double_prime)
    _check_shapes(y, y1, y2)
    d1 = y - y1
    d2 = y - y2
    elem = ag.tabs(d1) + d1 * d1 + ag.tabs(d2) + d2 * d2
    return _reduce(elem, mask, normalize)


def kl_loss(mu, logvar, y, mask=None, normalize: bool = True) -> Tensor:
    """Closed-form KL( N(mu, diag(exp(logvar))) || N(y, I) ), summed over dims and steps.

    Per element: 0.5 * (sigma^2 + (mu - y)^2 - 1 - log sigma^2).
    """
    mu, logvar, y = _t(mu), _t(logvar), _t(y)
    _check_shapes(mu, logvar, y)
    diff = mu - y
    elem = (ag.exp(logvar) + diff * diff - 1.0 - logvar) * 0.5
    return _reduce(elem, mask, normalize)


def flux_loss(mu, y, mask=None, normalize: bool = True) -> Tensor:
    """-sum_{t>=1} |mu_t - y_{t-1}|_1 over frames (time is axis -2).

    ``mask`` marks real frames (..., T) or elements (..., T, D); pair t is
    counted when frame t is real.  Fewer than two frames gives 0.  The
    normaliser is the element count of the whole sequence, T * D.
    """
    mu, y = _t(mu), _t(y)
    _check_shapes(mu, y)
    full = None
    if mask is not None:
        m = np.asarray(mask, dtype=mu.dtype)
        if m.shape == mu.shape[:-1]:
            m = m[..., None]
        full = np.broadcast_to(m, mu.shape)
    if mu.shape[-2] < 2:
        return Tensor(np.zeros((), dtype=mu.dtype))
    elem = -ag.tabs(mu[..., 1:, :] - y[..., :-1, :])
    total = _reduce(elem, None if full is None else full[..., 1:, :], False)
    if not normalize:
        return total
    count = mu.size if full is None else float(full.sum())
    return total * (1.0 / max(count, 1.0))


def stop_loss(logits, targets, mask=None, pos_weight: float = STOP_POS_WEIGHT, normalize: bool = True,
              require_positive: bool = True) -> Tensor:
    """Binary cross-entropy on sigmoid(logits) with positives weighted by ``pos_weight``.

    -[w * y * log s(x) + (1 - y) * log(1 - s(x))], computed via softplus.
    """
    logits = _t(logits)
    tgt = np.asarray(targets, dtype=logits.dtype)
    if tgt.shape != logits.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape} vs targets {tgt.shape}")
    if require_positive:
        real = tgt if mask is None else tgt * np.asarray(mask)
        per_item = real.reshape(-1, real.shape[-1]).sum(axis=-1) if real.ndim else real
        if np.any(np.asarray(per_item) < 1):
            raise ValueError("stop targets contain an utterance without a positive step")
    elem = ag.softplus(-logits) * (pos_weight * tgt) + ag.softplus(logits) * (1.0 - tgt)
    return _reduce(elem, mask, normalize)


@dataclass
class LossBreakdown:
    reg: float
    kl: float
    flux: float
    stop: float
    total: float
    lam: float
    beta: float
    gamma: float

    def as_row(self) -> list[float]:
        return [self.reg, self.kl, self.flux, self.stop, self.total]


def total_loss(reg, kl, flux, stop, lam: float, beta: float = DEFAULT_BETA, gamma: float = DEFAULT_GAMMA):
    """reg + lam * kl + beta * flux + gamma * stop.

    Returns ``(total, breakdown)`` where ``total`` keeps the graph when the
    terms are tensors.
    """
    total = reg + kl * lam + flux * beta + stop * gamma
    val = lambda x: float(x.data) if isinstance(x, Tensor) else float(x)  # noqa: E731
    bd = LossBreakdown(val(reg), val(kl), val(flux), val(stop), val(total), lam, beta, gamma)
    return total, bd


def model_losses(outputs, target, frame_mask=None, lam: float = 0.0, beta: float = DEFAULT_BETA,
                 gamma: float = DEFAULT_GAMMA, reduction_factor: int = 1, step_mask=None):
    """All four terms for teacher-forced ``outputs`` against ``target`` (…, T, 80).

    KL uses the grouped (…, N, r*80) latents against the grouped target;
    flux ungroups mu back to frames so every consecutive pair (inside and
    across groups) is compared.  Returns ``(total, breakdown)``.
    """
    r = reduction_factor
    y = np.asarray(target, dtype=outputs.y_prime.dtype)
    t, n_mels = y.shape[-2:]
    n = t // r
    lead = y.shape[:-2]
    fmask = None
    if frame_mask is not None:
        fmask = np.asarray(frame_mask, dtype=y.dtype)[..., None] * np.ones(n_mels, dtype=y.dtype)
    reg = regression_loss(y, outputs.y_prime, outputs.y_double_prime, fmask)

    lat = outputs.latents
    gmask = None if fmask is None else fmask.reshape(lead + (n, r * n_mels))
    y_grouped = y.reshape(lead + (n, r * n_mels))
    if lat.logvar is None:
        kl = Tensor(np.zeros((), dtype=y.dtype))
    else:
        kl = kl_loss(lat.mu, lat.logvar, y_grouped, gmask)
    mu_frames = lat.mu.reshape(lead + (t, n_mels))
    flux = flux_loss(mu_frames, y, fmask)

    stop_tgt = stop_targets(frame_mask, n, r, lead)
    smask = step_mask
    if smask is None and frame_mask is not None:
        smask = np.asarray(frame_mask).reshape(lead + (n, r))[..., 0]
    stop = stop_loss(outputs.stop_logits, stop_tgt, smask)
    return total_loss(reg, kl, flux, stop, lam, beta, gamma)


def stop_targets(frame_mask, n_steps: int, r: int, lead=()) -> np.ndarray:
    """1 at each utterance's last real group, 0 elsewhere."""
    tgt = np.zeros(tuple(lead) + (n_steps,))
    if frame_mask is None:
        tgt[..., -1] = 1.0
        return tgt
    lengths = np.asarray(frame_mask).sum(axis=-1).astype(int)
    last = np.array([math.ceil(int(x) / r) - 1 for x in np.ravel(lengths)]).reshape(lengths.shape)
    np.put_along_axis(tgt, last[..., None], 1.0, axis=-1)
    return tgt
