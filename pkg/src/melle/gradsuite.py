"""Finite-difference checks for every differentiable op, loss and model block.

All checks run in float64.  Component checks must stay below 1e-6 relative
error, the end-to-end training objective below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .gradcheck import grad_check
from .losses import flux_loss, kl_loss, model_losses, regression_loss, stop_loss
from .model import MelleModel, ModelConfig
from .rng import RngState

COMPONENT_TOL = 1e-6
END_TO_END_TOL = 1e-4

GRADCHECK_CONFIG = dict(
    n_layers=1, n_heads=2, d_model=8, d_ffn=16, dropout=0.1, postnet_channels=4,
    vocab_size=6, max_frames=16, max_text_len=8,
)


@dataclass
class CheckResult:
    component: str
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _rand(rng: np.random.Generator, *shape, away_from_zero: float = 0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + away_from_zero)
    return Tensor(x)


def _weighted(fn: Callable[..., Tensor], w: np.ndarray) -> Callable[..., Tensor]:
    return lambda *xs: (fn(*xs) * w).sum()


def autodiff_checks(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    g = np.random.default_rng(seed)
    w34 = g.standard_normal((3, 4))
    w35 = g.standard_normal((3, 5))
    mask_probe = RngState(seed)

    def dropout_fixed(x):
        return ag.dropout(x, 0.3, mask_probe.copy())

    checks = [
        ("add", _weighted(lambda a, b: a + b, w34), [_rand(g, 3, 4), _rand(g, 4)]),
        ("sub", _weighted(lambda a, b: a - b, w34), [_rand(g, 3, 4), _rand(g, 3, 1)]),
        ("mul", _weighted(lambda a, b: a * b, w34), [_rand(g, 3, 4), _rand(g, 3, 4)]),
        ("div", _weighted(lambda a, b: a / b, w34), [_rand(g, 3, 4), _rand(g, 3, 4, away_from_zero=0.5)]),
        ("pow", _weighted(lambda a: a**3, w34), [_rand(g, 3, 4)]),
        ("matmul", _weighted(lambda a, b: a @ b, w35), [_rand(g, 3, 4), _rand(g, 4, 5)]),
        ("batched_matmul", lambda a, b: ((a @ b) * 0.7).sum(), [_rand(g, 2, 3, 4), _rand(g, 2, 4, 2)]),
        ("exp", _weighted(ag.exp, w34), [_rand(g, 3, 4)]),
        ("log", _weighted(ag.log, w34), [Tensor(g.uniform(0.5, 2.0, (3, 4)))]),
        ("tanh", _weighted(ag.tanh, w34), [_rand(g, 3, 4)]),
        ("sigmoid", _weighted(ag.sigmoid, w34), [_rand(g, 3, 4)]),
        ("softplus", _weighted(ag.softplus, w34), [_rand(g, 3, 4)]),
        ("relu", _weighted(ag.relu, w34), [_rand(g, 3, 4, away_from_zero=0.1)]),
        ("gelu", _weighted(ag.gelu, w34), [_rand(g, 3, 4)]),
        ("abs", _weighted(ag.tabs, w34), [_rand(g, 3, 4, away_from_zero=0.1)]),
        ("clip", _weighted(lambda a: ag.clip(a, -0.5, 0.5), w34), [Tensor(g.choice([-1.0, -0.2, 0.1, 0.3, 1.2], (3, 4)))]),
        ("sum_axis", lambda a: (a.sum(axis=1) * w34[:, 0]).sum(), [_rand(g, 3, 4)]),
        ("mean_axis", lambda a: (a.mean(axis=0, keepdims=True) * w34[:1]).sum(), [_rand(g, 3, 4)]),
        ("reshape_transpose", lambda a: (a.reshape(4, 3).transpose() * w34).sum(), [_rand(g, 3, 4)]),
        ("getitem", lambda a: (a[np.array([0, 2, 2]), 1:3] * w35[:, :2]).sum(), [_rand(g, 3, 4)]),
        ("concat", lambda a, b: (ag.concat([a, b], axis=1) * w35[:, :5]).sum(), [_rand(g, 3, 2), _rand(g, 3, 3)]),
        ("softmax", _weighted(lambda a: ag.softmax(a, axis=-1), w34), [_rand(g, 3, 4)]),
        ("softmax_cross_entropy", lambda a: -(ag.log(ag.softmax(a, axis=-1)) * np.eye(4)[[0, 3, 1]]).sum(), [_rand(g, 3, 4)]),
        ("layer_norm", _weighted(ag.layer_norm, w34), [_rand(g, 3, 4), _rand(g, 4), _rand(g, 4)]),
        ("conv1d", lambda x, k, b: (ag.conv1d(x, k, b) * w35[:, :2]).sum(), [_rand(g, 3, 4), _rand(g, 3, 4, 2), _rand(g, 2)]),
        ("dropout", _weighted(dropout_fixed, w34), [_rand(g, 3, 4)]),
    ]
    return checks


def loss_checks(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    g = np.random.default_rng(seed + 1)
    y = g.standard_normal((4, 6))
    tgt = np.array([0.0, 0.0, 1.0])
    return [
        ("regression", lambda a, b: regression_loss(y, a, b), [_rand(g, 4, 6), _rand(g, 4, 6)]),
        ("kl", lambda mu, lv: kl_loss(mu, lv, y), [_rand(g, 4, 6), _rand(g, 4, 6)]),
        ("flux", lambda mu: flux_loss(mu, y), [_rand(g, 4, 6)]),
        ("stop", lambda x: stop_loss(x, tgt), [_rand(g, 3)]),
    ]


def _tiny_model(seed: int, r: int = 1) -> MelleModel:
    """Float64 tiny model with every parameter jittered off its initial value.

    Zero-initialised biases put ReLU inputs exactly on the kink for the all-zero
    BEGIN frame; jitter moves the check to a generic differentiable point.
    """
    model = MelleModel(ModelConfig(reduction_factor=r, **GRADCHECK_CONFIG), seed=seed, dtype=np.float64)
    g = np.random.default_rng(seed + 100)
    for name in model.parameter_names():
        p = model.params[name]
        p.data = p.data + 0.1 * g.standard_normal(p.shape)
    return model


def model_checks(seed: int = 0) -> list[tuple[str, Callable[..., Tensor], list[Tensor]]]:
    g = np.random.default_rng(seed + 2)
    model = _tiny_model(seed)
    d = model.config.d_model
    rng = RngState(seed + 3)

    def fixed(fn):
        return lambda *xs: fn(rng.copy(), *xs)

    w_pre = g.standard_normal((3, d))
    w_dec = g.standard_normal((2, d))
    w_lat = g.standard_normal((2, 80))
    w_frame = g.standard_normal((2, 1, 80))
    w_post = g.standard_normal((3, 80))
    text = g.standard_normal((3, d))
    return [
        ("prenet", fixed(lambda r, x: (model.prenet_forward(x, r) * w_pre).sum()), [_rand(g, 3, 80)]),
        ("decoder", fixed(lambda r, t, m: (model.decoder_forward(t, m, r, training=True) * w_dec).sum()),
         [Tensor(text), _rand(g, 2, d)]),
        ("latent_sample", fixed(lambda r, e: (model.latent_sample(e, r, "sample").z * w_lat).sum()), [_rand(g, 2, d)]),
        ("latent_to_frame", lambda z: (model.latent_to_frame(z) * w_frame).sum(), [_rand(g, 2, 80)]),
        ("stop_logit", lambda e: (model.stop_logit(e) * np.array([0.3, -1.2])).sum(), [_rand(g, 2, d)]),
        ("postnet", lambda y: (model.postnet(y) * w_post).sum(), [_rand(g, 3, 80)]),
    ]


def end_to_end_check(seed: int = 0, r: int = 1) -> float:
    """Full weighted objective on a 2-frame toy utterance against every parameter."""
    g = np.random.default_rng(seed + 4)
    model = _tiny_model(seed, r)
    tokens = np.array([3, 4, 1])
    t = 2 * r
    mel = g.standard_normal((t, 80))
    rng = RngState(seed + 5)

    def objective(*_params):
        out = model.forward_teacher_forced(tokens, mel, rng.copy(), training=True)
        total, _ = model_losses(out, mel, lam=0.1, beta=0.5, gamma=1.0, reduction_factor=r)
        return total

    params = [model.params[n] for n in model.parameter_names()]
    return grad_check(objective, params)


def run_suite(components=("autodiff", "losses", "model", "end_to_end"), seed: int = 0) -> list[CheckResult]:
    results: list[CheckResult] = []
    groups = {
        "autodiff": autodiff_checks,
        "losses": loss_checks,
        "model": model_checks,
    }
    for comp in components:
        if comp in groups:
            for name, fn, inputs in groups[comp](seed):
                results.append(CheckResult(comp, name, grad_check(fn, inputs), COMPONENT_TOL))
        elif comp == "end_to_end":
            results.append(CheckResult(comp, "total_loss", end_to_end_check(seed), END_TO_END_TOL))
        else:
            raise ValueError(f"unknown gradcheck component {comp!r}")
    return results
