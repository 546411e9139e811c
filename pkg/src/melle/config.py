"""Run configuration: one option table drives both the INI schema and CLI flags.

File format is INI-style ``key = value`` lines under ``[model]``, ``[train]``
and ``[synth]`` sections.  Unknown sections or keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Option:
    section: str
    key: str
    type: type
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


_HELP = {
    "n_layers": "Transformer blocks",
    "n_heads": "attention heads per block",
    "d_model": "LM embedding width",
    "d_ffn": "feed-forward width",
    "dropout": "dropout rate for text embeddings, LM and post-net",
    "n_mels": "mel bands (fixed at 80)",
    "reduction_factor": "mel frames predicted per decoding step (r)",
    "max_frames": "longest mel sequence the model accepts",
    "max_text_len": "longest token sequence the model accepts",
    "prenet_dropout": "pre-net dropout, active at inference too",
    "postnet_channels": "post-net intermediate channels",
    "postnet_kernel": "post-net kernel size",
    "postnet_layers": "post-net conv blocks",
    "latent_sampling": "use the Gaussian latent sampling head (false = plain linear layer)",
    "steps": "total optimizer updates",
    "batch_frames": "mel frames per batch",
    "peak_lr": "peak learning rate after warm-up",
    "warmup_steps": "linear warm-up updates",
    "lambda_breakpoint": "step at which the KL weight switches on",
    "lambda_value": "KL weight after the breakpoint",
    "beta": "spectrogram flux loss weight",
    "gamma": "stop loss weight",
    "weight_decay": "AdamW decoupled weight decay",
    "seed": "global random seed",
    "checkpoint_interval": "updates between checkpoints (0 = only final)",
    "gl_iterations": "Griffin-Lim iterations",
    "prompt_seconds": "continuation prompt length in seconds",
    "eval_prompt_seconds": "continuation prompt length used by ablate evaluation",
    "max_synth_frames": "generation cap in frames (0 = 20 x token count)",
}

# vocab_size is derived from the training transcripts, never configured.
_DERIVED = {"vocab_size"}

_SYNTH = [
    Option("synth", "gl_iterations", int, 60, _HELP["gl_iterations"]),
    Option("synth", "prompt_seconds", float, 3.0, _HELP["prompt_seconds"]),
    Option("synth", "eval_prompt_seconds", float, 0.25, _HELP["eval_prompt_seconds"]),
    Option("synth", "max_synth_frames", int, 0, _HELP["max_synth_frames"]),
]


def _from_dataclass(section: str, cls) -> list[Option]:
    out = []
    inst = cls() if cls is not TrainConfig else TrainConfig()
    for f in fields(cls):
        if f.name in _DERIVED:
            continue
        default = getattr(inst, f.name)
        out.append(Option(section, f.name, type(default), default, _HELP[f.name]))
    return out


OPTIONS: list[Option] = _from_dataclass("model", ModelConfig) + _from_dataclass("train", TrainConfig) + _SYNTH
BY_KEY = {o.key: o for o in OPTIONS}
SECTIONS = sorted({o.section for o in OPTIONS})


def _parse_value(opt: Option, raw) -> Any:
    if opt.type is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{opt.section}.{opt.key}: expected a boolean, got {raw!r}")
    try:
        return opt.type(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{opt.section}.{opt.key}: expected {opt.type.__name__}, got {raw!r}") from None


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({o.key: o.default for o in OPTIONS})

    def section(self, name: str) -> dict[str, Any]:
        return {o.key: self.values[o.key] for o in OPTIONS if o.section == name}

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.section("model"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def dumps(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            for o in OPTIONS:
                if o.section == sec:
                    v = self.values[o.key]
                    lines.append(f"{o.key} = {str(v).lower() if isinstance(v, bool) else v}")
            lines.append("")
        return "\n".join(lines)


def load_config(path=None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults <- config file <- non-None ``overrides``; every key validated."""
    cfg = RunConfig.defaults()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for sec in parser.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{sec}] (expected one of {', '.join(SECTIONS)})")
            for key, raw in parser.items(sec):
                opt = BY_KEY.get(key)
                if opt is None or opt.section != sec:
                    raise ConfigError(f"{path}: unknown key '{key}' in [{sec}]")
                cfg.values[key] = _parse_value(opt, raw)
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        opt = BY_KEY.get(key)
        if opt is None:
            raise ConfigError(f"unknown option '{key}'")
        cfg.values[key] = _parse_value(opt, val)
    try:
        cfg.model_config(vocab_size=1)
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def add_config_flags(parser: argparse.ArgumentParser, sections=None) -> None:
    """One ``--key`` flag per option (bools take true/false)."""
    for o in OPTIONS:
        if sections is not None and o.section not in sections:
            continue
        kind = "true/false" if o.type is bool else o.type.__name__
        parser.add_argument(
            o.flag, dest=o.key, default=None, metavar=kind.upper(),
            help=f"[{o.section}] {o.help} (default: {o.default})",
        )


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    return {o.key: getattr(args, o.key) for o in OPTIONS if hasattr(args, o.key)}


def write_default_config(path) -> None:
    Path(path).write_text(RunConfig.defaults().dumps())
