"""Desk-scale continuous mel-spectrogram language-model TTS on a numpy autodiff core."""

from .audio import (
    AudioSignal,
    MelSpectrogram,
    extract_mel,
    griffin_lim,
    load_wav,
    read_melf,
    save_wav,
    write_melf,
)
from .autograd import NonFiniteError, Tensor, backward, no_grad
from .losses import flux_loss, kl_loss, model_losses, regression_loss, stop_loss, total_loss
from .model import TINY_CONFIG, MelleModel, ModelConfig
from .rng import RngState
from .synth import SynthesisRequest, SynthesisResult, generate, multi_sample, synthesize_to_wav
from .tokenizer import Vocab, build_vocab
from .trainer import TrainConfig, Trainer, Utterance, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
