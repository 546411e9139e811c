"""``melle`` command line: extract, train, synth, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .audio import AudioError, MelSpectrogram, extract_mel, load_wav, read_melf, write_melf
from .autograd import NonFiniteError, no_grad
from .config import ConfigError, add_config_flags, load_config, overrides_from_args
from .gradsuite import run_suite
from .losses import model_losses
from .model import MelleModel
from .rng import RngState
from .synth import SynthesisRequest, generate, synthesize_to_wav
from .tokenizer import Vocab, build_vocab
from .trainer import CheckpointError, Trainer, Utterance, load_checkpoint, save_checkpoint

log = logging.getLogger("melle")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
VOCAB_FILE = "vocab.txt"
ABLATION_VARIANTS = ("baseline", "no_latent_sampling", "no_flux", "mean_sampling")


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


def env_seed(default: int = 0) -> int:
    raw = os.environ.get("MELLE_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MELLE_SEED must be an integer, got {raw!r}") from None


# -- manifests -----------------------------------------------------------------------------------

def read_manifest(path) -> list[tuple[Path, str]]:
    """``<wav-or-melf path>\\t<transcript>`` per line; relative paths resolve against the manifest."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    out = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{i}: expected '<path>\\t<transcript>'")
        p, text = line.split("\t", 1)
        audio = Path(p)
        if not audio.is_absolute():
            audio = path.parent / audio
        out.append((audio, text.strip()))
    return out


def load_mel(path) -> MelSpectrogram:
    path = Path(path)
    try:
        if path.suffix.lower() == ".melf":
            return read_melf(path)
        return extract_mel(load_wav(path))
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except (AudioError, ValueError, OSError) as exc:
        msg = str(exc)
        raise DataError(msg if msg.startswith(str(path)) else f"{path}: {msg}") from exc


def load_utterances(manifest, vocab: Vocab | None = None) -> tuple[list[Utterance], Vocab]:
    entries = read_manifest(manifest)
    if not entries:
        raise DataError(f"{manifest}: manifest is empty")
    if vocab is None:
        vocab = build_vocab(t for _, t in entries)
    utts = [Utterance(np.asarray(vocab.encode(t)), load_mel(p).frames, name=p.stem) for p, t in entries]
    return utts, vocab


# -- commands ------------------------------------------------------------------------------------

def cmd_extract(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    for audio, _ in read_manifest(args.manifest):
        dest = out_dir / (audio.stem + ".melf")
        if dest.exists():
            continue
        try:
            mel = load_mel(audio)
        except DataError as exc:
            print(f"melle: skipped: {exc}", file=sys.stderr)
            failures += 1
            continue
        write_melf(dest, mel)
        log.info("wrote %s (%d frames)", dest, len(mel))
    if failures:
        print(f"melle: {failures} file(s) failed", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def _run_config(args):
    overrides = overrides_from_args(args)
    if overrides.get("seed") is None:
        overrides["seed"] = env_seed()
    return load_config(args.config, overrides)


def _train(run, utts, vocab, out_dir: Path, resume=None, beta=None) -> Trainer:
    tcfg = run.train_config()
    if beta is not None:
        tcfg = replace(tcfg, beta=beta)
    mcfg = run.model_config(len(vocab))
    if resume is not None:
        model, opt, step = load_checkpoint(resume, expected_config=mcfg)
        trainer = Trainer(model, tcfg, opt, step)
    else:
        trainer = Trainer(MelleModel(mcfg, seed=tcfg.seed), tcfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / VOCAB_FILE)
    (out_dir / "config.ini").write_text(run.dumps())
    trainer.fit(utts, metrics_path=out_dir / "metrics.tsv", checkpoint_dir=out_dir)
    save_checkpoint(trainer.model, trainer.opt_state, trainer.step, out_dir / "final.mckp")
    return trainer


def cmd_train(args) -> int:
    run = _run_config(args)
    vocab = None
    if args.resume:
        vpath = Path(args.resume).parent / VOCAB_FILE
        if vpath.exists():
            vocab = Vocab.load(vpath)
    utts, vocab = load_utterances(args.manifest, vocab)
    trainer = _train(run, utts, vocab, Path(args.out_dir), resume=args.resume)
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f"step {trainer.step}: reg={last.reg:.4f} kl={last.kl:.4f} flux={last.flux:.4f} "
              f"stop={last.stop:.4f} total={last.total:.4f}")
    return EXIT_OK


def _load_model_and_vocab(ckpt) -> tuple[MelleModel, Vocab]:
    model, _, _ = load_checkpoint(ckpt)
    vpath = Path(ckpt).parent / VOCAB_FILE
    if not vpath.exists():
        raise DataError(f"{vpath}: vocabulary file missing next to checkpoint")
    vocab = Vocab.load(vpath)
    if len(vocab) != model.config.vocab_size:
        raise DataError(f"{vpath}: {len(vocab)} symbols but checkpoint expects {model.config.vocab_size}")
    return model, vocab


def cmd_synth(args) -> int:
    if not args.target_text.strip():
        raise UsageError("target text is empty")
    run = load_config(args.config, overrides_from_args(args))
    model, vocab = _load_model_and_vocab(args.checkpoint)
    seed = args.seed if args.seed is not None else env_seed()
    request = SynthesisRequest(
        target_text=vocab.encode(args.target_text),
        prompt_text=vocab.encode(args.prompt_text),
        prompt_mel=load_mel(args.prompt_audio).frames,
        mode=args.mode,
        sampling=args.sampling,
        max_frames=run["max_synth_frames"] or None,
        seed=seed,
        prompt_seconds=run["prompt_seconds"],
    )
    try:
        result = synthesize_to_wav(request, model, args.out, n_samples=args.n_samples,
                                   gl_iterations=run["gl_iterations"], report_path=args.report)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"{args.out}: {result.frame_count} frames, stop_step={result.stop_step}, "
          f"truncated={result.truncated}, seed={result.seed}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else env_seed()
    components = args.component or ["autodiff", "losses", "model", "end_to_end"]
    results = run_suite(components, seed=seed)
    worst: dict[str, float] = {}
    failed = False
    for res in results:
        worst[res.component] = max(worst.get(res.component, 0.0), res.error)
        if args.verbose or not res.ok:
            print(f"  {res.component}/{res.name}: {res.error:.3e} ({'ok' if res.ok else 'FAIL'})")
        failed |= not res.ok
    for comp in components:
        tol = next(r.tol for r in results if r.component == comp)
        status = "ok" if worst[comp] < tol else "FAIL"
        print(f"{comp:<12} max_rel_err={worst[comp]:.3e} tol={tol:.0e} {status}")
    return EXIT_NUMERIC if failed else EXIT_OK


def evaluate_variant(model: MelleModel, utt: Utterance, sampling: str, prompt_seconds: float, seed: int) -> dict:
    """Teacher-forced losses plus one continuation decode on a training utterance."""
    r = model.config.reduction_factor
    usable = (len(utt.mel) // r) * r
    mel = utt.mel[:usable]
    with no_grad():
        out = model.forward_teacher_forced(utt.tokens, mel, RngState(seed), mode="mean", training=False)
        _, bd = model_losses(out, mel, lam=0.0, reduction_factor=r)
    req = SynthesisRequest(target_text=utt.tokens, prompt_mel=utt.mel, mode="continuation",
                           sampling=sampling, seed=seed, prompt_seconds=prompt_seconds)
    res = generate(req, model)
    prefix = int(prompt_seconds * 62.5) // r * r
    gt = len(utt.mel) - prefix
    return {"tf_reg": bd.reg, "gen_frames": res.frame_count, "gt_frames": gt, "truncated": res.truncated}


def run_ablation(run, utts, vocab, out_dir: Path, variants=ABLATION_VARIANTS) -> list[dict]:
    rows = []
    trained: dict[tuple, Trainer] = {}  # variants differing only at inference share a model
    for name in variants:
        vrun = load_config(None, dict(run.values))
        sampling = "mean" if name == "mean_sampling" else "sample"
        beta = 0.0 if name == "no_flux" else None
        if name == "no_latent_sampling":
            vrun.values["latent_sampling"] = False
        key = (vrun["latent_sampling"], beta)
        if key not in trained:
            log.info("ablation variant %s: training", name)
            trained[key] = _train(vrun, utts, vocab, out_dir / name, beta=beta)
        trainer = trained[key]
        last = trainer.history[-1]
        finite = all(math.isfinite(v) for bd in trainer.history for v in bd.as_row())
        ev = evaluate_variant(trainer.model, utts[0], sampling, vrun["eval_prompt_seconds"], vrun["seed"])
        rows.append({
            "variant": name, "sampling": sampling, "beta": trainer.cfg.beta,
            "reg": last.reg, "kl": last.kl, "flux": last.flux, "stop": last.stop, "total": last.total,
            "finite": finite, **ev,
        })
    return rows


ABLATION_COLUMNS = ("variant", "sampling", "beta", "reg", "kl", "flux", "stop", "total", "finite",
                    "tf_reg", "gen_frames", "gt_frames", "truncated")


def format_ablation(rows: list[dict]) -> tuple[str, str]:
    """(TSV text, aligned console table)."""
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    tsv = ["\t".join(ABLATION_COLUMNS)] + ["\t".join(cell(r[c]) for c in ABLATION_COLUMNS) for r in rows]
    cells = [list(ABLATION_COLUMNS)] + [[cell(r[c]) for c in ABLATION_COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(ABLATION_COLUMNS))]
    table = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(tsv) + "\n", "\n".join(table)


def cmd_ablate(args) -> int:
    run = _run_config(args)
    utts, vocab = load_utterances(args.manifest)
    chosen = []
    if args.no_latent_sampling:
        chosen.append("no_latent_sampling")
    if args.no_flux:
        chosen.append("no_flux")
    if args.sampling == "mean":
        chosen.append("mean_sampling")
    variants = ["baseline"] + chosen if chosen else list(ABLATION_VARIANTS)
    out_dir = Path(args.out_dir)
    rows = run_ablation(run, utts, vocab, out_dir, variants)
    tsv, table = format_ablation(rows)
    (out_dir / "ablation.tsv").write_text(tsv)
    print(table)
    if not all(r["finite"] for r in rows):
        return EXIT_NUMERIC
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melle", description="Continuous mel-spectrogram language-model TTS (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ex = sub.add_parser("extract", help="batch WAV -> MELF feature extraction")
    ex.add_argument("manifest", help="lines of '<wav path>\\t<transcript>'")
    ex.add_argument("out_dir")
    ex.set_defaults(func=cmd_extract)

    tr = sub.add_parser("train", help="train a model, writing checkpoints and metrics.tsv")
    tr.add_argument("manifest")
    tr.add_argument("out_dir")
    tr.add_argument("--config", help="INI config file with [model]/[train]/[synth] sections")
    tr.add_argument("--resume", help="checkpoint to continue from (step numbering continues)")
    add_config_flags(tr, sections=("model", "train"))
    tr.set_defaults(func=cmd_train)

    sy = sub.add_parser("synth", help="synthesize a WAV from a trained checkpoint")
    sy.add_argument("checkpoint")
    sy.add_argument("prompt_audio", help="prompt WAV (or MELF)")
    sy.add_argument("prompt_text", help="transcript of the prompt audio")
    sy.add_argument("target_text")
    sy.add_argument("--out", default="out.wav", help="output WAV; a .melf sidecar is written beside it")
    sy.add_argument("--mode", choices=("cross_sentence", "continuation"), default="cross_sentence")
    sy.add_argument("--sampling", choices=("sample", "mean"), default="sample")
    sy.add_argument("--n-samples", type=int, default=1, help="best-of-n selection")
    sy.add_argument("--seed", type=int, default=None, help="random seed (default: $MELLE_SEED or 0)")
    sy.add_argument("--report", help="append a JSON line per synthesis to this file")
    sy.add_argument("--config")
    add_config_flags(sy, sections=("synth",))
    sy.set_defaults(func=cmd_synth)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--component", action="append",
                    choices=("autodiff", "losses", "model", "end_to_end"),
                    help="restrict to a component (repeatable)")
    gc.add_argument("--seed", type=int, default=None)
    gc.add_argument("--verbose", action="store_true", help="print every check")
    gc.set_defaults(func=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="train and compare ablation variants")
    ab.add_argument("manifest")
    ab.add_argument("out_dir")
    ab.add_argument("--config")
    ab.add_argument("--no-latent-sampling", action="store_true", help="linear head instead of latent sampling")
    ab.add_argument("--no-flux", action="store_true", help="train with flux weight 0")
    ab.add_argument("--sampling", choices=("sample", "mean"), default=None, help="'mean' adds mean-mode inference")
    add_config_flags(ab, sections=("model", "train", "synth"))
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"melle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"melle: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, AudioError) as exc:
        print(f"melle: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
