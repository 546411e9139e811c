import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from melle.losses import model_losses
from melle.optim import AdamWState
from melle.rng import RngState
from melle.trainer import (
    METRICS_HEADER,
    CheckpointError,
    TrainConfig,
    Trainer,
    Utterance,
    batch_stream,
    collate,
    lambda_schedule,
    load_checkpoint,
    lr_schedule,
    make_batches,
    partition_reduction,
    save_checkpoint,
    step_rng,
    train_step,
    ungroup,
)

from .helpers import tiny_model

# Frozen from the overfit fixture (tiny config, seed 0, 2000 steps).
OVERFIT_REG_STEP10 = 32.92
OVERFIT_REG_STEP2000 = 0.277


def _utts(n=3, seed=0, lengths=(9, 14, 6)):
    g = np.random.default_rng(seed)
    return [Utterance(np.r_[g.integers(3, 12, 4 + i), 1], g.standard_normal((lengths[i % len(lengths)], 80)).astype(np.float32), f"u{i}")
            for i in range(n)]


SMALL = dict(d_model=32, n_heads=2, d_ffn=64, postnet_channels=16)


# -- grouping -----------------------------------------------------------------------------

def test_partition_examples():
    g, m = partition_reduction(np.ones((4, 80)), 2)
    assert g.shape == (2, 160) and m.all()
    g, m = partition_reduction(np.ones((5, 80)), 2)
    assert g.shape == (3, 160) and m.tolist() == [True] * 5 + [False]
    assert not g[2, 80:].any()
    y = np.random.default_rng(0).standard_normal((7, 80))
    g, _ = partition_reduction(y, 1)
    np.testing.assert_array_equal(g, y)


@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 1000))
def test_ungroup_inverts_partition(t, r, seed):
    y = np.random.default_rng(seed).standard_normal((t, 80))
    g, mask = partition_reduction(y, r)
    assert g.shape[0] == math.ceil(t / r)
    np.testing.assert_array_equal(ungroup(g, r, t), y)
    assert mask.sum() == t


# -- schedules -----------------------------------------------------------------------------

def test_lr_schedule_points():
    cfg = TrainConfig(steps=1000, warmup_steps=100, peak_lr=5e-4)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == pytest.approx(5e-4)
    assert lr_schedule(50, cfg) == pytest.approx(2.5e-4)
    assert lr_schedule(550, cfg) == pytest.approx(2.5e-4)
    assert lr_schedule(1000, cfg) == 0.0


@given(st.integers(0, 2000))
def test_lr_bounded(step):
    cfg = TrainConfig()
    assert 0.0 <= lr_schedule(step, cfg) <= cfg.peak_lr


def test_lambda_schedule():
    cfg = TrainConfig(lambda_breakpoint=100)
    assert lambda_schedule(99, cfg) == 0.0
    assert lambda_schedule(100, cfg) == 0.1
    assert lambda_schedule(5000, cfg) == 0.1
    cfg0 = TrainConfig(lambda_breakpoint=0)
    assert lambda_schedule(0, cfg0) == 0.1 and lambda_schedule(1, cfg0) == 0.1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=100, warmup_steps=100)


# -- batching -------------------------------------------------------------------------------

@pytest.mark.parametrize("r", [1, 2, 4])
def test_collate_stop_targets_and_padding(r):
    b = collate(_utts(), r)
    assert b.mel.shape[1] % r == 0
    assert np.all(b.stop_targets.sum(axis=1) == 1)
    for i, t in enumerate(b.mel_lengths):
        assert b.stop_targets[i, math.ceil(t / r) - 1] == 1
        assert not b.mel[i, t:].any()
        assert b.frame_mask[i].sum() == t


def test_make_batches_cover_and_respect_budget():
    utts = _utts(10, lengths=(5, 9, 13, 20))
    batches = make_batches(utts, 40, seed=1, epoch=0)
    assert sorted(i for b in batches for i in b) == list(range(10))
    for b in batches:
        assert len(b) == 1 or max(len(utts[i].mel) for i in b) * len(b) <= 40
    assert batches == make_batches(utts, 40, seed=1, epoch=0)


def test_batch_stream_resume_skips():
    utts = _utts(6)
    cfg = TrainConfig(steps=10, warmup_steps=1, batch_frames=30)
    a = batch_stream(utts, cfg, 1)
    full = [next(a).mel_lengths.tolist() for _ in range(6)]
    b = batch_stream(utts, cfg, 1, start_step=3)
    assert [next(b).mel_lengths.tolist() for _ in range(3)] == full[3:]


# -- losses through the model --------------------------------------------------------------------

def test_padding_does_not_change_losses():
    m = tiny_model(prenet_dropout=0.0, **SMALL)
    u = _utts(1)[0]
    tokens = np.asarray(u.tokens)[None]
    t = len(u.mel)

    def losses(extra):
        mel = np.zeros((1, t + extra, 80), dtype=np.float32)
        mel[0, :t] = u.mel
        mask = np.arange(t + extra)[None] < t
        out = m.forward_teacher_forced(tokens, mel, RngState(0), mode="mean", training=False, mel_lengths=[t])
        return model_losses(out, mel, mask, lam=0.1)[1]

    a, b = losses(0), losses(5)
    for x, y in zip(a.as_row(), b.as_row()):
        assert x == pytest.approx(y, abs=1e-6)


def test_r1_grouped_path_matches_ungrouped_bitwise():
    m = tiny_model(**SMALL)
    u = _utts(1)[0]
    batch = collate([u], 1)
    groups, _ = partition_reduction(u.mel, 1)
    a = m.forward_teacher_forced(batch.tokens, batch.mel, RngState(2), mode="mean", training=False,
                                 text_lengths=batch.text_lengths, mel_lengths=batch.mel_lengths)
    la = model_losses(a, batch.mel, batch.frame_mask, lam=0.1)[1]
    b = m.forward_teacher_forced(u.tokens, ungroup(groups, 1), RngState(2), mode="mean", training=False)
    lb = model_losses(b, u.mel, lam=0.1)[1]
    assert a.y_double_prime.data[0].tobytes() == b.y_double_prime.data.tobytes()
    assert la.as_row() == lb.as_row()


# -- training ---------------------------------------------------------------------------------------

def _run(steps, seed=0, **over):
    cfg = TrainConfig(steps=steps, warmup_steps=2, lambda_breakpoint=3, seed=seed, checkpoint_interval=0, **over)
    tr = Trainer(tiny_model(seed=seed, **SMALL), cfg)
    tr.fit(_utts())
    return tr


def test_equal_seeds_identical_breakdowns():
    assert [bd.as_row() for bd in _run(6).history] == [bd.as_row() for bd in _run(6).history]


def test_smoke_gradient_norm_finite():
    m = tiny_model(**SMALL)
    cfg = TrainConfig(steps=50, warmup_steps=5, lambda_breakpoint=10)
    opt = AdamWState()
    stream = batch_stream(_utts(), cfg, 1)
    for s in range(1, 51):
        bd, gnorm = train_step(next(stream), m, opt, step_rng(0, s), s, cfg)
        assert math.isfinite(gnorm) and math.isfinite(bd.total)


def test_reg_loss_falls_on_fixture(overfit):
    hist = overfit["trainer"].history
    assert len(hist) == 2000
    assert hist[499].reg < hist[9].reg
    assert hist[9].reg == pytest.approx(OVERFIT_REG_STEP10, rel=0.02)
    assert hist[-1].reg == pytest.approx(OVERFIT_REG_STEP2000, rel=0.1)


def test_metrics_log(tmp_path):
    cfg = TrainConfig(steps=4, warmup_steps=1, checkpoint_interval=2)
    tr = Trainer(tiny_model(**SMALL), cfg)
    tr.fit(_utts(), metrics_path=tmp_path / "m.tsv", checkpoint_dir=tmp_path)
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert lines[0] == METRICS_HEADER
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["1", "2", "3", "4"]
    assert all(len(ln.split("\t")) == 8 for ln in lines)
    assert (tmp_path / "ckpt_0000002.mckp").exists() and (tmp_path / "ckpt_0000004.mckp").exists()


# -- checkpoints ----------------------------------------------------------------------------------------

def test_checkpoint_resume_is_bit_exact(tmp_path):
    utts = _utts()
    cfg = TrainConfig(steps=6, warmup_steps=2, lambda_breakpoint=2, checkpoint_interval=0)
    straight = Trainer(tiny_model(**SMALL), cfg)
    straight.fit(utts)

    first = Trainer(tiny_model(**SMALL), cfg)
    first.fit(utts, steps=3)
    save_checkpoint(first.model, first.opt_state, first.step, tmp_path / "c.mckp")
    model, opt, step = load_checkpoint(tmp_path / "c.mckp")
    assert step == 3
    resumed = Trainer(model, cfg, opt, step)
    resumed.fit(utts)
    assert [bd.as_row() for bd in resumed.history] == [bd.as_row() for bd in straight.history[3:]]
    for n in model.parameter_names():
        assert model.params[n].data.tobytes() == straight.model.params[n].data.tobytes()


def test_checkpoint_resave_byte_identical(tmp_path):
    tr = _run(3)
    save_checkpoint(tr.model, tr.opt_state, tr.step, tmp_path / "a.mckp")
    m, o, s = load_checkpoint(tmp_path / "a.mckp")
    save_checkpoint(m, o, s, tmp_path / "b.mckp")
    assert (tmp_path / "a.mckp").read_bytes() == (tmp_path / "b.mckp").read_bytes()
    assert (tmp_path / "a.mckp").read_bytes()[:4] == b"MCKP"


def test_checkpoint_fresh_optimizer(tmp_path):
    m = tiny_model(**SMALL)
    save_checkpoint(m, AdamWState(), 0, tmp_path / "z.mckp")
    _, opt, step = load_checkpoint(tmp_path / "z.mckp")
    assert opt.step == 0 and not opt.m and step == 0


def test_checkpoint_config_mismatch(tmp_path):
    m = tiny_model(**SMALL)
    save_checkpoint(m, AdamWState(), 0, tmp_path / "a.mckp")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.mckp", expected_config=tiny_model(**dict(SMALL, d_model=64)).config)


def test_checkpoint_bad_files(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.mckp")
    (tmp_path / "x.mckp").write_bytes(b"JUNKJUNK")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.mckp")
