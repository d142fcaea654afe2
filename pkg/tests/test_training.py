import csv
import math

import numpy as np
import pytest

from advrestore import training
from advrestore.attacks import AttackConfig, cospgd_attack
from advrestore.data import make_dataset, stack_pairs
from advrestore.engine import Tensor, backward, no_grad
from advrestore.engine import functional as F
from advrestore.metrics import psnr
from advrestore.nets import ArchVariant, build_model, load_checkpoint
from advrestore.training import (
    AdamW,
    TrainConfig,
    TrainingError,
    TrainLog,
    batch_indices,
    cosine_lr,
    train_loop,
    train_step_adversarial,
    train_step_standard,
)


def _fresh(kind="nafnet", seed=0, width=8):
    return build_model(ArchVariant(kind=kind, width=width), seed=seed)


@pytest.fixture(scope="module")
def small_set():
    return make_dataset(16, 16, 16, "gaussian", seed=3, split="train")


# --- optimizer --------------------------------------------------------------------------

def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 1e-3, 1e-6) == pytest.approx(1e-3)
    assert cosine_lr(99, 100, 1e-3, 1e-6) == pytest.approx(1e-6)
    vals = [cosine_lr(s, 100, 1e-3, 1e-6) for s in range(100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adamw_single_step_matches_hand_computation():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"p": p}, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1)
    g = np.array([0.5, -0.25])
    opt.step({"p": g}, lr=0.01)
    # first step: bias-corrected m/sqrt(v) == sign(g) up to eps
    expected = np.array([1.0, -2.0]) * (1 - 0.01 * 0.1) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)
    assert opt.t == 1


# --- single steps ------------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters(small_set):
    model = _fresh()
    y, x = stack_pairs(small_set[:4])
    before = model.checksum()
    opt = AdamW(model.params, weight_decay=1e-4)
    train_step_standard(model, y, x, opt, lr=0.0)
    train_step_adversarial(model, y, x, opt, lr=0.0)
    assert model.checksum() == before


def test_perfect_reconstruction_has_zero_loss_and_gradient(small_set):
    model = _fresh()
    for t in model.params.values():
        t.data[:] = 0.0  # residual-identity model
    _, x = stack_pairs(small_set[:2])
    loss = F.mse_loss(model(Tensor(x)), x)
    backward(loss)
    assert loss.item() == 0.0
    assert all(not np.any(t.grad) for t in model.params.values())


def test_zero_epsilon_adversarial_step_equals_standard(small_set):
    y, x = stack_pairs(small_set[:4])
    a, b = _fresh(), _fresh()
    la, _ = train_step_standard(a, y, x, AdamW(a.params), lr=1e-3)
    lc, ladv, _ = train_step_adversarial(b, y, x, AdamW(b.params), lr=1e-3, epsilon="0")
    assert a.checksum() == b.checksum()
    assert la == pytest.approx((lc + ladv) / 2, rel=1e-12)


def test_zero_epsilon_adversarial_training_equals_standard(small_set):
    std, _ = train_loop(_fresh(), small_set, TrainConfig(steps=12, val_every=0))
    adv, _ = train_loop(_fresh(), small_set, TrainConfig(steps=12, val_every=0, adversarial=True, epsilon="0"))
    assert std.checksum() == adv.checksum()


def test_fgsm_inside_step_sees_fixed_parameters(small_set, monkeypatch):
    model = _fresh()
    y, x = stack_pairs(small_set[:4])
    start = model.checksum()
    seen = {}
    real = training.fgsm_attack

    def spy(m, yy, xx, eps, **kw):
        seen["before"] = m.checksum()
        res = real(m, yy, xx, eps, **kw)
        seen["after"] = m.checksum()
        seen["n"] = len(yy)
        seen["delta"] = np.abs(res.y_adv - yy).max()
        seen["range"] = (res.y_adv.min(), res.y_adv.max())
        return res

    monkeypatch.setattr(training, "fgsm_attack", spy)
    train_step_adversarial(model, y, x, AdamW(model.params), lr=1e-3)
    assert seen["before"] == seen["after"] == start
    assert model.checksum() != start  # exactly one update happened afterwards
    assert seen["n"] == 2
    assert seen["delta"] <= 8 / 255 + 1e-7
    assert 0.0 <= seen["range"][0] and seen["range"][1] <= 1.0


def test_adversarial_step_needs_even_batch(small_set):
    y, x = stack_pairs(small_set[:3])
    model = _fresh()
    with pytest.raises(ValueError):
        train_step_adversarial(model, y, x, AdamW(model.params), lr=1e-3)


def test_gradient_clipping_is_logged(small_set):
    _, tlog = train_loop(_fresh(), small_set, TrainConfig(steps=5, val_every=0, grad_clip=1e-6))
    assert tlog.clip_events == 5
    assert all(r["clipped"] for r in tlog.rows)


def test_non_finite_loss_raises_with_checkpoint_hint(small_set, tmp_path):
    model = _fresh()
    model.params["tail.b"].data[:] = np.nan
    with pytest.raises(TrainingError, match="last good checkpoint"):
        train_loop(model, small_set, TrainConfig(steps=3, val_every=0), checkpoint_dir=tmp_path)


# --- loop ---------------------------------------------------------------------------------

def test_zero_steps_returns_initial_model(small_set):
    model = _fresh()
    out, tlog = train_loop(model, small_set, TrainConfig(steps=0))
    assert out.checksum() == model.checksum()
    assert tlog.rows == []


def test_step_count_and_log(small_set, tmp_path):
    cfg = TrainConfig(steps=10, val_every=5, adversarial=True)
    _, tlog = train_loop(_fresh(), small_set, cfg, val_pairs=small_set[:4], checkpoint_dir=tmp_path)
    assert [r["step"] for r in tlog.rows] == list(range(1, 11))
    _, _, meta = load_checkpoint(tmp_path / "last.ckpt")
    assert meta["opt_t"] == 10 and meta["step"] == 10
    assert [s for s, _ in tlog.val_points] == [5, 10]
    path = tlog.to_csv(tmp_path / "log.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(TrainLog.CSV_COLUMNS)
    assert len(rows) == 11
    assert rows[5][4] != "" and rows[1][4] == ""


def test_batches_cover_each_epoch(small_set):
    seen = np.concatenate([batch_indices(s, 16, 4, seed=2) for s in range(4)])
    assert sorted(seen.tolist()) == list(range(16))
    assert not np.array_equal(batch_indices(0, 16, 4, 2), batch_indices(4, 16, 4, 2))


@pytest.mark.parametrize("adversarial", [False, True])
def test_resume_reproduces_trajectory(small_set, tmp_path, adversarial):
    cfg = TrainConfig(steps=20, val_every=5, adversarial=adversarial)
    full, full_log = train_loop(_fresh(), small_set, cfg, val_pairs=small_set[:4],
                                checkpoint_dir=tmp_path / "full")
    train_loop(_fresh(), small_set, cfg, val_pairs=small_set[:4], checkpoint_dir=tmp_path / "part",
               stop_after=10)
    resumed, resumed_log = train_loop(_fresh(), small_set, cfg, val_pairs=small_set[:4],
                                      checkpoint_dir=tmp_path / "part", resume=True)
    assert resumed.checksum() == full.checksum()
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]  # noqa: E731
    assert strip(resumed_log.rows) == strip(full_log.rows)


def test_resume_without_checkpoint(small_set, tmp_path):
    with pytest.raises(FileNotFoundError):
        train_loop(_fresh(), small_set, TrainConfig(steps=4), checkpoint_dir=tmp_path, resume=True)


def test_best_validation_model_is_returned(small_set, tmp_path):
    cfg = TrainConfig(steps=15, val_every=5)
    best, tlog = train_loop(_fresh(), small_set, cfg, val_pairs=small_set[:4], checkpoint_dir=tmp_path)
    best_step, best_val = max(tlog.val_points, key=lambda t: t[1])
    assert training.validation_psnr(best, small_set[:4]) == best_val
    stored, _, meta = load_checkpoint(tmp_path / "best.ckpt")
    assert meta["step"] == best_step and stored.checksum() == best.checksum()


@pytest.mark.parametrize("bad", [{"adversarial": True, "batch_size": 3}, {"steps": -1},
                                 {"loss": "l1"}, {"epsilon": "eight"}])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# --- empirical -------------------------------------------------------------------------------

def _set_loss(model, y, x):
    with no_grad():
        return F.mse_loss(model(Tensor(y)), x).item()


def test_loss_decreases_over_first_steps(small_set):
    y, x = stack_pairs(small_set)
    decreased = 0
    for seed in range(10):
        model = _fresh(seed=seed)
        trained, _ = train_loop(model, small_set, TrainConfig(steps=50, val_every=0, seed=seed))
        decreased += _set_loss(trained, y, x) < _set_loss(model, y, x)
    assert decreased >= 9


def _attacked_psnr(model, y, x):
    res = cospgd_attack(model, y, x, AttackConfig("cospgd", iterations=5))
    with no_grad():
        out = np.clip(model(Tensor(res.y_adv)).data, 0.0, 1.0)
    return float(np.mean([psnr(out[i], x[i]) for i in range(len(x))]))


@pytest.mark.slow
def test_adversarial_twin_is_more_robust():
    train = make_dataset(100, 32, 32, "gaussian", seed=5, split="train")
    y, x = stack_pairs(make_dataset(16, 32, 32, "gaussian", seed=5, split="test"))
    std, _ = train_loop(_fresh(), train, TrainConfig(steps=500, val_every=0))
    adv, _ = train_loop(_fresh(), train, TrainConfig(steps=500, val_every=0, adversarial=True))
    p_std, p_adv = _attacked_psnr(std, y, x), _attacked_psnr(adv, y, x)
    assert math.isfinite(p_std) and p_adv > p_std
