"""Standard and FGSM adversarial training (half clean, half perturbed batches)."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attacks import fgsm_attack, parse_rational
from .data import ImagePair, stack_pairs
from .engine import Tensor, backward, no_grad
from .engine import functional as F
from .metrics import psnr
from .nets import Model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    adversarial: bool = False
    epsilon: str = "8/255"
    seed: int = 0
    val_every: int = 250
    loss: str = "mse"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.adversarial and self.batch_size % 2:
            raise ValueError("adversarial training needs an even batch size for the 50/50 split")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.loss != "mse":
            raise ValueError("only the mse loss is supported")
        self.epsilon = str(self.epsilon)
        parse_rational(self.epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            data = p.data - lr * self.weight_decay * p.data
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m/{k}"].copy()
            self.v[k] = arrays[f"adam.v/{k}"].copy()
        self.t = t


def _collect_grads(model: Model) -> Dict[str, np.ndarray]:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float, bool]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return {k: g * scale for k, g in grads.items()}, norm, True
    return grads, norm, False


def _apply_update(model: Model, loss: Tensor, opt: AdamW, lr: float, grad_clip: float) -> bool:
    if not math.isfinite(float(loss.data)):
        raise TrainingError(f"non-finite training loss {float(loss.data)}")
    for p in model.params.values():
        p.grad = None
    backward(loss)
    grads, norm, clipped = _clip(_collect_grads(model), grad_clip)
    if not math.isfinite(norm):
        raise TrainingError("non-finite gradient norm")
    opt.step(grads, lr)
    return clipped


def train_step_standard(model: Model, y: np.ndarray, x: np.ndarray, opt: AdamW, lr: float,
                        grad_clip: float = 1.0) -> Tuple[float, bool]:
    """One update on the batch-mean MSE. Returns (loss, clipped)."""
    if len(y) == 0:
        raise ValueError("empty batch")
    pred = model(Tensor(np.asarray(y, dtype=model.dtype)))
    loss = F.mse_loss(pred, np.asarray(x, dtype=model.dtype))
    clipped = _apply_update(model, loss, opt, lr, grad_clip)
    return float(loss.data), clipped


def train_step_adversarial(model: Model, y: np.ndarray, x: np.ndarray, opt: AdamW, lr: float,
                           epsilon="8/255", grad_clip: float = 1.0) -> Tuple[float, float, bool]:
    """One update where the second half of the batch is replaced by FGSM examples.

    The examples are generated against the current parameters before the
    update. The objective is the MSE over the whole mixed batch, i.e. the clean
    and adversarial sums with a common 1/N factor. Returns
    (clean_loss, adv_loss, clipped), each loss averaged over its own half.
    """
    n = len(y)
    if n % 2:
        raise ValueError(f"adversarial step needs an even batch, got {n}")
    half = n // 2
    y = np.asarray(y, dtype=model.dtype)
    x = np.asarray(x, dtype=model.dtype)
    adv = fgsm_attack(model, y[half:], x[half:], epsilon, trace_final=False)
    mixed = np.concatenate([y[:half], adv.y_adv], axis=0)
    pred = model(Tensor(mixed))
    loss = F.mse_loss(pred, x)
    sq = (pred.data - x) ** 2
    clean_loss, adv_loss = float(sq[:half].mean()), float(sq[half:].mean())
    clipped = _apply_update(model, loss, opt, lr, grad_clip)
    return clean_loss, adv_loss, clipped


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)
    clip_events: int = 0

    CSV_COLUMNS = ("step", "clean_loss", "adv_loss", "lr", "val_psnr")

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r["step"], _fmt(r["clean_loss"]), _fmt(r["adv_loss"]), _fmt(r["lr"]),
                            _fmt(r["val_psnr"])])
        return path

    @property
    def val_points(self) -> List[Tuple[int, float]]:
        return [(r["step"], r["val_psnr"]) for r in self.rows if r["val_psnr"] is not None]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def validation_psnr(model: Model, pairs: Sequence[ImagePair], batch: int = 25) -> float:
    vals = []
    with no_grad():
        for i in range(0, len(pairs), batch):
            y, x = stack_pairs(pairs[i:i + batch], model.dtype)
            out = np.clip(model(Tensor(y)).data, 0.0, 1.0)
            vals.extend(psnr(out[j], x[j]) for j in range(len(out)))
    return float(np.mean(vals))


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices for ``step``: a fresh seeded permutation per epoch, remainder dropped."""
    per_epoch = max(n // batch_size, 1)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    if n < batch_size:
        return np.resize(perm, batch_size)
    return perm[b * batch_size:(b + 1) * batch_size]


def train_loop(model: Model, train_pairs: Sequence[ImagePair], config: TrainConfig,
               val_pairs: Optional[Sequence[ImagePair]] = None, checkpoint_dir=None,
               resume: bool = False, stop_after: Optional[int] = None) -> Tuple[Model, TrainLog]:
    """Train for ``config.steps`` optimizer updates and return the best-validation model.

    With ``checkpoint_dir`` the loop writes ``last.ckpt`` (parameters, optimizer
    moments, step) and ``best.ckpt`` at every validation point; ``resume``
    continues from ``last.ckpt``. ``stop_after`` halts early (used to test resume).
    """
    if not train_pairs:
        raise ValueError("empty training set")
    model = model.copy()
    tlog = TrainLog()
    if config.steps == 0:
        return model, tlog
    opt = AdamW(model.params, betas=config.betas, eps=config.adam_eps, weight_decay=config.weight_decay)
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    start = 0
    best_psnr, best_state, best_step = -math.inf, None, -1
    if resume:
        if ckdir is None or not (ckdir / "last.ckpt").exists():
            raise FileNotFoundError(f"no checkpoint to resume from in {ckdir}")
        last, extra, meta = load_checkpoint(ckdir / "last.ckpt")
        model.load_state_dict(last.state_dict())
        opt.load_state_arrays(extra, meta["opt_t"])
        start = meta["step"]
        tlog.rows = meta.get("log_rows", [])
        best_psnr, best_step = meta["best_psnr"], meta["best_step"]
        if (ckdir / "best.ckpt").exists():
            best_state = load_checkpoint(ckdir / "best.ckpt")[0].state_dict()

    n = len(train_pairs)
    ys, xs = stack_pairs(train_pairs, model.dtype)
    t0 = time.perf_counter()
    for step in range(start, config.steps):
        if stop_after is not None and step >= stop_after:
            break
        idx = batch_indices(step, n, config.batch_size, config.seed)
        lr = cosine_lr(step, config.steps, config.lr, config.lr_min)
        try:
            if config.adversarial:
                clean, adv, clipped = train_step_adversarial(model, ys[idx], xs[idx], opt, lr,
                                                             config.epsilon, config.grad_clip)
            else:
                (clean, clipped), adv = train_step_standard(model, ys[idx], xs[idx], opt, lr,
                                                            config.grad_clip), None
        except TrainingError as e:
            hint = ckdir / "last.ckpt" if ckdir else "none"
            raise TrainingError(f"step {step}: {e}; last good checkpoint: {hint}") from e
        if clipped:
            tlog.clip_events += 1
        row = {"step": step + 1, "clean_loss": clean, "adv_loss": adv, "lr": lr, "val_psnr": None,
               "wall_time": time.perf_counter() - t0, "clipped": clipped}
        tlog.rows.append(row)
        boundary = step + 1 == config.steps or (config.val_every and (step + 1) % config.val_every == 0)
        if not boundary:
            continue
        if val_pairs:
            row["val_psnr"] = validation_psnr(model, val_pairs)
            if row["val_psnr"] > best_psnr:
                best_psnr, best_state, best_step = row["val_psnr"], model.state_dict(), step + 1
                if ckdir:
                    save_checkpoint(ckdir / "best.ckpt", model, meta={"step": step + 1, "val_psnr": best_psnr})
            log.info("step %d val_psnr %.3f (best %.3f @ %d)", step + 1, row["val_psnr"], best_psnr, best_step)
        if ckdir:
            meta = {"step": step + 1, "opt_t": opt.t, "best_psnr": best_psnr, "best_step": best_step,
                    "train_config": config.to_dict(), "log_rows": [_jsonable(r) for r in tlog.rows]}
            save_checkpoint(ckdir / "last.ckpt", model, extra=opt.state_arrays(), meta=meta)
    if best_state is not None and (stop_after is None or stop_after >= config.steps):
        model.load_state_dict(best_state)
    return model, tlog


def _jsonable(row: dict) -> dict:
    # wall time stays out of checkpoints so they are byte-reproducible
    return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else v) for k, v in row.items() if k != "wall_time"}
