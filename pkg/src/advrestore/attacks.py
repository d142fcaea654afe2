"""l-infinity FGSM, PGD and CosPGD attacks against a restoration model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, Iterable, List, Optional, Union

import numpy as np

from .engine import Tensor, backward
from .engine import functional as F
from .engine.functional import ShapeError
from .nets import Model

ATTACK_KINDS = ("fgsm", "pgd", "cospgd")

WeightFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class AttackError(RuntimeError):
    pass


def parse_rational(value: Union[str, float, int, Fraction]) -> Fraction:
    """'8/255' -> Fraction(8, 255); floats are converted exactly."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value)


def format_rational(value: Fraction) -> str:
    return f"{value.numerator}/{value.denominator}" if value.denominator != 1 else str(value.numerator)


@dataclass(frozen=True)
class AttackConfig:
    """One attack setting. ``epsilon`` may be given as a rational string ("8/255").

    For ``fgsm`` the step size defaults to epsilon and iterations to 1.
    """

    kind: str
    epsilon: Union[str, float, Fraction] = "8/255"
    alpha: Optional[float] = 0.01
    iterations: int = 1
    loss: str = "mse"
    seed: int = 0
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.loss != "mse":
            raise ValueError("only the mse loss is supported")
        eps = parse_rational(self.epsilon)
        object.__setattr__(self, "epsilon", format_rational(eps))
        if not 0 < eps <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.kind == "fgsm":
            if self.alpha is None:
                object.__setattr__(self, "alpha", float(eps))
            if self.iterations != 1 or self.alpha != float(eps):
                raise ValueError("fgsm requires iterations == 1 and alpha == epsilon")
        if self.alpha is None or self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def eps(self) -> float:
        return float(parse_rational(self.epsilon))

    @classmethod
    def fgsm(cls, epsilon="8/255") -> "AttackConfig":
        return cls("fgsm", epsilon=epsilon, alpha=None, iterations=1)


@dataclass
class AttackResult:
    delta: np.ndarray
    y_adv: np.ndarray
    loss_trace: List[float]
    grad_sign_stats: List[float]
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp every component of ``delta`` to [-epsilon, epsilon]."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(delta, -epsilon, epsilon)


def clip_range(y: np.ndarray) -> np.ndarray:
    return np.clip(y, 0.0, 1.0)


def cossim(u: np.ndarray, v: np.ndarray, axis: int = -1) -> np.ndarray:
    """u.v / (|u| |v|) along ``axis``."""
    num = (u * v).sum(axis=axis)
    den = np.sqrt((u * u).sum(axis=axis)) * np.sqrt((v * v).sum(axis=axis))
    return num / den


def _softmax_np(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cossim_weights(x_adv_pred: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-pixel cosine similarity of channel-softmaxed prediction and target.

    Returns an N x 1 x H x W array in (0, 1]; callers treat it as a constant.
    """
    if x_adv_pred.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_adv_pred.shape} vs {x.shape}")
    u = _softmax_np(np.asarray(x_adv_pred), axis=1)
    v = _softmax_np(np.asarray(x), axis=1)
    return cossim(u, v, axis=1)[:, None]


def _prepare(model: Model, y_clean, x):
    dtype = model.dtype
    y_clean = np.asarray(y_clean.data if isinstance(y_clean, Tensor) else y_clean, dtype=dtype)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dtype)
    if y_clean.shape != x.shape:
        raise ShapeError(f"y_clean {y_clean.shape} and x {x.shape} differ in shape")
    if y_clean.ndim == 3:
        y_clean, x = y_clean[None], x[None]
    return y_clean, x


def _run(model: Model, y_clean, x, eps: float, alpha: float, iterations: int,
         weight_fn: Optional[WeightFn], record: Iterable[int] = (),
         trace_final: bool = True, check: bool = True,
         random_start: bool = False, seed: int = 0) -> AttackResult:
    y_clean, x = _prepare(model, y_clean, x)
    record = set(record)
    if random_start:
        rng = np.random.default_rng(seed)
        delta = project_linf(rng.uniform(-eps, eps, size=y_clean.shape).astype(y_clean.dtype), eps)
    else:
        delta = np.zeros_like(y_clean)
    y_adv = clip_range(y_clean + delta)
    trace: List[float] = []
    zero_frac: List[float] = []
    snapshots: Dict[int, np.ndarray] = {}

    def objective(yt: Tensor) -> Tensor:
        pred = model(yt)
        w = weight_fn(pred.data, x) if weight_fn is not None else None
        loss = F.mse_loss(pred, x, weights=w)
        if not math.isfinite(float(loss.data)):
            raise AttackError(f"non-finite attack loss {float(loss.data)} at iteration {len(trace)}")
        return loss

    with model.frozen():
        for t in range(iterations):
            yt = Tensor(y_adv, requires_grad=True)
            loss = objective(yt)
            trace.append(float(loss.data))
            backward(loss)
            grad = yt.grad
            zero_frac.append(float(np.mean(grad == 0)))
            stepped = y_adv + alpha * np.sign(grad)  # sign(0) == 0
            delta = project_linf(stepped - y_clean, eps)
            y_adv = clip_range(y_clean + delta)
            if check:
                _check_iterate(y_adv, y_clean, delta, eps)
            if t + 1 in record:
                snapshots[t + 1] = y_adv.copy()
        if trace_final:
            from .engine import no_grad

            with no_grad():
                trace.append(float(objective(Tensor(y_adv)).data))
    return AttackResult(delta=delta, y_adv=y_adv, loss_trace=trace,
                        grad_sign_stats=zero_frac, snapshots=snapshots)


def _check_iterate(y_adv, y_clean, delta, eps):
    if np.abs(delta).max(initial=0.0) > eps + 1e-7 or np.abs(y_adv - y_clean).max(initial=0.0) > eps + 1e-7:
        raise AttackError("perturbation left the epsilon ball")
    if y_adv.min(initial=0.0) < 0.0 or y_adv.max(initial=0.0) > 1.0:
        raise AttackError("adversarial input left [0, 1]")


def pgd_attack(model: Model, y_clean, x, config: AttackConfig, record: Iterable[int] = ()) -> AttackResult:
    """Signed-gradient ascent on the MSE with projection to the eps-ball and [0, 1].

    ``record`` lists iteration counts whose iterate is kept in ``snapshots``;
    the iterate after k steps equals the result of a k-iteration run.
    """
    return _run(model, y_clean, x, config.eps, config.alpha, config.iterations, None,
                record=record, random_start=config.random_start, seed=config.seed)


def cospgd_attack(model: Model, y_clean, x, config: AttackConfig, record: Iterable[int] = (),
                  weight_fn: Optional[WeightFn] = None) -> AttackResult:
    """PGD on the cosine-similarity-weighted pixel-wise squared error.

    Weights come from ``cossim_weights`` at the current iterate and are held
    constant during differentiation. ``weight_fn`` overrides them (test hook).
    """
    return _run(model, y_clean, x, config.eps, config.alpha, config.iterations,
                weight_fn or cossim_weights, record=record,
                random_start=config.random_start, seed=config.seed)


def fgsm_attack(model: Model, y_clean, x, epsilon, trace_final: bool = True) -> AttackResult:
    """Single signed-gradient step of size epsilon; same path as one PGD step with alpha == epsilon."""
    eps = float(parse_rational(epsilon))
    if eps == 0:
        y_clean, x = _prepare(model, y_clean, x)
        return AttackResult(delta=np.zeros_like(y_clean), y_adv=y_clean.copy(), loss_trace=[],
                            grad_sign_stats=[])
    return _run(model, y_clean, x, eps, eps, 1, None, trace_final=trace_final)


def run_attack(model: Model, y_clean, x, config: AttackConfig, record: Iterable[int] = ()) -> AttackResult:
    if config.kind == "fgsm":
        return fgsm_attack(model, y_clean, x, config.epsilon)
    if config.kind == "pgd":
        return pgd_attack(model, y_clean, x, config, record=record)
    return cospgd_attack(model, y_clean, x, config, record=record)
