"""Bidirectional test-time adaptation on flat parameter vectors.

One step per incoming instance:

1. gradient of the prior loss, optionally taken at the sharpness-aware
   perturbed point (prospective adaptation, PA);
2. optionally, a loss-weighted running trend of past gradients is updated
   and used either to damp the step or, when the new gradient opposes the
   trend, to replace it by a scaled projection (retrospective
   stabilisation, RS);
3. an SGD-with-momentum update.

The loss is supplied as ``loss_grad(w) -> (loss, grad, info)`` so the same
machinery drives the network and small scripted test problems.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .fileformat import CorruptHeaderError, read_container, write_container

STATE_FORMAT = "bitta-state/1"
LOSS_FLOOR = 1e-8

LossGrad = Callable[[np.ndarray], tuple[float, np.ndarray, dict]]


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    rho: float = 0.005
    k: float = -9.0
    omega: float = 4000.0
    use_pa: bool = True
    use_rs: bool = True

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need lr >= 0 and 0 <= momentum < 1")
        if self.rho < 0 or self.omega <= 0:
            raise ValueError("need rho >= 0 and omega > 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class AdapterState:
    config: AdapterConfig
    trend: np.ndarray
    momentum_buf: np.ndarray
    t: int = 0
    errors: int = 0

    @classmethod
    def fresh(cls, n_params: int, config: AdapterConfig | None = None) -> "AdapterState":
        return cls(config or AdapterConfig(), np.zeros(n_params), np.zeros(n_params))

    def copy(self) -> "AdapterState":
        return replace(self, trend=self.trend.copy(), momentum_buf=self.momentum_buf.copy())


@dataclass
class StepInfo:
    loss: float = 0.0
    branch: str = "plain"
    grad_norm: float = 0.0
    final_norm: float = 0.0
    lam: float = 0.0
    extra: dict = field(default_factory=dict)


def _check_finite(loss, g):
    if not (math.isfinite(loss) and np.all(np.isfinite(g))):
        raise NonFiniteError("non-finite loss or gradient")


def perturbation(g: np.ndarray, rho: float) -> np.ndarray:
    """rho * g / ||g||_2, or zeros when g vanishes."""
    norm = np.linalg.norm(g)
    if norm == 0:
        return np.zeros_like(g)
    return rho * (g / norm)


def pa_gradient(w: np.ndarray, loss_grad: LossGrad, rho: float, first=None):
    """Sharpness-aware gradient at ``w + rho * g/||g||``.

    Returns ``(g_pa, loss_at_w, info_at_w)``. ``w`` itself is never modified.
    ``first`` may carry an already computed ``loss_grad(w)``.
    """
    loss, g, info = first if first is not None else loss_grad(w)
    _check_finite(loss, g)
    if not np.any(g):
        return np.zeros_like(g), loss, info
    eps = perturbation(g, rho)
    _, g_pa, _ = loss_grad(w + eps)
    _check_finite(0.0, g_pa)
    return g_pa, loss, info


def update_trend(trend_prev: np.ndarray, g: np.ndarray, loss: float) -> np.ndarray:
    a = 1.0 / max(abs(loss), LOSS_FLOOR)
    return (trend_prev + a * g) / (1.0 + a)


def anneal(t: float, omega: float) -> float:
    """-1 + 2*sigmoid(4t/omega), i.e. tanh(2t/omega)."""
    return math.tanh(2.0 * t / omega)


def rs_combine(trend: np.ndarray, g: np.ndarray, t: int, omega: float, k: float):
    """Return ``(g_rs, branch)`` with branch in {"zero-trend", "oscillation", "blend"}."""
    lam = anneal(t, omega)
    tt = float(trend @ trend)
    if tt == 0.0:
        return (1.0 - lam) * g, "zero-trend"
    dot = float(g @ trend)
    if dot < 0.0:  # cos < 0
        return k * ((dot / tt) * trend), "oscillation"
    return (1.0 - lam) * g + lam * trend, "blend"


def adapt_step(state: AdapterState, w: np.ndarray, loss_grad: LossGrad):
    """One adaptation step on flat parameters ``w``.

    Returns ``(new_w, new_state, info)``; inputs are left untouched. A
    non-finite loss or gradient aborts the step and only bumps
    ``state.errors``.
    """
    cfg = state.config
    new = state.copy()
    try:
        if cfg.use_pa:
            g, loss, extra = pa_gradient(w, loss_grad, cfg.rho)
        else:
            loss, g, extra = loss_grad(w)
            _check_finite(loss, g)
    except NonFiniteError:
        new.errors += 1
        return w.copy(), new, StepInfo(loss=float("nan"), branch="error")

    new.t = state.t + 1
    info = StepInfo(loss=float(loss), grad_norm=float(np.linalg.norm(g)), extra=extra)
    if not np.any(g):
        info.branch = "skip"
        return w.copy(), new, info

    final = g
    if cfg.use_rs:
        new.trend = update_trend(state.trend, g, loss)
        final, info.branch = rs_combine(new.trend, g, new.t, cfg.omega, cfg.k)
        info.lam = anneal(new.t, cfg.omega)
    new.momentum_buf = cfg.momentum * state.momentum_buf + final
    info.final_norm = float(np.linalg.norm(final))
    return w - cfg.lr * new.momentum_buf, new, info


def save_state(path, state: AdapterState) -> None:
    header = {
        "format": STATE_FORMAT,
        "config": state.config.to_dict(),
        "t": state.t,
        "errors": state.errors,
        "n_params": int(state.trend.size),
    }
    write_container(path, header, np.concatenate([state.trend, state.momentum_buf]), "f8")


def load_state(path) -> AdapterState:
    header, payload = read_container(path, STATE_FORMAT)
    try:
        n = int(header["n_params"])
        cfg = AdapterConfig(**header["config"])
        t, errors = int(header["t"]), int(header["errors"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: bad state header ({exc})") from None
    if payload.size != 2 * n:
        raise CorruptHeaderError(f"{path}: expected {2 * n} values, found {payload.size}")
    return AdapterState(cfg, payload[:n].copy(), payload[n:].copy(), t, errors)


def adapt_instance(state: AdapterState, w: np.ndarray, window_pair, prior_config, net_config):
    """Adapt flat network parameters on one (window, shifted window) pair."""
    from .priors import prior_loss_grad

    return adapt_step(state, w, prior_loss_grad(window_pair, prior_config, net_config))
