"""Self-supervised temporal and spatial consistency losses."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .net import NetworkConfig, forward, unflatten


@dataclass(frozen=True)
class PriorConfig:
    lambda_s: float = 0.001
    lambda_t: float = 0.01
    xi_t: float = 8.0
    delta_s: int = 1
    delta_max: int = 59

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_t < 0:
            raise ValueError("loss weights must be >= 0")
        if self.xi_t < 0:
            raise ValueError("xi_t must be >= 0")
        if self.delta_s < 1 or self.delta_max < 0:
            raise ValueError("delta_s must be >= 1 and delta_max >= 0")

    def to_dict(self):
        return asdict(self)


def tcl(hr_a: T.Tensor, hr_b: T.Tensor, xi_t: float) -> T.Tensor:
    """Sum over timesteps of max(0, |hr_a - hr_b| - xi_t)."""
    if hr_a.shape != hr_b.shape:
        raise T.ShapeError("tcl", hr_a.shape, hr_b.shape)
    return T.sum_(T.hinge(T.abs_(hr_a - hr_b), xi_t))


def scl(features, delta_s: int = 1) -> T.Tensor:
    """L1 distance between spatial slices ``delta_s`` apart, summed over maps.

    Axis 1 of every map is spatial; any further axes (channels) join the L1.
    Maps with spatial extent <= ``delta_s`` contribute nothing.
    """
    total = T.Tensor(0.0)
    for f in features:
        h = f.shape[1]
        if h <= delta_s:
            continue
        left = T.slice_(f, (slice(None), slice(0, h - delta_s)))
        right = T.slice_(f, (slice(None), slice(delta_s, h)))
        total = total + T.sum_(T.abs_(left - right))
    return total


def prior_loss(params: dict[str, T.Tensor], window_pair, config: PriorConfig, net_config: NetworkConfig):
    """Weighted prior ``L_p`` for one (window, shifted window) pair.

    Returns ``(L_p, {"L_t": float, "L_s": float, "hr": Tensor})`` where ``hr``
    is the prediction on the unshifted window.
    """
    win, shifted = window_pair[0], window_pair[1]
    hr, feats = forward(params, win, net_config)
    hr_shift, _ = forward(params, shifted, net_config)
    lt = tcl(hr, hr_shift, config.xi_t)
    ls = scl(feats, config.delta_s)
    lp = T.scale(ls, config.lambda_s) + T.scale(lt, config.lambda_t)
    return lp, {"L_t": lt.item(), "L_s": ls.item(), "hr": hr}


def prior_loss_grad(window_pair, config: PriorConfig, net_config: NetworkConfig):
    """Closure ``w_flat -> (L_p, grad_flat, diagnostics)`` for the adapter."""
    def loss_grad(w):
        with T.record() as rec:
            params = {k: T.Tensor(v, requires_grad=True) for k, v in unflatten(w, net_config).items()}
            lp, diag = prior_loss(params, window_pair, config, net_config)
            grads = T.grad(lp, list(params.values()), rec)
        flat = np.concatenate([g.reshape(-1) for g in grads])
        return lp.item(), flat, {"L_t": diag["L_t"], "L_s": diag["L_s"], "hr_mean": float(diag["hr"].data.mean())}

    return loss_grad
