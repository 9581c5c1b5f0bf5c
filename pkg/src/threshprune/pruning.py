"""Differentiable threshold pruning math.

A layer's weights ``w`` are compared against a learnable scalar threshold
``tau`` in the squared-magnitude domain. During training every weight is
replaced by its soft-pruned surrogate

    v = w * sigm((w^2 - tau) / temp)

which converges to the hard step mask as ``temp -> 0``. The number of
surviving weights has the differentiable surrogate

    soft_l0 = sum_k sigm((w_k^2 - tau) / temp)

whose gradients drive the threshold upward under regularization pressure.
All gradient formulas below are exact derivatives of these two expressions;
``weight_grad`` additionally implements the approximate/clamped update
variants that keep weight displacements small compared to the sigmoid
transition width (large steps empty the transition region and stall
pruning).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, stable_sigmoid

GRAD_MODES = ("approx", "full_clamped", "full_unclamped", "l0_in_weight_update")
PRUNE_MODES = ("soft", "hard", "off")


class DegenerateLayerError(ValueError):
    """Layer weights have zero |w| variance; no temperature can be derived."""


def _check_temp(temp):
    if not temp > 0:
        raise ValueError(f"temperature must be positive, got {temp}")


def soft_mask(w, tau, temp):
    """sigm((w^2 - tau) / temp) on raw arrays."""
    _check_temp(temp)
    w = np.asarray(w)
    return stable_sigmoid((w * w - tau) / temp)


def soft_prune_array(w, tau, temp):
    """Soft-pruned surrogate v = w * sigm((w^2 - tau) / temp)."""
    w = np.asarray(w)
    return w * soft_mask(w, tau, temp)


def hard_prune_array(w, tau):
    """Heaviside pruning: keep w where w^2 > tau (strict), else 0."""
    w = np.asarray(w)
    return np.where(w * w > tau, w, 0.0)


def hard_keep_mask(w, tau):
    w = np.asarray(w)
    return w * w > tau


def mask_grad(w, tau, temp):
    """d/dw of the soft mask: (2w/temp) * s * (1 - s).

    Concentrates like 1/temp inside the transition band and vanishes
    outside it; odd in w.
    """
    _check_temp(temp)
    w = np.asarray(w)
    s = soft_mask(w, tau, temp)
    return (2.0 * w / temp) * s * (1.0 - s)


def prune_grad_tau(w, tau, temp):
    """Per-weight dv/dtau = -mask_grad/2."""
    return -0.5 * mask_grad(w, tau, temp)


def prune_grad_w(w, tau, temp, variant="full"):
    """Per-weight dv/dw.

    ``full`` is the exact derivative s + w * mask_grad; ``approx`` treats
    the mask as a constant and returns s alone.
    """
    s = soft_mask(w, tau, temp)
    if variant == "approx":
        return s
    if variant == "full":
        return s + np.asarray(w) * mask_grad(w, tau, temp)
    raise ValueError(f"unknown dv/dw variant {variant!r}")


def soft_l0(w, tau, temp):
    """Differentiable surviving-weight count: sum of the soft mask."""
    return float(soft_mask(w, tau, temp).sum())


def soft_l0_grad_tau(w, tau, temp):
    """d(soft_l0)/dtau = -(1/temp) * sum s(1-s); only transitional weights contribute."""
    s = soft_mask(w, tau, temp)
    return float(-(s * (1.0 - s)).sum() / temp)


def soft_l0_grad_w(w, tau, temp):
    """d(soft_l0)/dw = mask_grad, elementwise."""
    return mask_grad(w, tau, temp)


def layer_temperature(w, temp_scale):
    """Per-layer sigmoid width: temp_scale times the population variance of |w|."""
    a = np.abs(np.asarray(w, dtype=np.float64))
    var = float(a.var())
    if var == 0.0:
        raise DegenerateLayerError("zero variance of |w|; cannot set a transition width")
    return float(temp_scale) * var


# ---------------------------------------------------------------------------
# autograd registration


def soft_prune(w, tau, temp, variant="full"):
    """Tape-recorded soft pruning of a weight tensor.

    ``w`` gets the per-variant dv/dw pullback (see ``prune_grad_w``); the
    scalar ``tau`` accumulates sum(dL/dv * dv/dtau).
    """
    w = ag.astensor(w)
    tau = ag.astensor(tau)
    if tau.size != 1:
        raise ag.ShapeError(f"soft_prune: tau must be scalar, got shape {tau.shape}")
    t = float(tau.data.reshape(()))
    out = soft_prune_array(w.data, t, temp)

    def vjp(g):
        gw = g * prune_grad_w(w.data, t, temp, variant)
        gtau = np.asarray((g * prune_grad_tau(w.data, t, temp)).sum()).reshape(tau.data.shape)
        return gw, gtau

    return ag._apply("soft_prune", out, (w, tau), vjp)


def hard_prune(w, tau):
    """Hard pruning of a tensor; not differentiable, so never recorded."""
    w = ag.astensor(w)
    t = float(np.asarray(tau).reshape(()))
    return Tensor(hard_prune_array(w.data, t))


# ---------------------------------------------------------------------------
# per-parameter state and update rules


@dataclass
class PrunableParam:
    """A weight tensor joined with its learnable threshold.

    ``w`` and ``tau`` are live tensors shared with the owning layer; ``temp``
    is fixed when pruning starts. ``grad_variant`` selects the dv/dw rule the
    tape applies during the forward pass ("approx" or "full").
    """

    name: str
    w: Tensor
    tau: Tensor
    temp: float
    mode: str = "soft"
    grad_variant: str = "approx"
    mask: np.ndarray | None = None
    last_v: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        _check_temp(self.temp)
        if self.mode not in PRUNE_MODES:
            raise ValueError(f"unknown prune mode {self.mode!r}")

    @property
    def tau_value(self):
        return float(self.tau.data.reshape(()))

    def kept_count(self):
        return int(hard_keep_mask(self.w.data, self.tau_value).sum())

    def transitional_count(self):
        w2 = self.w.data * self.w.data
        return int((np.abs(w2 - self.tau_value) <= self.temp).sum())


@dataclass
class PruneHyperParams:
    """Schedule and update-rule settings for one pruning run."""

    temp_scale: float = 1e-3
    threshold_lr_ratio: float = 1e-5
    lambda_init: float = 2e-6
    lambda_growth: float = 1.0
    lambda_patience: int = 5
    grad_mode: str = "approx"
    clamp_kappa: float = 0.1

    def __post_init__(self):
        for name in ("temp_scale", "threshold_lr_ratio", "lambda_init", "lambda_growth", "clamp_kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_growth < 1.0:
            raise ValueError("lambda_growth must be >= 1")
        if self.lambda_patience <= 0:
            raise ValueError("lambda_patience must be a positive integer")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}; expected one of {GRAD_MODES}")


@dataclass
class LambdaState:
    """Regularization-strength scheduler state.

    ``lam`` is always recomputed as growth**n * init (never accumulated), so
    the exponent n fully determines the current strength.
    """

    lam: float
    n: int = 0
    epochs_since_update: int = 0
    keep_ratio_at_update: float = 1.0


def init_lambda_state(hp):
    return LambdaState(lam=hp.lambda_init)


def lambda_step(state, hp, current_keep_ratio):
    """Advance the scheduler by one epoch.

    The reference keep ratio resets whenever a 1% drop has been achieved;
    if no such drop arrives within ``lambda_patience`` epochs the strength
    exponent increments. Returns the mutated state.
    """
    state.epochs_since_update += 1
    if state.keep_ratio_at_update - current_keep_ratio >= 0.01:
        state.keep_ratio_at_update = current_keep_ratio
        state.epochs_since_update = 0
    elif state.epochs_since_update >= hp.lambda_patience:
        state.n += 1
        state.keep_ratio_at_update = current_keep_ratio
        state.epochs_since_update = 0
    state.lam = hp.lambda_growth**state.n * hp.lambda_init
    return state


def threshold_step(param, dL_dv, lam, eta_tau):
    """Gradient-descent update of the layer threshold.

    tau <- tau - eta_tau * (sum_k dL/dv_k * dv_k/dtau + lam * d(soft_l0)/dtau).
    Returns the new threshold value (unconstrained in sign).
    """
    w, tau, temp = param.w.data, param.tau_value, param.temp
    if dL_dv.shape != w.shape:
        raise ag.ShapeError(f"threshold_step: dL_dv shape {dL_dv.shape} does not match weights {w.shape}")
    g = float((dL_dv * prune_grad_tau(w, tau, temp)).sum()) + lam * soft_l0_grad_tau(w, tau, temp)
    new_tau = tau - eta_tau * g
    param.tau.data[...] = new_tau
    return new_tau


def weight_grad(param, dL_dv, lam, mode, eta=None, kappa=0.1):
    """Gradient of the total loss with respect to the raw weights.

    Variants:
      approx            -- s * dL/dv; mask treated as constant, no L0 term.
      full_unclamped    -- exact chain rule: s * dL/dv + (w*dL/dv + lam) * mask_grad.
      full_clamped      -- the exact gradient, elementwise clipped so the
                           induced step obeys eta*|g| <= kappa*temp.
      l0_in_weight_update -- approx plus the raw L0 pull lam * mask_grad.
    """
    w, tau, temp = param.w.data, param.tau_value, param.temp
    if dL_dv.shape != w.shape:
        raise ag.ShapeError(f"weight_grad: dL_dv shape {dL_dv.shape} does not match weights {w.shape}")
    s = soft_mask(w, tau, temp)
    base = s * dL_dv
    if mode == "approx":
        return base
    if mode == "l0_in_weight_update":
        return base + lam * mask_grad(w, tau, temp)
    if mode in ("full_unclamped", "full_clamped"):
        g = base + (w * dL_dv + lam) * mask_grad(w, tau, temp)
        if mode == "full_clamped":
            if eta is None or not eta > 0:
                raise ValueError("full_clamped needs the weight learning rate to size the clamp")
            bound = kappa * temp / eta
            g = np.clip(g, -bound, bound)
        return g
    raise ValueError(f"unknown grad mode {mode!r}; expected one of {GRAD_MODES}")


# ---------------------------------------------------------------------------
# registry-level statistics and baselines


def keep_counts(registry):
    """(kept, total) over a prunable-parameter registry."""
    kept = 0
    total = 0
    for p in registry.values():
        kept += p.kept_count()
        total += p.w.size
    return kept, total


def keep_ratio(registry):
    kept, total = keep_counts(registry)
    return kept / total if total else 1.0


def transitional_occupancy(registry):
    """Fraction of prunable weights inside their layer's transition band."""
    inside = 0
    total = 0
    for p in registry.values():
        inside += p.transitional_count()
        total += p.w.size
    return inside / total if total else 0.0


def soft_l0_total(registry):
    return sum(soft_l0(p.w.data, p.tau_value, p.temp) for p in registry.values())


def global_magnitude_masks(registry, target_keep_ratio):
    """One-shot global magnitude baseline: keep the largest-|w| fraction.

    Returns {layer: boolean keep mask} with exactly
    ceil(target * total) weights kept across the registry.
    """
    if not 0 < target_keep_ratio <= 1:
        raise ValueError(f"target keep ratio must be in (0, 1], got {target_keep_ratio}")
    names = list(registry)
    mags = np.concatenate([np.abs(registry[n].w.data.ravel()) for n in names])
    total = mags.size
    kept = max(1, int(np.ceil(target_keep_ratio * total)))
    # threshold at the kept-th largest magnitude; strict > keeps <= kept
    cut = np.partition(mags, total - kept)[total - kept]
    masks = {}
    for n in names:
        w = registry[n].w.data
        masks[n] = np.abs(w) > cut if kept < total else np.ones_like(w, dtype=bool)
    return masks
