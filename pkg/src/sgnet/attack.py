"""L-infinity projected gradient descent and the training-time epsilon ramp.

The attack ascends the supplied loss along the sign of its input gradient and
clamps the perturbation into the epsilon ball after every iteration.  Inputs
are z-normalized intensities, so there is no data-range clamp.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError
from .model import Model, forward


@dataclass
class AttackConfig:
    epsilon: float
    n_iters: int = 10
    step_size: float | None = None  # defaults to 2.5 * epsilon / n_iters
    random_start: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_iters < 1:
            raise ConfigError(f"n_iters must be positive, got {self.n_iters}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.n_iters


@dataclass
class EpsilonSchedule:
    """Piecewise-linear attack strength: zero for `warmup_steps`, then a
    linear ramp over `ramp_steps` up to `epsilon_max`, constant afterwards."""
    epsilon_max: float
    warmup_steps: int = 400
    ramp_steps: int = 2000

    def __post_init__(self):
        if self.epsilon_max < 0 or self.warmup_steps < 0 or self.ramp_steps < 0:
            raise ConfigError("schedule fields must be nonnegative")


def epsilon_at(step: int, sched: EpsilonSchedule) -> float:
    if step < 0:
        raise ContractError(f"step must be >= 0, got {step}")
    if step < sched.warmup_steps:
        return 0.0
    ramped = step - sched.warmup_steps
    if sched.ramp_steps == 0 or ramped >= sched.ramp_steps:
        return sched.epsilon_max
    return sched.epsilon_max * ramped / sched.ramp_steps


LossFn = Callable[["Model | Callable", Tensor, np.ndarray], Tensor]


def _logits(model, x: Tensor) -> Tensor:
    if isinstance(model, Model):
        return forward(model, x, training=False).logits
    return model(x)


def pgd(model, x, y, cfg: AttackConfig, loss: LossFn, rng: np.random.Generator | None = None) -> Tensor:
    """Generate adversarial examples within an exact L-inf ball around x.

    ``model`` is a Model (run in inference behavior) or any callable mapping
    an input tensor to logits; ``loss`` maps (model, x_tensor, labels) to the
    scalar objective being ascended.  The returned tensor carries values only
    (no graph linkage).
    """
    cfg.validate()
    x_arr = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if not np.all(np.isfinite(x_arr)):
        raise ContractError("attack input contains non-finite values")
    eps = cfg.epsilon
    if eps == 0.0:
        return Tensor(x_arr)
    y = np.asarray(y)
    step = cfg.resolved_step_size()
    if cfg.random_start:
        if rng is None:
            raise ContractError("random_start needs the run's seeded generator")
        adv = x_arr + rng.uniform(-eps, eps, size=x_arr.shape).astype(x_arr.dtype)
    else:
        adv = x_arr.copy()
    for _ in range(cfg.n_iters):
        probe = Tensor(adv.copy(), requires_grad=True)
        objective = loss(model, probe, y)
        g = ad.grad(objective, [probe])[0].data
        adv = adv + step * np.sign(g)
        delta = np.clip(adv - x_arr, -eps, eps)
        adv = x_arr + delta
    # final projection in float64 so |x_adv - x| <= eps holds in real
    # arithmetic; the cast back can overshoot by at most half an ulp of the
    # result, which a nextafter nudge toward x removes
    x_wide = x_arr.astype(np.float64)
    adv = (x_wide + np.clip(adv.astype(np.float64) - x_wide, -eps, eps)).astype(x_arr.dtype)
    for _ in range(4):
        over = np.abs(adv.astype(np.float64) - x_wide) > eps
        if not over.any():
            break
        adv = np.where(over, np.nextafter(adv, x_arr), adv)
    return Tensor(adv)
