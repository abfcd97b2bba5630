"""Parameter update rules: AMSGrad, momentum SGD and step learning-rate decay.

AMSGrad follows its original formulation without bias correction:

    m <- b1 m + (1 - b1) g
    v <- b2 v + (1 - b2) g^2
    v_hat <- max(v_hat, v)
    p <- p - lr m / (sqrt(v_hat) + eps)

Weight decay is folded into the gradient (g + wd p) before the update.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ParamSet
from .errors import MissingGradient, ShapeMismatch

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass
class OptimizerState:
    """Per-parameter moments: m, v, v_hat for AMSGrad or velocity for momentum."""

    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    v_hat: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = None

    def copy(self) -> "OptimizerState":
        arrays = (self.m, self.v, self.v_hat, self.velocity)
        return OptimizerState(*(None if a is None else a.copy() for a in arrays))


def _check(param: np.ndarray, grad: np.ndarray) -> None:
    if param.shape != grad.shape:
        raise ShapeMismatch(f"gradient {grad.shape} for parameter {param.shape}")


def amsgrad_step(
    state: OptimizerState,
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPSILON,
) -> Tuple[np.ndarray, OptimizerState]:
    _check(param, grad)
    g = grad + weight_decay * param if weight_decay else grad
    m = np.zeros_like(param) if state.m is None else state.m
    v = np.zeros_like(param) if state.v is None else state.v
    v_hat = np.zeros_like(param) if state.v_hat is None else state.v_hat

    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    v_hat = np.maximum(v_hat, v)
    updated = param - lr * m / (np.sqrt(v_hat) + eps)
    return updated, OptimizerState(m=m, v=v, v_hat=v_hat)


def momentum_sgd_step(
    state: OptimizerState,
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> Tuple[np.ndarray, OptimizerState]:
    _check(param, grad)
    g = grad + weight_decay * param if weight_decay else grad
    velocity = np.zeros_like(param) if state.velocity is None else state.velocity
    velocity = momentum * velocity + g
    return param - lr * velocity, OptimizerState(velocity=velocity)


@dataclass(frozen=True)
class StepSchedule:
    """Base lr divided by the factor of the last milestone passed."""

    base_lr: float
    milestones: Tuple[int, ...] = ()
    factors: Tuple[float, ...] = ()

    def scaled_to(
        self, total_steps: int, reference_steps: Optional[int]
    ) -> "StepSchedule":
        """Move milestones proportionally from reference_steps to total_steps."""
        if not reference_steps or total_steps == reference_steps:
            return self
        ratio = total_steps / reference_steps
        milestones = tuple(int(round(m * ratio)) for m in self.milestones)
        return StepSchedule(self.base_lr, milestones, self.factors)


def lr_at(schedule: StepSchedule, iteration: int) -> float:
    factor = 1.0
    pairs = sorted(zip(schedule.milestones, schedule.factors))
    for milestone, milestone_factor in pairs:
        if iteration >= milestone:
            factor = milestone_factor
    return schedule.base_lr / factor


@dataclass
class Optimizer:
    """Applies the configured rule to named parameter groups, owning their moments."""

    kind: str = "amsgrad"
    momentum: float = 0.9
    states: Dict[str, OptimizerState] = field(default_factory=dict)

    def step(
        self,
        group: str,
        params: ParamSet,
        grads: Mapping[str, np.ndarray],
        lr: float,
        weight_decay: float = 0.0,
    ) -> ParamSet:
        updated = ParamSet()
        for name, param in params.items():
            if name not in grads:
                raise MissingGradient(f"no gradient for {group}/{name}")
            key = f"{group}/{name}"
            state = self.states.get(key, OptimizerState())
            if self.kind == "amsgrad":
                new_param, state = amsgrad_step(
                    state, param, grads[name], lr, weight_decay
                )
            else:
                new_param, state = momentum_sgd_step(
                    state, param, grads[name], lr, self.momentum, weight_decay
                )
            self.states[key] = state
            updated[name] = new_param
        return updated

    def copy(self) -> "Optimizer":
        return Optimizer(
            self.kind, self.momentum, {k: s.copy() for k, s in self.states.items()}
        )

    def moment_shapes(self) -> Dict[str, Sequence[Tuple[int, ...]]]:
        return {
            key: [a.shape for a in (s.m, s.v, s.v_hat, s.velocity) if a is not None]
            for key, s in self.states.items()
        }
