"""Losses and the episodic meta-learning trainer.

Each meta iteration randomly splits the source domains into meta-train and
meta-test sets, takes a virtual step on the meta-train domains with and
without the critic's auxiliary loss, and trains the critic so that the
auxiliary loss lowers meta-test cross-entropy. The extractor and the
meta-train heads are then updated on cross-entropy plus the auxiliary loss.
"""

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .artifacts import pack, save_params
from .autodiff import (
    Node,
    ParamSet,
    Tape,
    add,
    backward,
    descend,
    grad_through_update,
    reduce_sum,
    scale,
    softmax_ce,
    sub,
    tanh,
)
from .config import RunConfig
from .data import DomainSet, EpochSampler
from .errors import InvalidSplitSize, LabelOutOfRange, NonFiniteLoss
from .metrics import TrainingMetrics
from .models import FeatureCritic, FeatureExtractor, Params, classify, init_head
from .optim import Optimizer, StepSchedule, lr_at

logger = logging.getLogger(__name__)

SHARED_HEAD = "shared"

# SeedSequence spawn keys; each stream is independent of the method, so AGG
# and FC runs with the same seed start from identical parameters and batches.
_THETA_STREAM = 101
_HEAD_STREAM = 102
_CRITIC_STREAM = 103
_SPLIT_STREAM = 104
_ROLE_CODE = {"trn": 0, "val": 1}


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    domain_id: int
    head: str


@dataclass(frozen=True)
class DomainSplit:
    trn: Tuple[int, ...]
    val: Tuple[int, ...]

    def __post_init__(self):
        if not self.trn or not self.val:
            raise InvalidSplitSize(f"empty side in split {self.trn} / {self.val}")
        if set(self.trn) & set(self.val):
            raise InvalidSplitSize(f"meta-train and meta-test overlap: {self}")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def ce_loss(logits: Node, y: np.ndarray) -> Node:
    """Mean softmax cross-entropy over the mini-batch."""
    y = np.asarray(y, dtype=np.int64).ravel()
    n_classes = logits.shape[1]
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    return scale(reduce_sum(softmax_ce(logits, y)), 1.0 / y.size)


def agg_objective(
    extractor: FeatureExtractor,
    theta: Params,
    heads: Mapping[str, Params],
    batches: Sequence[Batch],
) -> Node:
    """Summed cross-entropy over one mini-batch per domain."""
    total = None
    for batch in batches:
        loss = ce_loss(classify(heads[batch.head], extractor(theta, batch.x)), batch.y)
        total = loss if total is None else add(total, loss)
    return total


def aux_loss(critic: FeatureCritic, omega: Params, features: Sequence[Node]) -> Node:
    """Sum of critic outputs over the meta-train feature batches."""
    total = None
    for feature_batch in features:
        value = critic(omega, feature_batch)
        total = value if total is None else add(total, value)
    return total


def virtual_updates(
    theta: Params,
    grad_ce: Mapping[str, object],
    grad_aux: Mapping[str, object],
    alpha: float,
):
    """theta_old = theta - alpha grad_ce; theta_new = theta_old - alpha grad_aux.

    Node gradients keep theta_new differentiable with respect to whatever
    they were recorded from.
    """
    theta_old = descend(theta, grad_ce, alpha)
    theta_new = descend(theta_old, grad_aux, alpha)
    return theta_old, theta_new


def gamma(
    extractor: FeatureExtractor,
    theta: Params,
    head: Params,
    x: np.ndarray,
    y: np.ndarray,
) -> Node:
    """Reward of a model on a batch: the negative cross-entropy."""
    return scale(ce_loss(classify(head, extractor(theta, x)), y), -1.0)


GammaFn = Callable[[FeatureExtractor, Params, Params, np.ndarray, np.ndarray], Node]


def meta_loss(
    extractor: FeatureExtractor,
    theta_old: Params,
    theta_new: Params,
    heads: Mapping[str, Params],
    val_batches: Sequence[Batch],
    gamma_fn: GammaFn = gamma,
) -> Node:
    """Sum over meta-test batches of tanh(gamma(theta_old) - gamma(theta_new)).

    With the default gamma this is tanh(CE(theta_new) - CE(theta_old)).
    """
    total = None
    for batch in val_batches:
        head = heads[batch.head]
        baseline = gamma_fn(extractor, theta_old, head, batch.x, batch.y)
        updated = gamma_fn(extractor, theta_new, head, batch.x, batch.y)
        term = tanh(sub(baseline, updated))
        total = term if total is None else add(total, term)
    return total


def split_domains(
    domain_ids: Sequence[int], rng: np.random.Generator, n_val: int
) -> DomainSplit:
    domain_ids = list(domain_ids)
    if len(domain_ids) < 2 or not 1 <= n_val <= len(domain_ids) - 1:
        raise InvalidSplitSize(
            f"cannot hold out {n_val} of {len(domain_ids)} domains for meta-test"
        )
    order = rng.permutation(len(domain_ids))
    val = sorted(domain_ids[i] for i in order[:n_val])
    trn = sorted(domain_ids[i] for i in order[n_val:])
    return DomainSplit(tuple(trn), tuple(val))


# ---------------------------------------------------------------------------
# Loss log
# ---------------------------------------------------------------------------


class LossLog:
    """Per-iteration ce / aux / meta losses (aux and meta absent for AGG steps)."""

    def __init__(self):
        self.rows: List[Tuple[int, float, Optional[float], Optional[float]]] = []

    def append(
        self, iteration: int, ce: float, aux: Optional[float], meta: Optional[float]
    ) -> None:
        self.rows.append((iteration, ce, aux, meta))

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows, columns=["iter", "ce", "aux", "meta"])
        return frame.astype(
            {"iter": "int64", "ce": "float64", "aux": "float64", "meta": "float64"}
        )

    def last(self) -> Dict[str, Optional[float]]:
        if not self.rows:
            return {}
        _, ce, aux, meta = self.rows[-1]
        return {"ce": ce, "aux": aux, "meta": meta}


@dataclass
class MetaLossPattern:
    window_means: List[float]
    first_positive: Optional[int]
    first_negative: Optional[int]
    final_mean: Optional[float]
    matches_pattern: bool


def meta_loss_pattern(
    log, window: int = 200, tolerance: float = 0.05
) -> MetaLossPattern:
    """Windowed means of the meta-loss and whether they go above zero, then
    below zero, then settle near zero."""
    frame = log.to_frame() if isinstance(log, LossLog) else log
    values = frame["meta"].dropna().to_numpy()
    groups = np.arange(values.size) // window
    means = pd.Series(values).groupby(groups).mean().tolist() if values.size else []

    first_positive = next((i for i, m in enumerate(means) if m > 0), None)
    first_negative = next((i for i, m in enumerate(means) if m < 0), None)
    final_mean = means[-1] if means else None
    matches = (
        first_positive is not None
        and (first_negative is None or first_positive < first_negative)
        and final_mean is not None
        and abs(final_mean) < tolerance
    )
    return MetaLossPattern(means, first_positive, first_negative, final_mean, matches)


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


@dataclass
class TrainerState:
    theta: ParamSet
    heads: Dict[str, ParamSet]
    omega: Optional[ParamSet]
    optimizer: Optimizer
    step: int = 0
    seed: int = 0
    split_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    samplers: Dict[Tuple[int, str], EpochSampler] = field(default_factory=dict)

    def copy(self) -> "TrainerState":
        return TrainerState(
            theta=self.theta.copy(),
            heads={key: head.copy() for key, head in self.heads.items()},
            omega=None if self.omega is None else self.omega.copy(),
            optimizer=self.optimizer.copy(),
            step=self.step,
            seed=self.seed,
            split_rng=copy.deepcopy(self.split_rng),
            samplers=copy.deepcopy(self.samplers),
        )

    def as_params(self) -> ParamSet:
        groups = {"theta": self.theta}
        groups.update({f"head/{key}": head for key, head in self.heads.items()})
        if self.omega is not None:
            groups["omega"] = self.omega
        return pack(groups)


def _finite(*values) -> bool:
    for value in values:
        if isinstance(value, Mapping):
            if not all(np.all(np.isfinite(v)) for v in value.values()):
                return False
        elif value is not None and not np.all(np.isfinite(value)):
            return False
    return True


def _sum_grads(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> ParamSet:
    return ParamSet((name, a[name] + b[name]) for name in a)


class FeatureCriticTrainer:
    """Runs AGG or feature-critic training on one DomainSet."""

    def __init__(
        self,
        config: RunConfig,
        domains: DomainSet,
        metrics: Optional[TrainingMetrics] = None,
        output_dir: Optional[Path] = None,
        gamma_fn: GammaFn = gamma,
    ):
        self.config = config
        self.trainer_config = config.trainer
        self.domains = domains
        self.metrics = metrics
        self.output_dir = Path(output_dir) if output_dir else None
        self.gamma_fn = gamma_fn

        self.extractor = FeatureExtractor(config.model)
        variant = config.experiment.critic_variant
        self.critic = (
            FeatureCritic.from_config(variant, config.model) if variant else None
        )
        tc = self.trainer_config
        total_steps = tc.max_steps + tc.finetune_steps
        self.schedule = StepSchedule(
            tc.lr, tuple(tc.lr_milestones), tuple(tc.lr_factors)
        ).scaled_to(total_steps, tc.lr_reference_steps)
        self.log = LossLog()

    # -- setup ----------------------------------------------------------------

    def head_key(self, domain_id: int) -> str:
        return f"d{domain_id}" if self.domains.heterogeneous else SHARED_HEAD

    def init_state(self, seed: int) -> TrainerState:
        model = self.config.model
        theta = self.extractor.init_params(
            np.random.default_rng([seed, _THETA_STREAM])
        )
        heads: Dict[str, ParamSet] = {}
        for i, domain in enumerate(self.domains.sources):
            key = self.head_key(domain.id)
            if key not in heads:
                rng = np.random.default_rng([seed, _HEAD_STREAM, i])
                heads[key] = init_head(rng, model.feature_dim, domain.n_classes)
        omega = None
        if self.critic is not None:
            omega = self.critic.init_params(
                np.random.default_rng([seed, _CRITIC_STREAM])
            )
        tc = self.trainer_config
        optimizer = Optimizer(tc.optimizer, tc.momentum)
        return TrainerState(
            theta=theta,
            heads=heads,
            omega=omega,
            optimizer=optimizer,
            seed=seed,
            split_rng=np.random.default_rng([seed, _SPLIT_STREAM]),
        )

    def _batch(self, state: TrainerState, domain_id: int, role: str) -> Batch:
        key = (domain_id, role)
        sampler = state.samplers.get(key)
        if sampler is None:
            size = (
                self.trainer_config.batch_size_trn
                if role == "trn"
                else self.trainer_config.batch_size_val
            )
            domain = self.domains.source(domain_id)
            rng = np.random.default_rng([state.seed, domain_id, _ROLE_CODE[role]])
            sampler = state.samplers[key] = EpochSampler(
                domain, min(size, len(domain)), rng
            )
        x, y = sampler.next()
        return Batch(x, y, domain_id, self.head_key(domain_id))

    def learning_rates(self, step: int) -> Tuple[float, float, float]:
        """(eta, alpha, critic lr) at ``step``; alpha and critic lr follow eta
        unless set explicitly."""
        lr = lr_at(self.schedule, step)
        tc = self.trainer_config
        alpha = tc.alpha if tc.alpha is not None else lr
        critic_lr = tc.critic_lr if tc.critic_lr is not None else lr
        return lr, alpha, critic_lr

    # -- iterations -------------------------------------------------------------

    def _supervised_pass(
        self, state: TrainerState, batches: Sequence[Batch], with_aux: bool = True
    ):
        """CE over ``batches`` plus, when ``with_aux``, the auxiliary loss.

        Returns (ce, aux, grads of ce for theta and heads, theta-grad of aux).
        """
        head_keys = sorted({b.head for b in batches})
        tape = Tape()
        with tape:
            theta = state.theta.on_tape(tape, "theta/")
            heads = {
                key: state.heads[key].on_tape(tape, f"{key}/") for key in head_keys
            }
            features = [self.extractor(theta, b.x) for b in batches]
            ce = None
            for batch, feature_batch in zip(batches, features):
                logits = classify(heads[batch.head], feature_batch)
                loss = ce_loss(logits, batch.y)
                ce = loss if ce is None else add(ce, loss)
            wrt = {f"theta/{name}": node for name, node in theta.items()}
            for key, nodes in heads.items():
                wrt.update({f"{key}/{name}": node for name, node in nodes.items()})
            ce_grads = backward(tape, ce, wrt)

            aux_value, aux_grad = None, None
            if with_aux:
                aux = aux_loss(self.critic, state.omega, features)
                aux_value = aux.item()
                aux_grad = backward(tape, aux, theta)

        theta_grad = ParamSet((name, ce_grads[f"theta/{name}"]) for name in theta)
        head_grads = {
            key: ParamSet((name, ce_grads[f"{key}/{name}"]) for name in heads[key])
            for key in head_keys
        }
        return ce.item(), aux_value, theta_grad, head_grads, aux_grad

    def _apply(
        self,
        state: TrainerState,
        theta_grad: ParamSet,
        head_grads: Dict[str, ParamSet],
        lr: float,
    ) -> None:
        wd = self.trainer_config.weight_decay
        state.theta = state.optimizer.step("theta", state.theta, theta_grad, lr, wd)
        for key, grads in head_grads.items():
            state.heads[key] = state.optimizer.step(
                f"head/{key}", state.heads[key], grads, lr, wd
            )

    def _fail(self, state: TrainerState, message: str) -> None:
        path = None
        if self.output_dir is not None:
            path = save_params(
                self.output_dir / "last_good.params",
                state.as_params(),
                {"step": state.step, "seed": state.seed},
            )
        logger.error(f"{message} at step {state.step}; last good state: {path}")
        if self.metrics:
            self.metrics.record_error("trainer", "NonFiniteLoss")
        raise NonFiniteLoss(message, state.step, str(path) if path else None)

    def agg_iteration(
        self, state: TrainerState, domain_ids: Sequence[int], phase: str = "agg"
    ) -> TrainerState:
        """One plain cross-entropy step over one batch from each listed domain."""
        started = time.perf_counter()
        lr, _, _ = self.learning_rates(state.step)
        batches = [self._batch(state, j, "trn") for j in domain_ids]
        ce, _, theta_grad, head_grads, _ = self._supervised_pass(
            state, batches, with_aux=False
        )
        if not _finite(ce, theta_grad, *head_grads.values()):
            self._fail(state, f"non-finite cross-entropy ({ce})")
        self._apply(state, theta_grad, head_grads, lr)
        self.log.append(state.step, ce, None, None)
        state.step += 1
        self._record(phase, started, {"ce": ce})
        return state

    def meta_iteration(self, state: TrainerState, split: DomainSplit) -> TrainerState:
        """One meta-train / meta-test / meta-optimisation step."""
        if self.critic is None:
            raise ValueError("meta_iteration needs a critic (method fc-set or fc-cov)")
        started = time.perf_counter()
        tc = self.trainer_config
        lr, alpha, critic_lr = self.learning_rates(state.step)

        # meta-train
        trn_batches = [self._batch(state, j, "trn") for j in split.trn]
        ce, aux, theta_grad, head_grads, aux_grad = self._supervised_pass(
            state, trn_batches
        )
        theta_old, _ = virtual_updates(state.theta, theta_grad, aux_grad, alpha)
        theta_old = ParamSet(theta_old)

        # meta-test: gradient of the meta-loss through theta_new with respect to omega
        val_batches = [self._batch(state, j, "val") for j in split.val]
        aux_point = state.theta if tc.aux_grad_point == "theta" else theta_old
        critic = self.critic

        def inner(theta_nodes, omega_nodes):
            features = [self.extractor(theta_nodes, b.x) for b in trn_batches]
            return aux_loss(critic, omega_nodes, features)

        def outer(theta_new):
            return meta_loss(
                self.extractor,
                theta_old,
                theta_new,
                state.heads,
                val_batches,
                self.gamma_fn,
            )

        result = grad_through_update(
            inner, outer, aux_point, state.omega, alpha, base=theta_old
        )
        meta = result.outer_value

        if not _finite(ce, aux, meta, theta_grad, aux_grad, result.omega_grad):
            self._fail(
                state, f"non-finite loss or gradient (ce={ce}, aux={aux}, meta={meta})"
            )

        # meta-optimisation
        self._apply(state, _sum_grads(theta_grad, aux_grad), head_grads, lr)
        state.omega = state.optimizer.step(
            "omega", state.omega, result.omega_grad, critic_lr, 0.0
        )
        self.log.append(state.step, ce, aux, meta)
        state.step += 1
        self._record("meta", started, {"ce": ce, "aux": aux, "meta": meta})
        return state

    def _record(
        self, phase: str, started: float, losses: Dict[str, Optional[float]]
    ) -> None:
        if self.metrics:
            self.metrics.record_iteration(phase, time.perf_counter() - started, losses)
        every = self.trainer_config.log_every
        step = self.log.rows[-1][0]
        if every and (step + 1) % every == 0:
            parts = ", ".join(
                f"{kind}={value:.4f}"
                for kind, value in losses.items()
                if value is not None
            )
            lr = lr_at(self.schedule, step)
            logger.info(f"[{phase}] step {step + 1}: {parts}, lr={lr:.2e}")
        else:
            logger.debug(f"[{phase}] step {step + 1}: {losses}")

    # -- outer loop ---------------------------------------------------------------

    def next_split(self, state: TrainerState) -> DomainSplit:
        split = split_domains(
            self.domains.source_ids, state.split_rng, self.trainer_config.n_val
        )
        if self.trainer_config.single_meta_train and len(split.trn) > 1:
            chosen = int(state.split_rng.choice(split.trn))
            split = DomainSplit((chosen,), split.val)
        return split

    def train(self, seed: int = 0) -> Tuple[TrainerState, LossLog]:
        tc = self.trainer_config
        if len(self.domains.sources) < 2:
            raise InvalidSplitSize("training needs at least two source domains")
        state = self.init_state(seed)
        method = self.config.experiment.method
        logger.info(
            f"Training {method} on {len(self.domains.sources)} source domains "
            f"for {tc.max_steps} steps (+{tc.finetune_steps} fine-tune), seed {seed}"
        )

        if self.critic is None:
            while state.step < tc.max_steps:
                self.agg_iteration(state, self.domains.source_ids)
        else:
            while state.step < tc.max_steps:
                split = self.next_split(state)
                logger.debug(
                    f"Split at step {state.step}: trn={split.trn} val={split.val}"
                )
                for _ in range(tc.inner_steps):
                    if state.step >= tc.max_steps:
                        break
                    self.meta_iteration(state, split)

        if tc.finetune_steps:
            logger.info(f"Fine-tuning on all sources for {tc.finetune_steps} steps")
            for _ in range(tc.finetune_steps):
                self.agg_iteration(state, self.domains.source_ids, phase="finetune")

        if self.metrics:
            self.metrics.record_memory_usage()
        logger.info(f"Training finished at step {state.step}: {self.log.last()}")
        return state, self.log
