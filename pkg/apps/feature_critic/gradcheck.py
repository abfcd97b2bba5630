"""Finite-difference checks for the autodiff primitives and the hypergradient.

Shared by the test-suite and the ``gradcheck`` command. Every check compares
an analytic gradient with central differences (eps 1e-5, float64) and
reports the max relative error.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import ParamSet, Tape, backward, finite_difference, relative_error
from .config import ModelConfig
from .meta import Batch, agg_objective, aux_loss, meta_loss
from .models import FeatureCritic, FeatureExtractor, init_head

logger = logging.getLogger(__name__)

FIRST_ORDER_TOLERANCE = 1e-5
HYPERGRADIENT_TOLERANCE = 1e-3
KINK_MARGIN = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int = 1
    exact_zero: Optional[bool] = None

    @property
    def passed(self) -> bool:
        if self.exact_zero is not None:
            return self.exact_zero
        return self.max_rel_error <= self.tolerance


@dataclass
class GradcheckReport:
    results: List[CheckResult] = field(default_factory=list)
    seconds: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "check": r.name,
                    "max_rel_error": r.max_rel_error,
                    "tolerance": r.tolerance,
                    "instances": r.instances,
                    "passed": r.passed,
                }
                for r in self.results
            ]
        )


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

Builder = Callable[..., ad.Node]


def _away_from_kink(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x + KINK_MARGIN, x - KINK_MARGIN)


# name -> (builder, input shapes, needs kink margin, twice differentiable)
_LABELS = np.array([0, 2, 1, 3, 2])
_INDEX = np.random.default_rng(7).integers(0, 12, size=(5, 3))

PRIMITIVES: Dict[str, Tuple[Builder, Sequence[Tuple[int, int]], bool, bool]] = {
    "matmul": (ad.matmul, [(3, 4), (4, 2)], False, True),
    "add": (ad.add, [(3, 4), (3, 4)], False, True),
    "add_row_broadcast": (ad.add, [(3, 4), (1, 4)], False, True),
    "sub": (ad.sub, [(3, 4), (3, 4)], False, True),
    "sub_row_broadcast": (ad.sub, [(1, 4), (3, 4)], False, True),
    "scale": (lambda a: ad.scale(a, -1.7), [(3, 4)], False, True),
    "elementwise_mul": (ad.elementwise_mul, [(3, 4), (3, 4)], False, True),
    "relu": (ad.relu, [(3, 4)], True, True),
    "tanh": (ad.tanh, [(3, 4)], False, True),
    "sigmoid": (ad.sigmoid, [(3, 4)], False, True),
    "softplus": (ad.softplus, [(3, 4)], False, True),
    "mean_rows": (ad.mean_rows, [(3, 4)], False, True),
    "sum_rows": (ad.sum_rows, [(3, 4)], False, True),
    "broadcast_rows": (lambda a: ad.broadcast_rows(a, 3), [(1, 4)], False, True),
    "reduce_sum": (ad.reduce_sum, [(3, 4)], False, True),
    "transpose": (ad.transpose, [(3, 4)], False, True),
    "gram": (ad.gram, [(5, 3)], False, True),
    "reshape": (lambda a: ad.reshape(a, (2, 6)), [(3, 4)], False, True),
    "flatten": (ad.flatten, [(3, 4)], False, True),
    "take": (lambda a: ad.take(a, _INDEX), [(3, 4)], False, True),
    "scatter_add": (lambda a: ad.scatter_add(a, _INDEX, (3, 4)), [(5, 3)], False, True),
    "softmax_ce": (lambda a: ad.softmax_ce(a, _LABELS), [(5, 4)], False, False),
}


def _projected(builder: Builder, inputs: Sequence[ad.Node], weights: np.ndarray):
    out = builder(*inputs)
    return ad.reduce_sum(ad.elementwise_mul(out, ad.constant(weights)))


def _output_shape(builder: Builder, shapes) -> Tuple[int, int]:
    with Tape():
        out = builder(*[ad.constant(np.zeros(s)) for s in shapes])
    return out.shape


def _random_inputs(rng, shapes, kink: bool) -> List[np.ndarray]:
    inputs = [rng.normal(size=s) for s in shapes]
    return [_away_from_kink(x) for x in inputs] if kink else inputs


def check_primitive(
    name: str, rng: np.random.Generator, instances: int = 20
) -> CheckResult:
    """Gradient of a random linear projection of the op's output, per input."""
    builder, shapes, kink, _ = PRIMITIVES[name]
    out_shape = _output_shape(builder, shapes)
    worst = 0.0
    for _ in range(instances):
        inputs = _random_inputs(rng, shapes, kink)
        weights = rng.normal(size=out_shape)
        tape = Tape()
        with tape:
            leaves = [tape.param(f"x{i}", x) for i, x in enumerate(inputs)]
            root = _projected(builder, leaves, weights)
            grads = backward(tape, root)
        for i, x in enumerate(inputs):

            def f(flat, i=i):
                args = list(inputs)
                args[i] = flat.reshape(x.shape)
                with Tape():
                    return _projected(
                        builder, [ad.constant(a) for a in args], weights
                    ).item()

            numeric = finite_difference(f, x, EPS)
            worst = max(worst, relative_error(grads[f"x{i}"].ravel(), numeric))
    return CheckResult(name, worst, FIRST_ORDER_TOLERANCE, instances)


def check_second_order(
    name: str, rng: np.random.Generator, instances: int = 20
) -> CheckResult:
    """Differentiate a projected first-order gradient (reverse-over-reverse)."""
    builder, shapes, kink, _ = PRIMITIVES[name]
    out_shape = _output_shape(builder, shapes)
    worst = 0.0
    for _ in range(instances):
        inputs = _random_inputs(rng, shapes, kink)
        weights = rng.normal(size=out_shape)
        probes = [rng.normal(size=s) for s in shapes]

        def gradient_probe(values, as_nodes: bool):
            tape = Tape()
            with tape:
                leaves = [tape.param(f"x{i}", v) for i, v in enumerate(values)]
                root = _projected(builder, leaves, weights)
                grads = backward(tape, root, create_graph=True)
                total = None
                for i, probe in enumerate(probes):
                    term = ad.reduce_sum(
                        ad.elementwise_mul(grads[f"x{i}"], ad.constant(probe))
                    )
                    total = term if total is None else ad.add(total, term)
                if not as_nodes:
                    return total.item()
                return backward(tape, total, dict(zip(grads, leaves)))

        analytic = gradient_probe(inputs, True)
        for i, x in enumerate(inputs):

            def f(flat, i=i):
                args = list(inputs)
                args[i] = flat.reshape(x.shape)
                return gradient_probe(args, False)

            numeric = finite_difference(f, x, EPS)
            worst = max(worst, relative_error(analytic[f"x{i}"].ravel(), numeric))
    return CheckResult(
        f"{name} (second order)", worst, FIRST_ORDER_TOLERANCE, instances
    )


# ---------------------------------------------------------------------------
# Hypergradient
# ---------------------------------------------------------------------------


@dataclass
class HypergradientInstance:
    """Tiny problem: features of width 4, critic hidden width 8, batches of
    5 images, two meta-train and two meta-test domains."""

    extractor: FeatureExtractor
    critic: FeatureCritic
    theta: ParamSet
    heads: Dict[str, ParamSet]
    omega: ParamSet
    trn: List[Batch]
    val: List[Batch]
    alpha: float
    theta_old: Optional[ParamSet] = field(default=None, init=False)

    def __post_init__(self):
        tape = Tape()
        with tape:
            theta = self.theta.on_tape(tape)
            ce = agg_objective(self.extractor, theta, self.heads, self.trn)
            grads = backward(tape, ce, theta)
        self.theta_old = ParamSet(descend_arrays(self.theta, grads, self.alpha))

    def inner(self, theta_nodes, omega_nodes):
        features = [self.extractor(theta_nodes, b.x) for b in self.trn]
        return aux_loss(self.critic, omega_nodes, features)

    def outer(self, theta_new):
        return meta_loss(
            self.extractor, self.theta_old, theta_new, self.heads, self.val
        )

    def meta_value(self, omega: ParamSet) -> Tuple[float, float]:
        """Meta-loss at ``omega`` (first-order evaluation) and the smallest
        distance of any relu input from zero."""
        tape = Tape()
        with tape:
            theta = self.theta.on_tape(tape)
            aux_grad = backward(tape, self.inner(theta, omega), theta)
            theta_new = ParamSet(descend_arrays(self.theta_old, aux_grad, self.alpha))
            value = self.outer(theta_new).item()
        return value, tape.kink_margin()

    def hypergradient(self, alpha: Optional[float] = None) -> ParamSet:
        alpha = self.alpha if alpha is None else alpha
        return ad.grad_through_update(
            self.inner, self.outer, self.theta, self.omega, alpha, base=self.theta_old
        ).omega_grad


def descend_arrays(params: ParamSet, grads, step: float):
    return ((name, params[name] - step * grads[name]) for name in params)


def hypergradient_instance(
    variant: str, seed: int, alpha: float = 0.1
) -> HypergradientInstance:
    rng = np.random.default_rng(seed)
    config = ModelConfig(
        extractor="mlp",
        image_shape=(3, 3),
        feature_dim=4,
        mlp_hidden=(6,),
        critic_hidden=(8,),
    )
    extractor = FeatureExtractor(config)
    critic = FeatureCritic.from_config(variant, config)
    n_classes = 3

    def batch(domain_id: int) -> Batch:
        return Batch(
            rng.uniform(0.0, 1.0, size=(5, 3, 3)),
            rng.integers(0, n_classes, size=5),
            domain_id,
            f"d{domain_id}",
        )

    trn, val = [batch(0), batch(1)], [batch(2), batch(3)]
    heads = {f"d{j}": init_head(rng, config.feature_dim, n_classes) for j in range(4)}
    return HypergradientInstance(
        extractor,
        critic,
        extractor.init_params(rng),
        heads,
        critic.init_params(rng),
        trn,
        val,
        alpha,
    )


def find_instance(variant: str, seed: int = 0, attempts: int = 200):
    """First instance from ``seed`` onward whose relu inputs all stay at least
    KINK_MARGIN from zero."""
    for offset in range(attempts):
        instance = hypergradient_instance(variant, seed + offset)
        _, margin = instance.meta_value(instance.omega)
        if margin >= KINK_MARGIN:
            return instance
    raise RuntimeError(f"no kink-free {variant} instance in {attempts} seeds")


def check_hypergradient(variant: str, seed: int = 0) -> CheckResult:
    instance = find_instance(variant, seed)
    analytic = instance.hypergradient().flat()
    numeric = finite_difference(
        lambda flat: instance.meta_value(instance.omega.with_flat(flat))[0],
        instance.omega.flat(),
        EPS,
    )
    error = relative_error(analytic, numeric)
    return CheckResult(f"hypergradient ({variant})", error, HYPERGRADIENT_TOLERANCE)


def check_zero_step(variant: str, seed: int = 0) -> CheckResult:
    """alpha = 0 leaves theta_new = theta_old, so the hypergradient is exactly 0."""
    instance = find_instance(variant, seed)
    grads = instance.hypergradient(alpha=0.0).flat()
    error = float(np.max(np.abs(grads))) if grads.size else 0.0
    return CheckResult(
        f"zero step ({variant})", error, 0.0, exact_zero=bool(np.all(grads == 0.0))
    )


def run_gradcheck(seed: int = 0, instances: int = 20) -> GradcheckReport:
    report = GradcheckReport()
    rng = np.random.default_rng(seed)

    started = time.perf_counter()
    for name, (_, _, _, twice) in PRIMITIVES.items():
        report.results.append(check_primitive(name, rng, instances))
        if twice and name != "relu":
            report.results.append(check_second_order(name, rng, max(2, instances // 4)))
    report.seconds["primitives"] = time.perf_counter() - started

    started = time.perf_counter()
    for variant in ("set", "cov"):
        report.results.append(check_hypergradient(variant, seed))
        report.results.append(check_zero_step(variant, seed))
    report.seconds["hypergradient"] = time.perf_counter() - started

    for result in report.results:
        level = logging.INFO if result.passed else logging.ERROR
        logger.log(
            level,
            f"{result.name}: max rel err {result.max_rel_error:.2e} "
            f"(tol {result.tolerance:.0e}) {'ok' if result.passed else 'FAILED'}",
        )
    return report
