"""
Executable checks of the gradient-learning identities.

Every check builds its own random instance from a seed, so a report is reproducible.
The gradient checks use a frozen 20→16→12→4 ReLU network in 64-bit precision with
one adapter per affine layer.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adapters import Adapter, AdapterSpec, init_adapter
from .autodiff import Tape
from .helpers.arg_options import OFFLOADED_VARIANTS, AdapterKind, Variant, get_enum_values
from .helpers.errors import NotMergeableError
from .models import BaseModel, LayerSpec
from .router import Router, split_records
from .training import classical_gradients, offloaded_records, record_gradients

logger = logging.getLogger(__name__)

CHECK_DIMS = (20, 16, 12, 4)
CHECK_RANK = 2
WHITENING_EPS = 1e-8
PROP1_TOLERANCE = 1e-10
MATCH_TOLERANCE = 1e-8
MISMATCH_THRESHOLD = 1e-3
LINEARITY_TOLERANCE = 1e-10
MERGE_TOLERANCE = 1e-9
ROUND_TRIP_TOLERANCE = 1e-12


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_abs: float
    max_rel: float
    tolerance: float
    seeds: List[int] = field(default_factory=list)
    details: Dict[str, object] = field(default_factory=dict)


@dataclass
class VerifyReport:
    seed: int
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def to_dict(self) -> Dict[str, object]:
        return {'seed': self.seed, 'passed': self.passed, 'checks': [asdict(check) for check in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    def render(self, template: str) -> str:
        """Fill a text template with {seed}, {status}, {passed_count}, {total_count} and {rows}."""
        width = max([len(check.name) for check in self.checks] + [4])
        rows = [
            f"{'PASS' if check.passed else 'FAIL'}  {check.name.ljust(width)}  "
            f"max_abs={check.max_abs:.3e}  max_rel={check.max_rel:.3e}  tol={check.tolerance:.0e}"
            for check in self.checks
        ]
        return template.format(
            seed=self.seed,
            status='PASSED' if self.passed else 'FAILED',
            passed_count=sum(check.passed for check in self.checks),
            total_count=len(self.checks),
            rows="\n".join(rows),
        )


def errors(actual: np.ndarray, expected: np.ndarray) -> Tuple[float, float]:
    """(max absolute error, max absolute error relative to the largest expected magnitude)."""
    max_abs = float(np.max(np.abs(actual - expected))) if np.size(expected) else 0.0
    scale = float(np.max(np.abs(expected))) if np.size(expected) else 0.0
    if max_abs == 0.0:
        return 0.0, 0.0
    return max_abs, max_abs / scale if scale > 0 else math.inf


def gradient_errors(actual: Dict[str, np.ndarray], expected: Dict[str, np.ndarray]) -> Tuple[float, float]:
    pairs = [errors(actual[name], expected[name]) for name in expected]
    return max(pair[0] for pair in pairs), max(pair[1] for pair in pairs)


def check_model(seed: int, dims: Sequence[int] = CHECK_DIMS) -> BaseModel:
    """A frozen ReLU network with affine layers of the given widths."""
    layers = []
    for index, (in_dim, out_dim) in enumerate(zip(dims, dims[1:])):
        if index:
            layers.append(LayerSpec('activation', in_dim, in_dim, fine_tunable=False))
        layers.append(LayerSpec('affine', in_dim, out_dim))
    return BaseModel(layers, seed=seed)


def perturbed(adapter: Adapter, rng: np.random.Generator, scale: float = 0.5) -> Adapter:
    """A copy of the adapter with every parameter moved by N(0, scale²) noise, so its output is nonzero."""
    params = {name: value + scale * rng.normal(size=value.shape) for name, value in adapter.params.items()}
    return Adapter.from_parameters(adapter.kind, params, alpha=adapter.alpha)


def check_adapters(model: BaseModel, kind: str, seed: int, rng: np.random.Generator) -> Dict[tuple, Adapter]:
    adapters = {}
    for m in range(model.M):
        in_dim, out_dim = model.layer_dims(m)
        spec = AdapterSpec(kind, in_dim, out_dim, rank=CHECK_RANK, hidden=8)
        adapters[(m, 0)] = perturbed(init_adapter(spec, seed + m), rng)
    return adapters


def check_batch(model: BaseModel, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    return rng.normal(size=(batch_size, model.in_dim)), rng.integers(0, model.out_dim, size=batch_size)


def check_prop1(
    seed: int, batch_sizes: Sequence[int] = (1, 7, 32), kinds: Optional[Sequence[str]] = None
) -> CheckResult:
    """
    The auxiliary-objective gradient at the current adapter equals the task-loss gradient.

    For every adapter kind and batch size, records from an unmerged pass are fitted at
    w^t and compared elementwise with classical backprop gradients.
    """
    kinds = list(kinds or get_enum_values(AdapterKind))
    rng = np.random.default_rng(seed)
    max_abs = max_rel = 0.0
    cases = []
    for kind in kinds:
        for batch_size in batch_sizes:
            model = check_model(seed)
            adapters = check_adapters(model, kind, seed, rng)
            batch, labels = check_batch(model, batch_size, rng)
            _, _, expected = classical_gradients(model, adapters, batch, labels)
            _, _, records = offloaded_records(model, adapters, batch, labels, Variant.UNMERGED.value)
            actual = record_gradients(adapters, records)
            for key in expected:
                abs_error, rel_error = gradient_errors(actual[key], expected[key])
                max_abs, max_rel = max(max_abs, abs_error), max(max_rel, rel_error)
            cases.append({'kind': kind, 'batch_size': batch_size})
    return CheckResult(
        'prop1_aux_gradient',
        max_rel <= PROP1_TOLERANCE,
        max_abs,
        max_rel,
        PROP1_TOLERANCE,
        seeds=[seed],
        details={'cases': cases},
    )


def variant_gradient_table(seed: int, batch_size: int = 8, kind: str = AdapterKind.LOWRANK.value):
    """
    Per-variant, per-layer (max_abs, max_rel) of record gradients against classical gradients.

    The merged variant is left out for adapters that cannot be merged.
    """
    rng = np.random.default_rng(seed)
    model = check_model(seed)
    adapters = check_adapters(model, kind, seed, rng)
    batch, labels = check_batch(model, batch_size, rng)
    _, _, expected = classical_gradients(model, adapters, batch, labels)
    table = {}
    for variant in OFFLOADED_VARIANTS:
        if variant == Variant.MERGED.value and not adapters[(0, 0)].mergeable():
            continue
        _, _, records = offloaded_records(model, adapters, batch, labels, variant)
        actual = record_gradients(adapters, records)
        table[variant] = [gradient_errors(actual[(m, 0)], expected[(m, 0)]) for m in range(model.M)]
    return table


def check_variant_matrix(seed: int, kinds: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """
    Which variants reproduce classical gradients at every layer, for every adapter kind.

    Unmerged and merged must match at all layers. Detached must match at the last layer
    only, and miss by more than 1e-3 somewhere earlier.
    """
    results = []
    for kind in kinds or get_enum_values(AdapterKind):
        for variant, layers in variant_gradient_table(seed, kind=kind).items():
            matches = [rel <= MATCH_TOLERANCE for _, rel in layers]
            if variant == Variant.DETACHED.value:
                passed = matches[-1] and any(rel > MISMATCH_THRESHOLD for _, rel in layers[:-1])
            else:
                passed = all(matches)
            results.append(
                CheckResult(
                    f"variant_matrix_{kind}_{variant}",
                    passed,
                    max(abs_error for abs_error, _ in layers),
                    max(rel for _, rel in layers),
                    MATCH_TOLERANCE,
                    seeds=[seed],
                    details={
                        'kind': kind,
                        'layers': [
                            {'layer': m, 'max_abs': abs_error, 'max_rel': rel, 'match': match}
                            for m, ((abs_error, rel), match) in enumerate(zip(layers, matches))
                        ],
                    },
                )
            )
    return results


@dataclass
class WhitenedSetup:
    """Whitened least-squares instance of one adapter fit."""

    inputs: np.ndarray
    hidden_grads: np.ndarray
    covariance: np.ndarray
    whitener: np.ndarray
    regularized: bool

    @property
    def whitened(self) -> np.ndarray:
        return self.inputs @ self.whitener.T


def whitener(covariance: np.ndarray, eps: float = WHITENING_EPS) -> Tuple[np.ndarray, bool]:
    """
    Symmetric U with UᵀU = V⁻¹, via V = QΛQᵀ and U = QΛ^{-1/2}Qᵀ.

    ε·I is added only when the smallest eigenvalue is at most ε.

    Returns:
        Tuple[np.ndarray, bool]: U and whether V was regularized.
    """
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    regularized = bool(eigenvalues.min() <= eps)
    if regularized:
        eigenvalues = eigenvalues + eps
    return (eigenvectors / np.sqrt(eigenvalues)) @ eigenvectors.T, regularized


def whitened_setup(dims: Tuple[int, int], seed: int, n_samples: int = 64) -> WhitenedSetup:
    """
    Hidden inputs and per-sample ∇ĥ harvested from a real backward pass of a one-layer model.

    Args:
        dims (Tuple[int, int]): (input width, output width) of the fine-tuned layer.
        seed (int): Seed of the model, inputs and labels.
        n_samples (int): Rows of the empirical average.
    """
    in_dim, out_dim = dims
    rng = np.random.default_rng(seed)
    model = BaseModel([LayerSpec('affine', in_dim, out_dim)], seed=seed)
    inputs = rng.normal(size=(n_samples, in_dim))
    labels = rng.integers(0, out_dim, size=n_samples)
    tape = Tape()
    forward = model.forward(tape, inputs)
    tape.backward(tape.softmax_cross_entropy(forward.logits, labels))
    (record,) = split_records(forward.taps, Router(), 1)
    covariance = record.hidden_input.T @ record.hidden_input / n_samples
    u, regularized = whitener(covariance)
    if regularized:
        logger.warning(f"Covariance of a {in_dim}-wide input is singular; whitening uses V + {WHITENING_EPS}·I.")
    return WhitenedSetup(record.hidden_input, record.hidden_grad, covariance, u, regularized)


def inner_fit(adapter: Adapter, inputs: np.ndarray, hidden_grads: np.ndarray, step_sizes: Sequence[float]):
    """
    Run explicit GD steps on the auxiliary objective with a target fixed at the starting point.

    Returns:
        Tuple[List[np.ndarray], np.ndarray]: Iterates w^{t,0..A} and the fixed point c.
    """
    target = adapter.output(inputs) - adapter.alpha * hidden_grads
    n = inputs.shape[0]
    fixed_point = np.linalg.solve(inputs.T @ inputs / n, (target.T @ inputs / n).T).T
    iterates = [adapter.params['W'].copy()]
    for step_size in step_sizes:
        _, grads = adapter.aux_gradient(inputs, hidden_grads, target=target)
        adapter.params = {'W': adapter.params['W'] - step_size * grads['W']}
        iterates.append(adapter.params['W'].copy())
    return iterates, fixed_point


def linear_check_adapter(dims: Tuple[int, int], seed: int, alpha: float = 1.0) -> Adapter:
    in_dim, out_dim = dims
    adapter = init_adapter(AdapterSpec(AdapterKind.LINEAR.value, in_dim, out_dim, alpha=alpha), seed)
    return perturbed(adapter, np.random.default_rng([seed, 1]))


def check_contraction(dims: Tuple[int, int], step_sizes: Sequence[float], seed: int) -> CheckResult:
    """
    Inner GD on whitened inputs contracts toward the fixed point by exactly (1 − α_ℓ) per step.

    Compares ‖w^{t,ℓ} − c‖ / ‖w^{t,0} − c‖ with Π_{j≤ℓ}(1 − α_j) for every ℓ.
    """
    setup = whitened_setup(dims, seed)
    adapter = linear_check_adapter(dims, seed)
    iterates, fixed_point = inner_fit(adapter, setup.whitened, setup.hidden_grads, step_sizes)
    start = np.linalg.norm(iterates[0] - fixed_point)
    max_abs = max_rel = 0.0
    product = 1.0
    for step_size, iterate in zip(step_sizes, iterates[1:]):
        product *= 1.0 - step_size
        ratio = np.linalg.norm(iterate - fixed_point) / start
        abs_error = abs(ratio - product)
        max_abs = max(max_abs, abs_error)
        max_rel = max(max_rel, abs_error / product if product > 0 else abs_error)
    return CheckResult(
        'contraction',
        max_rel <= MATCH_TOLERANCE,
        max_abs,
        max_rel,
        MATCH_TOLERANCE,
        seeds=[seed],
        details={
            'dims': list(dims),
            'steps': len(step_sizes),
            'final_factor': product,
            'regularized': setup.regularized,
        },
    )


def whitened_update(
    dims: Tuple[int, int], steps: int, step_size: float, lr: float, seed: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    (w^t, w^{t+1} after `steps` inner steps, one-shot GD update w^t − γ·𝔼_n[∇ĥ xᵀUᵀ]).

    The adapter scale plays the role of the outer rate γ in the fit target.
    """
    setup = whitened_setup(dims, seed)
    adapter = linear_check_adapter(dims, seed, alpha=lr)
    start = adapter.params['W'].copy()
    iterates, _ = inner_fit(adapter, setup.whitened, setup.hidden_grads, [step_size] * steps)
    n = setup.inputs.shape[0]
    gd_update = start - lr * setup.hidden_grads.T @ setup.whitened / n
    return start, iterates[-1], gd_update


def check_whitened_equivalence(
    dims: Tuple[int, int], steps: int, step_size: float, lr: float, seed: int
) -> CheckResult:
    """
    After A inner steps the update differs from one-shot GD by exactly γ·𝔼_n[∇ĥ xᵀUᵀ]·Π(1 − α_j).

    Also checks that doubling A squares the residual factor, and reports e^{−Σα_j}.
    """
    start, updated, gd_update = whitened_update(dims, steps, step_size, lr, seed)
    gd_step = start - gd_update
    factor = (1.0 - step_size) ** steps
    residual = updated - gd_update
    max_abs, max_rel = errors(residual, factor * gd_step)
    measured = np.linalg.norm(residual) / np.linalg.norm(gd_step)

    _, doubled, doubled_gd = whitened_update(dims, 2 * steps, step_size, lr, seed)
    doubled_factor = np.linalg.norm(doubled - doubled_gd) / np.linalg.norm(gd_step)
    squared_error = abs(doubled_factor - measured**2)
    max_abs = max(max_abs, squared_error)
    max_rel = max(max_rel, squared_error / measured**2 if measured > 0 else squared_error)
    return CheckResult(
        'whitened_equivalence',
        max_rel <= MATCH_TOLERANCE,
        max_abs,
        max_rel,
        MATCH_TOLERANCE,
        seeds=[seed],
        details={
            'dims': list(dims),
            'steps': steps,
            'residual_factor': float(measured),
            'closed_form_factor': factor,
            'exponential_bound': math.exp(-steps * step_size),
        },
    )


def linearity_residual(adapter: Adapter, rng: np.random.Generator, n_samples: int = 16) -> float:
    """max |g(ax + by) − (a·g(x) + b·g(y))| over random inputs and coefficients."""
    x = rng.normal(size=(n_samples, adapter.spec.in_dim))
    y = rng.normal(size=(n_samples, adapter.spec.in_dim))
    a, b = rng.normal(size=2)
    return float(np.max(np.abs(adapter.output(a * x + b * y) - (a * adapter.output(x) + b * adapter.output(y)))))


def check_merge_linearity(seed: int) -> List[CheckResult]:
    """
    Only input-linear adapters can be merged.

    Linear and low-rank adapters pass the linearity test, merged and unmerged forwards
    agree, and merge followed by unmerge restores θ. The MLP adapter fails that test and
    merging it is rejected.
    """
    rng = np.random.default_rng(seed)
    results = []
    for kind in get_enum_values(AdapterKind):
        model = check_model(seed)
        adapters = check_adapters(model, kind, seed, rng)
        residual = max(linearity_residual(adapter, rng) for adapter in adapters.values())
        details: Dict[str, object] = {'linearity_residual': residual}
        if adapters[(0, 0)].mergeable():
            batch, _ = check_batch(model, 8, rng)
            unmerged = model.forward(Tape(), batch, adapters, tap=False).logits.numpy()
            weights = model.merged_weights(adapters)
            merged = model.forward(Tape(), batch, weights=weights, tap=False).logits.numpy()
            restored = model.unmerge_weights(adapters, weights)
            forward_error, _ = errors(merged, unmerged)
            round_trip = max(errors(restored[m], model.tuned_weight(m))[0] for m in restored)
            details.update({'forward_error': forward_error, 'round_trip_error': round_trip})
            passed = residual <= LINEARITY_TOLERANCE and forward_error <= MERGE_TOLERANCE
            passed = passed and round_trip <= ROUND_TRIP_TOLERANCE
            max_abs = max(residual, forward_error, round_trip)
            tolerance = MERGE_TOLERANCE
        else:
            try:
                model.merged_weights(adapters)
                rejected = False
            except NotMergeableError:
                rejected = True
            details['merge_rejected'] = rejected
            passed = residual > MISMATCH_THRESHOLD and rejected
            max_abs = residual
            tolerance = MISMATCH_THRESHOLD
        results.append(
            CheckResult(f"merge_linearity_{kind}", passed, max_abs, max_abs, tolerance, seeds=[seed], details=details)
        )
    return results


def run_all(seed: int = 0) -> VerifyReport:
    """Run every check with seeds derived from `seed`."""
    report = VerifyReport(seed=seed)
    report.checks.append(check_prop1(seed))
    report.checks.extend(check_variant_matrix(seed))
    report.checks.append(check_contraction((16, 8), [0.1] * 50, seed))
    report.checks.append(check_whitened_equivalence((16, 8), 10, 0.3, 0.5, seed))
    report.checks.extend(check_merge_linearity(seed))
    for check in report.checks:
        logger.info(f"{'PASS' if check.passed else 'FAIL'} {check.name}: max_rel={check.max_rel:.3e}")
    return report
