"""
The gradient-learning training loop.

The base device runs one forward and one backward pass per iteration and harvests the
gradient of every fine-tuned hidden representation. Those (x_m, ∇ĥ_m) pairs are
dispatched to offload workers, which fit the adapters every `interval` iterations and
upload them back. The classical variant backpropagates into the adapters directly and
the full variant trains the base parameters; both serve as baselines.
"""

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adapters import Adapter, AdapterSpec, init_adapter
from .autodiff import Tape
from .helpers.arg_options import (
    OFFLOADED_VARIANTS,
    AdapterKind,
    AssignmentPolicy,
    CollaborationMode,
    DatasetName,
    ModelPreset,
    OptimizerName,
    Precision,
    ScheduleName,
    Variant,
    get_enum_values,
    precision_mapping,
)
from .helpers.data_loader import DatasetHandle, iterate_batches
from .helpers.errors import ConfigError, MergeStateError, NonFiniteError
from .helpers.metrics import MetricsWriter
from .models import BaseModel, as_adapter_map, build_model
from .offload import OffloadHandle, OffloadReport, spawn_offload
from .optim import Optimizer, OptimizerSpec, build_optimizer
from .router import AdapterKey, Router, split_records

logger = logging.getLogger(__name__)

# Adapter (m, k) is seeded with seed + USER_SEED_STRIDE * k + m.
USER_SEED_STRIDE = 7919


@dataclass
class TrainingConfig:
    # [data]
    dataset: str = 'synthetic'
    data_dir: Optional[str] = None
    classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    dims: int = 20
    separation: float = 10.0
    # [model]
    model: str = 'linear'
    hidden: Tuple[int, ...] = (128, 128)
    # [adapter]
    adapter: str = 'lowrank'
    rank: int = 8
    adapter_hidden: int = 128
    alpha: float = 1.0
    # [train]
    batch_size: int = 32
    epochs: int = 1
    iterations: Optional[int] = None
    lr: float = 0.1
    optimizer: str = 'sgd'
    momentum: float = 0.0
    weight_decay: float = 0.0
    schedule: str = 'constant'
    warmup: float = 0.05
    interval: int = 1
    variant: str = 'merged'
    inner_steps: int = 1
    log_every: int = 1
    # [offload]
    workers: int = 1
    assignment: str = 'round_robin'
    concurrent: bool = False
    timeout: float = 30.0
    # [collaboration]
    users: int = 1
    mode: str = 'joint'
    # [run]
    seed: int = 0
    precision: str = 'float64'
    record_wall_time: bool = False

    def validate(self) -> None:
        """
        Raises:
            ConfigError: If an option is outside its allowed values.
        """
        choices = {
            'dataset': DatasetName,
            'model': ModelPreset,
            'adapter': AdapterKind,
            'optimizer': OptimizerName,
            'schedule': ScheduleName,
            'variant': Variant,
            'assignment': AssignmentPolicy,
            'mode': CollaborationMode,
            'precision': Precision,
        }
        for key, enum_class in choices.items():
            if getattr(self, key) not in get_enum_values(enum_class):
                raise ConfigError(
                    f"Invalid {key} '{getattr(self, key)}'; expected one of {get_enum_values(enum_class)}."
                )
        minimums = {
            'batch_size': 1,
            'epochs': 1,
            'interval': 1,
            'inner_steps': 1,
            'log_every': 1,
            'workers': 1,
            'users': 1,
            'classes': 1,
            'per_class': 1,
            'test_per_class': 1,
            'dims': 1,
        }
        for key, minimum in minimums.items():
            if getattr(self, key) < minimum:
                raise ConfigError(f"{key} must be at least {minimum}, got {getattr(self, key)}.")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}.")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}.")
        if self.timeout <= 0:
            raise ConfigError(f"timeout must be positive, got {self.timeout}.")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(precision_mapping[self.precision])

    @property
    def offloaded(self) -> bool:
        return self.variant in OFFLOADED_VARIANTS

    def total_iterations(self, n_samples: int) -> int:
        """T: the explicit iteration count, or epochs·⌈N/B⌉."""
        if self.iterations is not None:
            return self.iterations
        return self.epochs * math.ceil(n_samples / self.batch_size)

    def optimizer_spec(self, total_steps: int) -> OptimizerSpec:
        return OptimizerSpec(
            name=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
            total_steps=total_steps,
            warmup=self.warmup,
        )

    def adapter_spec(self, model: BaseModel, m: int) -> AdapterSpec:
        in_dim, out_dim = model.layer_dims(m)
        return AdapterSpec(self.adapter, in_dim, out_dim, rank=self.rank, hidden=self.adapter_hidden, alpha=self.alpha)

    def snapshot(self) -> Dict[str, object]:
        values = asdict(self)
        values['hidden'] = list(self.hidden)
        return values


@dataclass
class StepReport:
    iteration: int
    loss: float
    accuracy: float
    n_records: int = 0
    flushed: bool = False


@dataclass
class TrainingResult:
    model: BaseModel
    adapters: Dict[AdapterKey, Adapter]
    history: List[Dict[str, object]] = field(default_factory=list)
    trainer: Optional["Trainer"] = None
    offload_report: Optional[OffloadReport] = None


def init_adapters(model: BaseModel, config: TrainingConfig, users: Optional[int] = None) -> Dict[AdapterKey, Adapter]:
    """Fresh zero-output adapters for every (fine-tuned layer m, user k)."""
    users = config.users if users is None else users
    return {
        (m, k): init_adapter(config.adapter_spec(model, m), config.seed + USER_SEED_STRIDE * k + m, dtype=config.dtype)
        for m in range(model.M)
        for k in range(users)
    }


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _task_loss(tape: Tape, logits, labels):
    loss = tape.softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"Training loss is {float(loss.data)}.")
    return loss


def classical_gradients(
    model: BaseModel, adapters, batch: np.ndarray, labels: np.ndarray, router: Optional[Router] = None
) -> Tuple[float, np.ndarray, Dict[AdapterKey, Dict[str, np.ndarray]]]:
    """
    Backpropagate the task loss into the adapter parameters.

    Returns:
        Tuple: (loss, logits, gradients by (m, k) and parameter name).
    """
    tape = Tape()
    forward = model.forward(tape, batch, adapters, router=router, adapter_grads=True, tap=False)
    loss = _task_loss(tape, forward.logits, labels)
    tape.backward(loss)
    grads = {
        key: {name: tensor.grad for name, tensor in params.items()} for key, params in forward.adapter_tensors.items()
    }
    return float(loss.data), forward.logits.numpy(), grads


def classical_step(
    model: BaseModel,
    adapters: Dict[AdapterKey, Adapter],
    batch: np.ndarray,
    labels: np.ndarray,
    optimizers: Dict[AdapterKey, Optimizer],
    router: Optional[Router] = None,
) -> Tuple[float, float]:
    """
    One step of classical gradient descent on the adapters; returns (loss, batch accuracy).

    Raises:
        ConfigError: If the model is not frozen.
    """
    if not model.frozen:
        raise ConfigError("Classical training needs a frozen base model.")
    loss, logits, grads = classical_gradients(model, adapters, batch, labels, router=router)
    for key, adapter_grads in grads.items():
        adapters[key].params = optimizers[key].step(adapters[key].params, adapter_grads)
    return loss, _accuracy(logits, labels)


def full_step(model: BaseModel, batch: np.ndarray, labels: np.ndarray, optimizer: Optimizer) -> Tuple[float, float]:
    """
    One step of full fine-tuning: backpropagate into θ and replace the parameter arrays.

    Raises:
        ConfigError: If the model is frozen.
    """
    if model.frozen:
        raise ConfigError("Full fine-tuning needs an unfrozen model.")
    tape = Tape()
    forward = model.forward(tape, batch, tap=False)
    loss = _task_loss(tape, forward.logits, labels)
    tape.backward(loss)
    params, grads = {}, {}
    for index, (weight, bias) in forward.theta_tensors.items():
        params[f"{index}.weight"], grads[f"{index}.weight"] = weight.data, weight.grad
        params[f"{index}.bias"], grads[f"{index}.bias"] = bias.data, bias.grad
    updated = optimizer.step(params, grads)
    for index in forward.theta_tensors:
        model.set_parameters(index, updated[f"{index}.weight"], updated[f"{index}.bias"])
    return float(loss.data), _accuracy(forward.logits.numpy(), labels)


def offloaded_records(
    model: BaseModel,
    adapters,
    batch: np.ndarray,
    labels: np.ndarray,
    variant: str,
    iteration: int = 1,
    router: Optional[Router] = None,
):
    """
    Run the base-device pass of an offloaded variant and harvest adaptation records.

    Returns:
        Tuple: (loss, logits, records).

    Raises:
        ConfigError: If the variant does not offload.
        NotMergeableError: If the variant is merged and an adapter is not linear.
    """
    if variant not in OFFLOADED_VARIANTS:
        raise ConfigError(f"Variant '{variant}' does not produce adaptation records.")
    router = router or Router()
    tape = Tape()
    if variant == Variant.MERGED.value:
        with model.merged(adapters) as weights:
            forward = model.forward(tape, batch, weights=weights)
            loss = _task_loss(tape, forward.logits, labels)
            tape.backward(loss)
    else:
        forward = model.forward(tape, batch, adapters, router=router, detached=variant == Variant.DETACHED.value)
        loss = _task_loss(tape, forward.logits, labels)
        tape.backward(loss)
    return float(loss.data), forward.logits.numpy(), split_records(forward.taps, router, iteration)


def record_gradients(adapters, records) -> Dict[AdapterKey, Dict[str, np.ndarray]]:
    """Gradient of each adapter's auxiliary objective at its current parameters, from its records."""
    adapter_map = as_adapter_map(adapters)
    grouped: Dict[AdapterKey, list] = {}
    for record in records:
        grouped.setdefault((record.layer, record.user), []).append(record)
    grads = {}
    for key, key_records in grouped.items():
        inputs = np.concatenate([record.hidden_input for record in key_records])
        hidden_grads = np.concatenate([record.hidden_grad for record in key_records])
        _, grads[key] = adapter_map[key].aux_gradient(inputs, hidden_grads)
    return grads


class Trainer:
    """
    Runs training iterations of one variant and counts base-device work.

    `backward_count` grows by exactly one per iteration for every variant and every number
    of users. `merge_count` and `unmerge_count` grow by one per merged iteration.
    """

    def __init__(
        self,
        model: BaseModel,
        adapters,
        config: TrainingConfig,
        offload: Optional[OffloadHandle] = None,
        n_users: Optional[int] = None,
        total_steps: int = 1,
    ) -> None:
        """
        Args:
            model (BaseModel): The base model; the full variant unfreezes it until `finish`.
            adapters: {(m, k): Adapter}; ignored by the full variant.
            config (TrainingConfig): Training options.
            offload (OffloadHandle, optional): Required by the offloaded variants, forbidden otherwise.
            n_users (int, optional): Number of users K; defaults to config.users.
            total_steps (int): Optimizer steps of the run, for learning-rate schedules of base-device variants.

        Raises:
            ConfigError: If the offload handle does not fit the variant.
        """
        config.validate()
        self.model = model
        self.config = config
        self.adapters: Dict[AdapterKey, Adapter] = as_adapter_map(adapters)
        self.n_users = config.users if n_users is None else n_users
        self.offload = offload
        self.backward_count = 0
        self.merge_count = 0
        self.unmerge_count = 0
        self.flush_count = 0
        self._unflushed = 0
        self.optimizers: Dict[object, Optimizer] = {}

        if config.offloaded:
            if offload is None:
                raise ConfigError(f"Variant '{config.variant}' needs an offload handle.")
            offload.upload(self.adapters, capacity=(config.batch_size // self.n_users) * config.interval)
        elif offload is not None:
            raise ConfigError(f"Variant '{config.variant}' trains on the base device and cannot use an offload handle.")
        elif config.variant == Variant.CLASSICAL.value:
            spec = config.optimizer_spec(total_steps)
            self.optimizers = {key: build_optimizer(spec) for key in self.adapters}
        else:
            model.unfreeze()
            self.optimizers = {'theta': build_optimizer(config.optimizer_spec(total_steps))}

    def train_step(self, batch: np.ndarray, labels: np.ndarray, iteration: int, owners=None) -> StepReport:
        """
        One training iteration t (counted from 1).

        Args:
            batch (np.ndarray): Inputs [n x in_dim].
            labels (np.ndarray): Class labels [n].
            iteration (int): Iteration number t; a flush follows when t is a multiple of the interval.
            owners (np.ndarray, optional): User id of every row.

        Returns:
            StepReport: Loss and accuracy on the batch, records dispatched, whether adapters were updated.

        Raises:
            MergeStateError: If an adapter is still merged from an earlier step.
            NonFiniteError: If the loss is not finite.
        """
        router = Router() if owners is None else Router(owners, self.n_users)
        variant = self.config.variant
        if variant == Variant.CLASSICAL.value:
            loss, accuracy = classical_step(self.model, self.adapters, batch, labels, self.optimizers, router=router)
            self.backward_count += 1
            return StepReport(iteration, loss, accuracy)
        if variant == Variant.FULL.value:
            loss, accuracy = full_step(self.model, batch, labels, self.optimizers['theta'])
            self.backward_count += 1
            return StepReport(iteration, loss, accuracy)

        if any(adapter.merged for adapter in self.adapters.values()):
            raise MergeStateError("Adapters are still merged from an earlier step.")
        loss, logits, records = offloaded_records(self.model, self.adapters, batch, labels, variant, iteration, router)
        self.backward_count += 1
        if variant == Variant.MERGED.value:
            self.merge_count += 1
            self.unmerge_count += 1

        self.offload.dispatch(records)
        self._unflushed += len(records)
        flushed = False
        if iteration % self.config.interval == 0:
            self.adapters.update(self.offload.flush(iteration))
            self.flush_count += 1
            self._unflushed = 0
            flushed = True
        return StepReport(iteration, loss, _accuracy(logits, labels), len(records), flushed)

    def finish(self, iteration: int) -> bool:
        """
        End the run: flush a partial final buffer, if any, and freeze θ again after full fine-tuning.

        Returns:
            bool: Whether a flush happened.
        """
        if self.config.variant == Variant.FULL.value:
            self.model.freeze()
        if not self.config.offloaded or self._unflushed == 0:
            return False
        logger.warning(
            f"Training ended at iteration {iteration} with a partial adaptation interval; "
            f"flushing {self._unflushed} buffered records."
        )
        self.adapters.update(self.offload.flush(iteration, partial=True))
        self.flush_count += 1
        self._unflushed = 0
        return True


def evaluate(
    model: BaseModel, adapters, dataset: DatasetHandle, merged: bool = False, batch_size: int = 1000
) -> Tuple[float, float]:
    """
    Accuracy and mean cross-entropy of the adapted model on a dataset.

    Args:
        model (BaseModel): The base model.
        adapters: {(m, k): Adapter}, a per-layer list, or None for the base model alone.
        dataset (DatasetHandle): Evaluation data.
        merged (bool): Fold the adapters into the weights before evaluating.
        batch_size (int): Rows per forward pass.

    Returns:
        Tuple[float, float]: (accuracy, loss).

    Raises:
        NotMergeableError: If merged is set and an adapter is not linear in its input.
    """
    adapter_map = as_adapter_map(adapters)
    correct = 0
    total_loss = 0.0
    context = model.merged(adapter_map) if merged else contextlib.nullcontext(None)
    with context as weights:
        for start in range(0, len(dataset), batch_size):
            inputs = dataset.inputs[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            tape = Tape()
            if weights is not None:
                forward = model.forward(tape, inputs, weights=weights, tap=False)
            else:
                forward = model.forward(tape, inputs, adapter_map, tap=False)
            loss = tape.softmax_cross_entropy(forward.logits, labels)
            total_loss += float(loss.data) * labels.shape[0]
            correct += int(np.sum(np.argmax(forward.logits.numpy(), axis=1) == labels))
    return correct / len(dataset), total_loss / len(dataset)


def run_training(
    config: TrainingConfig,
    dataset: DatasetHandle,
    offload: Optional[OffloadHandle] = None,
    model: Optional[BaseModel] = None,
    adapters=None,
    test_dataset: Optional[DatasetHandle] = None,
    metrics: Optional[MetricsWriter] = None,
    message_log=None,
) -> TrainingResult:
    """
    Train for T iterations and evaluate at the end of every epoch.

    Batches follow a fixed-seed shuffle per epoch. The offloaded variants spawn their own
    offload runtime when none is given and shut it down at the end; a handle passed in is
    left running.

    Args:
        config (TrainingConfig): Training options.
        dataset (DatasetHandle): Training data.
        offload (OffloadHandle, optional): Offload runtime to use.
        model (BaseModel, optional): Base model; built from the config when absent.
        adapters (optional): Initial adapters; fresh ones when absent.
        test_dataset (DatasetHandle, optional): Evaluated after every epoch.
        metrics (MetricsWriter, optional): Receives train and test metrics lines.
        message_log (optional): Path of a JSON-lines offload message log, used when the runtime is spawned here.

    Returns:
        TrainingResult: Final model, adapters and metrics history.
    """
    config.validate()
    if model is None:
        model = build_model(
            config.model,
            seed=config.seed,
            in_dim=dataset.in_dim,
            out_dim=dataset.n_classes,
            hidden=config.hidden,
            dtype=config.dtype,
        )
    if adapters is None:
        adapters = {} if config.variant == Variant.FULL.value else init_adapters(model, config, users=1)
    metrics = metrics or MetricsWriter(record_wall_time=config.record_wall_time)

    n = len(dataset)
    total = config.total_iterations(n)
    per_epoch = math.ceil(n / config.batch_size)
    owns_offload = config.offloaded and offload is None
    if owns_offload:
        offload = spawn_offload(
            config.workers,
            assignment=config.assignment,
            concurrent=config.concurrent,
            optimizer_spec=config.optimizer_spec(math.ceil(total / config.interval)),
            inner_steps=config.inner_steps,
            timeout=config.timeout,
            message_log=message_log,
        )
    logger.info(f"Training variant '{config.variant}' for {total} iterations on {n} samples.")

    result = TrainingResult(model=model, adapters={}, history=metrics.records)
    try:
        trainer = Trainer(model, adapters, config, offload=offload, n_users=1, total_steps=total)
        result.trainer = trainer
        for t, epoch, rows in iterate_batches(n, config.batch_size, config.seed, total):
            step = trainer.train_step(dataset.inputs[rows], dataset.labels[rows], t)
            if t % config.log_every == 0 or t == total:
                metrics.write(t, epoch, 'train', step.loss, step.accuracy)
            if t == total:
                trainer.finish(t)
            if t % per_epoch == 0 or t == total:
                if test_dataset is not None:
                    accuracy, loss = evaluate(model, trainer.adapters, test_dataset)
                    metrics.write(t, epoch, 'test', loss, accuracy)
                    logger.info(f"Epoch {epoch}: test accuracy {accuracy:.4f}, loss {loss:.4f}")
        result.adapters = trainer.adapters
    finally:
        if owns_offload:
            result.offload_report = offload.shutdown()
    return result
