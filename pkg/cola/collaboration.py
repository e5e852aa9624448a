"""
Fine-tuning as a service: K users share one frozen base model.

Every batch is the concatenation of per-user quotas. One forward and one backward
pass serve all users; the router sends each row through its owner's adapters and
splits the harvested gradients back into per-user records.

Modes:
    joint   one shared adapter set trained on everyone's data
    alone   K adapter sets evaluated in the forward graph, never merged
    collab  K adapter sets, all merged into the base weights at every step
"""

import copy
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adapters import Adapter
from .autodiff import Tape, Tensor
from .helpers.arg_options import CollaborationMode, Variant
from .helpers.data_loader import DatasetHandle, iterate_batches
from .helpers.errors import ConfigError
from .helpers.metrics import MetricsWriter
from .models import BaseModel, build_model
from .offload import OffloadHandle, OffloadReport, spawn_offload
from .router import AdapterKey, RoutedBatch, Router
from .training import Trainer, TrainingConfig, evaluate, init_adapters

logger = logging.getLogger(__name__)

POST_HOC_ALPHA = 1.0

MODE_VARIANTS = {
    CollaborationMode.ALONE.value: Variant.UNMERGED.value,
    CollaborationMode.COLLAB.value: Variant.MERGED.value,
}


def as_user_adapters(adapter_sets) -> Dict[AdapterKey, Adapter]:
    """Accept {(m, k): Adapter} or a sequence of K per-layer adapter lists."""
    if isinstance(adapter_sets, Mapping):
        return dict(adapter_sets)
    return {
        (m, k): adapter
        for k, user_adapters in enumerate(adapter_sets)
        for m, adapter in enumerate(user_adapters)
        if adapter is not None
    }


def user_count(adapters: Mapping[AdapterKey, Adapter]) -> int:
    return 1 + max((k for _, k in adapters), default=0)


def user_view(adapters: Mapping[AdapterKey, Adapter], user: int) -> Dict[AdapterKey, Adapter]:
    """The adapters of one user, keyed as a single-user set."""
    return {(m, 0): adapter for (m, k), adapter in adapters.items() if k == user}


def with_alpha(adapters: Mapping[AdapterKey, Adapter], alpha: float) -> Dict[AdapterKey, Adapter]:
    return {
        key: Adapter.from_parameters(adapter.kind, adapter.params, alpha=alpha) for key, adapter in adapters.items()
    }


def route_forward(
    model: BaseModel, adapter_sets, routed: RoutedBatch, alpha: Optional[float] = None, tape: Optional[Tape] = None
) -> Tensor:
    """
    Forward a mixed batch, sending every row through its owner's adapters.

    Args:
        model (BaseModel): The shared base model.
        adapter_sets: {(m, k): Adapter} or K per-layer lists.
        routed (RoutedBatch): Inputs, labels and row owners.
        alpha (float, optional): Scale used for every adapter instead of its own.
        tape (Tape, optional): Tape to record on; a fresh one when absent.

    Returns:
        Tensor: Logits [n x classes].

    Raises:
        DimensionError: If an owner id has no adapters or dimensions do not match.
    """
    adapters = as_user_adapters(adapter_sets)
    router = Router(routed.owners, user_count(adapters))
    tape = Tape() if tape is None else tape
    return model.forward(tape, routed.inputs, adapters, router=router, tap=False, alpha=alpha).logits


def merge_all(model: BaseModel, adapter_sets) -> BaseModel:
    """
    A copy of the model with every user's adapters folded in: θ̂_m = θ_m + Σ_k α_k·w_{m,k}.

    Raises:
        NotMergeableError: If any adapter is not linear in its input.
    """
    adapters = as_user_adapters(adapter_sets)
    merged_model = copy.deepcopy(model)
    with model.merged(adapters) as weights:
        for m, weight in weights.items():
            index = model.tuned_layers[m]
            merged_model.set_parameters(index, weight, model.biases[index])
    return merged_model


def user_shards(dataset: DatasetHandle, users: int) -> List[DatasetHandle]:
    """
    Split a dataset between users by class: user k owns the classes c with c mod K == k.

    Raises:
        ConfigError: If there are more users than classes.
    """
    if users > dataset.n_classes:
        raise ConfigError(f"{users} users cannot each own a class of a {dataset.n_classes}-class dataset.")
    return [
        dataset.subset(np.flatnonzero(dataset.labels % users == k), name=f"{dataset.name}-user{k}")
        for k in range(users)
    ]


def user_quotas(batch_size: int, users: int) -> List[int]:
    """Equal per-user shares of a batch; the first B mod K users take one extra row."""
    if batch_size < users:
        raise ConfigError(f"A batch of {batch_size} cannot hold rows of {users} users.")
    return [batch_size // users + (1 if k < batch_size % users else 0) for k in range(users)]


def routed_batches(
    shards: Sequence[DatasetHandle], batch_size: int, seed: int, iterations: int
) -> Iterator[Tuple[int, int, RoutedBatch]]:
    """
    Yield (t, epoch of user 0, batch) where each batch concatenates every user's quota of rows.

    User k's shard is shuffled per epoch with seed + k.
    """
    quotas = user_quotas(batch_size, len(shards))
    streams = [
        iterate_batches(len(shard), quota, seed + k, iterations) for k, (shard, quota) in enumerate(zip(shards, quotas))
    ]
    for parts in zip(*streams):
        t, epoch, _ = parts[0]
        rows = [part[2] for part in parts]
        yield t, epoch, RoutedBatch(
            inputs=np.concatenate([shard.inputs[r] for shard, r in zip(shards, rows)]),
            labels=np.concatenate([shard.labels[r] for shard, r in zip(shards, rows)]),
            owners=np.concatenate([np.full(r.shape[0], k, dtype=np.int64) for k, r in enumerate(rows)]),
        )


@dataclass
class CollaborationResult:
    mode: str
    model: BaseModel
    adapters: Dict[AdapterKey, Adapter]
    history: List[Dict[str, object]] = field(default_factory=list)
    trainer: Optional[Trainer] = None
    offload_report: Optional[OffloadReport] = None
    post_hoc_alpha: Optional[float] = None


def evaluate_users(
    model: BaseModel, adapters: Mapping[AdapterKey, Adapter], shards: Sequence[DatasetHandle], mode: str
) -> List[Tuple[float, float]]:
    """(accuracy, loss) of every user on their own shard under the mode's inference setup."""
    results = []
    for k, shard in enumerate(shards):
        if mode == CollaborationMode.JOINT.value:
            results.append(evaluate(model, adapters, shard))
        elif mode == CollaborationMode.ALONE.value:
            results.append(evaluate(model, user_view(adapters, k), shard))
        else:
            results.append(evaluate(model, adapters, shard, merged=True))
    return results


def run_collaboration(
    config: TrainingConfig,
    dataset: DatasetHandle,
    test_dataset: Optional[DatasetHandle] = None,
    offload: Optional[OffloadHandle] = None,
    metrics: Optional[MetricsWriter] = None,
    message_log=None,
) -> CollaborationResult:
    """
    Train K users in one of the joint, alone or collab setups over the offload runtime.

    Joint keeps the configured variant with one adapter set; alone trains unmerged and
    collab trains merged. With test data every user is evaluated on their own classes at
    the end of each epoch (metrics lines carry a `user` field). Alone-mode adapters are
    also evaluated after a post-hoc merge of all users with α = 1.

    Returns:
        CollaborationResult: Final model, adapters, metrics and offload accounting.

    Raises:
        ConfigError: If the mode does not fit the variant or users cannot share the data.
    """
    config.validate()
    mode = config.mode
    users = config.users
    n_users = 1 if mode == CollaborationMode.JOINT.value else users
    variant = MODE_VARIANTS.get(mode, config.variant)
    if variant not in (Variant.UNMERGED.value, Variant.MERGED.value, Variant.DETACHED.value):
        raise ConfigError(f"Collaboration runs over the offload runtime; variant '{variant}' does not offload.")
    run_config = replace(config, variant=variant, users=n_users)

    shards = user_shards(dataset, users)
    test_shards = user_shards(test_dataset, users) if test_dataset is not None else []
    model = build_model(
        config.model,
        seed=config.seed,
        in_dim=dataset.in_dim,
        out_dim=dataset.n_classes,
        hidden=config.hidden,
        dtype=config.dtype,
    )
    adapters = init_adapters(model, run_config, users=n_users)
    metrics = metrics or MetricsWriter(record_wall_time=config.record_wall_time)

    quotas = user_quotas(config.batch_size, users)
    per_epoch = math.ceil(len(shards[0]) / quotas[0])
    total = config.iterations if config.iterations is not None else config.epochs * per_epoch
    owns_offload = offload is None
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
    logger.info(f"Running '{mode}' collaboration of {users} users for {total} iterations (variant '{variant}').")

    result = CollaborationResult(mode=mode, model=model, adapters={}, history=metrics.records)
    try:
        trainer = Trainer(model, adapters, run_config, offload=offload, n_users=n_users, total_steps=total)
        result.trainer = trainer
        for t, epoch, batch in routed_batches(shards, config.batch_size, config.seed, total):
            owners = batch.owners if n_users > 1 else None
            step = trainer.train_step(batch.inputs, batch.labels, t, owners=owners)
            if t % config.log_every == 0 or t == total:
                metrics.write(t, epoch, 'train', step.loss, step.accuracy)
            if t == total:
                trainer.finish(t)
            if test_shards and (t % per_epoch == 0 or t == total):
                for k, (accuracy, loss) in enumerate(evaluate_users(model, trainer.adapters, test_shards, mode)):
                    metrics.write(t, epoch, 'test', loss, accuracy, user=k)
                    logger.info(f"Epoch {epoch}, user {k}: test accuracy {accuracy:.4f}")
        result.adapters = trainer.adapters

        if mode == CollaborationMode.ALONE.value and test_shards:
            if all(adapter.mergeable() for adapter in result.adapters.values()):
                logger.warning(
                    f"Post-hoc merge of all {users} users' adapters uses alpha={POST_HOC_ALPHA} for every user."
                )
                merged_model = merge_all(model, with_alpha(result.adapters, POST_HOC_ALPHA))
                for k, shard in enumerate(test_shards):
                    accuracy, loss = evaluate(merged_model, None, shard)
                    metrics.write(total, epoch, 'test_merged', loss, accuracy, user=k, alpha=POST_HOC_ALPHA)
                result.post_hoc_alpha = POST_HOC_ALPHA
            else:
                logger.warning("Skipping the post-hoc merge: some adapters are not linear in their input.")
    finally:
        if owns_offload:
            result.offload_report = offload.shutdown()
    return result
