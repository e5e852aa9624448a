"""
Parent class for auxiliary models.

An adapter g_w maps the hidden input x_m of a fine-tuned layer to a change Δh_m that is
added (scaled by alpha) to the layer output. Subclasses define their parameters, their
zero-output initialization and their forward graph.
"""

import copy
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ..autodiff import DEFAULT_DTYPE, Tape, Tensor
from ..helpers.errors import (
    ConfigError,
    DimensionError,
    EmptyBufferError,
    MergeStateError,
    NotMergeableError,
)


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    in_dim: int
    out_dim: int
    rank: int = 8
    hidden: int = 128
    alpha: float = 1.0

    def validate(self) -> None:
        """
        Raises:
            ConfigError: If the kind is unknown or a size is out of range.
        """
        if self.kind not in Adapter.registry:
            raise ConfigError(f"Unknown adapter kind '{self.kind}'.")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"Adapter dimensions must be positive, got {self.in_dim}->{self.out_dim}.")
        if self.kind == 'lowrank' and not 1 <= self.rank <= min(self.in_dim, self.out_dim):
            raise ConfigError(f"Rank {self.rank} must lie in [1, {min(self.in_dim, self.out_dim)}].")
        if self.kind == 'mlp' and self.hidden < 1:
            raise ConfigError(f"MLP adapter hidden size must be positive, got {self.hidden}.")

    @property
    def num_parameters(self) -> int:
        return Adapter.registry[self.kind].count_parameters(self)

    @property
    def representation_size(self) -> int:
        """Floats of auxiliary hidden representation held per sample."""
        return Adapter.registry[self.kind].count_representation(self)


class Adapter:
    kind = ''
    registry: Dict[str, type] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.kind:
            Adapter.registry[cls.kind] = cls

    def __init__(self, spec: AdapterSpec, params: Dict[str, np.ndarray]) -> None:
        """
        Initialize an adapter from its spec and parameter arrays.

        Args:
            spec (AdapterSpec): Kind, dimensions and scale.
            params (Dict[str, np.ndarray]): Parameter arrays by name.
        """
        self.spec = spec
        self.params = params
        self.merged = False

    @classmethod
    def from_spec(cls, spec: AdapterSpec, seed: int, dtype=DEFAULT_DTYPE) -> "Adapter":
        """Build a freshly initialized adapter whose output is zero for every input."""
        spec.validate()
        adapter_class = cls.registry[spec.kind]
        rng = np.random.default_rng(seed)
        params = {name: value.astype(dtype) for name, value in adapter_class.initial_parameters(spec, rng).items()}
        return adapter_class(spec, params)

    @classmethod
    def from_parameters(cls, kind: str, params: Dict[str, np.ndarray], alpha: float = 1.0) -> "Adapter":
        """Rebuild an adapter from stored parameter arrays; sizes are read from their shapes."""
        if kind not in cls.registry:
            raise ConfigError(f"Unknown adapter kind '{kind}'.")
        adapter_class = cls.registry[kind]
        spec = adapter_class.spec_from_parameters(params, alpha)
        spec.validate()
        return adapter_class(spec, dict(params))

    @classmethod
    def initial_parameters(cls, spec: AdapterSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        raise NotImplementedError("Subclasses must implement the `initial_parameters` method.")

    @classmethod
    def spec_from_parameters(cls, params: Dict[str, np.ndarray], alpha: float) -> AdapterSpec:
        raise NotImplementedError("Subclasses must implement the `spec_from_parameters` method.")

    @classmethod
    def count_parameters(cls, spec: AdapterSpec) -> int:
        raise NotImplementedError("Subclasses must implement the `count_parameters` method.")

    @classmethod
    def count_representation(cls, spec: AdapterSpec) -> int:
        raise NotImplementedError("Subclasses must implement the `count_representation` method.")

    def graph(self, tape: Tape, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        """Build the forward graph of g_w(x) on the tape from registered parameter tensors."""
        raise NotImplementedError("Subclasses must implement the `graph` method.")

    def mergeable(self) -> bool:
        return False

    def dense(self) -> np.ndarray:
        """Return the [out x in] matrix w with g(x) = w x."""
        raise NotMergeableError(f"A {self.kind} adapter is not linear in its input and cannot be merged.")

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    @property
    def num_parameters(self) -> int:
        return sum(value.size for value in self.params.values())

    def copy(self) -> "Adapter":
        return copy.deepcopy(self)

    def apply(self, tape: Tape, x: Tensor, requires_grad: bool = False) -> Tuple[Tensor, Dict[str, Tensor]]:
        """
        Compute Δh = g_w(x) on a tape.

        Args:
            tape (Tape): Tape to record on.
            x (Tensor): Hidden input of shape [n x in_dim].
            requires_grad (bool): Whether the parameters receive gradients.

        Returns:
            Tuple[Tensor, Dict[str, Tensor]]: The output [n x out_dim] and the parameter tensors.

        Raises:
            DimensionError: If the input width does not match the adapter.
        """
        if len(x.shape) != 2 or x.shape[1] != self.spec.in_dim:
            raise DimensionError(f"{self.kind} adapter expects width {self.spec.in_dim}, got {x.shape}.")
        params = {name: tape.watch(Tensor(value, requires_grad=requires_grad)) for name, value in self.params.items()}
        return self.graph(tape, x, params), params

    def output(self, x: np.ndarray) -> np.ndarray:
        """Evaluate g_w(x) outside any training graph."""
        tape = Tape()
        out, _ = self.apply(tape, tape.constant(x))
        return out.numpy()

    def merge(self, theta: np.ndarray) -> np.ndarray:
        """
        Fold the adapter into a base weight matrix.

        Args:
            theta (np.ndarray): Base weight [out x in] (or an already merged one).

        Returns:
            np.ndarray: θ + alpha * w, as a new array.

        Raises:
            NotMergeableError: If the adapter is not linear in its input.
            MergeStateError: If the adapter is already merged.
        """
        if not self.mergeable():
            raise NotMergeableError(f"A {self.kind} adapter is not linear in its input and cannot be merged.")
        if self.merged:
            raise MergeStateError("Adapter is already merged; unmerge it first.")
        if theta.shape != (self.spec.out_dim, self.spec.in_dim):
            raise DimensionError(f"Cannot merge a {self.spec.out_dim}x{self.spec.in_dim} adapter into {theta.shape}.")
        merged = theta + self.alpha * self.dense()
        self.merged = True
        return merged

    def unmerge(self, theta_hat: np.ndarray) -> np.ndarray:
        """
        Remove the adapter from a merged weight matrix.

        Raises:
            MergeStateError: If the adapter is not currently merged.
        """
        if not self.merged:
            raise MergeStateError("Adapter is not merged.")
        restored = theta_hat - self.alpha * self.dense()
        self.merged = False
        return restored

    def aux_gradient(
        self, hidden_inputs: np.ndarray, hidden_grads: np.ndarray, target: Optional[np.ndarray] = None
    ) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        Loss and parameter gradient of the auxiliary quadratic objective.

        The objective is the mean over records of ½‖g_w(x) − target‖² with
        target = g_{w^t}(x) − alpha·∇ĥ, so at w = w^t its gradient equals the task-loss
        gradient of the adapter parameters.

        Args:
            hidden_inputs (np.ndarray): Buffered x_m, [n x in_dim].
            hidden_grads (np.ndarray): Buffered per-sample ∇ĥ_m, [n x out_dim].
            target (np.ndarray, optional): Precomputed target; built from the current parameters if absent.

        Returns:
            Tuple[float, Dict[str, np.ndarray]]: The loss value and gradients by parameter name.

        Raises:
            EmptyBufferError: If there are no records.
            DimensionError: If the record widths do not match the adapter.
        """
        if hidden_inputs.shape[0] == 0:
            raise EmptyBufferError("No adaptation records to fit.")
        if hidden_grads.shape != (hidden_inputs.shape[0], self.spec.out_dim):
            raise DimensionError(
                f"Gradient records {hidden_grads.shape} do not match {hidden_inputs.shape[0]}x{self.spec.out_dim}."
            )
        tape = Tape()
        out, params = self.apply(tape, tape.constant(hidden_inputs), requires_grad=True)
        if target is None:
            target = out.data - self.alpha * hidden_grads
        loss = tape.mse(out, tape.constant(target))
        tape.backward(loss)
        return float(loss.data), {name: tensor.grad for name, tensor in params.items()}

    def fit_step(self, hidden_inputs: np.ndarray, hidden_grads: np.ndarray, optimizer, inner_steps: int = 1) -> float:
        """
        Fit the adapter to its buffered adaptation data.

        The target Δh − alpha·∇ĥ is formed once from the current parameters; then
        `inner_steps` optimizer steps are taken on the auxiliary objective.

        Returns:
            float: Auxiliary loss before the first step.

        Raises:
            DimensionError: If the record widths do not match the adapter.
        """
        if hidden_grads.shape != (hidden_inputs.shape[0], self.spec.out_dim):
            raise DimensionError(
                f"Gradient records {hidden_grads.shape} do not match {hidden_inputs.shape[0]}x{self.spec.out_dim}."
            )
        target = self.output(hidden_inputs) - self.alpha * hidden_grads
        first_loss = None
        for _ in range(inner_steps):
            loss, grads = self.aux_gradient(hidden_inputs, hidden_grads, target=target)
            self.params = optimizer.step(self.params, grads)
            if first_loss is None:
                first_loss = loss
        return first_loss if first_loss is not None else 0.0
