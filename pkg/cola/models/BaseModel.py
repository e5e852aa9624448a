import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import DEFAULT_DTYPE, Tape, TapPoint, Tensor
from ..helpers.errors import ConfigError, DimensionError, NotMergeableError
from ..router import AdapterKey, Router


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    fine_tunable: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ('affine', 'activation'):
            raise ConfigError(f"Unknown layer kind '{self.kind}'.")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"Layer dimensions must be positive, got {self.in_dim}->{self.out_dim}.")
        if self.kind == 'activation' and (self.fine_tunable or self.in_dim != self.out_dim):
            raise ConfigError("Activation layers keep their width and are never fine-tunable.")


@dataclass
class ForwardPass:
    """Result of one forward pass: logits, tap points and the tensors registered for gradients."""

    logits: Tensor
    taps: List[TapPoint] = field(default_factory=list)
    adapter_tensors: Dict[AdapterKey, Dict[str, Tensor]] = field(default_factory=dict)
    theta_tensors: Dict[int, Tuple[Tensor, Tensor]] = field(default_factory=dict)


def as_adapter_map(adapters) -> Dict[AdapterKey, object]:
    """Accept either a {(m, k): Adapter} mapping or a per-layer list for a single user."""
    if adapters is None:
        return {}
    if isinstance(adapters, Mapping):
        return dict(adapters)
    return {(layer, 0): adapter for layer, adapter in enumerate(adapters) if adapter is not None}


class BaseModel:
    """
    Frozen base network f_θ: a chain of affine layers and ReLU activations.

    Affine weights are [out x in] arrays drawn uniform(±1/√in) from the seed, biases start
    at zero. Parameter arrays are read-only; training paths that change θ (full
    fine-tuning) replace arrays instead of writing into them, and adapter paths never
    touch them.
    """

    preset = 'custom'

    def __init__(self, layers: Sequence[LayerSpec], seed: int = 0, dtype=DEFAULT_DTYPE) -> None:
        """
        Args:
            layers (Sequence[LayerSpec]): Layers in order; consecutive widths must chain.
            seed (int): Seed of the weight initialization.
            dtype: Float precision of the parameters.

        Raises:
            ConfigError: If the layers are empty or their widths do not chain.
        """
        if not layers:
            raise ConfigError("A model needs at least one layer.")
        for previous, layer in zip(layers, layers[1:]):
            if previous.out_dim != layer.in_dim:
                raise ConfigError(f"Layer widths do not chain: {previous.out_dim} -> {layer.in_dim}.")
        self.layers = list(layers)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.frozen = True
        rng = np.random.default_rng(seed)
        self.weights: Dict[int, np.ndarray] = {}
        self.biases: Dict[int, np.ndarray] = {}
        for index, layer in enumerate(self.layers):
            if layer.kind != 'affine':
                continue
            bound = 1.0 / np.sqrt(layer.in_dim)
            weight = rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim)).astype(self.dtype)
            self.set_parameters(index, weight, np.zeros(layer.out_dim, dtype=self.dtype))
        self.tuned_layers = [index for index, layer in enumerate(self.layers) if layer.fine_tunable]

    @property
    def M(self) -> int:
        return len(self.tuned_layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_parameters(self) -> int:
        return sum(w.size + self.biases[i].size for i, w in self.weights.items())

    def layer_dims(self, m: int) -> Tuple[int, int]:
        """(in_dim, out_dim) of the m-th fine-tunable layer."""
        layer = self.layers[self.tuned_layers[m]]
        return layer.in_dim, layer.out_dim

    def tuned_weight(self, m: int) -> np.ndarray:
        return self.weights[self.tuned_layers[m]]

    def set_parameters(self, index: int, weight: np.ndarray, bias: np.ndarray) -> None:
        weight = np.array(weight, dtype=self.dtype)
        bias = np.array(bias, dtype=self.dtype)
        weight.setflags(write=False)
        bias.setflags(write=False)
        self.weights[index] = weight
        self.biases[index] = bias

    def parameter_hash(self) -> str:
        """SHA-256 over the bytes of every θ array, in layer order."""
        digest = hashlib.sha256()
        for index in sorted(self.weights):
            digest.update(self.weights[index].tobytes())
            digest.update(self.biases[index].tobytes())
        return digest.hexdigest()

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def merged_weights(self, adapters) -> Dict[int, np.ndarray]:
        """
        θ̂_m = θ_m + Σ_k alpha_k·w_{m,k} for every fine-tuned layer, merging adapters in (m, k) order.

        Marks the adapters merged; pair with `unmerge_weights`, or use `merged`.

        Raises:
            NotMergeableError: If any adapter is not linear in its input.
        """
        adapter_map = as_adapter_map(adapters)
        for adapter in adapter_map.values():
            if not adapter.mergeable():
                raise NotMergeableError(f"A {adapter.kind} adapter is not linear in its input and cannot be merged.")
        merged: Dict[int, np.ndarray] = {}
        for key in sorted(adapter_map):
            m = key[0]
            merged[m] = adapter_map[key].merge(merged.get(m, self.tuned_weight(m)))
        return merged

    def unmerge_weights(self, adapters, merged: Dict[int, np.ndarray]) -> Dict[int, np.ndarray]:
        """Reverse `merged_weights`, unmerging in reverse order; returns the restored weights."""
        adapter_map = as_adapter_map(adapters)
        restored = dict(merged)
        for key in sorted(adapter_map, reverse=True):
            restored[key[0]] = adapter_map[key].unmerge(restored[key[0]])
        return restored

    @contextlib.contextmanager
    def merged(self, adapters) -> Iterator[Dict[int, np.ndarray]]:
        """Yield merged weights for the duration of a block, unmerging on exit."""
        weights = self.merged_weights(adapters)
        try:
            yield weights
        finally:
            self.unmerge_weights(adapters, weights)

    def forward(
        self,
        tape: Tape,
        batch,
        adapters=None,
        alpha: Optional[float] = None,
        router: Optional[Router] = None,
        detached: bool = False,
        weights: Optional[Dict[int, np.ndarray]] = None,
        adapter_grads: bool = False,
        tap: bool = True,
    ) -> ForwardPass:
        """
        Compute logits, adding α·g_{w_m}(x_m) to every fine-tuned layer output.

        At each fine-tuned layer m: ĥ_m = f_{θ_m}(x_m) + α·g_{w_m}(x_m), with a tap on ĥ_m
        that also keeps x_m.

        Args:
            tape (Tape): Tape to record on.
            batch (np.ndarray | Tensor): Inputs [n x in_dim].
            adapters: {(m, k): Adapter} or a per-layer list; None for a plain forward.
            alpha (float, optional): Overrides every adapter's own scale when given.
            router (Router, optional): Row ownership for several users.
            detached (bool): Insert adapter outputs as constants (no gradient through them).
            weights (Dict[int, np.ndarray], optional): Replacement weights per fine-tuned layer (merged θ̂).
            adapter_grads (bool): Register adapter parameters as gradient leaves.
            tap (bool): Register taps at every fine-tuned layer.

        Returns:
            ForwardPass: Logits plus taps and registered tensors.

        Raises:
            DimensionError: If the batch width or an adapter's dimensions do not match.
        """
        x = batch if isinstance(batch, Tensor) else tape.constant(np.asarray(batch, dtype=self.dtype))
        if len(x.shape) != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"Model expects inputs of width {self.in_dim}, got {x.shape}.")
        adapter_map = as_adapter_map(adapters)
        for (m, _), adapter in adapter_map.items():
            if not 0 <= m < self.M:
                raise DimensionError(f"Adapter layer index {m} outside [0, {self.M}).")
            if (adapter.spec.in_dim, adapter.spec.out_dim) != self.layer_dims(m):
                raise DimensionError(
                    f"Adapter {adapter.spec.in_dim}->{adapter.spec.out_dim} does not fit layer {m} "
                    f"{self.layer_dims(m)}."
                )
        router = router or Router()
        result = ForwardPass(logits=x)

        h = x
        m = 0
        for index, layer in enumerate(self.layers):
            if layer.kind == 'activation':
                h = tape.relu(h)
                continue
            weight = self.weights[index]
            if weights is not None and layer.fine_tunable and m in weights:
                weight = weights[m]
            weight_t = tape.watch(Tensor(weight, requires_grad=not self.frozen))
            bias_t = tape.watch(Tensor(self.biases[index], requires_grad=not self.frozen))
            if not self.frozen:
                result.theta_tensors[index] = (weight_t, bias_t)
            out = tape.add(tape.matmul(h, tape.transpose(weight_t)), bias_t)
            if layer.fine_tunable:
                delta, scale, params = router.delta(tape, m, h, adapter_map, requires_grad=adapter_grads, alpha=alpha)
                result.adapter_tensors.update(params)
                if delta is not None:
                    if detached:
                        delta = tape.detach(delta)
                    out = tape.add(out, delta, alpha=scale)
                if tap:
                    result.taps.append(tape.tap(out, m, hidden_input=h))
                m += 1
            h = out
        result.logits = h
        return result
