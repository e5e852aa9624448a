from typing import Dict

import numpy as np

from ..autodiff import Tape, Tensor
from .Adapter import Adapter, AdapterSpec


class MLPAdapter(Adapter):
    """
    Two-layer perceptron g(x) = relu(x W1ᵀ + b1) W2ᵀ + b2.

    The hidden layer starts gaussian with fan-in scaling and the output layer starts at
    zero. Not linear in its input, so it can never be merged into a base layer.
    """

    kind = 'mlp'

    @classmethod
    def initial_parameters(cls, spec: AdapterSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {
            'W1': rng.normal(0.0, 1.0 / np.sqrt(spec.in_dim), size=(spec.hidden, spec.in_dim)),
            'b1': np.zeros(spec.hidden),
            'W2': np.zeros((spec.out_dim, spec.hidden)),
            'b2': np.zeros(spec.out_dim),
        }

    @classmethod
    def spec_from_parameters(cls, params, alpha):
        hidden, in_dim = params['W1'].shape
        return AdapterSpec(cls.kind, in_dim, params['W2'].shape[0], hidden=hidden, alpha=alpha)

    @classmethod
    def count_parameters(cls, spec: AdapterSpec) -> int:
        return spec.hidden * spec.in_dim + spec.hidden + spec.out_dim * spec.hidden + spec.out_dim

    @classmethod
    def count_representation(cls, spec: AdapterSpec) -> int:
        return spec.hidden + spec.out_dim

    def graph(self, tape: Tape, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        hidden = tape.relu(tape.add(tape.matmul(x, tape.transpose(params['W1'])), params['b1']))
        return tape.add(tape.matmul(hidden, tape.transpose(params['W2'])), params['b2'])
