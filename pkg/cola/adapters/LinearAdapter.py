from typing import Dict

import numpy as np

from ..autodiff import Tape, Tensor
from .Adapter import Adapter, AdapterSpec


class LinearAdapter(Adapter):
    """Full-rank linear adapter g(x) = W x, W [out x in] initialized to zero."""

    kind = 'linear'

    @classmethod
    def initial_parameters(cls, spec: AdapterSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {'W': np.zeros((spec.out_dim, spec.in_dim))}

    @classmethod
    def spec_from_parameters(cls, params, alpha):
        out_dim, in_dim = params['W'].shape
        return AdapterSpec(cls.kind, in_dim, out_dim, rank=min(in_dim, out_dim), alpha=alpha)

    @classmethod
    def count_parameters(cls, spec: AdapterSpec) -> int:
        return spec.out_dim * spec.in_dim

    @classmethod
    def count_representation(cls, spec: AdapterSpec) -> int:
        return spec.out_dim

    def graph(self, tape: Tape, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        return tape.matmul(x, tape.transpose(params['W']))

    def mergeable(self) -> bool:
        return True

    def dense(self) -> np.ndarray:
        return self.params['W'].copy()
