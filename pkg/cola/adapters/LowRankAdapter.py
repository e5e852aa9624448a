from typing import Dict

import numpy as np

from ..autodiff import Tape, Tensor
from .Adapter import Adapter, AdapterSpec


class LowRankAdapter(Adapter):
    """
    Low-rank adapter g(x) = B A x.

    A [r x in] starts gaussian with variance 1/r and B [out x r] starts at zero, so the
    initial output is zero. Linear in its input, hence mergeable with w = B A.
    """

    kind = 'lowrank'

    @classmethod
    def initial_parameters(cls, spec: AdapterSpec, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {
            'A': rng.normal(0.0, 1.0 / np.sqrt(spec.rank), size=(spec.rank, spec.in_dim)),
            'B': np.zeros((spec.out_dim, spec.rank)),
        }

    @classmethod
    def spec_from_parameters(cls, params, alpha):
        rank, in_dim = params['A'].shape
        return AdapterSpec(cls.kind, in_dim, params['B'].shape[0], rank=rank, alpha=alpha)

    @classmethod
    def count_parameters(cls, spec: AdapterSpec) -> int:
        return spec.rank * spec.in_dim + spec.out_dim * spec.rank

    @classmethod
    def count_representation(cls, spec: AdapterSpec) -> int:
        return spec.rank + spec.out_dim

    def graph(self, tape: Tape, x: Tensor, params: Dict[str, Tensor]) -> Tensor:
        projected = tape.matmul(x, tape.transpose(params['A']))
        return tape.matmul(projected, tape.transpose(params['B']))

    def mergeable(self) -> bool:
        return True

    def dense(self) -> np.ndarray:
        return self.params['B'] @ self.params['A']
