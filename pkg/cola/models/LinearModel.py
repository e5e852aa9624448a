from ..autodiff import DEFAULT_DTYPE
from .BaseModel import BaseModel, LayerSpec


class LinearModel(BaseModel):
    """Single affine layer in_dim -> out_dim (784 -> 10 for MNIST: 7850 parameters, M = 1)."""

    preset = 'linear'

    def __init__(self, in_dim: int = 784, out_dim: int = 10, seed: int = 0, dtype=DEFAULT_DTYPE) -> None:
        super().__init__([LayerSpec('affine', in_dim, out_dim)], seed=seed, dtype=dtype)
