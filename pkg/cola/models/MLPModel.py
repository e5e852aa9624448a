from typing import Sequence

from ..autodiff import DEFAULT_DTYPE
from ..helpers.errors import ConfigError
from .BaseModel import BaseModel, LayerSpec


class MLPModel(BaseModel):
    """
    ReLU perceptron with the given hidden widths; every affine layer is fine-tunable.

    Hidden widths (h, h) give two hidden affine layers plus the output layer, so M = 3.
    """

    preset = 'mlp'

    def __init__(
        self,
        in_dim: int = 784,
        out_dim: int = 10,
        hidden: Sequence[int] = (128, 128),
        seed: int = 0,
        dtype=DEFAULT_DTYPE,
    ) -> None:
        if not hidden:
            raise ConfigError("An MLP needs at least one hidden layer.")
        self.hidden = tuple(hidden)
        widths = [in_dim, *self.hidden]
        layers = []
        for width_in, width_out in zip(widths, widths[1:]):
            layers.append(LayerSpec('affine', width_in, width_out))
            layers.append(LayerSpec('activation', width_out, width_out, fine_tunable=False))
        layers.append(LayerSpec('affine', widths[-1], out_dim))
        super().__init__(layers, seed=seed, dtype=dtype)
