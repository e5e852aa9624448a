from typing import Sequence, Union

from ..autodiff import DEFAULT_DTYPE
from ..helpers.errors import ConfigError
from .BaseModel import BaseModel, ForwardPass, LayerSpec, as_adapter_map
from .LinearModel import LinearModel
from .MLPModel import MLPModel


def build_model(
    preset: Union[str, Sequence[LayerSpec]],
    seed: int = 0,
    in_dim: int = 784,
    out_dim: int = 10,
    hidden: Sequence[int] = (128, 128),
    dtype=DEFAULT_DTYPE,
) -> BaseModel:
    """
    Build a frozen base model from a preset name or explicit layer specs.

    Args:
        preset (str | Sequence[LayerSpec]): 'linear', 'mlp', or the layers themselves.
        seed (int): Initialization seed; the same seed gives bit-identical parameters.
        in_dim (int): Input width for presets.
        out_dim (int): Number of classes for presets.
        hidden (Sequence[int]): Hidden widths of the 'mlp' preset.
        dtype: Float precision.

    Returns:
        BaseModel: The initialized model.

    Raises:
        ConfigError: If the preset is unknown or the layers are invalid.
    """
    if preset == 'linear':
        return LinearModel(in_dim, out_dim, seed=seed, dtype=dtype)
    if preset == 'mlp':
        return MLPModel(in_dim, out_dim, hidden=hidden, seed=seed, dtype=dtype)
    if isinstance(preset, str):
        raise ConfigError(f"Unknown model preset '{preset}'.")
    return BaseModel(preset, seed=seed, dtype=dtype)
