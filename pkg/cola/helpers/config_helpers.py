import configparser
import os
from typing import Dict, Optional, Tuple

from ..training import TrainingConfig
from .data_loader import DatasetHandle, find_mnist, synth_dataset
from .constants import CONFIG_DIRECTORY, OUTPUT_DIRECTORY
from .errors import ConfigError


def str_to_bool(s: str) -> bool:
    value = s.strip().lower()
    if value in {"1", "true", "yes", "on"}:
        return True
    if value in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: '{s}'")


def parse_list(s: str) -> list:
    return [x.strip() for x in s.split(",") if x.strip()]


def parse_ints(s: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in parse_list(s))


def optional_int(s: str) -> Optional[int]:
    return None if s.strip().lower() in {"", "none"} else int(s)


def optional_str(s: str) -> Optional[str]:
    return None if s.strip().lower() in {"", "none"} else s.strip()


data_option_schema = {
    "dataset": str,
    "data_dir": optional_str,
    "classes": int,
    "per_class": int,
    "test_per_class": int,
    "dims": int,
    "separation": float,
}

model_option_schema = {
    "model": str,
    "hidden": parse_ints,
}

adapter_option_schema = {
    "adapter": str,
    "rank": int,
    "adapter_hidden": int,
    "alpha": float,
}

train_option_schema = {
    "batch_size": int,
    "epochs": int,
    "iterations": optional_int,
    "lr": float,
    "optimizer": str,
    "momentum": float,
    "weight_decay": float,
    "schedule": str,
    "warmup": float,
    "interval": int,
    "variant": str,
    "inner_steps": int,
    "log_every": int,
}

offload_option_schema = {
    "workers": int,
    "assignment": str,
    "concurrent": str_to_bool,
    "timeout": float,
}

collaboration_option_schema = {
    "users": int,
    "mode": str,
}

run_option_schema = {
    "seed": int,
    "precision": str,
    "record_wall_time": str_to_bool,
}

config_schema = {
    "data": data_option_schema,
    "model": model_option_schema,
    "adapter": adapter_option_schema,
    "train": train_option_schema,
    "offload": offload_option_schema,
    "collaboration": collaboration_option_schema,
    "run": run_option_schema,
}


def cast_to_type(option_schema: dict, options: dict, section: str = "") -> dict:
    """
    Given the option schema, casts the raw text values of a config section into their types.

    Raises:
        ConfigError: If a key is not in the schema or its value cannot be cast.
    """
    values = {}
    for key, value in options.items():
        if key not in option_schema:
            raise ConfigError(f"Unknown option '{key}' in section [{section}].")
        try:
            values[key] = option_schema[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Failed to process option '{key}' in section [{section}] with value '{value}': {e}")
    return values


def parse_config(text: str, source: str = "<string>") -> TrainingConfig:
    """
    Build a validated TrainingConfig from INI text; options left out keep their defaults.

    Raises:
        ConfigError: If the text is malformed, names an unknown section or key, or holds an invalid value.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"Malformed config '{source}': {e}")

    values: Dict[str, object] = {}
    for section in parser.sections():
        if section not in config_schema:
            raise ConfigError(f"Unknown section [{section}] in '{source}'.")
        values.update(cast_to_type(config_schema[section], dict(parser.items(section)), section))
    config = TrainingConfig(**values)
    config.validate()
    return config


def config_names() -> list[str]:
    """Names of the packaged example configs."""
    directory = os.path.join(os.path.dirname(os.path.dirname(__file__)), CONFIG_DIRECTORY)
    return sorted(name[: -len(".ini")] for name in os.listdir(directory) if name.endswith(".ini"))


def load_config(config_arg: str) -> TrainingConfig:
    """
    Loads a config by trying the packaged names first, then treating the argument as a file path.

    Args:
        config_arg (str): Either a packaged config name (e.g. "synthetic") or a file path.

    Returns:
        TrainingConfig: The validated configuration.

    Raises:
        ConfigError: If the config cannot be found, read or validated.
    """
    if config_arg in config_names():
        file_path = os.path.join(os.path.dirname(os.path.dirname(__file__)), CONFIG_DIRECTORY, f"{config_arg}.ini")
    else:
        file_path = config_arg
    try:
        with open(file_path, "r", encoding="utf-8") as file:
            text = file.read()
    except FileNotFoundError:
        raise ConfigError(f"Config file '{config_arg}' not found.")
    except OSError as e:
        raise ConfigError(f"Error reading config file '{config_arg}': {e}")
    return parse_config(text, source=file_path)


def load_output_template(template: str) -> str:
    """
    Loads a packaged text template used for formatting output.

    Raises:
        FileNotFoundError: If there is no template of that name.
    """
    template_file = os.path.join(os.path.dirname(os.path.dirname(__file__)), OUTPUT_DIRECTORY, f"{template}.md")
    with open(template_file, "r", encoding="utf-8") as file:
        return file.read()


def load_dataset(config: TrainingConfig) -> Tuple[DatasetHandle, DatasetHandle]:
    """
    The train and test splits named by the [data] section, cast to the run's precision.

    Raises:
        ConfigError: If MNIST is selected without a data directory.
        FileNotFoundError: If the MNIST files are missing.
    """
    if config.dataset == "mnist":
        if config.data_dir is None:
            raise ConfigError("The mnist dataset needs [data] data_dir pointing at the IDX files.")
        train = find_mnist(config.data_dir, "train")
        test = find_mnist(config.data_dir, "test")
    else:
        train = synth_dataset(config.classes, config.per_class, config.dims, config.separation, config.seed)
        test = synth_dataset(
            config.classes, config.test_per_class, config.dims, config.separation, config.seed, split="test"
        )
    return train.astype(config.dtype), test.astype(config.dtype)


def dataset_dims(config: TrainingConfig) -> Tuple[int, int]:
    """(input width, number of classes) of the configured dataset, without loading it."""
    if config.dataset == "mnist":
        return 784, 10
    return config.dims, config.classes
