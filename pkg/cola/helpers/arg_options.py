from enum import Enum

import numpy as np


def get_enum_values(enum_class: type[Enum]) -> list[str]:
    """
    Retrieve all values from an Enum class.

    Args:
        enum_class (type[Enum]): The Enum class to extract values from.

    Returns:
        list[str]: A list containing all the enum values.
    """
    return [member.value for member in enum_class]


class Variant(Enum):
    """
    Enum representing how adapters take part in the base-device pass.

    DETACHED, UNMERGED and MERGED offload the parameter gradients; CLASSICAL backpropagates
    into the adapters directly and FULL trains the base parameters themselves.
    """

    DETACHED = "detached"
    UNMERGED = "unmerged"
    MERGED = "merged"
    CLASSICAL = "classical"
    FULL = "full"

    def __str__(self):
        return self.value


OFFLOADED_VARIANTS = (Variant.DETACHED.value, Variant.UNMERGED.value, Variant.MERGED.value)


class AdapterKind(Enum):
    """
    Enum representing the auxiliary model families.
    """

    LOWRANK = "lowrank"
    LINEAR = "linear"
    MLP = "mlp"

    def __str__(self):
        return self.value


class ModelPreset(Enum):
    """
    Enum representing the base model presets.
    """

    LINEAR = "linear"
    MLP = "mlp"

    def __str__(self):
        return self.value


class DatasetName(Enum):
    MNIST = "mnist"
    SYNTHETIC = "synthetic"

    def __str__(self):
        return self.value


class OptimizerName(Enum):
    SGD = "sgd"
    ADAMW = "adamw"

    def __str__(self):
        return self.value


class ScheduleName(Enum):
    CONSTANT = "constant"
    COSINE = "cosine"
    LINEAR = "linear"

    def __str__(self):
        return self.value


class Precision(Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"

    def __str__(self):
        return self.value


precision_mapping = {
    "float32": np.float32,
    "float64": np.float64,
}


class CollaborationMode(Enum):
    """
    Enum representing the K-user training setups.

    JOINT trains one shared adapter set on everyone's data, ALONE trains K adapter sets
    that are never merged during training, COLLAB merges all K sets into the base model
    at every step.
    """

    JOINT = "joint"
    ALONE = "alone"
    COLLAB = "collab"

    def __str__(self):
        return self.value


class AssignmentPolicy(Enum):
    """
    Enum representing how (layer, user) adapters are spread over offload workers.
    """

    ROUND_ROBIN = "round_robin"
    BLOCK = "block"

    def __str__(self):
        return self.value


class Method(Enum):
    """
    Enum representing the fine-tuning methods compared by the cost model.
    """

    FT = "ft"
    PEFT = "peft"
    COLA = "cola"

    def __str__(self):
        return self.value


class CostMode(Enum):
    INFERENCE = "inference"
    LEARNING = "learning"

    def __str__(self):
        return self.value
