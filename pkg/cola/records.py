from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .helpers.errors import DimensionError, EmptyBufferError


@dataclass
class AdaptationRecord:
    """Detached (x_m, ∇ĥ_m) rows of one user at one layer from one iteration."""

    layer: int
    user: int
    hidden_input: np.ndarray
    hidden_grad: np.ndarray
    iteration: int

    def __post_init__(self) -> None:
        if self.hidden_input.shape[0] != self.hidden_grad.shape[0]:
            raise DimensionError(
                f"Record has {self.hidden_input.shape[0]} inputs but {self.hidden_grad.shape[0]} gradients."
            )

    @property
    def rows(self) -> int:
        return self.hidden_input.shape[0]

    @property
    def nbytes(self) -> int:
        return self.hidden_input.nbytes + self.hidden_grad.nbytes


@dataclass
class Buffer:
    """Adaptation records of one (layer, user) pair accumulated over an adaptation interval."""

    layer: int
    user: int
    capacity: int
    records: List[AdaptationRecord] = field(default_factory=list)

    def append(self, record: AdaptationRecord) -> None:
        """
        Raises:
            DimensionError: If the record belongs elsewhere or its widths differ from earlier records.
            ValueError: If the record is older than the last buffered one.
        """
        if (record.layer, record.user) != (self.layer, self.user):
            raise DimensionError(
                f"Record for ({record.layer}, {record.user}) sent to buffer ({self.layer}, {self.user})."
            )
        if self.records:
            last = self.records[-1]
            if record.hidden_input.shape[1:] != last.hidden_input.shape[1:] or (
                record.hidden_grad.shape[1:] != last.hidden_grad.shape[1:]
            ):
                raise DimensionError("Record widths differ from the buffered records.")
            if record.iteration < last.iteration:
                raise ValueError(f"Record from iteration {record.iteration} arrived after {last.iteration}.")
        self.records.append(record)

    @property
    def n_samples(self) -> int:
        return sum(record.rows for record in self.records)

    @property
    def full(self) -> bool:
        return self.n_samples >= self.capacity

    def stack(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Returns:
            Tuple[np.ndarray, np.ndarray]: All buffered hidden inputs and gradients, in arrival order.

        Raises:
            EmptyBufferError: If nothing is buffered.
        """
        if not self.records:
            raise EmptyBufferError(f"Buffer ({self.layer}, {self.user}) is empty.")
        inputs = np.concatenate([record.hidden_input for record in self.records])
        grads = np.concatenate([record.hidden_grad for record in self.records])
        return inputs, grads

    def clear(self) -> None:
        self.records = []
