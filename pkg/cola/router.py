"""
Per-sample routing of one concatenated batch to the adapters of K users.

A single forward and backward pass serves every user: at each fine-tuned layer the
rows owned by user k go through adapter (m, k), and after backward the tapped
hidden inputs and gradients are split back into per-(m, k) adaptation records.
"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tape, TapPoint, Tensor
from .helpers.errors import DimensionError
from .records import AdaptationRecord

AdapterKey = Tuple[int, int]


@dataclass
class RoutedBatch:
    inputs: np.ndarray
    labels: np.ndarray
    owners: np.ndarray

    def __post_init__(self) -> None:
        if not (self.inputs.shape[0] == self.labels.shape[0] == self.owners.shape[0]):
            raise DimensionError(
                f"Routed batch has {self.inputs.shape[0]} rows, {self.labels.shape[0]} labels "
                f"and {self.owners.shape[0]} owners."
            )


class Router:
    """Maps batch rows to users and applies each user's adapter to its rows."""

    def __init__(self, owners: Optional[Sequence[int]] = None, n_users: int = 1) -> None:
        """
        Args:
            owners (Sequence[int], optional): User id of every row. None means every row belongs to user 0.
            n_users (int): Number of users K.

        Raises:
            DimensionError: If an owner id lies outside [0, K).
        """
        self.n_users = n_users
        self.owners = None if owners is None else np.asarray(owners, dtype=np.int64)
        if self.owners is not None and self.owners.size and (self.owners.min() < 0 or self.owners.max() >= n_users):
            raise DimensionError(f"Owner ids must lie in [0, {n_users}).")
        self.rows: List[np.ndarray] = []
        if self.owners is not None:
            self.rows = [np.flatnonzero(self.owners == k) for k in range(n_users)]

    @property
    def single_user(self) -> bool:
        return self.owners is None or self.n_users == 1

    def delta(
        self,
        tape: Tape,
        layer: int,
        hidden_input: Tensor,
        adapters: Mapping[AdapterKey, object],
        requires_grad: bool = False,
        alpha: Optional[float] = None,
    ) -> Tuple[Optional[Tensor], float, Dict[AdapterKey, Dict[str, Tensor]]]:
        """
        Compute the adapter contribution at one layer.

        Args:
            alpha (float, optional): Scale used in place of every adapter's own alpha.

        Returns:
            Tuple: (Δh or None, alpha to apply in the residual add, parameter tensors by (m, k)).
            For a single user Δh is the raw adapter output and alpha is the adapter's own;
            for several users each user's output is already scaled and alpha is 1.
        """
        params: Dict[AdapterKey, Dict[str, Tensor]] = {}
        if self.single_user:
            adapter = adapters.get((layer, 0))
            if adapter is None:
                return None, 1.0, params
            out, params[(layer, 0)] = adapter.apply(tape, hidden_input, requires_grad)
            return out, adapter.alpha if alpha is None else alpha, params

        n = hidden_input.shape[0]
        total = None
        for user in range(self.n_users):
            adapter = adapters.get((layer, user))
            rows = self.rows[user]
            if adapter is None or rows.size == 0:
                continue
            out, params[(layer, user)] = adapter.apply(tape, tape.gather_rows(hidden_input, rows), requires_grad)
            scale = adapter.alpha if alpha is None else alpha
            if scale != 1.0:
                out = tape.scale(out, scale)
            placed = tape.scatter_rows(out, rows, n)
            total = placed if total is None else tape.add(total, placed)
        return total, 1.0, params

    def user_rows(self, user: int, n: int) -> np.ndarray:
        if self.owners is None:
            return np.arange(n) if user == 0 else np.arange(0)
        return self.rows[user]


def split_records(
    taps: Sequence[TapPoint], router: Router, iteration: int, users: Optional[Sequence[int]] = None
) -> List[AdaptationRecord]:
    """
    Partition tapped (x_m, ∇ĥ_m) by row owner into per-(m, k) adaptation records.

    Gradients are rescaled from the batch-mean loss to per-sample gradients (multiplied by
    the batch row count), the form the auxiliary objective expects.

    Args:
        taps (Sequence[TapPoint]): Tap points after backward, one per fine-tuned layer.
        router (Router): Row ownership of the batch.
        iteration (int): Training iteration t.
        users (Sequence[int], optional): Users to emit records for; defaults to all.

    Returns:
        List[AdaptationRecord]: Non-empty records ordered by layer then user.

    Raises:
        DimensionError: If the owner count does not match the tapped rows.
    """
    records = []
    users = range(router.n_users) if users is None else users
    for point in taps:
        n = point.output.shape[0]
        if router.owners is not None and router.owners.shape[0] != n:
            raise DimensionError(f"{router.owners.shape[0]} owners for a batch of {n} rows.")
        per_sample = point.grad * n
        for user in users:
            rows = router.user_rows(user, n)
            if rows.size == 0:
                continue
            records.append(
                AdaptationRecord(
                    layer=point.layer,
                    user=user,
                    hidden_input=point.hidden_input[rows],
                    hidden_grad=per_sample[rows],
                    iteration=iteration,
                )
            )
    return records
