"""
Symbolic computation-space model of fine-tuning methods.

Counts are float elements, not bytes. For a batch of B rows through a model with
fine-tuned layers m = 1..M and K users:

    |h|  = B · Σ_m out_m                 base hidden representations
    |h̃|  = B · Σ_m rep_m                 adapter hidden representations (each row visits
                                          exactly one user's adapter per layer)
    |θ|  = parameters of the base model
    |w|  = K · Σ_m params_m              adapter parameters of every user
    |∇x| = |x| for every category

Each method places every category on the base device, on an offload device, or
nowhere; offload placement is what braces denote in the comparison table.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .adapters import AdapterSpec
from .helpers.arg_options import CostMode, Method, get_enum_values
from .helpers.errors import ConfigError, DimensionError
from .models import BaseModel

CATEGORIES = ['h', 'h_tilde', 'theta', 'w', 'grad_h', 'grad_h_tilde', 'grad_theta', 'grad_w']
CATEGORY_LABELS = {
    'h': 'h',
    'h_tilde': 'h~',
    'theta': 'theta',
    'w': 'w',
    'grad_h': 'dh',
    'grad_h_tilde': 'dh~',
    'grad_theta': 'dtheta',
    'grad_w': 'dw',
}
METHOD_NAMES = {'ft': 'FT', 'peft': 'PEFT', 'cola': 'ColA'}
BASE = 'base'
OFFLOAD = 'offload'

# (method, merged, mode) -> placement of each category present in the cell.
PLACEMENTS: Dict[tuple, Dict[str, str]] = {
    ('ft', False, 'inference'): {'theta': BASE},
    ('ft', False, 'learning'): {'h': BASE, 'theta': BASE, 'grad_h': BASE, 'grad_theta': BASE},
    ('peft', False, 'inference'): {'theta': BASE, 'w': BASE},
    ('peft', False, 'learning'): {
        'h': BASE,
        'h_tilde': BASE,
        'theta': BASE,
        'w': BASE,
        'grad_h': BASE,
        'grad_h_tilde': BASE,
        'grad_w': BASE,
    },
    ('peft', True, 'inference'): {'theta': BASE},
    ('cola', False, 'inference'): {'theta': BASE, 'w': BASE},
    ('cola', False, 'learning'): {
        'h': BASE,
        'h_tilde': BASE,
        'theta': BASE,
        'w': BASE,
        'grad_h': BASE,
        'grad_h_tilde': BASE,
        'grad_w': OFFLOAD,
    },
    ('cola', True, 'inference'): {'theta': BASE},
    ('cola', True, 'learning'): {
        'h': BASE,
        'h_tilde': OFFLOAD,
        'theta': BASE,
        'w': OFFLOAD,
        'grad_h': BASE,
        'grad_h_tilde': OFFLOAD,
        'grad_w': OFFLOAD,
    },
}
# PEFT has no merged learning procedure; it trains unmerged and merges afterwards.
PLACEMENTS[('peft', True, 'learning')] = PLACEMENTS[('peft', False, 'learning')]

TABLE_ROWS = [
    ('ft', False, 'inference'),
    ('ft', False, 'learning'),
    ('peft', False, 'inference'),
    ('peft', False, 'learning'),
    ('peft', True, 'inference'),
    ('cola', False, 'inference'),
    ('cola', False, 'learning'),
    ('cola', True, 'inference'),
    ('cola', True, 'learning'),
]


@dataclass
class CostEntry:
    count: int
    device: Optional[str]

    def cell(self) -> str:
        if self.device is None:
            return '-'
        return f"{{{self.count}}}" if self.device == OFFLOAD else str(self.count)


@dataclass
class CostReport:
    method: str
    merged: bool
    mode: str
    users: int
    batch_size: int
    entries: Dict[str, CostEntry] = field(default_factory=dict)

    def total(self, device: str) -> int:
        return sum(entry.count for entry in self.entries.values() if entry.device == device)

    @property
    def base_total(self) -> int:
        return self.total(BASE)

    @property
    def offload_total(self) -> int:
        return self.total(OFFLOAD)

    @property
    def label(self) -> str:
        name = METHOD_NAMES[self.method]
        if self.method == Method.FT.value:
            return name
        return f"{name} ({'merged' if self.merged else 'unmerged'})"

    def as_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {'method': self.label, 'mode': self.mode}
        for category in CATEGORIES:
            row[category] = self.entries[category].cell()
        row['base'] = self.base_total
        row['offload'] = self.offload_total
        return row


def category_sizes(
    model: BaseModel, adapter_specs: Sequence[AdapterSpec], users: int, batch_size: int
) -> Dict[str, int]:
    """
    Float counts of every category.

    Raises:
        DimensionError: If there is not one adapter spec per fine-tuned layer or a spec does not fit its layer.
    """
    if len(adapter_specs) != model.M:
        raise DimensionError(f"Expected {model.M} adapter specs, one per fine-tuned layer, got {len(adapter_specs)}.")
    for m, spec in enumerate(adapter_specs):
        if (spec.in_dim, spec.out_dim) != model.layer_dims(m):
            raise DimensionError(f"Adapter spec {spec.in_dim}->{spec.out_dim} does not fit layer {m}.")
    h = batch_size * sum(model.layer_dims(m)[1] for m in range(model.M))
    h_tilde = batch_size * sum(spec.representation_size for spec in adapter_specs)
    theta = model.num_parameters
    w = users * sum(spec.num_parameters for spec in adapter_specs)
    return {
        'h': h,
        'h_tilde': h_tilde,
        'theta': theta,
        'w': w,
        'grad_h': h,
        'grad_h_tilde': h_tilde,
        'grad_theta': theta,
        'grad_w': w,
    }


def cost_report(
    model: BaseModel,
    adapter_specs: Sequence[AdapterSpec],
    users: int,
    method: str,
    merged: bool,
    mode: str,
    batch_size: int,
) -> CostReport:
    """
    Computation-space counts of one method, per device.

    Args:
        model (BaseModel): The base model.
        adapter_specs (Sequence[AdapterSpec]): One spec per fine-tuned layer, shared by all users.
        users (int): Number of users K.
        method (str): 'ft', 'peft' or 'cola'.
        merged (bool): Whether adapters are merged into the base weights (ignored for 'ft').
        mode (str): 'inference' or 'learning'.
        batch_size (int): Batch size B.

    Returns:
        CostReport: One entry per category; categories the method does not hold have no device.

    Raises:
        ConfigError: If the method or mode is unknown, or users or batch size is below 1.
    """
    if method not in get_enum_values(Method) or mode not in get_enum_values(CostMode):
        raise ConfigError(f"Unknown cost row ({method}, {mode}).")
    if users < 1 or batch_size < 1:
        raise ConfigError("Cost model needs at least one user and a batch size of at least 1.")
    merged = merged and method != Method.FT.value
    sizes = category_sizes(model, adapter_specs, users, batch_size)
    placement = PLACEMENTS[(method, merged, mode)]
    report = CostReport(method, merged, mode, users, batch_size)
    for category in CATEGORIES:
        device = placement.get(category)
        report.entries[category] = CostEntry(sizes[category] if device else 0, device)
    return report


def cost_table(
    model: BaseModel, adapter_specs: Sequence[AdapterSpec], users: int, batch_size: int
) -> List[CostReport]:
    """Every row of the comparison: FT, PEFT and ColA, unmerged and merged, inference and learning."""
    return [
        cost_report(model, adapter_specs, users, method, merged, mode, batch_size)
        for method, merged, mode in TABLE_ROWS
    ]


def format_cost_table(reports: Sequence[CostReport]) -> str:
    """Aligned text table; offloaded counts are shown in braces."""
    headers = ['method', 'mode'] + [CATEGORY_LABELS[category] for category in CATEGORIES] + ['base', 'offload']
    rows = [[str(value) for value in report.as_row().values()] for report in reports]
    widths = [max([len(header)] + [len(row[i]) for row in rows]) for i, header in enumerate(headers)]
    lines = ['  '.join(header.ljust(width) for header, width in zip(headers, widths)).rstrip()]
    lines.append('  '.join('-' * width for width in widths))
    for row in rows:
        lines.append('  '.join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cost_table_csv(reports: Sequence[CostReport]) -> str:
    """CSV of raw counts with a device column per category."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    header = ['method', 'merged', 'mode', 'users', 'batch_size']
    for category in CATEGORIES:
        header += [category, f"{category}_device"]
    writer.writerow(header + ['base', 'offload'])
    for report in reports:
        row = [report.method, report.merged, report.mode, report.users, report.batch_size]
        for category in CATEGORIES:
            entry = report.entries[category]
            row += [entry.count, entry.device or '']
        writer.writerow(row + [report.base_total, report.offload_total])
    return buffer.getvalue()
