"""CSV report helpers with byte-stable formatting.

Floats are rendered with repr (shortest round-trip), so a report regenerated
from the same inputs is byte-identical.
"""

from __future__ import annotations

import os

__all__ = ["format_cell", "write_csv", "taylor_csv_rows"]


def format_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if v != v:  # NaN
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format_cell(v) for v in row) + "\n")
    return path


def taylor_csv_rows(report):
    """Rows in the (step, R0, order, R1, order) table shape; the first rung
    has empty order cells."""
    rows = []
    for i, h in enumerate(report.steps):
        rows.append(
            (
                h,
                report.r0[i],
                None if i == 0 else report.r0_orders[i],
                report.r1[i],
                None if i == 0 else report.r1_orders[i],
            )
        )
    return rows


TAYLOR_HEADER = ("step", "R0", "order", "R1", "order")
