"""Number formatting and file helpers shared by the JSON and CSV writers."""

from __future__ import annotations

import os
import tempfile

import numpy as np


def fmt_float(x: float) -> str:
    # 17 significant digits round-trips every finite IEEE-754 double.
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x!r}")
    return "%.17g" % x


def fmt_matrix(M) -> str:
    M = np.asarray(M, dtype=float)
    rows = ("[" + ", ".join(fmt_float(x) for x in row) + "]" for row in M)
    return "[" + ", ".join(rows) + "]"


def fmt_csv_value(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if np.isnan(x):
            return "nan"
        if np.isinf(x):
            return "inf" if x > 0 else "-inf"
        return "%.17g" % x
    return str(x)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(fmt_csv_value(v) for v in row) for row in rows)
    atomic_write(path, "\n".join(lines) + "\n")


def atomic_write(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
