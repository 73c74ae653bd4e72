"""CSV / JSON export and re-import of node-valued processes.

Trajectory CSVs have the columns ``level, history`` followed by one column
per vector component of each process (``x0, x1, ..., y0, ...``). Floats are
written with ``repr`` so a round trip is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .scenario_tree import AdaptedProcess, ScenarioTree


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def write_processes(path: Path, tree: ScenarioTree, processes: dict[str, AdaptedProcess]) -> Path:
    """One row per node of every level; processes that stop early leave their cells blank."""
    path = Path(path)
    names = list(processes)
    header = ["level", "history"]
    for name in names:
        header += [f"{name}{i}" for i in range(processes[name].dim)]
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for k in tree.levels:
            for i in range(tree.sizes[k]):
                row = [k, tree.history(k, i)]
                for name in names:
                    proc = processes[name]
                    if k < proc.n_levels:
                        row += [_fmt(v) for v in proc[k][i]]
                    else:
                        row += [""] * proc.dim
                out.writerow(row)
    return path


def read_processes(path: Path, tree: ScenarioTree) -> dict[str, AdaptedProcess]:
    """Inverse of :func:`write_processes` (column prefixes become process names)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    groups: dict[str, list[int]] = {}
    for col, name in enumerate(header[2:], start=2):
        prefix = name.rstrip("0123456789")
        groups.setdefault(prefix, []).append(col)
    levels: dict[str, dict[int, np.ndarray]] = {g: {} for g in groups}
    for g in groups:
        for k in tree.levels:
            levels[g][k] = np.full((tree.sizes[k], len(groups[g])), np.nan)
    for row in body:
        k, (_, i) = int(row[0]), tree.node_index(row[1])
        for g, cols in groups.items():
            cells = [row[c] for c in cols]
            if all(cell != "" for cell in cells):
                levels[g][k][i] = [float(c) for c in cells]
    out = {}
    for g, per_level in levels.items():
        vals = [per_level[k] for k in tree.levels]
        while vals and np.all(np.isnan(vals[-1])):
            vals.pop()
        out[g] = AdaptedProcess(vals)
    return out


def write_rows(path: Path, rows: list[dict]) -> Path:
    path = Path(path)
    header = list(rows[0]) if rows else []
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([_fmt(row[h]) if isinstance(row[h], float) or row[h] is None else row[h] for h in header])
    return path


def to_jsonable(obj):
    """Recursively convert numpy values and processes; non-finite floats become strings."""
    if isinstance(obj, AdaptedProcess):
        return [v.tolist() for v in obj.values]
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True, ensure_ascii=False)


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj) + "\n", encoding="utf-8")
    return path


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
