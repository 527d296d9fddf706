"""CSV readers and writers for the artifact's file formats.

Floats are written with ``repr`` so that a write/read round trip is exact
and repeated runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .network import FlowSeries, RoutingMatrix


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r if row]


def write_routing_matrix(path, A: RoutingMatrix, convention: str | None = None) -> None:
    """Header ``link,<od_1>,...``; one 0/1 row per link.

    ``convention`` is written as a leading ``#`` comment line when given.
    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write_matrix(path, A, convention)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        _write_matrix(fh, A, convention)


def _write_matrix(fh, A: RoutingMatrix, convention: str | None) -> None:
    if convention:
        fh.write(f"# {convention}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["link", *A.od_names])
    for name, row in zip(A.link_names, A.entries):
        w.writerow([name, *(str(int(v)) for v in row)])


def read_routing_matrix(path) -> RoutingMatrix:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], [r for r in rows[1:] if r]
    if header[0] != "link":
        raise ValueError(f"{path}: first header cell must be 'link'")
    a = np.array([[float(v) for v in r[1:]] for r in body])
    return RoutingMatrix(a, tuple(r[0] for r in body), tuple(header[1:]))


def write_flow_series(path, fs: FlowSeries) -> None:
    write_rows(path, ["t", *fs.names],
               ([t, *row] for t, row in enumerate(fs.values, start=1)))


def read_flow_series(path, interval_seconds: int = 300) -> FlowSeries:
    header, body = read_rows(path)
    if header[0] != "t":
        raise ValueError(f"{path}: first header cell must be 't'")
    values = np.array([[float(v) for v in r[1:]] for r in body])
    return FlowSeries(values, tuple(header[1:]), interval_seconds)


def write_long(path, columns: Sequence[str], t_names: Sequence[str],
               arrays: Sequence[np.ndarray]) -> None:
    """Long format: one row per (t, name) with one column per array."""
    T = arrays[0].shape[0]
    rows = ([t + 1, name, *(arr[t, i] for arr in arrays)]
            for t in range(T) for i, name in enumerate(t_names))
    write_rows(path, ["t", "od_name", *columns], rows)


def read_long(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Inverse of :func:`write_long`; returns OD names and T x d arrays."""
    header, body = read_rows(path)
    names: list[str] = []
    for r in body:
        if r[1] not in names:
            names.append(r[1])
        else:
            break
    T = len(body) // len(names)
    out = {}
    for c, col in enumerate(header[2:], start=2):
        out[col] = np.array([float(r[c]) for r in body]).reshape(T, len(names))
    return names, out


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def array_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]
