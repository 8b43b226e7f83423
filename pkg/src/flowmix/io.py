"""ASCII point-cloud files: ``.xyz``, ``.ply`` and ``.csv``.

Coordinates are written with 17 significant digits, which round-trips
float64 exactly.  An optional integer ``flow_id`` column carries the
mixture component of each point:

* ``.xyz``: whitespace separated ``x y [z] [flow_id]``; a leading
  ``# flowmix xyz d=<d> flow_id=<0|1>`` comment records the layout.
* ``.ply``: ASCII PLY with ``property double x/y/z`` and, if present,
  ``property int flow_id``.
* ``.csv``: header ``index,x,y[,z][,flow_id]``; for 3-D clouds ``flow_id`` is
  the fifth column.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import InputError, ParseError

AXES = ("x", "y", "z")
SUFFIXES = (".xyz", ".ply", ".csv")


def _fmt(v):
    return format(float(v), ".17g")


def _check(points, ids):
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or not 1 <= points.shape[1] <= 3:
        raise InputError(f"points must be [N, d] with d in 1..3, got {points.shape}")
    if ids is not None:
        ids = np.asarray(ids)
        if ids.shape != (len(points),):
            raise InputError("component ids must have one entry per point")
        ids = ids.astype(int)
    return points, ids


def write_cloud(path, points, ids=None):
    """Write a cloud; the format follows the file suffix."""
    path = Path(path)
    points, ids = _check(points, ids)
    n, d = points.shape
    suffix = path.suffix.lower()
    lines = []
    if suffix == ".xyz":
        lines.append(f"# flowmix xyz d={d} flow_id={int(ids is not None)}")
        for i in range(n):
            row = [_fmt(v) for v in points[i]]
            if ids is not None:
                row.append(str(ids[i]))
            lines.append(" ".join(row))
    elif suffix == ".ply":
        lines += ["ply", "format ascii 1.0", f"element vertex {n}"]
        lines += [f"property double {a}" for a in AXES[:d]]
        if ids is not None:
            lines.append("property int flow_id")
        lines.append("end_header")
        for i in range(n):
            row = [_fmt(v) for v in points[i]]
            if ids is not None:
                row.append(str(ids[i]))
            lines.append(" ".join(row))
    elif suffix == ".csv":
        header = ["index", *AXES[:d]] + (["flow_id"] if ids is not None else [])
        lines.append(",".join(header))
        for i in range(n):
            row = [str(i)] + [_fmt(v) for v in points[i]]
            if ids is not None:
                row.append(str(ids[i]))
            lines.append(",".join(row))
    else:
        raise InputError(f"unsupported extension {suffix!r}; use one of {SUFFIXES}")
    path.write_text("\n".join(lines) + "\n")


def _parse_row(tokens, path, lineno, n_coords, has_ids):
    want = n_coords + int(has_ids)
    if len(tokens) != want:
        raise ParseError(f"expected {want} values, found {len(tokens)}", path, lineno)
    try:
        coords = [float(t) for t in tokens[:n_coords]]
        fid = int(tokens[n_coords]) if has_ids else None
    except ValueError as exc:
        raise ParseError(str(exc), path, lineno) from None
    return coords, fid


def read_cloud(path):
    """Read a cloud written by :func:`write_cloud` (or a compatible file).

    Returns:
        ``(points[N, d], ids)`` where ``ids`` is ``None`` without a
        ``flow_id`` column.

    Raises:
        ParseError: malformed content, with the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    lines = path.read_text().splitlines()
    if suffix == ".ply":
        return _read_ply(path, lines)
    if suffix == ".csv":
        return _read_csv(path, lines)
    if suffix == ".xyz":
        return _read_xyz(path, lines)
    raise InputError(f"unsupported extension {suffix!r}; use one of {SUFFIXES}")


def _finish(path, coords, ids, has_ids):
    if not coords:
        raise ParseError("no points", path)
    pts = np.array(coords, dtype=np.float64)
    return pts, (np.array(ids, dtype=int) if has_ids else None)


def _read_xyz(path, lines):
    d, has_ids = None, False
    coords, ids = [], []
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text:
            continue
        if text.startswith("#"):
            if text.startswith("# flowmix xyz"):
                fields = dict(tok.split("=") for tok in text.split()[3:])
                d, has_ids = int(fields["d"]), fields.get("flow_id") == "1"
            continue
        tokens = text.split()
        if d is None:
            d = min(len(tokens), 3)
            has_ids = False
        c, f = _parse_row(tokens, path, lineno, d, has_ids)
        coords.append(c)
        if has_ids:
            ids.append(f)
    return _finish(path, coords, ids, has_ids)


def _read_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    n, props, body_start = None, [], None
    for lineno, line in enumerate(lines[1:], 2):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format" and tokens[1] != "ascii":
            raise ParseError(f"only ascii PLY is supported, got {tokens[1]}", path, lineno)
        if tokens[0] == "element":
            if tokens[1] != "vertex":
                raise ParseError(f"unsupported element {tokens[1]!r}", path, lineno)
            n = int(tokens[2])
        elif tokens[0] == "property":
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = lineno
            break
    if n is None or body_start is None:
        raise ParseError("incomplete PLY header", path)
    coords_names = [p for p in props if p in AXES]
    if coords_names != list(AXES[: len(coords_names)]) or not coords_names:
        raise ParseError(f"unexpected vertex properties {props}", path)
    extra = [p for p in props if p not in AXES]
    if extra not in ([], ["flow_id"]):
        raise ParseError(f"unsupported vertex properties {extra}", path)
    has_ids = extra == ["flow_id"]
    coords, ids = [], []
    body = [(i, ln) for i, ln in enumerate(lines[body_start:], body_start + 1) if ln.strip()]
    if len(body) != n:
        raise ParseError(f"header declares {n} vertices, found {len(body)}", path)
    for lineno, line in body:
        c, f = _parse_row(line.split(), path, lineno, len(coords_names), has_ids)
        coords.append(c)
        if has_ids:
            ids.append(f)
    return _finish(path, coords, ids, has_ids)


def _read_csv(path, lines):
    if not lines:
        raise ParseError("empty file", path)
    header = [h.strip() for h in lines[0].split(",")]
    axes = [h for h in header if h in AXES]
    if not axes or header[0] != "index":
        raise ParseError(f"unexpected header {header}", path, 1)
    has_ids = header[-1] == "flow_id"
    coords, ids = [], []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        tokens = line.split(",")
        c, f = _parse_row(tokens[1:], path, lineno, len(axes), has_ids)
        coords.append(c)
        if has_ids:
            ids.append(f)
    return _finish(path, coords, ids, has_ids)


def read_cloud_dir(directory):
    """All clouds in a directory (sorted by file name), coordinates only."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in SUFFIXES)
    return [read_cloud(p)[0] for p in files], [p.name for p in files]
