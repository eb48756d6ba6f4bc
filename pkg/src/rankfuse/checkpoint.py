"""Flat text container for parameter sets.

Layout (tab-separated, sorted for byte-stable output):

    rankfuse-params 1
    meta\t<key>\t<value>          zero or more, keys sorted
    param\t<name>\t<group>\t<d1,d2,...>\t<v1,v2,...>   sorted by name

Values are written with 17 significant digits, which round-trips float64
exactly, so save followed by load is value-exact.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .autodiff import Parameter
from .errors import DatasetParseError, ValidationError

FORMAT_LINE = "rankfuse-params 1"


def _fmt(x: float) -> str:
    return format(x, ".17g")


def save_params(path, params: dict[str, Parameter], meta: dict[str, str] | None = None):
    """Write parameters (and optional string metadata) to `path`."""
    lines = [FORMAT_LINE]
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if any(c in key or c in value for c in "\t\n"):
            raise ValidationError(f"meta entry {key!r} contains tab/newline")
        lines.append(f"meta\t{key}\t{value}")
    for name in sorted(params):
        p = params[name]
        if p.name != name:
            raise ValidationError(f"params dict key {name!r} != parameter name {p.name!r}")
        if p.data.ndim < 1:
            raise ValidationError(f"parameter {name!r} must be at least 1D")
        shape = ",".join(str(d) for d in p.data.shape)
        values = ",".join(_fmt(v) for v in p.data.reshape(-1))
        lines.append(f"param\t{name}\t{p.group}\t{shape}\t{values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_params(path) -> tuple[dict[str, Parameter], dict[str, str]]:
    """Read a container written by save_params. Returns (params, meta)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != FORMAT_LINE:
        raise DatasetParseError(1, f"bad format header, expected {FORMAT_LINE!r}")
    params: dict[str, Parameter] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if fields[0] == "meta":
            if len(fields) != 3:
                raise DatasetParseError(lineno, "meta line needs 3 fields")
            meta[fields[1]] = fields[2]
        elif fields[0] == "param":
            if len(fields) != 5:
                raise DatasetParseError(lineno, "param line needs 5 fields")
            _, name, group, shape_s, values_s = fields
            try:
                shape = tuple(int(d) for d in shape_s.split(","))
                data = np.array([float(v) for v in values_s.split(",")], dtype=np.float64)
                data = data.reshape(shape)
            except ValueError as e:
                raise DatasetParseError(lineno, f"bad param payload: {e}") from None
            params[name] = Parameter(name, data, group)
        else:
            raise DatasetParseError(lineno, f"unknown record kind {fields[0]!r}")
    return params, meta


def params_digest(params: dict[str, Parameter]) -> str:
    """Short stable digest of a parameter set, used as a checkpoint id."""
    h = hashlib.sha256()
    for name in sorted(params):
        p = params[name]
        h.update(name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()[:16]
