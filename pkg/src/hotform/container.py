"""Binary array container and CSV helpers.

Layout of a container file::

    HFC1
    kind <name>
    steps <count>
    static <field> <shape>
    field <field> <shape>
    attr <key> <json>
    end
    <static blocks><step 0 blocks><step 1 blocks>...

The header is ASCII, one entry per line. Shapes are written as ``3x30`` (or
``-`` for a scalar). Every block is a row-major little-endian float64 array.
Static fields are written once before the per-step blocks; per-step fields
are written in header order for every step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "HFC1"
_DTYPE = np.dtype("<f8")


class ContainerError(ValueError):
    """Raised when a container file is malformed or fails validation."""

    def __init__(self, message, *, step=None, field_name=None, index=None):
        super().__init__(message)
        self.step = step
        self.field_name = field_name
        self.index = index


@dataclass
class Container:
    kind: str
    steps: int
    static: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


def _shape_str(shape):
    return "x".join(str(int(s)) for s in shape) if shape else "-"


def _parse_shape(text):
    if text == "-":
        return ()
    try:
        return tuple(int(s) for s in text.split("x"))
    except ValueError as exc:
        raise ContainerError(f"malformed shape {text!r}") from exc


def write_container(path, kind, static=None, fields=None, attrs=None):
    """Write arrays to ``path``.

    ``static`` maps names to arrays written once. ``fields`` maps names to
    arrays whose leading axis is the step axis; all must agree on its length.
    """
    static = dict(static or {})
    fields = dict(fields or {})
    attrs = dict(attrs or {})
    lengths = {len(v) for v in fields.values()}
    if len(lengths) > 1:
        raise ContainerError(f"per-step fields disagree on step count: {sorted(lengths)}")
    steps = lengths.pop() if lengths else 0

    lines = [MAGIC, f"kind {kind}", f"steps {steps}"]
    for name, arr in static.items():
        lines.append(f"static {name} {_shape_str(np.shape(arr))}")
    for name, arr in fields.items():
        lines.append(f"field {name} {_shape_str(np.shape(arr)[1:])}")
    for key, value in attrs.items():
        lines.append(f"attr {key} {json.dumps(value, sort_keys=True)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as fh:
        fh.write(header)
        for arr in static.values():
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
        cols = [np.ascontiguousarray(arr, dtype=_DTYPE) for arr in fields.values()]
        for k in range(steps):
            for arr in cols:
                fh.write(arr[k].tobytes())


def read_container(path, kind=None):
    """Read a container written by :func:`write_container`.

    Raises
    ------
    ContainerError
        On a bad magic string, malformed header, unexpected kind, or a file
        that ends before all step blocks are present (the error names the
        first incomplete step).
    """
    with open(path, "rb") as fh:
        raw = fh.read()

    lines = []
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise ContainerError("header is not terminated by 'end'")
        try:
            line = raw[pos:nl].decode("ascii")
        except UnicodeDecodeError as exc:
            raise ContainerError("header contains non-ASCII bytes") from exc
        pos = nl + 1
        if line == "end":
            break
        lines.append(line)

    if not lines or lines[0] != MAGIC:
        raise ContainerError(f"bad magic string, expected {MAGIC!r}")

    out = Container(kind="", steps=-1)
    static_shapes, field_shapes = {}, {}
    for line in lines[1:]:
        tag, _, rest = line.partition(" ")
        if tag == "kind":
            out.kind = rest
        elif tag == "steps":
            try:
                out.steps = int(rest)
            except ValueError as exc:
                raise ContainerError(f"malformed step count {rest!r}") from exc
        elif tag in ("static", "field"):
            parts = rest.split(" ")
            if len(parts) != 2:
                raise ContainerError(f"malformed {tag} line {line!r}")
            target = static_shapes if tag == "static" else field_shapes
            target[parts[0]] = _parse_shape(parts[1])
        elif tag == "attr":
            key, _, value = rest.partition(" ")
            try:
                out.attrs[key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise ContainerError(f"malformed attribute {key!r}") from exc
        else:
            raise ContainerError(f"unknown header entry {line!r}")
    if out.steps < 0:
        raise ContainerError("header lacks a step count")
    if kind is not None and out.kind != kind:
        raise ContainerError(f"expected container kind {kind!r}, got {out.kind!r}")

    body = memoryview(raw)[pos:]
    offset = 0

    def take(shape, what, step=None):
        nonlocal offset
        count = math.prod(shape)
        nbytes = count * _DTYPE.itemsize
        if offset + nbytes > len(body):
            where = f" at step {step}" if step is not None else ""
            raise ContainerError(
                f"file truncated: block {what!r}{where} is incomplete",
                step=step,
                field_name=what,
            )
        arr = np.frombuffer(body[offset : offset + nbytes], dtype=_DTYPE).reshape(shape)
        offset += nbytes
        return arr

    for name, shape in static_shapes.items():
        out.static[name] = take(shape, name).copy()
    for name, shape in field_shapes.items():
        out.fields[name] = np.empty((out.steps,) + shape)
    for k in range(out.steps):
        for name, shape in field_shapes.items():
            out.fields[name][k] = take(shape, name, step=k)
    if offset != len(body):
        raise ContainerError(f"{len(body) - offset} trailing bytes after last step")
    return out


def write_csv(path, header, rows, comments=()):
    """Write a CSV with a header row. Units belong in the column names."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(path):
    """Read a CSV written by :func:`write_csv`; returns ``(header, float array)``."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    rows = [[float(v) for v in row] for row in reader]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))
