"""ASCII interchange format for labeled point clouds.

One header line, then one whitespace-separated record per point::

    # forestseg v1 columns: x y z [sem] [inst]
    12.345678 0.200000 1.000000 stem 3

Coordinates carry 6 decimal places; ``sem`` is one of the four class names;
``inst`` is a non-negative integer or ``-`` for unassigned. The format is the
contract for external classifier processes, so parsing is strict: any
malformed line raises :class:`CloudFormatError` with its line number.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .core import SEMANTIC_CODES, SEMANTIC_NAMES, UNASSIGNED, LabeledCloud

HEADER_PREFIX = "# forestseg v1 columns:"
COORD_DECIMALS = 6


class CloudFormatError(ValueError):
    """Malformed interchange data; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _columns(cloud: LabeledCloud) -> list[str]:
    cols = ["x", "y", "z"]
    if cloud.semantic is not None:
        cols.append("sem")
    if cloud.instance is not None:
        cols.append("inst")
    return cols


def write_cloud(cloud: LabeledCloud, path) -> None:
    with open(path, "w") as fh:
        dump_cloud(cloud, fh)


def dump_cloud(cloud: LabeledCloud, fh: io.TextIOBase) -> None:
    cols = _columns(cloud)
    fh.write(f"{HEADER_PREFIX} {' '.join(cols)}\n")
    sem = cloud.semantic
    inst = cloud.instance
    for i in range(len(cloud)):
        parts = [f"{c:.{COORD_DECIMALS}f}" for c in cloud.xyz[i]]
        if sem is not None:
            parts.append(SEMANTIC_NAMES[sem[i]])
        if inst is not None:
            parts.append("-" if inst[i] == UNASSIGNED else str(int(inst[i])))
        fh.write(" ".join(parts) + "\n")


def read_cloud(path) -> LabeledCloud:
    with open(path) as fh:
        return load_cloud(fh)


def load_cloud(fh: io.TextIOBase) -> LabeledCloud:
    header = fh.readline()
    if not header.startswith(HEADER_PREFIX):
        raise CloudFormatError(f"missing header {HEADER_PREFIX!r}", line=1)
    cols = header[len(HEADER_PREFIX):].split()
    if cols[:3] != ["x", "y", "z"] or any(c not in ("sem", "inst") for c in cols[3:]):
        raise CloudFormatError(f"unsupported column layout {cols}", line=1)
    has_sem = "sem" in cols
    has_inst = "inst" in cols

    xyz, sem, inst = [], [], []
    for lineno, raw in enumerate(fh, start=2):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != len(cols):
            raise CloudFormatError(
                f"expected {len(cols)} fields, got {len(parts)}", line=lineno)
        try:
            xyz.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError:
            raise CloudFormatError(f"bad coordinate in {line!r}", line=lineno) from None
        pos = 3
        if has_sem:
            name = parts[pos]
            if name not in SEMANTIC_CODES:
                raise CloudFormatError(f"unknown semantic class {name!r}", line=lineno)
            sem.append(int(SEMANTIC_CODES[name]))
            pos += 1
        if has_inst:
            tok = parts[pos]
            if tok == "-":
                inst.append(UNASSIGNED)
            else:
                try:
                    value = int(tok)
                except ValueError:
                    raise CloudFormatError(f"bad instance id {tok!r}", line=lineno) from None
                if value < 0:
                    raise CloudFormatError(f"negative instance id {value}", line=lineno)
                inst.append(value)

    if not xyz:
        raise CloudFormatError("file contains no points")
    try:
        return LabeledCloud(
            np.asarray(xyz, dtype=np.float64),
            np.asarray(sem, dtype=np.int64) if has_sem else None,
            np.asarray(inst, dtype=np.int64) if has_inst else None,
        )
    except ValueError as exc:
        raise CloudFormatError(str(exc)) from exc


def read_dataset(directory) -> dict[str, LabeledCloud]:
    """All plot clouds in a directory, keyed by file stem, sorted by name."""
    directory = Path(directory)
    plots = {}
    for path in sorted(directory.glob("*.txt")):
        plots[path.stem] = read_cloud(path)
    if not plots:
        raise CloudFormatError(f"no plot files (*.txt) found in {directory}")
    return plots
