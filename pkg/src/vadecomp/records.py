"""Line-oriented JSON files for datasets, fit results and profiles.

Every file starts with a header object carrying ``schema_version``; each
further line is one self-contained record.  Floats are written with
``repr`` precision, so values round-trip exactly and identical inputs give
byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .eventgen import DecompositionHypothesis, EventRecord
from .imaging import CROP_GRID, GridSpec, VoxelImage
from .physics import ParticleKinematics

SCHEMA_VERSION = "1.0"


class SchemaError(ValueError):
    pass


class RecordError(ValueError):
    """A malformed line; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def header(kind: str, **extra) -> dict:
    return {"record": "header", "kind": kind, "schema_version": SCHEMA_VERSION, **extra}


def check_schema(h: dict, kind: str | None = None):
    v = str(h.get("schema_version", ""))
    major = v.split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"unsupported schema_version {v!r} (reader supports {SCHEMA_VERSION})")
    if kind is not None and h.get("kind") != kind:
        raise SchemaError(f"expected a {kind!r} file, got {h.get('kind')!r}")


def write_records(path, head: dict, records) -> None:
    """Write header plus records atomically (temp file, then rename)."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".jsonl")
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(dumps(head) + "\n")
            for r in records:
                f.write(dumps(r) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ReadResult:
    header: dict
    records: list           # (lineno, dict)
    errors: list            # RecordError


def read_records(path, kind: str | None = None) -> ReadResult:
    """Parse a file; malformed lines are collected rather than raised.

    A missing or unreadable header raises :class:`SchemaError`.
    """
    path = os.fspath(path)
    try:
        f = open(path, encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e
    with f:
        lines = f.read().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file (no header)")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: header is not valid JSON") from e
    if not isinstance(head, dict) or head.get("record") != "header":
        raise SchemaError(f"{path}: first line is not a header record")
    check_schema(head, kind)
    recs, errs = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict) or "event_id" not in obj:
                raise ValueError("record lacks event_id")
            recs.append((n, obj))
        except ValueError as e:
            errs.append(RecordError(n, str(e)))
    return ReadResult(head, recs, errs)


# ---------------------------------------------------------------- events

def sparse_voxels(pe: np.ndarray) -> list:
    idx = np.argwhere(pe != 0)
    return [[int(i), int(j), int(k), float(pe[i, j, k])] for i, j, k in idx]


def dense_voxels(voxels, grid: GridSpec) -> np.ndarray:
    pe = np.zeros((grid.n,) * 3)
    for i, j, k, v in voxels:
        pe[int(i), int(j), int(k)] = float(v)
    return pe


def event_to_record(event_id: int, ev: EventRecord, scenario: int, noise: bool) -> dict:
    return {
        "record": "event",
        "event_id": int(event_id),
        "scenario": int(scenario),
        "noise": bool(noise),
        "seeds": list(ev.seeds),
        "shift": list(ev.shift),
        "grid": {"n": ev.target.grid.n, "pitch": ev.target.grid.pitch},
        "voxels": sparse_voxels(ev.target.pe),
        "muon": ev.muon.to_dict(),
        "truth": ev.truth.to_dict(),
        "hadron_pe": ev.hadron_pe,
        "longest_track_mm": ev.longest_track_mm,
    }


def record_to_event(rec: dict) -> EventRecord:
    g = rec.get("grid", {})
    grid = GridSpec(int(g.get("n", CROP_GRID.n)), float(g.get("pitch", CROP_GRID.pitch)))
    return EventRecord(
        target=VoxelImage(grid, dense_voxels(rec["voxels"], grid)),
        muon=ParticleKinematics.from_dict(rec["muon"]),
        truth=DecompositionHypothesis.from_dict(rec["truth"]),
        seeds=tuple(rec["seeds"]),
        shift=tuple(rec["shift"]),
        hadron_pe=float(rec.get("hadron_pe", 0.0)),
        longest_track_mm=float(rec.get("longest_track_mm", 0.0)),
    )
