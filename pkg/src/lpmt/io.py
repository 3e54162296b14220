"""On-disk formats: feature files, run files, ground truth, query lists, configs.

Feature file (little-endian throughout)::

    offset 0   8 bytes   magic b"LPMTFEAT"
    offset 8   u32       format version (1)
    offset 12  u64       n (rows)
    offset 20  u64       d (columns)
    offset 28  id table  n entries of (u32 byte length, UTF-8 bytes)
    ...        payload   n * d float32, row-major

Run file: one ``query_id gallery_id rank score`` line per ranked item, rank
1-based, score the blended distance (ascending is better) with 9
significant digits. Lines starting with ``#`` are comments.

Ground-truth file: ``query_id gallery_id label`` lines with label ``1``
(relevant) or ``-1`` (junk, ignored when scoring).
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
import tempfile
import typing
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import FeatureSet, PipelineConfig, Ranking
from .evaluation import GroundTruth

FEATURE_MAGIC = b"LPMTFEAT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<8sIQQ")
_ID_LEN = struct.Struct("<I")
RUN_HEADER = ("# lpmt run: query_id gallery_id rank score",
              "# score is a distance: lower is better, non-decreasing within a query")


class FormatError(ValueError):
    """Malformed input file; the message names the file and, for binary files, the byte offset."""


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- features ---------------------------------------------------------------

def encode_features(features: FeatureSet) -> bytes:
    parts = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, features.n, features.d)]
    for ident in features.ids:
        raw = ident.encode("utf-8")
        parts.append(_ID_LEN.pack(len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(features.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes, name: str = "<bytes>") -> FeatureSet:
    if len(buf) < len(FEATURE_MAGIC) or buf[:len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FormatError(f"{name}: bad magic at offset 0 (expected {FEATURE_MAGIC!r}, "
                          f"found {bytes(buf[:len(FEATURE_MAGIC)])!r})")
    if len(buf) < _HEADER.size:
        raise FormatError(f"{name}: truncated header: {len(buf)} bytes, need {_HEADER.size}")
    _, version, n, d = _HEADER.unpack_from(buf, 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"{name}: unsupported version {version} at offset 8")
    if n < 1 or d < 1:
        raise FormatError(f"{name}: empty feature set (n={n}, d={d}) at offset 12")
    offset = _HEADER.size
    ids, seen = [], {}
    for row in range(n):
        if offset + _ID_LEN.size > len(buf):
            raise FormatError(f"{name}: truncated id table at offset {offset} (entry {row} of {n})")
        (length,) = _ID_LEN.unpack_from(buf, offset)
        start = offset + _ID_LEN.size
        if start + length > len(buf):
            raise FormatError(f"{name}: truncated id table at offset {start} (entry {row} needs {length} bytes)")
        try:
            ident = bytes(buf[start:start + length]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{name}: id at offset {start} is not valid UTF-8 ({exc.reason})") from None
        if ident in seen:
            raise FormatError(f"{name}: duplicate id {ident!r} at offset {offset} "
                              f"(first seen at offset {seen[ident]})")
        if not ident or any(ch.isspace() for ch in ident):
            raise FormatError(f"{name}: id at offset {offset} is empty or contains whitespace")
        seen[ident] = offset
        ids.append(ident)
        offset = start + length
    expected = 4 * n * d
    found = len(buf) - offset
    if found < expected:
        raise FormatError(f"{name}: truncated payload at offset {offset}: expected {expected} bytes, found {found}")
    if found > expected:
        raise FormatError(f"{name}: {found - expected} trailing bytes after payload at offset {offset + expected}")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
    bad = ~np.isfinite(data)
    if bad.any():
        row, col = (int(x) for x in np.argwhere(bad)[0])
        raise FormatError(f"{name}: non-finite value in row {row} (id {ids[row]!r}) at offset "
                          f"{offset + 4 * (row * d + col)}")
    return FeatureSet(tuple(ids), data)


def _load_csv(path: Path) -> FeatureSet:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    header = [h.strip() for h in lines[0].split(",")]
    d = len(header) - 1
    if header[0] != "id" or d < 1 or header[1:] != [f"f{j}" for j in range(d)]:
        raise FormatError(f"{path}: CSV header must be id,f0,...,f{{d-1}}")
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != d + 1:
            raise FormatError(f"{path}:{lineno}: expected {d + 1} fields, found {len(cells)}")
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        ids.append(cells[0])
    if not rows:
        raise FormatError(f"{path}: no data rows")
    try:
        return FeatureSet(tuple(ids), np.array(rows))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def load_features(path) -> FeatureSet:
    """Read a binary feature file, or a CSV with header ``id,f0,...`` for tiny inputs."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:3] == b"id," or buf[:6] == b"\xef\xbb\xbfid,":
        return _load_csv(path)
    return decode_features(buf, str(path))


def save_features(path, features: FeatureSet) -> None:
    """Write the binary format (values stored as float32); ``.csv`` paths get CSV."""
    path = Path(path)
    for ident in features.ids:
        if not ident or any(ch.isspace() for ch in ident) or "," in ident:
            raise ValueError(f"id {ident!r} must be non-empty without whitespace or commas")
    if path.suffix.lower() == ".csv":
        head = "id," + ",".join(f"f{j}" for j in range(features.d))
        body = [f"{i}," + ",".join(repr(float(x)) for x in row) for i, row in zip(features.ids, features.data)]
        _atomic_write(path, ("\n".join([head, *body]) + "\n").encode("utf-8"))
    else:
        _atomic_write(path, encode_features(features))


# -- run files --------------------------------------------------------------

def format_score(score: float) -> str:
    return f"{score:.9g}"


def format_run(rankings: Sequence[Ranking], comments: Iterable[str] = ()) -> str:
    lines = list(RUN_HEADER) + [f"# {c}" for c in comments]
    for ranking in rankings:
        for rank, (gid, score) in enumerate(zip(ranking.ids, ranking.scores), start=1):
            lines.append(f"{ranking.query_id} {gid} {rank} {format_score(score)}")
    return "\n".join(lines) + "\n"


def write_run(path, rankings: Sequence[Ranking], comments: Iterable[str] = ()) -> None:
    """Write atomically (temporary file, then rename)."""
    _atomic_write(path, format_run(rankings, comments).encode("utf-8"))


def read_run(path) -> list:
    path = Path(path)
    per_query: dict = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'query_id gallery_id rank score'")
        q, g, rank, score = parts
        try:
            rank, score = int(rank), float(score)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad rank or score") from None
        entries = per_query.setdefault(q, [])
        if rank != len(entries) + 1:
            raise FormatError(f"{path}:{lineno}: rank {rank} for query {q!r}, expected {len(entries) + 1}")
        entries.append((g, score))
    out = []
    for q, entries in per_query.items():
        try:
            out.append(Ranking(q, tuple(g for g, _ in entries), np.array([s for _, s in entries])))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return out


# -- ground truth and query lists -------------------------------------------

def read_truth(path) -> GroundTruth:
    path = Path(path)
    relevant: dict = {}
    junk: dict = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("1", "-1"):
            raise FormatError(f"{path}:{lineno}: expected 'query_id gallery_id 1|-1'")
        q, g, label = parts
        (relevant if label == "1" else junk).setdefault(q, set()).add(g)
        relevant.setdefault(q, set())
    try:
        return GroundTruth(relevant, junk)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_truth(path, truth: GroundTruth) -> None:
    lines = ["# lpmt truth: query_id gallery_id label (1 relevant, -1 junk)"]
    for q in truth.relevant:
        lines += [f"{q} {g} 1" for g in sorted(truth.relevant[q])]
        lines += [f"{q} {g} -1" for g in sorted(truth.junk_for(q))]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_queries(path) -> list:
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    if not out:
        raise FormatError(f"{path}: no query ids")
    if len(set(out)) != len(out):
        raise FormatError(f"{path}: duplicate query ids")
    return out


# -- configuration ----------------------------------------------------------

def _field_types() -> dict:
    hints = typing.get_type_hints(PipelineConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(PipelineConfig)}


def parse_config_value(key: str, text: str):
    """Convert one textual value to the type of config field ``key``."""
    types = _field_types()
    if key not in types:
        raise KeyError(f"unknown config key {key!r}")
    tp = types[key]
    text = text.strip()
    args = typing.get_args(tp)
    if type(None) in args:
        if text.lower() in ("none", "auto", ""):
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        value = float(text)
        if not math.isfinite(value):
            raise ValueError(f"{key}: value must be finite, got {text!r}")
        return value
    if tp is tuple:
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


def format_config_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def parse_config(text: str, name: str = "<config>") -> dict:
    """``key = value`` lines (``#`` comments) to a dict of typed overrides."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{name}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            values[key] = parse_config_value(key, raw)
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{name}:{lineno}: {exc}") from None
    return values


def serialize_config(config: PipelineConfig) -> str:
    return "".join(f"{f} = {format_config_value(getattr(config, f))}\n" for f in PipelineConfig.field_names())


def load_config(path) -> dict:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def write_text_atomic(path, text: str) -> None:
    _atomic_write(path, text.encode("utf-8"))


def resolve_config(file_values: Optional[dict] = None, flag_values: Optional[dict] = None) -> tuple:
    """Merge flag > file > default; returns the config and each field's source."""
    file_values = file_values or {}
    flag_values = flag_values or {}
    merged, sources = {}, {}
    for name in PipelineConfig.field_names():
        if name in flag_values:
            merged[name], sources[name] = flag_values[name], "flag"
        elif name in file_values:
            merged[name], sources[name] = file_values[name], "file"
        else:
            sources[name] = "default"
    return PipelineConfig(**merged), sources
