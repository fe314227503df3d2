"""File interchange: acquisition metadata, raster tiles, and point tables.

Three formats, all little-endian / UTF-8, all versioned v1, all with total
parsers: any byte sequence comes back as a value or as a ParseError carrying
a location, never as a crash. Each format is also truncation-proof by
construction. The metadata text fixes the key order and requires a trailing
newline, the raster header declares the exact payload byte count, and the
point table ends with a row-count footer, so cutting a valid file at any
byte offset leaves something a parser rejects.

Numbers serialize with repr(), the shortest form that restores the exact
binary value, which is what makes write(read(x)) byte-identical on
canonical files.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .geodesy import OrbitModel
from .geometry import AcquisitionGeometry

_METADATA_MAGIC = "sargcp acquisition metadata v1"
_RASTER_MAGIC = b"SGRT"
_RASTER_VERSION = 1
_RASTER_HEADER = struct.Struct("<4sHHIIqq")
_RASTER_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<c8")}
_RASTER_CODES = {np.dtype("<f4"): 0, np.dtype("<c8"): 1}

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_TABLE_TYPES = ("str", "int", "float")


# ---------------------------------------------------------------------------
# Acquisition metadata
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AcquisitionRecord:
    """One acquisition's annotation: identity, geometry, calibration."""

    acquisition_id: str
    geometry: AcquisitionGeometry
    calibration: float

    def __post_init__(self):
        if not _NAME_RE.match(self.acquisition_id):
            raise ValidationError(
                f"bad acquisition id {self.acquisition_id!r}")
        if not self.calibration > 0.0:
            raise ValidationError("calibration must be positive")


def _fmt(value: float) -> str:
    return repr(float(value))


def format_metadata(record: AcquisitionRecord) -> bytes:
    """Canonical metadata text: fixed key order, one value per line."""
    geom = record.geometry
    orbit = geom.orbit
    degree = orbit.coeffs.shape[0] - 1
    lines = [
        _METADATA_MAGIC,
        f"acquisition_id = {record.acquisition_id} -",
        f"heading = {geom.heading} -",
        f"look_side = {geom.look_side} -",
        f"incidence = {_fmt(geom.incidence_deg)} deg",
        f"prf = {_fmt(geom.prf)} Hz",
        f"rsf = {_fmt(geom.rsf)} Hz",
        f"t_az_first = {_fmt(geom.t_az_first)} s",
        f"tau_rg_first = {_fmt(geom.tau_rg_first)} s",
        f"calibration = {_fmt(record.calibration)} -",
        f"orbit_epoch = {_fmt(orbit.epoch)} s",
        f"orbit_t_min = {_fmt(orbit.t_min)} s",
        f"orbit_t_max = {_fmt(orbit.t_max)} s",
        f"orbit_degree = {degree} -",
    ]
    for k in range(degree + 1):
        unit = "m" if k == 0 else ("m/s" if k == 1 else f"m/s^{k}")
        triple = " ".join(_fmt(c) for c in orbit.coeffs[k])
        lines.append(f"orbit_coeff_{k} = {triple} {unit}")
    return ("\n".join(lines) + "\n").encode("utf-8")


class _LineReader:
    """Sequential reader over decoded lines with located errors."""

    def __init__(self, text: str, source: str):
        if not text.endswith("\n"):
            raise ParseError("file must end with a newline", path=source)
        self.lines = text.split("\n")[:-1]
        self.source = source
        self.index = 0

    def fail(self, message: str):
        raise ParseError(message, path=self.source, line=self.index + 1)

    def next_fields(self, key: str, unit: str, count: int) -> list[str]:
        if self.index >= len(self.lines):
            raise ParseError(f"missing key {key!r}", path=self.source,
                             line=len(self.lines) + 1)
        line = self.lines[self.index]
        self.index += 1
        head, sep, rest = line.partition(" = ")
        if not sep:
            self.fail(f"expected 'key = value unit', got {line!r}")
        if head != key:
            self.fail(f"expected key {key!r}, got {head!r}")
        tokens = rest.split(" ")
        if len(tokens) != count + 1:
            self.fail(f"{key}: expected {count} value(s) and a unit")
        if tokens[-1] != unit:
            self.fail(f"{key}: unknown unit {tokens[-1]!r}, expected {unit!r}")
        return tokens[:-1]

    def next_float(self, key: str, unit: str) -> float:
        token = self.next_fields(key, unit, 1)[0]
        try:
            return float(token)
        except ValueError:
            self.index -= 1
            self.fail(f"{key}: bad number {token!r}")

    def next_word(self, key: str) -> str:
        return self.next_fields(key, "-", 1)[0]

    def done(self):
        if self.index != len(self.lines):
            self.fail(f"unexpected extra line {self.lines[self.index]!r}")


def parse_metadata(data: bytes, source: str = "<memory>") -> AcquisitionRecord:
    """Parse canonical metadata text; any malformation is a ParseError."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not valid UTF-8: {exc}", path=source) from None
    reader = _LineReader(text, source)
    if not reader.lines or reader.lines[0] != _METADATA_MAGIC:
        raise ParseError("missing metadata header line", path=source, line=1)
    reader.index = 1
    acq_id = reader.next_word("acquisition_id")
    heading = reader.next_word("heading")
    look_side = reader.next_word("look_side")
    incidence = reader.next_float("incidence", "deg")
    prf = reader.next_float("prf", "Hz")
    rsf = reader.next_float("rsf", "Hz")
    t_az_first = reader.next_float("t_az_first", "s")
    tau_rg_first = reader.next_float("tau_rg_first", "s")
    calibration = reader.next_float("calibration", "-")
    epoch = reader.next_float("orbit_epoch", "s")
    t_min = reader.next_float("orbit_t_min", "s")
    t_max = reader.next_float("orbit_t_max", "s")
    degree_token = reader.next_word("orbit_degree")
    try:
        degree = int(degree_token)
    except ValueError:
        raise ParseError(f"orbit_degree: bad integer {degree_token!r}",
                         path=source, line=reader.index) from None
    if not 0 <= degree <= 32:
        raise ParseError(f"orbit_degree {degree} out of range",
                         path=source, line=reader.index)
    coeffs = []
    for k in range(degree + 1):
        unit = "m" if k == 0 else ("m/s" if k == 1 else f"m/s^{k}")
        tokens = reader.next_fields(f"orbit_coeff_{k}", unit, 3)
        try:
            coeffs.append([float(t) for t in tokens])
        except ValueError:
            reader.index -= 1
            reader.fail(f"orbit_coeff_{k}: bad number")
    reader.done()
    try:
        orbit = OrbitModel(epoch, np.asarray(coeffs), t_min, t_max)
        geom = AcquisitionGeometry(orbit, prf, rsf, t_az_first, tau_rg_first,
                                   heading, incidence, look_side)
        return AcquisitionRecord(acq_id, geom, calibration)
    except ValidationError as exc:
        raise ParseError(str(exc), path=source) from None


def write_metadata(path, record: AcquisitionRecord) -> None:
    with open(path, "wb") as fh:
        fh.write(format_metadata(record))


def read_metadata(path) -> AcquisitionRecord:
    try:
        data = open(path, "rb").read()
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from None
    return parse_metadata(data, source=str(path))


# ---------------------------------------------------------------------------
# Raster tiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RasterTile:
    """A dense raster block with its full-image pixel origin.

    data is (height, width), float32 for detectors (amplitudes, ratios) or
    complex64 for SLC chips.
    """

    data: np.ndarray
    first_line: int
    first_sample: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.dtype not in _RASTER_CODES:
            if arr.dtype == np.float64:
                arr = np.ascontiguousarray(arr.astype("<f4"))
            elif arr.dtype == np.complex128:
                arr = np.ascontiguousarray(arr.astype("<c8"))
            else:
                raise ValidationError(
                    f"raster dtype must be float32 or complex64, got {arr.dtype}")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError("raster must be 2-D and non-empty")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def format_raster_tile(tile: RasterTile) -> bytes:
    header = _RASTER_HEADER.pack(
        _RASTER_MAGIC, _RASTER_VERSION, _RASTER_CODES[tile.data.dtype],
        tile.width, tile.height, tile.first_line, tile.first_sample)
    return header + tile.data.tobytes("C")


def parse_raster_tile(data: bytes, source: str = "<memory>") -> RasterTile:
    if len(data) < _RASTER_HEADER.size:
        raise ParseError(
            f"raster header needs {_RASTER_HEADER.size} bytes, got {len(data)}",
            path=source, offset=len(data))
    magic, version, code, width, height, first_line, first_sample = \
        _RASTER_HEADER.unpack_from(data)
    if magic != _RASTER_MAGIC:
        raise ParseError(f"bad raster magic {magic!r}", path=source, offset=0)
    if version != _RASTER_VERSION:
        raise ParseError(f"unsupported raster version {version}",
                         path=source, offset=4)
    if code not in _RASTER_DTYPES:
        raise ParseError(f"unknown raster dtype code {code}",
                         path=source, offset=6)
    if width < 1 or height < 1:
        raise ParseError("raster dimensions must be positive",
                         path=source, offset=8)
    dtype = _RASTER_DTYPES[code]
    want = width * height * dtype.itemsize
    got = len(data) - _RASTER_HEADER.size
    if got != want:
        raise ParseError(
            f"payload is {got} bytes, header declares {want}",
            path=source, offset=_RASTER_HEADER.size + min(got, want))
    arr = np.frombuffer(data, dtype=dtype, count=width * height,
                        offset=_RASTER_HEADER.size).reshape(height, width)
    return RasterTile(arr.copy(), first_line, first_sample)


def write_raster_tile(path, tile: RasterTile) -> None:
    with open(path, "wb") as fh:
        fh.write(format_raster_tile(tile))


def read_raster_tile(path) -> RasterTile:
    try:
        data = open(path, "rb").read()
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from None
    return parse_raster_tile(data, source=str(path))


# ---------------------------------------------------------------------------
# Point tables
# ---------------------------------------------------------------------------

_TYPE_PARSERS = {
    "str": lambda t: t,
    "int": int,
    "float": float,
}

_TYPE_CHECKS = {
    "str": lambda v: isinstance(v, str),
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, float),
}


def _format_cell(value, kind: str) -> str:
    if kind == "float":
        # float subclasses (numpy scalars) must not leak their own repr
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class PointTable:
    """Tab-separated rows under a declared (name, type) schema.

    The one interchange shape for point clouds, candidate lists, noise
    series, and solution tables.
    """

    schema: tuple[tuple[str, str], ...]
    rows: tuple[tuple, ...] = ()

    def __post_init__(self):
        schema = tuple((str(n), str(t)) for n, t in self.schema)
        if not schema:
            raise ValidationError("schema must declare at least one column")
        names = [n for n, _ in schema]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate column names")
        for name, kind in schema:
            if not _NAME_RE.match(name):
                raise ValidationError(f"bad column name {name!r}")
            if kind not in _TABLE_TYPES:
                raise ValidationError(f"unknown column type {kind!r}")
        rows = []
        for r, row in enumerate(self.rows):
            row = tuple(row)
            if len(row) != len(schema):
                raise ValidationError(
                    f"row {r} has {len(row)} fields, schema has {len(schema)}")
            for value, (name, kind) in zip(row, schema):
                if not _TYPE_CHECKS[kind](value):
                    raise ValidationError(
                        f"row {r} column {name!r}: {value!r} is not {kind}")
                if kind == "str" and re.search(r"[\t\n\r]", value):
                    raise ValidationError(
                        f"row {r} column {name!r}: control characters")
            rows.append(row)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "rows", tuple(rows))

    def __len__(self) -> int:
        return len(self.rows)

    def column_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.schema)

    def column(self, name: str) -> tuple:
        names = self.column_names()
        if name not in names:
            raise KeyError(name)
        idx = names.index(name)
        return tuple(row[idx] for row in self.rows)

    def with_rows(self, rows) -> "PointTable":
        return PointTable(self.schema, tuple(rows))

    def to_dicts(self) -> list[dict]:
        names = self.column_names()
        return [dict(zip(names, row)) for row in self.rows]


def format_point_table(table: PointTable) -> bytes:
    lines = ["\t".join(f"{n}:{t}" for n, t in table.schema)]
    for row in table.rows:
        lines.append("\t".join(_format_cell(v, t)
                               for v, (_, t) in zip(row, table.schema)))
    lines.append(f"# rows: {len(table.rows)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_point_table(data: bytes, source: str = "<memory>") -> PointTable:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not valid UTF-8: {exc}", path=source) from None
    if not text.endswith("\n"):
        raise ParseError("file must end with a newline", path=source)
    lines = text.split("\n")[:-1]
    if len(lines) < 2:
        raise ParseError("need a schema row and a row-count footer",
                         path=source, line=1)
    schema = []
    for i, cell in enumerate(lines[0].split("\t")):
        name, sep, kind = cell.partition(":")
        if not sep:
            raise ParseError(f"schema cell {i} missing ':' in {cell!r}",
                             path=source, line=1)
        schema.append((name, kind))
    footer = lines[-1]
    m = re.fullmatch(r"# rows: (\d+)", footer)
    if not m:
        raise ParseError(f"bad row-count footer {footer!r}",
                         path=source, line=len(lines))
    declared = int(m.group(1))
    body = lines[1:-1]
    if len(body) != declared:
        raise ParseError(
            f"footer declares {declared} rows, found {len(body)}",
            path=source, line=len(lines))
    rows = []
    for r, line in enumerate(body):
        cells = line.split("\t")
        if len(cells) != len(schema):
            raise ParseError(
                f"row has {len(cells)} fields, schema has {len(schema)}",
                path=source, line=r + 2)
        row = []
        for cell, (name, kind) in zip(cells, schema):
            parser = _TYPE_PARSERS.get(kind)
            if parser is None:
                raise ParseError(f"unknown column type {kind!r}",
                                 path=source, line=1)
            try:
                row.append(parser(cell))
            except ValueError:
                raise ParseError(
                    f"column {name!r}: bad {kind} {cell!r}",
                    path=source, line=r + 2) from None
        rows.append(tuple(row))
    try:
        return PointTable(tuple(schema), tuple(rows))
    except ValidationError as exc:
        raise ParseError(str(exc), path=source, line=1) from None


def write_point_table(path, table: PointTable) -> None:
    with open(path, "wb") as fh:
        fh.write(format_point_table(table))


def read_point_table(path) -> PointTable:
    try:
        data = open(path, "rb").read()
    except OSError as exc:
        raise ParseError(str(exc), path=str(path)) from None
    return parse_point_table(data, source=str(path))
