"""
MetaImage volumes, JSON documents, cohort CSV files and TOML run configs.

MetaImage files are a text header (``.mhd``) plus a raw little-endian
binary file in x-fastest order. Header keys are matched
case-insensitively; keys this module does not interpret are kept in
order and written back unchanged.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from .cascade import CascadeConfig
from .enhance import VesselnessParams
from .metrics import CONVENTIONS
from .stats import INDICES, SubjectRecord
from .volume import LabelMask, VoxelGrid

ELEMENT_TYPES = {
    "MET_CHAR": np.dtype("<i1"),
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_INT": np.dtype("<i4"),
    "MET_UINT": np.dtype("<u4"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}
_TYPE_OF = {dt.newbyteorder("="): name for name, dt in ELEMENT_TYPES.items()}

# keys this module writes itself, canonical spelling, in output order
_MANAGED = ("ObjectType", "NDims", "BinaryData", "BinaryDataByteOrderMSB", "CompressedData",
            "Offset", "ElementSpacing", "DimSize", "ElementType", "ElementDataFile")
_CANON = {k.lower(): k for k in _MANAGED}
_ALIASES = {"elementbyteordermsb": "binarydatabyteordermsb", "origin": "offset",
            "position": "offset"}
UNITS_KEY = "VasqUnits"


class FormatError(ValueError):
    """Malformed or inconsistent MetaImage file."""


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple
    origin: tuple
    element_type: str
    header: dict = field(default_factory=dict)  # unmanaged keys, original spelling and order

    def grid(self, units: str | None = None) -> VoxelGrid:
        units = units or self.header.get(UNITS_KEY, "HU")
        meta = {"mhd_header": {k: v for k, v in self.header.items() if k != UNITS_KEY}}
        return VoxelGrid(self.voxels, spacing=self.spacing, origin=self.origin, units=units, meta=meta)

    def mask(self) -> LabelMask:
        return LabelMask(self.voxels, spacing=self.spacing, origin=self.origin,
                         meta={"mhd_header": dict(self.header)})


def _fmt(values) -> str:
    # repr of a Python float is the shortest string that parses back exactly
    return " ".join(repr(float(v)) for v in values)


def parse_header(text: str) -> tuple[dict, dict]:
    """Split a header into interpreted fields (lower-case keys) and the rest."""
    managed, extra = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"header line {lineno} has no '=': {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        low = _ALIASES.get(key.lower(), key.lower())
        if low in _CANON:
            managed[low] = value
        else:
            extra[key] = value
    return managed, extra


def _numbers(managed: dict, key: str, kind, default=None) -> tuple:
    if key not in managed:
        if default is None:
            raise FormatError(f"header is missing {_CANON[key]}")
        return default
    try:
        values = tuple(kind(v) for v in managed[key].split())
    except ValueError as exc:
        raise FormatError(f"{_CANON[key]} is not numeric: {managed[key]!r}") from exc
    if len(values) != 3:
        raise FormatError(f"{_CANON[key]} needs 3 values for a 3D image, got {len(values)}")
    return values


def read_volume(path) -> Volume:
    path = Path(path)
    text = path.read_bytes()
    # LOCAL data follows the ElementDataFile line inside the header file itself
    marker = text.lower().find(b"elementdatafile")
    eol = text.find(b"\n", marker) if marker >= 0 else -1
    header_text = text[: eol + 1 if eol >= 0 else len(text)].decode("ascii", errors="replace")
    managed, extra = parse_header(header_text)

    ndims = int(managed.get("ndims", "3"))
    if ndims != 3:
        raise FormatError(f"only 3D images are supported, NDims = {ndims}")
    if managed.get("compresseddata", "False").lower() == "true":
        raise FormatError("compressed MetaImage data is not supported")
    dims = _numbers(managed, "dimsize", int)
    spacing = _numbers(managed, "elementspacing", float, (1.0, 1.0, 1.0))
    origin = _numbers(managed, "offset", float, (0.0, 0.0, 0.0))
    etype = managed.get("elementtype", "").upper()
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"unsupported ElementType {etype!r}; expected one of {sorted(ELEMENT_TYPES)}")
    dtype = ELEMENT_TYPES[etype]
    if managed.get("binarydatabyteordermsb", "False").lower() == "true":
        dtype = dtype.newbyteorder(">")

    data_file = managed.get("elementdatafile")
    if data_file is None:
        raise FormatError("header is missing ElementDataFile")
    if data_file.upper() == "LOCAL":
        payload = text[eol + 1:] if eol >= 0 else b""
        source = f"{path} (LOCAL)"
    else:
        raw_path = path.parent / data_file
        if not raw_path.exists():
            raise FormatError(f"raw data file {raw_path} does not exist")
        payload = raw_path.read_bytes()
        source = str(raw_path)
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"{source}: expected {expected} bytes for DimSize {dims} of {etype} "
            f"({dtype.itemsize} bytes each), found {len(payload)} bytes")
    voxels = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    voxels = voxels.astype(dtype.newbyteorder("="), copy=True)
    return Volume(voxels, spacing, origin, etype, extra)


def element_type_for(array: np.ndarray) -> str:
    dt = np.asarray(array).dtype
    if dt == bool:
        return "MET_UCHAR"
    try:
        return _TYPE_OF[dt.newbyteorder("=")]
    except KeyError:
        raise FormatError(f"no MetaImage element type for dtype {dt}") from None


def write_volume(path, obj, element_type: str | None = None, header: dict | None = None) -> Path:
    """Write a VoxelGrid, LabelMask or Volume to ``path`` (.mhd) plus a .raw file.

    Without ``element_type`` (or a Volume's own) the array dtype decides, so any written
    volume reads back bit-identical. Unmanaged header keys carried in the
    object's metadata, then ``header``, are appended after the managed ones.
    """
    path = Path(path)
    if path.suffix.lower() != ".mhd":
        raise ValueError(f"MetaImage header path must end in .mhd: {path}")
    extra = {}
    if isinstance(obj, Volume):
        voxels, spacing, origin = obj.voxels, obj.spacing, obj.origin
        element_type = element_type or obj.element_type
        extra.update(obj.header)
    elif isinstance(obj, LabelMask):
        voxels, spacing, origin = obj.labels, obj.spacing, obj.origin
        extra.update(obj.meta.get("mhd_header", {}))
    elif isinstance(obj, VoxelGrid):
        voxels, spacing, origin = obj.voxels, obj.spacing, obj.origin
        extra.update(obj.meta.get("mhd_header", {}))
        extra[UNITS_KEY] = obj.units
    else:
        raise TypeError(f"cannot write {type(obj).__name__} as a volume")
    if spacing is None:
        raise ValueError("cannot write a grid without spacing")
    extra.update(header or {})
    for key in extra:
        if _ALIASES.get(key.lower(), key.lower()) in _CANON:
            raise ValueError(f"header key {key!r} is managed by the writer")

    voxels = np.asarray(voxels)
    if voxels.dtype == bool:
        voxels = voxels.astype(np.uint8)
    etype = (element_type or element_type_for(voxels)).upper()
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"unsupported ElementType {etype!r}")
    dtype = ELEMENT_TYPES[etype]
    if not np.can_cast(voxels.dtype, dtype, casting="same_kind"):
        raise ValueError(f"refusing to store {voxels.dtype} data as {etype}")
    data = voxels.astype(dtype, copy=False)
    if np.issubdtype(dtype, np.integer) and not np.array_equal(data, voxels):
        raise ValueError(f"values do not fit in {etype}")

    raw_path = path.with_suffix(".raw")
    lines = {
        "ObjectType": "Image",
        "NDims": "3",
        "BinaryData": "True",
        "BinaryDataByteOrderMSB": "False",
        "CompressedData": "False",
        "Offset": _fmt(origin),
        "ElementSpacing": _fmt(spacing),
        "DimSize": " ".join(str(int(n)) for n in voxels.shape),
        "ElementType": etype,
    }
    text = "".join(f"{k} = {v}\n" for k, v in lines.items())
    text += "".join(f"{k} = {v}\n" for k, v in extra.items())
    text += f"ElementDataFile = {raw_path.name}\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(data.tobytes(order="F"))
    path.write_text(text, encoding="ascii")
    return path


def read_grid(path, units: str | None = None) -> VoxelGrid:
    return read_volume(path).grid(units)


def read_mask(path) -> LabelMask:
    return read_volume(path).mask()


# ---------------------------------------------------------------------------
# JSON and CSV
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def dumps_json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_jsonable, allow_nan=True) + "\n"


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data), encoding="utf-8")
    return path


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


_COHORT_COLUMNS = ("id", "sex", "age", "lung_volume") + INDICES


def write_cohort_csv(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_COHORT_COLUMNS)
        for r in records:
            writer.writerow([r.id, r.sex] + [repr(float(getattr(r, c))) for c in _COHORT_COLUMNS[2:]])
    return path


def read_cohort_csv(path) -> list:
    records = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(_COHORT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: cohort file lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, 2):
            try:
                records.append(SubjectRecord(
                    id=row["id"], sex=int(row["sex"]),
                    **{c: float(row[c]) for c in _COHORT_COLUMNS[2:]}))
            except ValueError as exc:
                raise ValueError(f"{path}, line {lineno}: {exc}") from exc
    if not records:
        raise ValueError(f"{path}: cohort file has no rows")
    return records


def write_rows_csv(path, rows) -> Path:
    path = Path(path)
    columns = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    paths: dict = field(default_factory=dict)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    vesselness: VesselnessParams = field(default_factory=VesselnessParams)
    noise: dict = field(default_factory=lambda: {"n0": 1e4, "seed": 0})
    seeds: dict = field(default_factory=dict)
    conventions: dict = field(default_factory=lambda: dict(CONVENTIONS))

    def validate(self, base=".") -> "RunConfig":
        for name, p in self.paths.items():
            full = Path(base) / p
            if not full.exists():
                raise FileNotFoundError(f"config path {name!r} does not exist: {full}")
        if not float(self.noise.get("n0", 0)) > 0:
            raise ValueError(f"noise.n0 must be positive, got {self.noise.get('n0')}")
        return self

    def to_dict(self) -> dict:
        return {
            "paths": dict(self.paths),
            "cascade": self.cascade.to_dict(),
            "vesselness": {"scales": list(self.vesselness.scales), "alpha": self.vesselness.alpha,
                           "beta": self.vesselness.beta, "c": self.vesselness.c,
                           "bright": self.vesselness.bright},
            "noise": dict(self.noise),
            "seeds": dict(self.seeds),
            "conventions": dict(self.conventions),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "paths" in data:
            cfg.paths = {str(k): str(v) for k, v in data["paths"].items()}
        if "cascade" in data:
            cfg.cascade = CascadeConfig.from_dict(data["cascade"])
        if "vesselness" in data:
            v = dict(data["vesselness"])
            vf = {f.name for f in fields(VesselnessParams)}
            if set(v) - vf:
                raise ValueError(f"unknown vesselness keys: {sorted(set(v) - vf)}")
            if "scales" in v:
                v["scales"] = tuple(v["scales"])
            cfg.vesselness = VesselnessParams(**v)
        if "noise" in data:
            unknown = set(data["noise"]) - {"n0", "seed"}
            if unknown:
                raise ValueError(f"unknown noise keys: {sorted(unknown)}")
            cfg.noise = {**cfg.noise, **data["noise"]}
        if "seeds" in data:
            cfg.seeds = dict(data["seeds"])
        if "conventions" in data:
            cfg.conventions = {**cfg.conventions, **data["conventions"]}
        return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    with path.open("rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ValueError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(data).validate(base=path.parent)


def env_threads(default: int = 1) -> int:
    """Worker count from VASQ_THREADS (at least 1)."""
    value = os.environ.get("VASQ_THREADS")
    if value is None:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        raise ValueError(f"VASQ_THREADS must be an integer, got {value!r}") from None
