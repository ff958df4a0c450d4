"""
JSON run configuration and field output (CSV and legacy VTK).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigurationError, OutputError
from .materials import (DEFAULT_LAW_PARAMS, MaterialLaws, PhysicalConstants, ValidationReport,
                        build_laws, validate_assumptions)
from .microstructure import CellRaster, UnitCellGeometry, rasterize
from .solver import TimeStepConfig

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POSINT = {"type": "integer", "minimum": 1}


def _object(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


CONFIG_SCHEMA = _object({
    "geometry": _object({
        "kind": {"enum": ["disk_inclusion", "laminate", "checkerboard", "uniform", "raster_file"]},
        "radius": _NUM,
        "normal_axis": {"enum": ["x", "y"]},
        "cement_fraction": _NUM,
        "phase": {"enum": ["a", "c"]},
        "path": {"type": "string"},
    }, required=["kind"]),
    "raster_resolution": {"type": "integer", "minimum": 2},
    "constants": _object({k: _NUM for k in PhysicalConstants.__dataclass_fields__}),
    "laws": {"type": "object"},
    "grid": _object({"resolution": _POSINT, "cell_resolution": _POSINT}, required=["resolution"]),
    "time": _object({
        "h": _POS, "n_steps": {"type": "integer", "minimum": 0}, "tol_p": _POS,
        "max_iter": _POSINT, "linear_rel_tol": _POS, "damping": _POS,
        "peclet_limit": _POS, "kirchhoff_cells": _POSINT,
    }, required=["h", "n_steps"]),
    "initial": _object({"p0": _NUM, "theta0": _NUM}),
    "epsilon": _POS,
    "sweep": _object({
        "epsilons": {"type": "array", "items": _POS, "minItems": 1},
        "resolutions": {"type": "array", "items": _POSINT, "minItems": 1},
        "macro_resolution": _POSINT,
    }, required=["epsilons", "resolutions"]),
    "output": _object({
        "directory": {"type": "string"},
        "format": {"enum": ["csv", "vtk_legacy"]},
        "every": _POSINT,
    }),
    "seed": {"type": "integer"},
    "n_samples": {"type": "integer", "minimum": 100},
}, required=["geometry", "grid", "time"])


@dataclass
class RunConfig:
    raw: dict
    source: Path | None
    digest: str
    geometry: UnitCellGeometry
    raster: CellRaster
    constants: PhysicalConstants
    laws: MaterialLaws
    resolution: int
    cell_resolution: int
    step: TimeStepConfig
    n_steps: int
    p0: float
    theta0: float
    epsilon: float
    sweep: dict | None
    output_dir: Path
    output_format: str
    output_every: int
    seed: int
    validation: ValidationReport | None = field(default=None, repr=False)


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def load_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno} "
                                 f"(char {exc.pos}): {exc.msg}") from None


def config_from_dict(data: dict, source=None, digest: str = "", validate: bool = True) -> RunConfig:
    """Schema-check, build laws and constants, then run the assumption checks."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        raise ConfigurationError(err.message, pointer=_pointer(err.absolute_path))
    base = Path(source).parent if source else Path.cwd()
    gdata = dict(data["geometry"])
    if gdata.get("path") and not Path(gdata["path"]).is_absolute():
        gdata["path"] = str(base / gdata["path"])
    try:
        geometry = UnitCellGeometry(**gdata)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), pointer="/geometry") from None
    m = data.get("raster_resolution", 8)
    raster = rasterize(geometry, m)
    constants = PhysicalConstants(**data.get("constants", {}))
    unknown = set(data.get("laws", {})) - set(DEFAULT_LAW_PARAMS) - {"bounds"}
    if unknown:
        raise ConfigurationError(f"unknown law families {sorted(unknown)}", pointer="/laws")
    try:
        laws = build_laws(data.get("laws"), constants)
    except TypeError as exc:
        raise ConfigurationError(f"bad law parameter: {exc}", pointer="/laws") from None
    tdata = dict(data["time"])
    n_steps = tdata.pop("n_steps")
    try:
        step = TimeStepConfig(**tdata)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), pointer="/time") from None
    init = data.get("initial", {})
    out = data.get("output", {})
    report = None
    if validate:
        report = validate_assumptions(laws, constants, n_samples=data.get("n_samples", 1000))
    return RunConfig(
        raw=data, source=Path(source) if source else None, digest=digest,
        geometry=geometry, raster=raster, constants=constants, laws=laws,
        resolution=data["grid"]["resolution"],
        cell_resolution=data["grid"].get("cell_resolution", 4 * m),
        step=step, n_steps=n_steps,
        p0=init.get("p0", 0.2 * constants.p_inf), theta0=init.get("theta0", constants.theta_inf),
        epsilon=data.get("epsilon", 1.0), sweep=data.get("sweep"),
        output_dir=Path(out.get("directory", "hygrohom_out")),
        output_format=out.get("format", "csv"), output_every=out.get("every", 1),
        seed=data.get("seed", 0), validation=report,
    )


def parse_config(path, validate: bool = True) -> RunConfig:
    """Read, schema-validate and assumption-validate a JSON run configuration."""
    data = load_json(path)
    if not isinstance(data, dict):
        raise ConfigurationError("top-level JSON value must be an object", pointer="/")
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return config_from_dict(data, source=path, digest=digest, validate=validate)


def example_config_path() -> Path:
    return Path(__file__).parent / "data" / "example_config.json"


# --------------------------------------------------------------------------
# snapshots


@dataclass(frozen=True)
class FieldSnapshot:
    nx: int
    ny: int
    time: float
    name: str
    values: np.ndarray
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != ((self.nx + 1) * (self.ny + 1),):
            raise ConfigurationError(
                f"snapshot {self.name!r}: {v.size} values do not fit a {self.nx}x{self.ny} element grid")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_grid(cls, grid, time, name, values):
        return cls(grid.nx, grid.ny, float(time), name, values, grid.lx, grid.ly)


def _fmt(v) -> str:
    return format(float(v), ".17g")


def emit_snapshot(snap: FieldSnapshot, path, fmt: str = "csv") -> Path:
    """Write a nodal field as CSV ("x,y,value", x fastest) or legacy VTK."""
    path = Path(path)
    hx, hy = snap.lx / snap.nx, snap.ly / snap.ny
    if fmt == "csv":
        iy, ix = np.divmod(np.arange(snap.values.size), snap.nx + 1)
        lines = ["x,y,value"]
        lines += [f"{_fmt(i * hx)},{_fmt(j * hy)},{_fmt(v)}" for i, j, v in zip(ix, iy, snap.values)]
        text = "\n".join(lines) + "\n"
    elif fmt == "vtk_legacy":
        head = [
            "# vtk DataFile Version 3.0",
            f"{snap.name} t={_fmt(snap.time)}",
            "ASCII",
            "DATASET STRUCTURED_POINTS",
            f"DIMENSIONS {snap.nx + 1} {snap.ny + 1} 1",
            "ORIGIN 0 0 0",
            f"SPACING {_fmt(hx)} {_fmt(hy)} 1",
            f"POINT_DATA {snap.values.size}",
            f"SCALARS {snap.name} double 1",
            "LOOKUP_TABLE default",
        ]
        text = "\n".join(head + [_fmt(v) for v in snap.values]) + "\n"
    else:
        raise ConfigurationError(f"unknown snapshot format {fmt!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from None
    return path


def read_csv_snapshot(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the CSV writer: returns (coordinates (N, 2), values (N,))."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :2], data[:, 2]


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc.strerror}") from None
    return path
