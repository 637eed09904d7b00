"""Permeability rasters, synthetic media and output files.

Raster text format: a four-line header followed by whitespace-separated
numbers::

    nx 64
    ny 64
    layout row-major
    scale linear

``row-major`` lists one row of constant y per line with x varying fastest,
starting at the bottom row; ``column-major`` has y varying fastest.
``log10`` files store ``log10(K)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ModelError
from .grid import PrimalMesh

LAYOUTS = ("row-major", "column-major")
SCALES = ("linear", "log10")
TABLE_COLUMNS = ("Cells", "h", "err_l1", "order_l1", "err_l2", "order_l2", "err_linf", "order_linf")
ELLIPTIC_COLUMNS = ("degree", "h", "E_FEM", "E_HOCFEM", "J_FEM", "J_HOCFEM", "errL2", "errH1", "errL2corr")
MASS_COLUMNS = ("t", "h", "rel_mass_err")


# ---------------------------------------------------------------- rasters


@dataclass(frozen=True, eq=False)
class PermeabilityRaster:
    """Positive cell values ``values[i, j]`` (x index first) with a provenance note."""

    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or min(v.shape) < 1:
            raise ModelError(f"raster must be a non-empty 2D array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ModelError("raster contains non-finite values")
        if np.any(v <= 0):
            k = np.argwhere(v <= 0)[0]
            raise ModelError(f"raster value {v[tuple(k)]} at {tuple(int(a) for a in k)} is not positive")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def contrast(self) -> float:
        return float(self.values.max() / self.values.min())

    def element_values(self):
        """Values in primal element order ``i + nx * j``."""
        return self.values.ravel(order="F")

    def resample(self, nx: int, ny: int) -> "PermeabilityRaster":
        """Block-constant map onto an ``nx x ny`` mesh covering the same rectangle.

        Each target cell gets the area-weighted mean of the raster cells it
        overlaps, so refinement repeats values and coarsening averages blocks.
        """
        if (nx, ny) == self.shape:
            return self

        def overlap(n_src, n_dst):
            src = np.linspace(0.0, 1.0, n_src + 1)
            dst = np.linspace(0.0, 1.0, n_dst + 1)
            lo = np.maximum(src[:-1][None, :], dst[:-1][:, None])
            hi = np.minimum(src[1:][None, :], dst[1:][:, None])
            W = np.maximum(hi - lo, 0.0)
            return W / W.sum(axis=1, keepdims=True)

        Wx = overlap(self.shape[0], nx)
        Wy = overlap(self.shape[1], ny)
        return PermeabilityRaster(Wx @ self.values @ Wy.T, f"{self.provenance} resampled to {nx}x{ny}")


def _read_header(lines, path):
    head = {}
    for k, line in enumerate(lines[:4]):
        parts = line.split()
        if len(parts) != 2:
            raise ConfigurationError(f"{path}: header line {k + 1} must be 'key value', got {line.strip()!r}")
        head[parts[0].lower()] = parts[1].lower()
    missing = {"nx", "ny", "layout", "scale"} - set(head)
    if missing:
        raise ConfigurationError(f"{path}: header lacks {sorted(missing)}")
    try:
        nx, ny = int(head["nx"]), int(head["ny"])
    except ValueError:
        raise ConfigurationError(f"{path}: nx/ny must be integers") from None
    return nx, ny, head["layout"], head["scale"]


def load_raster(path, layout: str | None = None, scale: str | None = None, shape=None) -> PermeabilityRaster:
    """Read a raster file.

    Args:
        layout, scale: override or, for header-less files, supply the layout
            and scale; they must agree with the header when both are given.
        shape: ``(nx, ny)`` for header-less files.

    Raises:
        OSError: the file cannot be read (message names the path).
        ConfigurationError: malformed header, unknown layout/scale, wrong count.
        ModelError: a decoded value is not positive and finite.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read raster {path}: {exc.strerror or exc}") from exc
    lines = text.splitlines()
    has_header = bool(lines) and lines[0].split()[:1] == ["nx"]
    if has_header:
        nx, ny, h_layout, h_scale = _read_header(lines, path)
        for name, given, found in (("layout", layout, h_layout), ("scale", scale, h_scale)):
            if given is not None and given != found:
                raise ConfigurationError(f"{path}: {name} {given!r} conflicts with header {found!r}")
        layout, scale = h_layout, h_scale
        body = "\n".join(lines[4:])
    else:
        if shape is None:
            raise ConfigurationError(f"{path}: no header; pass shape=(nx, ny)")
        nx, ny = shape
        body = text
    layout = layout or "row-major"
    scale = scale or "linear"
    if layout not in LAYOUTS:
        raise ConfigurationError(f"{path}: layout must be one of {LAYOUTS}, got {layout!r}")
    if scale not in SCALES:
        raise ConfigurationError(f"{path}: scale must be one of {SCALES}, got {scale!r}")
    try:
        data = np.array(body.split(), dtype=float)
    except ValueError as exc:
        raise ConfigurationError(f"{path}: non-numeric entry ({exc})") from None
    if data.size != nx * ny:
        raise ConfigurationError(f"{path}: expected nx*ny = {nx}*{ny} = {nx * ny} values, found {data.size}")
    values = data.reshape(ny, nx).T if layout == "row-major" else data.reshape(nx, ny)
    if scale == "log10":
        values = 10.0**values
    return PermeabilityRaster(values, f"{path.name} ({layout}, {scale})")


def save_raster(raster: PermeabilityRaster, path, layout: str = "row-major", scale: str = "linear"):
    """Write a raster in the header format; values round-trip exactly."""
    if layout not in LAYOUTS or scale not in SCALES:
        raise ConfigurationError(f"bad layout/scale {layout!r}/{scale!r}")
    v = raster.values if scale == "linear" else np.log10(raster.values)
    nx, ny = raster.shape
    rows = v.T if layout == "row-major" else v
    with open(path, "w") as fh:
        fh.write(f"nx {nx}\nny {ny}\nlayout {layout}\nscale {scale}\n")
        for row in rows:
            fh.write(" ".join(repr(float(a)) for a in row) + "\n")
    return Path(path)


# ---------------------------------------------------------------- synthetic media


def barrier_field(mesh: PrimalMesh, strip, contrast: float) -> PermeabilityRaster:
    """``K = 1`` except ``1/contrast`` on elements whose centre lies in ``strip = (x0, x1, y0, y1)``."""
    x0, x1, y0, y1 = (float(a) for a in strip)
    if contrast < 1:
        raise ConfigurationError(f"contrast must be >= 1, got {contrast}")
    if not (0 <= x0 <= x1 <= mesh.Lx and 0 <= y0 <= y1 <= mesh.Ly):
        raise ConfigurationError(f"strip {strip} is not inside the domain [0, {mesh.Lx}] x [0, {mesh.Ly}]")
    xc = (np.arange(mesh.nx) + 0.5) * mesh.hx
    yc = (np.arange(mesh.ny) + 0.5) * mesh.hy
    inside = ((xc >= x0) & (xc < x1))[:, None] & ((yc >= y0) & (yc < y1))[None, :]
    K = np.where(inside, 1.0 / contrast, 1.0)
    return PermeabilityRaster(K, f"barrier strip {strip}, contrast {contrast:g}")


def lognormal_field(nx: int, ny: int, sigma: float = 2.5, corr: float = 4.0, seed: int = 0) -> PermeabilityRaster:
    """Correlated log-normal field ``exp(sigma z)``, ``z`` a unit-variance Gaussian field.

    ``corr`` is the Gaussian correlation length in cells.
    """
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((nx, ny))
    kx = np.fft.fftfreq(nx)[:, None]
    ky = np.fft.fftfreq(ny)[None, :]
    filt = np.exp(-2 * (np.pi * corr) ** 2 * (kx**2 + ky**2))
    z = np.real(np.fft.ifft2(np.fft.fft2(white) * filt))
    z = (z - z.mean()) / z.std()
    return PermeabilityRaster(np.exp(sigma * z), f"log-normal surrogate sigma={sigma} corr={corr} seed={seed}")


# ---------------------------------------------------------------- writers


def write_matrix_csv(path, values, **meta):
    """Cell matrix as CSV: ``# {json}`` header (nx, ny and ``meta``), then one row of constant y per line (bottom first)."""
    v = np.asarray(values, dtype=float)
    nx, ny = v.shape
    head = {"nx": nx, "ny": ny, **meta}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(head, default=_json_default) + "\n")
        w = csv.writer(fh)
        for row in v.T:
            w.writerow([repr(float(a)) for a in row])
    return Path(path)


def read_matrix_csv(path):
    """Inverse of :func:`write_matrix_csv`; returns ``(values[i, j], meta)``."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ConfigurationError(f"{path}: missing matrix header")
        meta = json.loads(first[2:])
        rows = [list(map(float, r)) for r in csv.reader(fh) if r]
    v = np.array(rows, dtype=float).T
    if v.shape != (meta["nx"], meta["ny"]):
        raise ConfigurationError(f"{path}: data shape {v.shape} does not match header {meta['nx']}x{meta['ny']}")
    return v, meta


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return x


def write_table_csv(path, rows, columns):
    """Rows (dicts) as CSV with exactly ``columns``; NaN becomes an empty field."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return Path(path)


def read_table_csv(path):
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return rd.fieldnames, list(rd)


def write_vtk_rectilinear(path, x_edges, y_edges, cell_data: dict, title: str = "conservflow"):
    """Legacy ASCII VTK rectilinear grid with cell data (arrays indexed ``[i, j]``)."""
    xe, ye = np.asarray(x_edges, dtype=float), np.asarray(y_edges, dtype=float)
    nx, ny = len(xe) - 1, len(ye) - 1
    with open(path, "w") as fh:
        fh.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET RECTILINEAR_GRID\n")
        fh.write(f"DIMENSIONS {nx + 1} {ny + 1} 1\n")
        fh.write(f"X_COORDINATES {nx + 1} double\n" + " ".join(repr(float(a)) for a in xe) + "\n")
        fh.write(f"Y_COORDINATES {ny + 1} double\n" + " ".join(repr(float(a)) for a in ye) + "\n")
        fh.write("Z_COORDINATES 1 double\n0.0\n")
        fh.write(f"CELL_DATA {nx * ny}\n")
        for name, arr in cell_data.items():
            a = np.asarray(arr, dtype=float)
            if a.shape != (nx, ny):
                raise ConfigurationError(f"cell array {name!r} has shape {a.shape}, grid is {nx}x{ny}")
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.write("\n".join(repr(float(v)) for v in a.ravel(order="F")) + "\n")
    return Path(path)


# ---------------------------------------------------------------- run bundle and manifest


@dataclass
class OutputBundle:
    """Everything a run wants on disk.

    ``matrices`` maps a file stem to ``(values, meta)``, ``tables`` to
    ``(columns, rows)`` and ``vtk`` to ``(x_edges, y_edges, {name: array})``.
    """

    subcommand: str
    config: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    matrices: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    vtk: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    tolerances: dict
    files: list
    timings: dict
    report: dict = field(default_factory=dict)
    determinism: str = "no random seeds; identical config gives bitwise identical data files"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_json(Path(path).read_text())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


MANIFEST_NAME = "manifest.json"


def write_outputs(run: OutputBundle, out_dir) -> RunManifest:
    """Write every artifact of ``run`` under ``out_dir`` and a ``manifest.json`` listing them."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for stem, (values, meta) in sorted(run.matrices.items()):
            written.append(write_matrix_csv(out / f"{stem}.csv", values, **meta))
        for stem, (columns, rows) in sorted(run.tables.items()):
            written.append(write_table_csv(out / f"{stem}.csv", rows, columns))
        for stem, (xe, ye, data) in sorted(run.vtk.items()):
            written.append(write_vtk_rectilinear(out / f"{stem}.vtk", xe, ye, data))
    except OSError as exc:
        raise OSError(f"writing outputs to {out} failed: {exc}") from exc
    names = [p.name for p in written]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate output names in {out}")
    files = [{"path": p.name, "bytes": os.path.getsize(p), "sha256": file_digest(p)} for p in written]
    timings = dict(run.timings)
    timings["write_seconds"] = time.perf_counter() - t0
    manifest = RunManifest(run.subcommand, run.config, run.tolerances, files, timings, run.report)
    (out / MANIFEST_NAME).write_text(manifest.to_json())
    return manifest
