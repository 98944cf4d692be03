"""Zone means, time averages, plume centroids and file export (VTK, CSV)."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import fem
from .mesh import Mesh


class EmptyZone(ValueError):
    pass


class TooFewSamples(ValueError):
    pass


class IoFailure(OSError):
    pass


def spatial_mean(mesh: Mesh, phi, triangles=None) -> float:
    """(1/|Ω_k|) ∫_{Ω_k} φ over the given triangles (exact for P1 fields)."""
    if triangles is not None:
        triangles = np.asarray(triangles)
        if triangles.size == 0:
            raise EmptyZone("zone has no triangles")
    area = mesh.areas if triangles is None else mesh.areas[triangles]
    return fem.integrate(mesh, phi, triangles) / math.fsum(area)


def weighted_integral(mesh: Mesh, c, phi) -> float:
    """Exact ∫ c φ for P1 fields c and φ (the mass 1ᵀ M_c φ)."""
    ct = fem.scalar_coeff(mesh, c)[mesh.triangles]
    ft = fem.scalar_coeff(mesh, phi)[mesh.triangles]
    # ∫_K c φ = |K|/12 (Σc Σφ + Σ cφ)
    return math.fsum(mesh.areas / 12.0 * (ct.sum(1) * ft.sum(1) + (ct * ft).sum(1)))


def time_mean(times, values) -> float:
    """Trapezoid-rule time average (1/T)∫ φ dt over the sampled interval."""
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.size < 2:
        raise TooFewSamples("a time average needs at least two samples")
    if t.shape != y.shape:
        raise ValueError("times and values differ in length")
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample times must be strictly increasing")
    span = t[-1] - t[0]
    return math.fsum(0.5 * np.diff(t) * (y[1:] + y[:-1])) / span


@dataclass(frozen=True, eq=False)
class ZoneSeries:
    zone: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("sample times must be strictly increasing")

    @property
    def average(self) -> float:
        return time_mean(self.times, self.values)


def zone_series(times, zone_means: Mapping[str, Sequence[float]]) -> list[ZoneSeries]:
    t = np.asarray(times, dtype=np.float64)
    return [ZoneSeries(k, t, np.asarray(v, dtype=np.float64)) for k, v in zone_means.items()]


def centroid(mesh: Mesh, phi) -> np.ndarray:
    """Mass centroid ∫ x φ / ∫ φ of a nonnegative field."""
    phi = np.asarray(phi, dtype=np.float64)
    total = fem.integrate(mesh, phi)
    if total <= 0:
        raise ValueError("field has no positive mass")
    # ∫ x φ for P1 x and φ: |K|/12 (Σx Σφ + Σ xφ)
    x = mesh.nodes[mesh.triangles]
    f = phi[mesh.triangles]
    w = mesh.areas / 12.0
    out = []
    for d in range(2):
        xd = x[:, :, d]
        out.append(math.fsum(w * (xd.sum(1) * f.sum(1) + (xd * f).sum(1))) / total)
    return np.array(out)


# ---------------------------------------------------------------- VTK

def write_vtk(path, mesh: Mesh, point_data: Mapping[str, np.ndarray] | None = None,
              title: str = "porous_city") -> None:
    """Legacy VTK 2.0 ASCII unstructured grid; (n,) arrays become SCALARS,
    (n, 2) arrays VECTORS with z = 0."""
    point_data = dict(point_data or {})
    n, nt = mesh.n_nodes, mesh.n_triangles
    buf = io.StringIO()
    buf.write("# vtk DataFile Version 2.0\n")
    buf.write(title.replace("\n", " ")[:255] + "\n")
    buf.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    buf.write(f"POINTS {n} double\n")
    for x, y in mesh.nodes:
        buf.write(f"{x!r} {y!r} 0\n")
    buf.write(f"CELLS {nt} {4 * nt}\n")
    for a, b, c in mesh.triangles:
        buf.write(f"3 {a} {b} {c}\n")
    buf.write(f"CELL_TYPES {nt}\n")
    buf.write("5\n" * nt)
    if point_data:
        buf.write(f"POINT_DATA {n}\n")
    for name, arr in point_data.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.replace(" ", "_")
        if arr.shape == (n,):
            buf.write(f"SCALARS {key} double 1\nLOOKUP_TABLE default\n")
            buf.writelines(f"{v!r}\n" for v in arr)
        elif arr.shape == (n, 2):
            buf.write(f"VECTORS {key} double\n")
            buf.writelines(f"{a!r} {b!r} 0\n" for a, b in arr)
        else:
            raise ValueError(f"field {name!r} has shape {arr.shape}, not a nodal field")
    try:
        Path(path).write_text(buf.getvalue(), encoding="ascii", newline="\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_vtk_counts(path) -> tuple[int, int]:
    """(points, cells) declared in a legacy VTK file."""
    points = cells = -1
    for line in Path(path).read_text().splitlines():
        if line.startswith("POINTS"):
            points = int(line.split()[1])
        elif line.startswith("CELLS"):
            cells = int(line.split()[1])
    return points, cells


# ---------------------------------------------------------------- CSV

def format_csv(times, columns: Mapping[str, Sequence[float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_h", *columns.keys()])
    cols = [np.asarray(v, dtype=np.float64) for v in columns.values()]
    for k, t in enumerate(times):
        w.writerow(["%.6e" % t] + ["%.6e" % c[k] for c in cols])
    return buf.getvalue()


def write_csv(path, times, columns: Mapping[str, Sequence[float]]) -> None:
    try:
        Path(path).write_text(format_csv(times, columns), encoding="ascii", newline="\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_csv(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "time_h":
        raise IoFailure(f"{path}: not a zone series CSV")
    head = rows[0][1:]
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(head) + 1)
    return data[:, 0].copy(), {h: data[:, i + 1].copy() for i, h in enumerate(head)}


def upsert_summary(path, label: str, values: Mapping[str, float]) -> None:
    """Insert or replace the row ``label`` of a summary CSV (one row per
    configuration, one column per zone).  Column order is kept from the first
    writer; new zones are appended."""
    path = Path(path)
    header: list[str] = []
    rows: dict[str, dict[str, str]] = {}
    if path.exists():
        with open(path, newline="") as fh:
            r = list(csv.reader(fh))
        if r:
            header = r[0][1:]
            for row in r[1:]:
                rows[row[0]] = dict(zip(header, row[1:]))
    for k in values:
        if k not in header:
            header.append(k)
    rows[label] = {k: "%.6e" % float(v) for k, v in values.items()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["configuration", *header])
    for lab, vals in rows.items():
        w.writerow([lab] + [vals.get(h, "") for h in header])
    try:
        path.write_text(buf.getvalue(), encoding="ascii", newline="\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def read_summary(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        r = list(csv.reader(fh))
    header = r[0][1:]
    return {row[0]: {h: float(v) for h, v in zip(header, row[1:]) if v != ""} for row in r[1:]}
