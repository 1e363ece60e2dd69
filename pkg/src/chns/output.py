"""Time-series CSV emission and legacy ASCII VTK field output."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .nodetable import NodeTable
from .octree import Octree

CSV_HEADER = ("time,TotalEnergy,TotalPhiMinusInit,Centroid,FrontTop,"
              "FrontBottom,CH_s,VP_s,PP_s,VU_s,Remesh_s")


def _fmt(x) -> str:
    return f"{float(x):.17g}"


class TimeSeriesWriter:
    """Streams one diagnostics row per time step at full double precision."""

    def __init__(self, path, initial_mass=0.0):
        self.initial_mass = float(initial_mass)
        self._fh = open(path, "w")
        self._fh.write(CSV_HEADER + "\n")
        self._fh.flush()

    def write_row(self, record):
        t = record.timings
        cols = [record.time, record.e_tot, record.mass - self.initial_mass,
                record.centroid, record.front_top, record.front_bottom,
                t.ch, t.vp, t.pp, t.vu, t.remesh]
        self._fh.write(",".join(_fmt(c) for c in cols) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_timeseries(path):
    """Parse a time-series CSV back into named float columns."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [list(map(float, ln.split(","))) for ln in fh if ln.strip()]
    data = np.asarray(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


# VTK cell reorderings from the corner-bit convention (axis 0 fastest).
_VTK_QUAD_PERM = (0, 1, 3, 2)
_VTK_HEX_PERM = (0, 1, 3, 2, 4, 5, 7, 6)


def write_vtk(tree: Octree, table: NodeTable, fields: dict, path):
    """Legacy ASCII VTK unstructured grid.

    Hanging positions are written as real points carrying owner-interpolated
    values, so every cell in the file is conforming.  ``fields`` maps array
    names to nodal data over the independent nodes; "velocity" is written as
    vectors, everything else as scalars.
    """
    d = tree.d
    n_indep = table.n_nodes
    n_pts = table.coords.shape[0]
    perm = _VTK_QUAD_PERM if d == 2 else _VTK_HEX_PERM
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("two-phase flow fields\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {n_pts} double\n")
        for c in table.coords:
            xyz = list(c) + [0.0] * (3 - d)
            fh.write(" ".join(_fmt(v) for v in xyz) + "\n")
        n_loc = 1 << d
        cells = table.elem_nodes_all[:, perm]
        fh.write(f"CELLS {tree.n_leaves} {tree.n_leaves * (n_loc + 1)}\n")
        for row in cells:
            fh.write(str(n_loc) + " " + " ".join(str(int(v)) for v in row) + "\n")
        fh.write(f"CELL_TYPES {tree.n_leaves}\n")
        ctype = 9 if d == 2 else 12
        fh.write("\n".join([str(ctype)] * tree.n_leaves) + "\n")
        fh.write(f"POINT_DATA {n_pts}\n")
        for name, data in fields.items():
            data = np.asarray(data, dtype=float)
            if name == "velocity":
                if data.shape != (n_indep, d):
                    raise ContractError("velocity field size mismatch")
                full = np.vstack([data, table.hanging_values(data.reshape(-1), d)])
                fh.write(f"VECTORS {name} double\n")
                for v in full:
                    xyz = list(v) + [0.0] * (3 - d)
                    fh.write(" ".join(_fmt(x) for x in xyz) + "\n")
            else:
                if data.shape != (n_indep,):
                    raise ContractError(f"field {name!r} size mismatch")
                full = np.concatenate([data, table.hanging_values(data)[:, 0]])
                fh.write(f"SCALARS {name} double 1\n")
                fh.write("LOOKUP_TABLE default\n")
                fh.write("\n".join(_fmt(v) for v in full) + "\n")


def read_vtk_points_and_fields(path):
    """Minimal reader for the files written above (round-trip tests)."""
    points, scalars, vectors = [], {}, {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    n_pts = 0
    while i < len(lines):
        ln = lines[i].split()
        if not ln:
            i += 1
            continue
        if ln[0] == "POINTS":
            n_pts = int(ln[1])
            vals = []
            i += 1
            while len(vals) < 3 * n_pts:
                vals.extend(float(v) for v in lines[i].split())
                i += 1
            points = np.asarray(vals).reshape(n_pts, 3)
            continue
        if ln[0] == "SCALARS":
            name = ln[1]
            i += 2  # skip LOOKUP_TABLE
            vals = []
            while len(vals) < n_pts:
                vals.extend(float(v) for v in lines[i].split())
                i += 1
            scalars[name] = np.asarray(vals)
            continue
        if ln[0] == "VECTORS":
            name = ln[1]
            i += 1
            vals = []
            while len(vals) < 3 * n_pts:
                vals.extend(float(v) for v in lines[i].split())
                i += 1
            vectors[name] = np.asarray(vals).reshape(n_pts, 3)
            continue
        i += 1
    return points, scalars, vectors
