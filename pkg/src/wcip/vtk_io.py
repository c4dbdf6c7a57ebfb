"""Legacy ASCII VTK writers for inspection in standard viewers.

Only the unstructured-grid flavour (POINTS / CELLS type 10) is emitted;
it is dependency-free and every mainstream viewer reads it.
"""
from __future__ import annotations

import numpy as np

__all__ = ["write_unstructured_grid"]


def write_unstructured_grid(path, vertices, tets, point_data=None,
                            cell_data=None, title="wcip output"):
    """Write a tetrahedral mesh with optional nodal/cell fields.

    ``point_data`` and ``cell_data`` map field names to arrays of shape
    (n,) for scalars or (n, 3) for vectors.
    """
    vertices = np.asarray(vertices, dtype=float)
    tets = np.asarray(tets, dtype=np.int64)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {len(vertices)} double",
    ]
    for p in vertices:
        lines.append(f"{p[0]:.12g} {p[1]:.12g} {p[2]:.12g}")
    lines.append(f"CELLS {len(tets)} {5 * len(tets)}")
    for t in tets:
        lines.append(f"4 {t[0]} {t[1]} {t[2]} {t[3]}")
    lines.append(f"CELL_TYPES {len(tets)}")
    lines.extend(["10"] * len(tets))

    def emit_fields(fields, n, header):
        lines.append(f"{header} {n}")
        for name, arr in fields.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{v:.12g}" for v in arr)
            elif arr.ndim == 2 and arr.shape[1] == 3:
                lines.append(f"VECTORS {name} double")
                lines.extend(
                    f"{v[0]:.12g} {v[1]:.12g} {v[2]:.12g}" for v in arr
                )
            else:
                raise ValueError(f"field {name!r} has unsupported shape "
                                 f"{arr.shape}")

    if point_data:
        emit_fields(point_data, len(vertices), "POINT_DATA")
    if cell_data:
        emit_fields(cell_data, len(tets), "CELL_DATA")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
