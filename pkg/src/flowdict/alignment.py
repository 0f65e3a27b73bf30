"""Block-matching alignment of tensor atoms to a tensor image.

For every atom ``n`` and grid position ``p`` the subatom inside the searching
window around ``p`` that is closest (Euclidean) to the image's vector pixel
``x_p`` is selected. Ties go to the smallest absolute grid index.
"""

from __future__ import annotations

import numba
import numpy as np

from .tensor import Dictionary, FlowField, GeometryError, TensorImage, WindowView


def best_match(window: WindowView, x) -> tuple[int, float]:
    """Closest window column to ``x``.

    Returns the absolute grid index of the winner and its Euclidean distance.
    """
    cols = np.asarray(window.columns, dtype=np.float64)
    idx = np.asarray(window.absolute_indices)
    if cols.ndim != 2 or cols.shape[1] == 0:
        raise ValueError("empty searching window")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cols.shape[0],):
        raise GeometryError("vector pixel length does not match the subatoms")
    diff = cols - x[:, None]
    dist2 = (diff * diff).sum(axis=0)
    # lexsort: last key is primary
    j = np.lexsort((idx, dist2))[0]
    return int(idx[j]), float(np.sqrt(dist2[j]))


@numba.njit(cache=True, nogil=True)
def _block_match(atoms, x, rows, cols, half):
    n_atoms, m_dim, _ = atoms.shape
    n_pos = rows * cols
    selected = np.empty((n_atoms, n_pos), np.int64)
    dist2 = np.empty((n_atoms, n_pos), np.float64)
    for n in range(n_atoms):
        for r in range(rows):
            for c in range(cols):
                p = r * cols + c
                best = np.inf
                best_q = p
                # row-major scan visits candidates in increasing q, so a
                # strict comparison keeps the smallest index on ties
                for rr in range(max(r - half, 0), min(r + half, rows - 1) + 1):
                    for cc in range(max(c - half, 0), min(c + half, cols - 1) + 1):
                        q = rr * cols + cc
                        s = 0.0
                        for m in range(m_dim):
                            d = atoms[n, m, q] - x[m, p]
                            s += d * d
                        if s < best:
                            best = s
                            best_q = q
                selected[n, p] = best_q
                dist2[n, p] = best
    return selected, dist2


def align(dictionary: Dictionary, x: TensorImage, window_side: int
          ) -> tuple[FlowField, np.ndarray]:
    """Register every atom of ``dictionary`` to ``x``.

    Returns the flow field and the ``N x P`` array of attained distances.
    """
    if not dictionary.grid.compatible(x.grid):
        raise GeometryError("image grid does not match the dictionary grid")
    if window_side < 1 or window_side % 2 == 0:
        raise GeometryError("window side must be an odd positive integer")
    grid = dictionary.grid
    # w=1 goes through the same kernel so that distances are computed with
    # identical arithmetic and aligned residuals never exceed unaligned ones
    selected, dist2 = _block_match(dictionary.data, x.data, grid.rows,
                                   grid.cols, window_side // 2)
    return FlowField(selected, grid, window_side), np.sqrt(dist2)
