"""Block-sparse assembly and a deterministic direct solve."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystem

PIVOT_TOL = 1e-12
DENSE_RANK_LIMIT = 3000


class Triplets:
    """Accumulates batched dense blocks into COO triplets (duplicates are summed)."""

    def __init__(self, size: int):
        self.size = size
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, row0: np.ndarray, col0: np.ndarray, blocks: np.ndarray) -> None:
        """Place ``blocks[i]`` (shape a x b) with its top-left corner at ``(row0[i], col0[i])``."""
        blocks = np.asarray(blocks, dtype=float)
        if blocks.ndim == 2:
            blocks = blocks[None]
        count, a, b = blocks.shape
        row0 = np.broadcast_to(np.asarray(row0), (count,))
        col0 = np.broadcast_to(np.asarray(col0), (count,))
        rows = row0[:, None, None] + np.arange(a)[None, :, None]
        cols = col0[:, None, None] + np.arange(b)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        self._rows.append(rows.reshape(-1))
        self._cols.append(cols.reshape(-1))
        self._vals.append(blocks.reshape(-1))

    def add_identity(self, row0: int, count: int) -> None:
        idx = row0 + np.arange(count)
        self._rows.append(idx)
        self._cols.append(idx)
        self._vals.append(np.ones(count))

    def tocsc(self) -> sp.csc_matrix:
        if not self._rows:
            return sp.csc_matrix((self.size, self.size))
        rows = np.concatenate(self._rows)
        cols = np.concatenate(self._cols)
        vals = np.concatenate(self._vals)
        return sp.coo_matrix((vals, (rows, cols)), shape=(self.size, self.size)).tocsc()


def solve(matrix: sp.spmatrix, rhs: np.ndarray, what: str = "linear system",
          error: type[SingularSystem] = SingularSystem) -> np.ndarray:
    """Sparse LU with a fixed column ordering; small pivots raise ``error``."""
    matrix = sp.csc_matrix(matrix)
    scale = max(1.0, float(abs(matrix).max()) if matrix.nnz else 1.0)
    try:
        lu = spla.splu(matrix, permc_spec="COLAMD", diag_pivot_thresh=1.0)
    except RuntimeError as exc:
        raise error(f"{what} is singular ({exc})", rank_defect=_rank_defect(matrix)) from exc
    pivots = np.abs(lu.U.diagonal())
    smallest = float(pivots.min()) if pivots.size else 0.0
    if smallest < PIVOT_TOL * scale:
        raise error(f"{what} is singular: pivot {smallest:.3e}", rank_defect=_rank_defect(matrix),
                    witness={"pivot": smallest, "position": int(np.argmin(pivots))})
    out = lu.solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(out)):
        raise error(f"{what} produced non-finite values", rank_defect=_rank_defect(matrix))
    return out


def _rank_defect(matrix: sp.spmatrix) -> int | None:
    if matrix.shape[0] > DENSE_RANK_LIMIT:
        return None
    dense = matrix.toarray()
    return int(dense.shape[0] - np.linalg.matrix_rank(dense))
