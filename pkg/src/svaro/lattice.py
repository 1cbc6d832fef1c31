"""Voxel lattice: first-order adjacency, Laplacian and sweep colorings."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class LatticeGraph:
    """Masked 2D/3D grid with axis-aligned unit-distance adjacency.

    ``coords`` holds the grid coordinates of each in-mask voxel, in raster
    (C) order, so that ``voxel_index`` enumerates masked cells row-major.
    """

    dims: tuple[int, ...]
    mask: np.ndarray  # bool, shape == dims
    voxel_index: np.ndarray  # int, shape == dims, -1 outside mask
    coords: np.ndarray  # (N, ndim)
    adjacency: np.ndarray  # (E, 2), n1 < n2

    @property
    def n_voxels(self) -> int:
        return int(self.coords.shape[0])

    @property
    def n_pairs(self) -> int:
        return int(self.adjacency.shape[0])

    @cached_property
    def degree(self) -> np.ndarray:
        deg = np.zeros(self.n_voxels, dtype=np.int64)
        np.add.at(deg, self.adjacency[:, 0], 1)
        np.add.at(deg, self.adjacency[:, 1], 1)
        return deg

    @cached_property
    def adjacency_matrix(self) -> sp.csr_matrix:
        n = self.n_voxels
        i, j = self.adjacency[:, 0], self.adjacency[:, 1]
        data = np.ones(2 * len(i), dtype=np.int64)
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    @cached_property
    def neighbors(self) -> list[np.ndarray]:
        A = self.adjacency_matrix
        return [A.indices[A.indptr[n]:A.indptr[n + 1]] for n in range(self.n_voxels)]

    @cached_property
    def parity(self) -> np.ndarray:
        """Checkerboard two-coloring; first-order lattice graphs are bipartite."""
        return (self.coords.sum(axis=1) % 2).astype(np.int64)

    @cached_property
    def parity_blocks(self) -> list[tuple[np.ndarray, sp.csr_matrix]]:
        """Per parity class: site indices and their adjacency rows."""
        A = self.adjacency_matrix
        blocks = []
        for c in (0, 1):
            idx = np.flatnonzero(self.parity == c)
            blocks.append((idx, sp.csr_matrix(A[idx])))
        return blocks

    def to_grid(self, values, fill=np.nan) -> np.ndarray:
        """Scatter a per-voxel vector back onto the full grid."""
        values = np.asarray(values)
        out = np.full(self.dims, fill, dtype=np.result_type(values.dtype, np.asarray(fill).dtype))
        out[self.mask] = values
        return out


def build_lattice(dims, mask=None) -> LatticeGraph:
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise ValueError(f"dims must have 2 or 3 entries, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    size = int(np.prod(dims))
    if mask is None:
        mask = np.ones(dims, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.size != size:
        raise ValueError(f"mask has {mask.size} cells, expected {size}")
    mask = mask.reshape(dims)
    if not mask.any():
        raise ValueError("no voxels")

    voxel_index = np.full(dims, -1, dtype=np.int64)
    voxel_index[mask] = np.arange(int(mask.sum()))
    coords = np.argwhere(mask)

    pairs = []
    for axis in range(len(dims)):
        lo = [slice(None)] * len(dims)
        hi = [slice(None)] * len(dims)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a = voxel_index[tuple(lo)]
        b = voxel_index[tuple(hi)]
        keep = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[keep], b[keep]], axis=1))
    adjacency = np.concatenate(pairs, axis=0) if pairs else np.zeros((0, 2), np.int64)
    adjacency = np.sort(adjacency, axis=1)
    order = np.lexsort((adjacency[:, 1], adjacency[:, 0]))
    adjacency = adjacency[order]

    return LatticeGraph(dims=dims, mask=mask, voxel_index=voxel_index,
                        coords=coords, adjacency=adjacency)


@dataclass(frozen=True, eq=False)
class LaplacianOperator:
    """Graph Laplacian ``S`` (degree on the diagonal, -1 for neighbours).

    The spatial prior uses ``Q = S^T S + ridge * I``; ``ridge`` is zero for
    the intrinsic prior and positive only when a proper prior is needed.
    """

    S: sp.csr_matrix
    ridge: float = 0.0
    StS: sp.csr_matrix = field(init=False)

    def __post_init__(self):
        StS = (self.S.T @ self.S).astype(np.float64)
        if self.ridge:
            StS = StS + self.ridge * sp.identity(self.S.shape[0], format="csr")
        object.__setattr__(self, "StS", sp.csr_matrix(StS))

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @cached_property
    def diag(self) -> np.ndarray:
        return self.StS.diagonal().copy()

    @cached_property
    def offdiag(self) -> sp.csr_matrix:
        off = self.StS - sp.diags(self.diag)
        off = sp.csr_matrix(off)
        off.eliminate_zeros()
        return off

    def apply(self, v) -> np.ndarray:
        """``Q @ v`` for a vector or an (N, m) block."""
        return self.StS @ np.asarray(v, dtype=np.float64)

    def quad(self, v) -> float:
        v = np.asarray(v, dtype=np.float64)
        return float(v @ (self.StS @ v))

    def dense(self) -> np.ndarray:
        return self.StS.toarray()


def laplacian(graph: LatticeGraph, ridge: float = 0.0) -> LaplacianOperator:
    n = graph.n_voxels
    S = sp.diags(graph.degree.astype(np.int64)) - graph.adjacency_matrix
    return LaplacianOperator(S=sp.csr_matrix(S, shape=(n, n)), ridge=float(ridge))


def cube_neighbor_pair_count(V):
    """First-order neighbour pairs in a V x V x V cube; accepts real V."""
    if V < 1:
        raise ValueError("V must be >= 1")
    return 3 * V**2 * (V - 1)


@dataclass(frozen=True)
class SweepColoring:
    color: np.ndarray  # (N,)
    n_colors: int

    def groups(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.color == c) for c in range(self.n_colors)]


def color_for_sweep(graph: LatticeGraph) -> SweepColoring:
    """Greedy coloring of the distance-2 graph (the sparsity pattern of S^T S).

    Voxels sharing a color have no S^T S coupling, so their regression
    coefficient conditionals are mutually independent.
    """
    A = graph.adjacency_matrix
    A2 = ((A + A @ A) > 0).tocsr()
    n = graph.n_voxels
    color = np.full(n, -1, dtype=np.int64)
    for v in range(n):
        nbrs = A2.indices[A2.indptr[v]:A2.indptr[v + 1]]
        used = set(color[nbrs[nbrs != v]].tolist())
        c = 0
        while c in used:
            c += 1
        color[v] = c
    return SweepColoring(color=color, n_colors=int(color.max()) + 1)
