"""Map-free vector/matrix assembly and intergrid transfer.

Assembly walks the tree once at plan-building time to bucket nodal data down
to the leaves (the per-element gather plan held by the NodeTable); the
per-assembly work is then a batched kernel evaluation over all leaves followed
by a transposed accumulation in fixed element order, which keeps results
bitwise deterministic for a fixed tree and partition plan.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .linalg import CompressedSparseMatrix
from .nodetable import NodeTable
from .octree import Octree


@dataclass
class ElementContext:
    """Per-element geometry handed to assembly kernels (batched)."""

    tree: Octree
    h: np.ndarray        # (n_e, d) physical edge lengths
    origin: np.ndarray   # (n_e, d) physical lower corners
    levels: np.ndarray   # (n_e,)
    index: np.ndarray    # (n_e,) global element ids within the tree

    @property
    def d(self) -> int:
        return self.tree.d

    @property
    def n_elements(self) -> int:
        return self.h.shape[0]

    @property
    def jacobian_det(self) -> np.ndarray:
        return np.prod(self.h / 2.0, axis=1)

    def quad_coords(self, table_pts) -> np.ndarray:
        """Physical coordinates of reference quad points, (n_e, nq, d)."""
        return self.origin[:, None, :] + (table_pts[None, :, :] + 1.0) * 0.5 * self.h[:, None, :]


def element_context(tree: Octree, sel=None) -> ElementContext:
    h = tree.cell_h()
    orig = tree.cell_origin()
    lev = tree.levels
    idx = np.arange(tree.n_leaves)
    if sel is not None:
        h, orig, lev, idx = h[sel], orig[sel], lev[sel], idx[sel]
    return ElementContext(tree=tree, h=h, origin=orig, levels=lev, index=idx)


def gather_local(table: NodeTable, x, ndof: int = 1) -> np.ndarray:
    """Per-element local nodal values (n_e, n_loc, ndof), hanging nodes
    interpolated from their owners on the way down."""
    x = np.asarray(x, dtype=float)
    if x.size != table.n_nodes * ndof:
        raise ContractError(
            f"field vector has {x.size} entries, expected {table.n_nodes * ndof}")
    xv = x.reshape(table.n_nodes, ndof)
    return np.einsum("eao,eaoc->eac", table.elem_gather_w,
                     xv[table.elem_gather_idx])


def scatter_add(table: NodeTable, contrib, ndof: int = 1) -> np.ndarray:
    """Transposed accumulation of per-element contributions (n_e, n_loc, ndof)
    into a global vector; deterministic element order."""
    out = np.zeros((table.n_nodes, ndof))
    entries = table.elem_gather_w[:, :, :, None] * contrib[:, :, None, :]
    np.add.at(out, table.elem_gather_idx.reshape(-1),
              entries.reshape(-1, ndof))
    return out.reshape(-1)


def traverse_assemble_vector(tree: Octree, table: NodeTable, kernel, x,
                             ndof: int = 1, threads: int = 1) -> np.ndarray:
    """Assemble sum_e scatter(kernel(gather(x)_e)).

    ``kernel(ctx, local)`` receives a batch context and contiguous local
    values (n_e, n_loc * ndof) and returns per-element contributions of the
    same shape.  With threads > 1 the element range is split into contiguous
    partitions evaluated concurrently and merged in fixed partition order.
    """
    local = gather_local(table, x, ndof)
    n_e, n_loc, _ = local.shape
    flat = local.reshape(n_e, n_loc * ndof)
    if threads <= 1 or n_e < 4 * threads:
        contrib = np.asarray(kernel(element_context(tree), flat))
    else:
        cuts = np.linspace(0, n_e, threads + 1, dtype=int)
        parts = [slice(cuts[i], cuts[i + 1]) for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(kernel, element_context(tree, p), flat[p])
                    for p in parts]
            results = [f.result() for f in futs]
        contrib = np.concatenate([np.asarray(r) for r in results], axis=0)
    if contrib.shape != flat.shape:
        raise ContractError("kernel returned contributions of wrong shape")
    return scatter_add(table, contrib.reshape(n_e, n_loc, ndof), ndof)


def _matrix_pattern(table: NodeTable, ndof: int):
    """Cached COO layout (rows, cols, sort permutation, CSR skeleton) for the
    congruence-folded element matrices."""
    key = ndof
    if key in table._pattern_cache:
        return table._pattern_cache[key]
    G_idx, G_w = table.elem_gather_idx, table.elem_gather_w
    n_e, n_loc, mo = G_idx.shape
    nld = n_loc * ndof
    # Expanded local dof owners: (n_e, nld, mo)
    comp = np.arange(ndof)
    own = (G_idx[:, :, None, :] * ndof + comp[None, None, :, None]).reshape(n_e, nld, mo)
    rows = np.broadcast_to(own[:, :, None, :, None], (n_e, nld, nld, mo, mo)).reshape(n_e, -1)
    cols = np.broadcast_to(own[:, None, :, None, :], (n_e, nld, nld, mo, mo)).reshape(n_e, -1)
    rows = rows.reshape(-1)
    cols = cols.reshape(-1)
    perm = np.lexsort((cols, rows))
    rs, cs = rows[perm], cols[perm]
    new = np.r_[True, (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])]
    starts = np.nonzero(new)[0]
    out_rows = rs[starts]
    out_cols = cs[starts]
    n = table.n_nodes * ndof
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, out_rows + 1, 1)
    indptr = np.cumsum(indptr)
    pat = dict(perm=perm, starts=starts, indices=out_cols, indptr=indptr,
               n=n, nld=nld, mo=mo)
    table._pattern_cache[key] = pat
    return pat


def assemble_from_element_matrices(table: NodeTable, elem_mats,
                                   ndof: int = 1) -> CompressedSparseMatrix:
    """Fold batched element matrices (n_e, nld, nld) into a CSR operator,
    applying the hanging congruence transform and merging duplicates."""
    pat = _matrix_pattern(table, ndof)
    G_w = table.elem_gather_w
    n_e, n_loc, mo = G_w.shape
    nld = pat["nld"]
    if elem_mats.shape != (n_e, nld, nld):
        raise ContractError("element matrix batch has wrong shape")
    wdof = np.repeat(G_w, ndof, axis=1)  # (n_e, nld, mo)
    vals = np.einsum("eio,eij,ejp->eijop", wdof, elem_mats, wdof).reshape(-1)
    vs = vals[pat["perm"]]
    data = np.add.reduceat(vs, pat["starts"])
    return CompressedSparseMatrix(pat["indptr"].copy(), pat["indices"].copy(),
                                  data, shape=(pat["n"], pat["n"]))


def traverse_assemble_matrix(tree: Octree, table: NodeTable, kernel,
                             ndof: int = 1) -> CompressedSparseMatrix:
    """Assemble the global sparse operator from an element-matrix kernel;
    ``kernel(ctx)`` returns (n_e, n_loc * ndof, n_loc * ndof)."""
    mats = np.asarray(kernel(element_context(tree)))
    return assemble_from_element_matrices(table, mats, ndof)


# ---------------------------------------------------------------------------
# Point evaluation and intergrid transfer


def evaluate_at_lattice_points(tree: Octree, table: NodeTable, x, points,
                               ndof: int = 1) -> np.ndarray:
    """Evaluate a nodal field at integer lattice positions, (k, ndof).

    Positions on element boundaries evaluate identically from either side
    because hanging interpolation keeps the field continuous.
    """
    pts = np.asarray(points, dtype=np.int64).reshape(-1, tree.d)
    cells = np.minimum(pts, tree.lattice_shape[None, :] - 1)
    leaf = tree.find_leaves(cells)
    if np.any(leaf < 0):
        raise ContractError("evaluation point outside the domain")
    sizes = tree.cell_sizes_lattice()[leaf].astype(float)
    xi = 2.0 * (pts - tree.anchors[leaf]) / sizes[:, None] - 1.0
    local = gather_local(table, x, ndof)[leaf]  # (k, n_loc, ndof)
    d = tree.d
    n_loc = 1 << d
    idx = np.arange(n_loc)
    vals = np.ones((pts.shape[0], n_loc))
    for a in range(d):
        sign = 2.0 * ((idx >> a) & 1) - 1.0
        vals *= (1.0 + sign[None, :] * xi[:, a][:, None]) / 2.0
    return np.einsum("ka,kac->kc", vals, local)


def intergrid_transfer(old_tree: Octree, old_table: NodeTable,
                       new_tree: Octree, new_table: NodeTable,
                       x, ndof: int = 1) -> np.ndarray:
    """Move a nodal field between meshes differing locally by one level.

    Equal leaves copy values, refined regions interpolate the parent shape
    functions at the child nodes, and coarsened regions inject the coincident
    child values into the parent nodes.
    """
    centers = new_tree.anchors + (new_tree.cell_sizes_lattice() // 2)[:, None]
    centers = np.minimum(centers, new_tree.lattice_shape[None, :] - 1)
    old_leaf = old_tree.find_leaves(centers)
    if np.any(old_leaf < 0):
        raise ContractError("new mesh extends outside the old mesh")
    dlev = np.abs(new_tree.levels - old_tree.levels[old_leaf])
    if np.any(dlev > 1):
        raise ContractError(
            "meshes differ by more than one level locally; "
            "apply the AMR step in multiple passes")
    vals = evaluate_at_lattice_points(old_tree, old_table, x,
                                      new_table.node_lattice, ndof)
    return vals.reshape(-1)
