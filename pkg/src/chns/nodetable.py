"""Enumeration of unique non-hanging nodes plus hanging interpolation metadata.

The construction mirrors a serial cancellation-node sweep: every leaf emits
its corner positions, and every leaf additionally emits candidate positions at
the midpoints of its facets (edge midpoints, and face centers in 3D).  A
corner that coincides with a facet-midpoint candidate of some leaf is hanging
on that coarse facet; its value interpolates the facet corners.  2:1 balance
guarantees the owners are themselves independent; chains are rejected.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .fem import corner_bits
from .octree import Octree, is_balanced


def _coord_keys(tree: Octree, coords):
    """Ravel node lattice coordinates to scalar keys (deterministic order)."""
    dims = tree.lattice_shape + 1
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, tree.d)
    if float(np.prod(dims.astype(float))) < 2 ** 62:
        key = coords[:, 0].astype(np.int64)
        for a in range(1, tree.d):
            key = key * int(dims[a]) + coords[:, a]
        return key
    key = coords[:, 0].astype(object)
    for a in range(1, tree.d):
        key = key * int(dims[a]) + coords[:, a]
    return key


def _facet_candidates(tree: Octree):
    """Hanging-candidate positions with their owner corners and weights.

    Returns (positions (m, d), owners (m, n_own, d), weights (m, n_own));
    edge candidates carry 2 owners, 3D face candidates carry 4.
    """
    d = tree.d
    sizes = tree.cell_sizes_lattice()
    mask = sizes >= 2
    anchors = tree.anchors[mask]
    s = sizes[mask]
    if anchors.shape[0] == 0:
        return (np.zeros((0, d), np.int64), np.zeros((0, 2, d), np.int64),
                np.zeros((0, 2)))
    pos_list, own_list, w_list = [], [], []

    def emit(mid_off, owner_offs, weights):
        # Offsets are fractions of the leaf size (0, 1/2 or 1); s >= 2 keeps
        # the midpoint on the integer lattice.
        pos = anchors + (np.asarray(mid_off)[None, :] * s[:, None]).astype(np.int64)
        own = anchors[:, None, :] + (np.asarray(owner_offs)[None, :, :] * s[:, None, None]).astype(np.int64)
        pos_list.append(pos)
        own_list.append(own)
        w_list.append(np.broadcast_to(np.asarray(weights, float), (pos.shape[0], len(weights))).copy())

    if d == 2:
        for a in range(2):
            b = 1 - a
            for side in (0.0, 1.0):
                mid = np.zeros(2)
                mid[a] = side
                mid[b] = 0.5
                owners = []
                for t in (0.0, 1.0):
                    o = np.zeros(2)
                    o[a] = side
                    o[b] = t
                    owners.append(o)
                emit(mid, np.asarray(owners), (0.5, 0.5))
    else:
        # Edge midpoints: free axis a, the two fixed axes at 0 or 1.
        for a in range(3):
            rest = [b for b in range(3) if b != a]
            for s0 in (0.0, 1.0):
                for s1 in (0.0, 1.0):
                    mid = np.zeros(3)
                    mid[a] = 0.5
                    mid[rest[0]] = s0
                    mid[rest[1]] = s1
                    owners = []
                    for t in (0.0, 1.0):
                        o = mid.copy()
                        o[a] = t
                        owners.append(o)
                    emit(mid, np.asarray(owners), (0.5, 0.5))
        edge_pos = np.concatenate(pos_list, axis=0)
        edge_own = np.concatenate(own_list, axis=0)
        edge_w = np.concatenate(w_list, axis=0)
        pos_list, own_list, w_list = [], [], []
        # Face centers: normal axis a at 0 or 1, both other axes at 1/2.
        for a in range(3):
            rest = [b for b in range(3) if b != a]
            for side in (0.0, 1.0):
                mid = np.full(3, 0.5)
                mid[a] = side
                owners = []
                for t0 in (0.0, 1.0):
                    for t1 in (0.0, 1.0):
                        o = mid.copy()
                        o[rest[0]] = t0
                        o[rest[1]] = t1
                        owners.append(o)
                emit(mid, np.asarray(owners), (0.25, 0.25, 0.25, 0.25))
        face_pos = np.concatenate(pos_list, axis=0)
        face_own = np.concatenate(own_list, axis=0)
        face_w = np.concatenate(w_list, axis=0)
        # Pad edge owners to 4 (repeat first owner with zero weight) so a
        # single array covers both candidate kinds.
        pad_own = np.concatenate([edge_own, edge_own[:, :1, :], edge_own[:, :1, :]], axis=1)
        pad_w = np.concatenate([edge_w, np.zeros((edge_w.shape[0], 2))], axis=1)
        return (np.concatenate([edge_pos, face_pos], axis=0),
                np.concatenate([pad_own, face_own], axis=0),
                np.concatenate([pad_w, face_w], axis=0))
    return (np.concatenate(pos_list, axis=0),
            np.concatenate(own_list, axis=0),
            np.concatenate(w_list, axis=0))


class NodeTable:
    """Unique nodes of a balanced tree with hanging interpolation data.

    Attributes
    ----------
    n_nodes : number of independent (non-hanging) nodes; nodal vectors have
        length n_nodes * dof.
    coords : (n_total, d) physical positions, independent nodes first
        (in deterministic key order), hanging positions after.
    hanging : (n_total,) bool flags.
    hang_owners : (n_hang, n_own) gids of the owning independent nodes.
    hang_weights : (n_hang, n_own) interpolation weights (rows sum to 1,
        padding entries repeat owner 0 with weight 0).
    elem_gather_idx / elem_gather_w : (n_e, n_loc, mo) per-element plan
        mapping global dofs to local corner values.
    elem_nodes_all : (n_e, n_loc) index into ``coords`` of each corner
        (independent or hanging), for conforming output.
    """

    def __init__(self, tree: Octree, r: int = 1, check_balance: bool = True):
        if r != 1:
            raise ContractError("only element order r = 1 is supported")
        if check_balance and not is_balanced(tree):
            raise ContractError("node table requires a 2:1 balanced tree")
        self.tree = tree
        self.elem_order = 1
        d = tree.d
        bits = corner_bits(d)
        sizes = tree.cell_sizes_lattice()
        corners = tree.anchors[:, None, :] + bits[None, :, :] * sizes[:, None, None]
        corner_keys = _coord_keys(tree, corners.reshape(-1, d))
        uniq_keys, inv = np.unique(corner_keys, return_inverse=True)
        n_uniq = uniq_keys.size

        cand_pos, cand_own, cand_w = _facet_candidates(tree)
        if cand_pos.shape[0]:
            cand_keys = _coord_keys(tree, cand_pos)
            # Deduplicate candidates; coincident candidates carry identical
            # owner sets on a balanced tree.
            _, first = np.unique(cand_keys, return_index=True)
            cand_keys = cand_keys[first]
            cand_own = cand_own[first]
            cand_w = cand_w[first]
            pos_in_uniq = np.searchsorted(uniq_keys, cand_keys)
            pos_c = np.clip(pos_in_uniq, 0, n_uniq - 1)
            matched = uniq_keys[pos_c] == cand_keys
            hang_uniq = pos_c[matched]
            hang_own_coords = cand_own[matched]
            hang_w = cand_w[matched]
        else:
            hang_uniq = np.zeros(0, dtype=np.int64)
            hang_own_coords = np.zeros((0, 2, d), dtype=np.int64)
            hang_w = np.zeros((0, 2))

        hanging_mask = np.zeros(n_uniq, dtype=bool)
        hanging_mask[hang_uniq] = True
        n_indep = int(np.count_nonzero(~hanging_mask))
        gid_of_uniq = np.full(n_uniq, -1, dtype=np.int64)
        gid_of_uniq[~hanging_mask] = np.arange(n_indep)

        # Owners must be independent nodes (single-level hanging only).
        n_own = hang_own_coords.shape[1] if hang_own_coords.size else 2
        if hang_uniq.size:
            own_keys = _coord_keys(tree, hang_own_coords.reshape(-1, d))
            own_pos = np.searchsorted(uniq_keys, own_keys)
            if np.any(uniq_keys[np.clip(own_pos, 0, n_uniq - 1)] != own_keys):
                raise ContractError("hanging owner is not a mesh node; tree unbalanced")
            if np.any(hanging_mask[own_pos] & (hang_w.reshape(-1) > 0)):
                raise ContractError(
                    "hanging chain of depth > 1 detected; tree is not 2:1 balanced")
            hang_owner_gids = gid_of_uniq[own_pos].reshape(-1, n_own)
            # Padding rows may reference a hanging uniq node with zero weight;
            # remap them onto the first real owner.
            bad = hang_owner_gids < 0
            if np.any(bad):
                first_own = np.broadcast_to(hang_owner_gids[:, :1], hang_owner_gids.shape)
                hang_owner_gids = np.where(bad, first_own, hang_owner_gids)
        else:
            hang_owner_gids = np.zeros((0, n_own), dtype=np.int64)

        self.n_nodes = n_indep
        self.d = d
        # Recover lattice coordinates of the unique keys from one emitting corner.
        uniq_coords = np.zeros((n_uniq, d), dtype=np.int64)
        uniq_coords[inv] = corners.reshape(-1, d)
        indep_order = np.nonzero(~hanging_mask)[0]
        hang_order = hang_uniq  # sorted by construction of unique
        self.node_lattice = uniq_coords[indep_order]
        self.coords = tree.to_physical(
            np.concatenate([uniq_coords[indep_order], uniq_coords[hang_order]], axis=0))
        self.hanging = np.zeros(n_uniq, dtype=bool)
        self.hanging[n_indep:] = True
        self.hang_owners = hang_owner_gids
        self.hang_weights = hang_w
        # Position of each uniq node in the coords array.
        pos_of_uniq = np.empty(n_uniq, dtype=np.int64)
        pos_of_uniq[indep_order] = np.arange(n_indep)
        pos_of_uniq[hang_order] = n_indep + np.arange(hang_order.size)
        hang_slot_of_uniq = np.full(n_uniq, -1, dtype=np.int64)
        hang_slot_of_uniq[hang_order] = np.arange(hang_order.size)

        # Per-element gather plan.
        n_e = tree.n_leaves
        n_loc = 1 << d
        corner_uniq = inv.reshape(n_e, n_loc)
        self.elem_nodes_all = pos_of_uniq[corner_uniq]
        mo = 1 if hang_uniq.size == 0 else n_own
        G_idx = np.zeros((n_e, n_loc, mo), dtype=np.int64)
        G_w = np.zeros((n_e, n_loc, mo))
        if mo == 1:
            G_idx[:, :, 0] = gid_of_uniq[corner_uniq]
            G_w[:, :, 0] = 1.0
        else:
            is_h = hanging_mask[corner_uniq]
            slot = hang_slot_of_uniq[corner_uniq]
            gid_direct = gid_of_uniq[corner_uniq]
            G_idx[:, :, 0] = np.where(is_h, 0, gid_direct)
            G_w[:, :, 0] = np.where(is_h, 0.0, 1.0)
            if np.any(is_h):
                hs = slot[is_h]
                G_idx[is_h] = self.hang_owners[hs]
                G_w[is_h] = self.hang_weights[hs]
            # Pad zero-weight entries onto the first owner so matrix triplets
            # never create spurious pattern entries.
            first = np.broadcast_to(G_idx[:, :, :1], G_idx.shape)
            G_idx = np.where(G_w > 0.0, G_idx, first)
        self.elem_gather_idx = np.ascontiguousarray(G_idx)
        self.elem_gather_w = np.ascontiguousarray(G_w)
        self._pattern_cache = {}

    # ------------------------------------------------------------------

    @property
    def n_hanging(self) -> int:
        return int(np.count_nonzero(self.hanging))

    def hanging_values(self, x, ndof: int = 1) -> np.ndarray:
        """Interpolated values at hanging positions, (n_hang, ndof)."""
        xv = np.asarray(x).reshape(self.n_nodes, ndof)
        return np.einsum("ho,hoc->hc", self.hang_weights, xv[self.hang_owners])

    def boundary_mask(self, axis=None, side=None) -> np.ndarray:
        """Independent nodes on the domain boundary.

        With axis/side given, restrict to that face (side 0 = low, 1 = high).
        """
        shape = self.tree.lattice_shape
        if axis is None:
            on = (self.node_lattice == 0) | (self.node_lattice == shape[None, :])
            return np.any(on, axis=1)
        target = 0 if side == 0 else int(shape[axis])
        return self.node_lattice[:, axis] == target
