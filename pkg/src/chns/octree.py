"""Adaptive quadtree/octree construction, 2:1 balancing and adaptation.

Leaves live on a global integer lattice: the domain box is split into a grid
of congruent root cells (``root_grid`` per axis, all (1,)*d for a cube-like
domain), and each root cell is a depth-``max_depth`` tree.  A leaf at level
``l`` spans ``2**(max_depth - l)`` lattice units per axis; its anchor is the
lower corner in lattice coordinates.  Leaves are kept sorted by a
space-filling-curve key (Morton order within each root cell, root cells in
row-major order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .fem import corner_bits

MAX_DEPTH_CAP = 30

# Refinement flag values.
KEEP = 0
REFINE = 1
COARSEN = -1


@dataclass(frozen=True)
class Octant:
    """A single tree cell: refinement level, integer anchor, dimension.

    The anchor is the lower corner on the deepest-level lattice; its
    components are multiples of 2**(max_depth - level).  ``lo``/``hi`` carry
    the physical box when the octant was produced by an Octree.
    """

    level: int
    anchor: tuple
    d: int
    lo: tuple = None
    hi: tuple = None

    def contains_point(self, x) -> bool:
        """True if the physical point lies in the closed cell box."""
        if self.lo is None:
            raise ContractError("octant has no physical geometry attached")
        return all(self.lo[a] <= x[a] <= self.hi[a] for a in range(self.d))


class Octree:
    """SFC-sorted list of leaf octants tiling an axis-aligned box."""

    def __init__(self, domain, max_depth, levels, anchors, root_grid=None):
        lo, hi = np.asarray(domain[0], float), np.asarray(domain[1], float)
        d = lo.size
        if d not in (2, 3):
            raise ConfigError(f"dimension {d} not supported")
        if max_depth < 1 or max_depth > MAX_DEPTH_CAP:
            raise ConfigError(
                f"max_depth={max_depth} outside [1, {MAX_DEPTH_CAP}] "
                "(integer-lattice capacity)")
        if np.any(hi <= lo):
            raise ConfigError("domain box must have positive extents")
        self.lo = lo
        self.hi = hi
        self.d = d
        self.max_depth = int(max_depth)
        self.root_grid = np.ones(d, dtype=np.int64) if root_grid is None \
            else np.asarray(root_grid, dtype=np.int64)
        if self.root_grid.shape != (d,) or np.any(self.root_grid < 1):
            raise ConfigError("root_grid must hold one positive count per axis")
        self.levels = np.asarray(levels, dtype=np.int64)
        self.anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, d)
        order = np.argsort(self.sfc_keys(self.levels, self.anchors), kind="stable")
        self.levels = self.levels[order]
        self.anchors = self.anchors[order]
        self._level_key_cache = None

    # ------------------------------------------------------------------ geometry

    @property
    def n_leaves(self) -> int:
        return self.levels.size

    @property
    def lattice_shape(self) -> np.ndarray:
        """Number of finest-lattice cells per axis."""
        return self.root_grid * (1 << self.max_depth)

    @property
    def lattice_unit(self) -> np.ndarray:
        """Physical size of one finest-lattice cell per axis."""
        return (self.hi - self.lo) / self.lattice_shape

    def cell_sizes_lattice(self) -> np.ndarray:
        """(n_leaves,) leaf edge length in lattice units."""
        return (1 << (self.max_depth - self.levels)).astype(np.int64)

    def cell_h(self) -> np.ndarray:
        """(n_leaves, d) physical leaf edge lengths."""
        s = self.cell_sizes_lattice()
        return s[:, None] * self.lattice_unit[None, :]

    def cell_origin(self) -> np.ndarray:
        """(n_leaves, d) physical lower corners."""
        return self.lo[None, :] + self.anchors * self.lattice_unit[None, :]

    def to_physical(self, lattice_coords) -> np.ndarray:
        """Map integer lattice coordinates to physical coordinates."""
        return self.lo[None, :] + np.asarray(lattice_coords) * self.lattice_unit[None, :]

    @property
    def leaves(self) -> list:
        """Leaves as Octant objects (SFC order) with physical boxes attached."""
        orig = self.cell_origin()
        h = self.cell_h()
        return [
            Octant(level=int(self.levels[i]), anchor=tuple(self.anchors[i]),
                   d=self.d, lo=tuple(orig[i]), hi=tuple(orig[i] + h[i]))
            for i in range(self.n_leaves)
        ]

    def measure(self) -> float:
        """Total physical measure of all leaves."""
        return float(np.sum(np.prod(self.cell_h(), axis=1)))

    # ------------------------------------------------------------------ SFC keys

    def sfc_keys(self, levels, anchors):
        """Space-filling-curve sort keys: root cell (row-major), then Morton
        order of the within-root anchor.  Falls back to Python ints when the
        key would overflow 62 bits."""
        d, md = self.d, self.max_depth
        anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, d)
        root_bits = int(np.ceil(np.log2(max(2, int(np.prod(self.root_grid))))))
        wide = d * md + root_bits + 1 > 62
        local = anchors & ((1 << md) - 1)
        ridx = anchors >> md
        root_id = ridx[:, 0].astype(object if wide else np.int64)
        for a in range(1, d):
            root_id = root_id * int(self.root_grid[a]) + ridx[:, a]
        key = np.zeros(anchors.shape[0], dtype=object if wide else np.int64)
        if wide:
            local = local.astype(object)
        for b in range(md):
            for a in range(d):
                key |= ((local[:, a] >> b) & 1) << (b * d + a)
        return key + (root_id << (d * md))

    def _leaf_id_keys(self, levels, anchors):
        """Composite (anchor, level) identity keys for membership queries."""
        return self.sfc_keys(levels, anchors) * (self.max_depth + 2) + levels

    def _level_keys(self):
        """Per-level sorted SFC keys with leaf indices, cached."""
        if self._level_key_cache is None:
            cache = {}
            keys = self.sfc_keys(self.levels, self.anchors)
            for lev in np.unique(self.levels):
                mask = self.levels == lev
                idx = np.nonzero(mask)[0]
                k = keys[mask]
                order = np.argsort(k)
                cache[int(lev)] = (k[order], idx[order])
            self._level_key_cache = cache
        return self._level_key_cache

    def find_leaves(self, cells) -> np.ndarray:
        """Leaf index containing each finest-lattice cell, -1 if outside.

        ``cells`` is (k, d) integer coordinates of finest-level cells.
        """
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, self.d)
        out = np.full(cells.shape[0], -1, dtype=np.int64)
        shape = self.lattice_shape
        inside = np.all((cells >= 0) & (cells < shape[None, :]), axis=1)
        cache = self._level_keys()
        unresolved = inside.copy()
        for lev in sorted(cache, reverse=True):
            if not np.any(unresolved):
                break
            s = self.max_depth - lev
            cand = (cells[unresolved] >> s) << s
            k = self.sfc_keys(np.full(cand.shape[0], lev), cand)
            lk, lidx = cache[lev]
            pos = np.searchsorted(lk, k)
            pos_c = np.clip(pos, 0, lk.size - 1)
            hit = (lk.size > 0) & (lk[pos_c] == k)
            tgt = np.nonzero(unresolved)[0][hit]
            out[tgt] = lidx[pos_c[hit]]
            rem = unresolved[unresolved]
            rem[hit] = False
            unresolved[unresolved] = rem
        return out

    # ------------------------------------------------------------------ checks

    def check_tiling(self) -> bool:
        """Verify the leaves tile the domain exactly once."""
        if abs(self.measure() - float(np.prod(self.hi - self.lo))) > 1e-9 * max(
                1.0, float(np.prod(self.hi - self.lo))):
            return False
        # In SFC order an overlap implies an ancestor immediately precedes
        # one of its descendants.
        s = self.cell_sizes_lattice()
        for i in range(self.n_leaves - 1):
            a, b = self.anchors[i], self.anchors[i + 1]
            if np.all(b >= a) and np.all(b < a + s[i]):
                return False
        return True

    def dump(self) -> str:
        """Serialize as text: header "d max_depth n_leaves", one leaf per line."""
        lines = [f"{self.d} {self.max_depth} {self.n_leaves}"]
        for i in range(self.n_leaves):
            coords = " ".join(str(int(c)) for c in self.anchors[i])
            lines.append(f"{int(self.levels[i])} {coords}")
        return "\n".join(lines) + "\n"


def load_tree(text, domain=None, root_grid=None) -> Octree:
    """Parse the text format written by Octree.dump."""
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    if not rows:
        raise ContractError("empty tree file")
    d, max_depth, n = (int(v) for v in rows[0][:3])
    if len(rows) - 1 != n:
        raise ContractError(f"tree file announces {n} leaves, found {len(rows) - 1}")
    levels = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
    anchors = np.array([[int(v) for v in r[1:1 + d]] for r in rows[1:]], dtype=np.int64)
    if domain is None:
        domain = (np.zeros(d), np.ones(d))
    return Octree(domain, max_depth, levels, anchors, root_grid=root_grid)


def _root_leaves(d, root_grid):
    """Anchors/levels of the root cells in row-major order."""
    grids = np.meshgrid(*[np.arange(m) for m in root_grid], indexing="ij")
    ridx = np.stack([g.ravel() for g in grids], axis=1)
    return ridx


def construct_tree(domain, predicate, max_depth, d=None, root_grid=None) -> Octree:
    """Top-down construction: split every octant for which the predicate is
    true until it fails or the octant reaches max_depth."""
    lo = np.asarray(domain[0], float)
    if d is None:
        d = lo.size
    root_grid = np.ones(d, dtype=np.int64) if root_grid is None \
        else np.asarray(root_grid, dtype=np.int64)
    tree = Octree(domain, max_depth,
                  np.zeros(root_grid.prod(), dtype=np.int64),
                  _root_leaves(d, root_grid) << max_depth,
                  root_grid=root_grid)
    unit = tree.lattice_unit
    bits = corner_bits(d)
    levels_out, anchors_out = [], []
    stack = [(0, tuple(a)) for a in reversed(tree.anchors)]
    while stack:
        lev, anc = stack.pop()
        anc_arr = np.asarray(anc, dtype=np.int64)
        size = 1 << (max_depth - lev)
        plo = tree.lo + anc_arr * unit
        phi = plo + size * unit
        oct_ = Octant(level=lev, anchor=anc, d=d, lo=tuple(plo), hi=tuple(phi))
        if lev < max_depth and predicate(oct_):
            half = size >> 1
            children = anc_arr[None, :] + bits * half
            for c in reversed(children):
                stack.append((lev + 1, tuple(c)))
        else:
            levels_out.append(lev)
            anchors_out.append(anc)
    return Octree(domain, max_depth, np.array(levels_out), np.array(anchors_out),
                  root_grid=root_grid)


def _neighbor_directions(d):
    """Face directions plus (in 3D) edge directions, as (k, d) int vectors."""
    dirs = []
    for a in range(d):
        for s in (-1, 1):
            v = np.zeros(d, dtype=np.int64)
            v[a] = s
            dirs.append(v)
    if d == 3:
        for a in range(3):
            rest = [b for b in range(3) if b != a]
            for s0 in (-1, 1):
                for s1 in (-1, 1):
                    v = np.zeros(3, dtype=np.int64)
                    v[rest[0]] = s0
                    v[rest[1]] = s1
                    dirs.append(v)
    return np.stack(dirs, axis=0)


def _neighbor_samples(tree, levels, anchors):
    """Finest-lattice sample cells just across every facet of every leaf.

    Returns (samples, owner_index): samples is (m, d), owner_index maps each
    sample back to its emitting leaf.
    """
    d = tree.d
    dirs = _neighbor_directions(d)  # (k, d)
    s = (1 << (tree.max_depth - levels)).astype(np.int64)  # (n,)
    n = levels.size
    # Sample coordinate per axis: -1 offset, +size offset, or anchor itself.
    base = anchors[:, None, :]  # (n, 1, d)
    off = np.where(dirs[None, :, :] < 0, -1,
                   np.where(dirs[None, :, :] > 0, s[:, None, None], 0))
    samples = (base + off).reshape(-1, d)
    owner = np.repeat(np.arange(n), dirs.shape[0])
    return samples, owner


def enforce_2to1_balance(tree: Octree) -> Octree:
    """Refine leaves until any two edge/face-adjacent leaves differ by at
    most one level.  Only refinement is applied."""
    levels = tree.levels.copy()
    anchors = tree.anchors.copy()
    d = tree.d
    bits = corner_bits(d)
    while True:
        work = Octree((tree.lo, tree.hi), tree.max_depth, levels, anchors,
                      root_grid=tree.root_grid)
        levels, anchors = work.levels, work.anchors
        samples, owner = _neighbor_samples(work, levels, anchors)
        found = work.find_leaves(samples)
        ok = found >= 0
        # A neighbor more than one level coarser than the emitting leaf
        # violates 2:1 and must be refined.
        viol = ok & (levels[found.clip(0)] < levels[owner] - 1)
        to_refine = np.unique(found[viol])
        if to_refine.size == 0:
            return work
        keep = np.ones(levels.size, dtype=bool)
        keep[to_refine] = False
        new_levels = [levels[keep]]
        new_anchors = [anchors[keep]]
        half = (1 << (tree.max_depth - levels[to_refine] - 1)).astype(np.int64)
        children = anchors[to_refine][:, None, :] + bits[None, :, :] * half[:, None, None]
        new_levels.append(np.repeat(levels[to_refine] + 1, 1 << d))
        new_anchors.append(children.reshape(-1, d))
        levels = np.concatenate(new_levels)
        anchors = np.concatenate(new_anchors)


def is_balanced(tree: Octree) -> bool:
    """Neighbor-query check of the 2:1 edge/face balance condition."""
    samples, owner = _neighbor_samples(tree, tree.levels, tree.anchors)
    found = tree.find_leaves(samples)
    ok = found >= 0
    return not np.any(ok & (tree.levels[found.clip(0)] < tree.levels[owner] - 1))


def refine_and_coarsen(tree: Octree, flags) -> Octree:
    """Apply one level of refinement/coarsening per leaf and re-balance.

    Coarsening takes effect only when the full sibling family is flagged
    COARSEN; the final 2:1 balance pass may undo a coarsening that would
    violate the level constraint.
    """
    flags = np.asarray(flags, dtype=np.int64)
    if flags.shape != (tree.n_leaves,):
        raise ContractError("one flag per leaf required")
    d = tree.d
    bits = corner_bits(d)
    levels, anchors = tree.levels, tree.anchors
    sizes = tree.cell_sizes_lattice()

    # Coarsening: group COARSEN-flagged leaves by parent cell.
    coarsen_parent_levels, coarsen_parent_anchors = [], []
    drop = np.zeros(tree.n_leaves, dtype=bool)
    cand = np.nonzero((flags == COARSEN) & (levels > 0))[0]
    if cand.size:
        pshift = tree.max_depth - levels[cand] + 1
        panchor = (anchors[cand] >> pshift[:, None]) << pshift[:, None]
        pkey = tree._leaf_id_keys(levels[cand] - 1, panchor)
        order = np.argsort(pkey, kind="stable")
        pkey_s = pkey[order]
        bounds = np.nonzero(np.r_[True, pkey_s[1:] != pkey_s[:-1], True])[0]
        for b0, b1 in zip(bounds[:-1], bounds[1:]):
            fam = cand[order[b0:b1]]
            if fam.size == (1 << d):
                drop[fam] = True
                coarsen_parent_levels.append(levels[fam[0]] - 1)
                coarsen_parent_anchors.append(panchor[order[b0]])

    refine = (flags == REFINE) & (levels < tree.max_depth) & ~drop
    keep = ~refine & ~drop
    out_levels = [levels[keep]]
    out_anchors = [anchors[keep]]
    if np.any(refine):
        half = (sizes[refine] >> 1).astype(np.int64)
        children = anchors[refine][:, None, :] + bits[None, :, :] * half[:, None, None]
        out_levels.append(np.repeat(levels[refine] + 1, 1 << d))
        out_anchors.append(children.reshape(-1, d))
    if coarsen_parent_levels:
        out_levels.append(np.asarray(coarsen_parent_levels, dtype=np.int64))
        out_anchors.append(np.stack(coarsen_parent_anchors, axis=0))
    new = Octree((tree.lo, tree.hi), tree.max_depth,
                 np.concatenate(out_levels), np.concatenate(out_anchors),
                 root_grid=tree.root_grid)
    return enforce_2to1_balance(new)


def uniform_tree(domain, level, d=None, root_grid=None, max_depth=None) -> Octree:
    """Uniformly refined tree at the given level."""
    if max_depth is None:
        max_depth = max(level, 1)
    return construct_tree(domain, lambda o: o.level < level, max_depth,
                          d=d, root_grid=root_grid)
