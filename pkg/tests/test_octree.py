import numpy as np
import pytest

from chns.errors import ConfigError, ContractError
from chns.octree import (COARSEN, KEEP, REFINE, Octree, construct_tree,
                         enforce_2to1_balance, is_balanced, load_tree,
                         refine_and_coarsen, uniform_tree)

UNIT2 = (np.zeros(2), np.ones(2))
UNIT3 = (np.zeros(3), np.ones(3))


def brute_force_refine(domain, predicate, max_depth, d):
    """Independent recursive refinement oracle returning (level, anchor) sets."""
    from chns.octree import Octant

    lo = np.asarray(domain[0], float)
    hi = np.asarray(domain[1], float)
    unit = (hi - lo) / (1 << max_depth)
    out = []

    def rec(level, anchor):
        size = 1 << (max_depth - level)
        plo = lo + np.asarray(anchor) * unit
        oct_ = Octant(level=level, anchor=tuple(anchor), d=d,
                      lo=tuple(plo), hi=tuple(plo + size * unit))
        if level < max_depth and predicate(oct_):
            half = size >> 1
            for i in range(1 << d):
                child = [anchor[a] + ((i >> a) & 1) * half for a in range(d)]
                rec(level + 1, child)
        else:
            out.append((level, tuple(anchor)))

    rec(0, [0] * d)
    return set(out)


def leaf_set(tree):
    return {(int(l), tuple(int(c) for c in a))
            for l, a in zip(tree.levels, tree.anchors)}


def adjacent_pairs_balanced(tree):
    """Brute-force pairwise 2:1 check over edge/face-adjacent leaves."""
    s = tree.cell_sizes_lattice()
    lo = tree.anchors
    hi = tree.anchors + s[:, None]
    n = tree.n_leaves
    lo_i = lo[:, None, :]
    hi_i = hi[:, None, :]
    ov_lo = np.maximum(lo_i, lo[None, :, :])
    ov_hi = np.minimum(hi_i, hi[None, :, :])
    gap = ov_hi - ov_lo
    touching = np.all(gap >= 0, axis=2)
    dim = np.sum(gap > 0, axis=2)
    adj = touching & (dim >= 1) & ~np.eye(n, dtype=bool)
    dl = np.abs(tree.levels[:, None] - tree.levels[None, :])
    return not np.any(adj & (dl > 1))


def random_tree(rng, d, max_leaves=500, max_depth=5):
    domain = UNIT2 if d == 2 else UNIT3
    p_split = 0.55 if d == 2 else 0.35

    def predicate(o):
        if o.level >= max_depth:
            return False
        return rng.random() < p_split / (1 + o.level * 0.35)

    tree = construct_tree(domain, predicate, max_depth, d=d)
    return tree


def test_no_refinement_single_root():
    tree = construct_tree(UNIT2, lambda o: False, 3, d=2)
    assert tree.n_leaves == 1
    assert tree.levels[0] == 0


def test_uniform_refinement_level3():
    tree = construct_tree(UNIT2, lambda o: o.level < 3, 3, d=2)
    assert tree.n_leaves == 64
    assert np.all(tree.levels == 3)
    assert tree.check_tiling()


def test_point_chase_matches_brute_force_oracle():
    point = (0.01, 0.01)

    def predicate(o):
        return o.contains_point(point)

    tree = construct_tree(UNIT2, predicate, 5, d=2)
    oracle = brute_force_refine(UNIT2, predicate, 5, 2)
    assert leaf_set(tree) == oracle
    assert tree.n_leaves == 16


def test_max_depth_cap_error():
    with pytest.raises(ConfigError):
        construct_tree(UNIT2, lambda o: False, 31, d=2)
    with pytest.raises(ConfigError):
        construct_tree(UNIT2, lambda o: False, 0, d=2)


def test_sfc_order_is_sorted_and_unique():
    rng = np.random.default_rng(0)
    tree = random_tree(rng, 2)
    keys = tree.sfc_keys(tree.levels, tree.anchors)
    assert np.all(np.diff(keys) > 0)


def test_balance_uniform_untouched():
    tree = uniform_tree(UNIT2, 3)
    out = enforce_2to1_balance(tree)
    assert leaf_set(out) == leaf_set(tree)


def test_balance_corner_spike_2d():
    # A deep leaf hugging the domain center is edge-adjacent to level-1
    # quadrants, forcing a transitive refinement ripple.
    point = (0.51, 0.51)
    tree = construct_tree(UNIT2, lambda o: o.contains_point(point), 4, d=2)
    assert not adjacent_pairs_balanced(tree)
    out = enforce_2to1_balance(tree)
    assert adjacent_pairs_balanced(out)
    assert is_balanced(out)
    assert out.check_tiling()
    # Only refinement happened: every original leaf is covered by leaves
    # of >= its level.
    assert out.n_leaves >= tree.n_leaves


def test_balance_spike_3d():
    point = (0.51, 0.51, 0.51)
    tree = construct_tree(UNIT3, lambda o: o.contains_point(point), 3, d=3)
    assert not adjacent_pairs_balanced(tree)
    out = enforce_2to1_balance(tree)
    assert adjacent_pairs_balanced(out)
    assert out.check_tiling()


def test_balance_randomized_small():
    rng = np.random.default_rng(7)
    for d in (2, 3):
        for _ in range(15):
            tree = random_tree(rng, d, max_depth=4)
            out = enforce_2to1_balance(tree)
            assert adjacent_pairs_balanced(out)
            assert out.check_tiling()


def test_refine_and_coarsen_keep_identity():
    tree = uniform_tree(UNIT2, 2)
    out = refine_and_coarsen(tree, np.full(tree.n_leaves, KEEP))
    assert leaf_set(out) == leaf_set(tree)


def test_refine_all_gives_uniform_next_level():
    tree = uniform_tree(UNIT2, 2, max_depth=4)
    out = refine_and_coarsen(tree, np.full(tree.n_leaves, REFINE))
    assert out.n_leaves == 64
    assert np.all(out.levels == 3)


def test_coarsen_only_full_families():
    tree = uniform_tree(UNIT2, 2, max_depth=4)
    flags = np.full(tree.n_leaves, KEEP)
    flags[0] = COARSEN  # single sibling flagged: no effect
    out = refine_and_coarsen(tree, flags)
    assert leaf_set(out) == leaf_set(tree)
    # Flag one complete family (children of the first level-1 cell).
    sizes = tree.cell_sizes_lattice()
    parent = (tree.anchors >> (tree.max_depth - 1)) << (tree.max_depth - 1)
    fam = np.all(parent == parent[0], axis=1)
    assert fam.sum() == 4
    flags = np.where(fam, COARSEN, KEEP)
    out = refine_and_coarsen(tree, flags)
    assert out.n_leaves == tree.n_leaves - 3
    assert out.check_tiling()
    del sizes


def test_coarsen_suppressed_by_balance():
    # Refine one corner to level 3 inside level-2 bulk, then ask the coarse
    # family next to it to coarsen: 2:1 re-balance must undo it.
    point = (0.01, 0.01)
    tree = construct_tree(UNIT2, lambda o: o.level < 2 or o.contains_point(point),
                          3, d=2)
    tree = enforce_2to1_balance(tree)
    flags = np.full(tree.n_leaves, KEEP)
    target = (tree.levels == 2) & (tree.anchors[:, 0] >= 2) & (tree.anchors[:, 0] < 4) \
        & (tree.anchors[:, 1] < 2)
    if target.sum() == 4:
        flags[target] = COARSEN
    out = refine_and_coarsen(tree, flags)
    assert adjacent_pairs_balanced(out)
    assert out.check_tiling()


def test_dump_load_roundtrip():
    rng = np.random.default_rng(3)
    tree = enforce_2to1_balance(random_tree(rng, 2))
    text = tree.dump()
    header = text.splitlines()[0].split()
    assert header == ["2", str(tree.max_depth), str(tree.n_leaves)]
    back = load_tree(text, domain=(tree.lo, tree.hi), root_grid=tree.root_grid)
    assert leaf_set(back) == leaf_set(tree)


def test_root_grid_tiles_stretched_domain():
    domain = (np.zeros(2), np.array([1.0, 4.0]))
    tree = uniform_tree(domain, 2, d=2, root_grid=(1, 4))
    assert tree.n_leaves == 4 * 16
    h = tree.cell_h()
    assert np.allclose(h, 0.25)  # square cells
    assert tree.check_tiling()
    out = enforce_2to1_balance(tree)
    assert leaf_set(out) == leaf_set(tree)


def test_find_leaves_identifies_containing_cells():
    tree = enforce_2to1_balance(
        construct_tree(UNIT2, lambda o: o.contains_point((0.9, 0.9)), 4, d=2))
    rng = np.random.default_rng(11)
    pts = rng.integers(0, tree.lattice_shape[0], size=(50, 2))
    idx = tree.find_leaves(pts)
    s = tree.cell_sizes_lattice()
    for p, i in zip(pts, idx):
        assert i >= 0
        assert np.all(tree.anchors[i] <= p)
        assert np.all(p < tree.anchors[i] + s[i])


def test_flags_shape_mismatch():
    tree = uniform_tree(UNIT2, 1)
    with pytest.raises(ContractError):
        refine_and_coarsen(tree, np.array([KEEP]))
