"""Reference-element shape functions, Gauss quadrature and geometric factors.

Elements are axis-aligned quads/hexes mapped affinely from the reference cube
[-1, 1]^d.  Local nodes are ordered by binary counting of the corner bits with
axis 0 fastest: in 2D (0,0), (1,0), (0,1), (1,1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ContractError

# Gauss-Legendre rules on [-1, 1].
_GAUSS = {
    2: (np.array([-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0)]), np.array([1.0, 1.0])),
    3: (
        np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)]),
        np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]),
    ),
}


def corner_bits(d: int) -> np.ndarray:
    """Corner bit patterns of the reference cube, shape (2**d, d), axis 0 fastest."""
    n = 2 ** d
    idx = np.arange(n)
    return np.stack([(idx >> a) & 1 for a in range(d)], axis=1)


@dataclass(frozen=True)
class ShapeTable:
    """Shape function values and reference gradients at tensor Gauss points.

    Attributes
    ----------
    d : spatial dimension (2 or 3)
    order : polynomial order (only 1 supported)
    values : (nq_total, n_loc) N_i(xi_q)
    gradients : (nq_total, n_loc, d) dN_i/dxi_j at xi_q
    quad_points : (nq_total, d) Gauss points in [-1, 1]^d
    quad_weights : (nq_total,) tensor-product weights
    """

    d: int
    order: int
    values: np.ndarray
    gradients: np.ndarray
    quad_points: np.ndarray
    quad_weights: np.ndarray

    @property
    def n_loc(self) -> int:
        return self.values.shape[1]

    @property
    def nq(self) -> int:
        return self.values.shape[0]


@lru_cache(maxsize=16)
def shape_table(d: int, r: int = 1, nq: int = 2) -> ShapeTable:
    """Tensor-product Gauss-Legendre rule with bilinear/trilinear shape data.

    The rule is exact for polynomials of degree 2*nq - 1 per axis.
    """
    if r != 1:
        raise ContractError(f"element order r={r} not supported (only r=1)")
    if nq not in _GAUSS:
        raise ContractError(f"nq={nq} not supported (use 2 or 3)")
    if d not in (1, 2, 3):
        raise ContractError(f"dimension d={d} not supported")
    pts1, wts1 = _GAUSS[nq]
    # Tensor grids with axis 0 fastest, matching the local node convention.
    grids = np.meshgrid(*([pts1] * d), indexing="ij")
    pts = np.stack([g.reshape(-1, order="F") for g in grids], axis=1)
    wgrids = np.meshgrid(*([wts1] * d), indexing="ij")
    wts = np.ones(nq ** d)
    for g in wgrids:
        wts = wts * g.reshape(-1, order="F")
    bits = corner_bits(d)  # (n_loc, d)
    signs = 2.0 * bits - 1.0
    # N_i(xi) = prod_a (1 + s_ia xi_a) / 2
    one_plus = 1.0 + pts[:, None, :] * signs[None, :, :]  # (nq, n_loc, d)
    vals = np.prod(one_plus, axis=2) / 2.0 ** d
    grads = np.empty((pts.shape[0], bits.shape[0], d))
    for j in range(d):
        others = [a for a in range(d) if a != j]
        prod = np.ones((pts.shape[0], bits.shape[0]))
        for a in others:
            prod *= one_plus[:, :, a]
        grads[:, :, j] = signs[None, :, j] * prod / 2.0 ** d
    return ShapeTable(d=d, order=r, values=vals, gradients=grads,
                      quad_points=pts, quad_weights=wts)


@dataclass(frozen=True)
class ElementGeometry:
    """Geometric factors of an axis-aligned element batch.

    h has shape (n_e, d); the mapping is x = origin + h * (xi + 1) / 2, so the
    inverse Jacobian is diagonal with entries 2/h_j.
    """

    h: np.ndarray
    jacobian_det: np.ndarray = field(init=False)
    inv_jacobian: np.ndarray = field(init=False)

    def __post_init__(self):
        h = np.atleast_2d(np.asarray(self.h, dtype=float))
        if np.any(h <= 0.0):
            raise ContractError("element edge lengths must be positive")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "jacobian_det", np.prod(h / 2.0, axis=1))
        object.__setattr__(self, "inv_jacobian", 2.0 / h)

    @property
    def metric(self) -> np.ndarray:
        """Diagonal of the element metric tensor, (n_e, d) with entries (2/h_j)^2."""
        return element_metric(self.h)


def element_metric(h) -> np.ndarray:
    """Diagonal entries (2/h_j)^2 of the metric tensor of the affine map
    xi = 2 (x - x_c) / h.  Accepts a single element (d,) or a batch (n_e, d)."""
    h = np.asarray(h, dtype=float)
    if np.any(h <= 0.0):
        raise ContractError("element edge lengths must be positive")
    return (2.0 / h) ** 2


def hanging_face_weights(face_dim: int, xi) -> np.ndarray:
    """Interpolation weights of a hanging position on a coarse facet.

    Parameters
    ----------
    face_dim : dimension of the facet (1 = edge, 2 = face).
    xi : position inside the facet in [0, 1]^face_dim reference coordinates.

    Returns the 2**face_dim linear shape values at xi, in corner-bit order.
    Only single-level hanging positions (coordinates in {0, 1/2, 1}) are
    accepted.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (face_dim,):
        raise ContractError(f"xi must have {face_dim} components")
    if not np.all(np.isin(xi, (0.0, 0.5, 1.0))):
        raise ContractError("multi-level hanging position rejected: "
                            "coordinates must lie on the half-index lattice")
    bits = corner_bits(face_dim)
    w = np.prod(np.where(bits == 1, xi[None, :], 1.0 - xi[None, :]), axis=1)
    return w
