import numpy as np
import pytest

from chns.errors import ContractError
from chns.fem import element_metric, hanging_face_weights, shape_table


def test_gauss_points_1d():
    tab = shape_table(1, 1, 2)
    assert np.allclose(np.sort(tab.quad_points[:, 0]),
                       [-1 / np.sqrt(3), 1 / np.sqrt(3)])
    assert np.allclose(tab.quad_weights, [1.0, 1.0])


def test_partition_of_unity_and_gradient_sum():
    for d in (2, 3):
        for nq in (2, 3):
            tab = shape_table(d, 1, nq)
            assert np.allclose(tab.values.sum(axis=1), 1.0, atol=1e-14)
            assert np.allclose(tab.gradients.sum(axis=1), 0.0, atol=1e-14)


def test_bilinear_integrates_to_quarter_of_area():
    tab = shape_table(2, 1, 2)
    integrals = tab.quad_weights @ tab.values
    assert np.allclose(integrals, 1.0, atol=1e-14)  # reference area 4 / 4 nodes


@pytest.mark.parametrize("degx,degy", [(0, 0), (1, 2), (3, 3), (2, 1)])
def test_quadrature_exactness_monomials(degx, degy):
    tab = shape_table(2, 1, 2)
    vals = tab.quad_points[:, 0] ** degx * tab.quad_points[:, 1] ** degy
    approx = float(tab.quad_weights @ vals)

    def exact_1d(p):
        return 0.0 if p % 2 == 1 else 2.0 / (p + 1)

    assert abs(approx - exact_1d(degx) * exact_1d(degy)) < 1e-14


def test_quadrature_exactness_nq3():
    tab = shape_table(2, 1, 3)
    vals = tab.quad_points[:, 0] ** 5 * tab.quad_points[:, 1] ** 4
    assert abs(float(tab.quad_weights @ vals) - 0.0) < 1e-14
    vals = tab.quad_points[:, 0] ** 4 * tab.quad_points[:, 1] ** 4
    assert abs(float(tab.quad_weights @ vals) - (2 / 5) ** 2) < 1e-14


def test_element_metric_values():
    assert np.allclose(element_metric((1.0, 1.0)), [4.0, 4.0])
    g = element_metric((1.0, 1.0))
    assert abs(np.sum(g ** 2) - 32.0) < 1e-14   # G:G for the unit square
    assert np.allclose(element_metric((2.0, 2.0)), [1.0, 1.0])
    assert np.allclose(element_metric((0.5, 0.25)), [16.0, 64.0])


def test_element_metric_rejects_nonpositive():
    with pytest.raises(ContractError):
        element_metric((1.0, 0.0))


def test_stiffness_matches_textbook_bilinear():
    # -Laplace stiffness on an h x h square: textbook Q1 matrix.
    h = 0.37
    tab = shape_table(2, 1, 2)
    scale = 2.0 / h
    grad = tab.gradients * scale  # physical gradients
    jac = (h / 2.0) ** 2
    K = np.einsum("q,qid,qjd->ij", tab.quad_weights, grad, grad) * jac
    K_ref = np.array([
        [4, -1, -1, -2],
        [-1, 4, -2, -1],
        [-1, -2, 4, -1],
        [-2, -1, -1, 4],
    ]) / 6.0
    assert np.allclose(K, K_ref, atol=1e-14)


def test_hanging_face_weights_cases():
    assert np.allclose(hanging_face_weights(1, [0.5]), [0.5, 0.5])
    assert np.allclose(hanging_face_weights(2, [0.5, 0.5]), [0.25] * 4)
    assert np.allclose(hanging_face_weights(2, [0.5, 0.0]), [0.5, 0.5, 0.0, 0.0])


def test_hanging_face_weights_rejects_multilevel():
    with pytest.raises(ContractError):
        hanging_face_weights(1, [0.25])


def test_unsupported_order_and_rule():
    with pytest.raises(ContractError):
        shape_table(2, 2, 2)
    with pytest.raises(ContractError):
        shape_table(2, 1, 4)
