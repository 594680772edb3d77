import numpy as np
import pytest

from dgmp.core.base.manifolds import Cotangent, Metric, Tangent
from dgmp.utils.exceptions import ManifoldError
from dgmp.v1.services.manifold import (
    SO3,
    Euclidean,
    ManifoldService,
    Product,
    exp_so3,
    hat,
    log_so3,
    right_jacobian,
    right_jacobian_inverse,
    vee,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_hat_is_cross_product(rng):
    """hat(a) @ b is the cross product and vee undoes hat."""
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    assert np.allclose(hat(a) @ b, np.cross(a, b), atol=1e-14)
    assert np.allclose(vee(hat(a)), a, atol=1e-14)


def test_vee_rejects_non_skew_matrix():
    with pytest.raises(ManifoldError):
        vee(np.eye(3))


def test_exp_is_a_rotation(rng):
    R = exp_so3(rng.standard_normal(3))
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-14
    assert np.isclose(np.linalg.det(R), 1.0)


def test_log_inverts_exp(rng):
    for _ in range(20):
        a = rng.uniform(-1.5, 1.5, 3)
        assert np.allclose(log_so3(exp_so3(a)), a, atol=1e-12)


def test_log_near_half_turn():
    """Angles close to π take the symmetric-part branch."""
    axis = np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)
    a = (np.pi - 1e-7) * axis
    assert np.allclose(log_so3(exp_so3(a)), a, atol=1e-6)


def test_right_jacobian_first_order(rng):
    """exp(a + δ) ≈ exp(a) exp(Jr(a) δ) to second order in δ."""
    a = rng.uniform(-1.0, 1.0, 3)
    delta = 1e-6 * rng.standard_normal(3)
    lhs = exp_so3(a + delta)
    rhs = exp_so3(a) @ exp_so3(right_jacobian(a) @ delta)
    assert np.linalg.norm(lhs - rhs) < 1e-11


def test_right_jacobian_inverse(rng):
    for scale in (1e-6, 0.5, 2.0):
        a = scale * rng.standard_normal(3)
        assert np.allclose(right_jacobian_inverse(a) @ right_jacobian(a), np.eye(3), atol=1e-10)


def test_so3_point_repairs_small_drift():
    G = SO3()
    drifted = exp_so3([0.1, 0.2, 0.3]) + 1e-8
    R = G.point(drifted).coords
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-12


def test_so3_point_rejects_far_matrices():
    G = SO3()
    with pytest.raises(ManifoldError):
        G.point(np.eye(3) * 1.001)
    with pytest.raises(ManifoldError):
        G.point(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ManifoldError):
        G.point(np.eye(2))


def test_euclidean_point_checks_length():
    with pytest.raises(ManifoldError):
        Euclidean(3).point([1.0, 2.0])
    with pytest.raises(ManifoldError):
        Euclidean(1).point([np.nan])


def test_cross_manifold_use_is_rejected():
    x = Euclidean(3).point(np.zeros(3))
    with pytest.raises(ManifoldError):
        Euclidean(2).retract(x, np.zeros(2))
    with pytest.raises(ManifoldError):
        ManifoldService.retract(x, Tangent(Euclidean(2), Euclidean(2).identity(), [1.0, 0.0]))


def test_metric_must_be_positive_definite():
    with pytest.raises(ManifoldError):
        Metric.from_matrix([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ManifoldError):
        Euclidean(3, Metric.from_matrix(np.eye(2)))


def test_coadjoint_on_so3_is_the_rotation(rng):
    G = SO3()
    g = G.point(exp_so3(rng.standard_normal(3)))
    p = rng.standard_normal(3)
    result = ManifoldService.coadjoint(g, Cotangent(G, G.identity(), p))
    assert np.allclose(result.covec, g.coords @ p, atol=1e-14)


def test_adjoint_preserves_bracket(rng):
    """Ad(g)[a, b] = [Ad(g)a, Ad(g)b] with the cross product as bracket."""
    G = SO3()
    g = G.point(exp_so3(rng.standard_normal(3)))
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    e = G.identity()
    ad = lambda v: ManifoldService.adjoint(g, Tangent(G, e, v)).vec  # noqa: E731
    assert np.allclose(ad(np.cross(a, b)), np.cross(ad(a), ad(b)), atol=1e-12)


def test_group_operations(rng):
    G = SO3()
    g = G.point(exp_so3(rng.standard_normal(3)))
    product = ManifoldService.group_mul(g, ManifoldService.group_inv(g))
    assert np.allclose(product.coords, np.eye(3), atol=1e-14)
    with pytest.raises(ManifoldError):
        ManifoldService.group_mul(g, Euclidean(3).identity())


def test_product_retract_round_trip(rng):
    P = Product((Euclidean(2), SO3()))
    x = P.point((rng.standard_normal(2), exp_so3(rng.standard_normal(3))))
    v = 0.3 * rng.standard_normal(P.dim)
    y = P.retract(x, v)
    assert np.allclose(P.inverse_retract(x, y), v, atol=1e-12)
    assert P.flatten(y).shape == (11,)
    assert P.metric_matrix().shape == (5, 5)
