import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_fd, rel_err
from veronica import policy_net as pn
from veronica.errors import ContractError


def naive_forward(W, z):
    """Independent matrix-chain evaluation using explicit loops over layers and units."""
    dims = W.layer_dims
    off = 0
    a = list(z)
    for l, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
        Wm = [[W.flat[off + r * i + c] for c in range(i)] for r in range(o)]
        off += i * o
        b = W.flat[off: off + o]
        off += o
        pre = [sum(Wm[r][c] * a[c] for c in range(i)) + b[r] for r in range(o)]
        a = pre if l == len(dims) - 2 else [np.tanh(p) for p in pre]
    return np.array(a)


def test_zero_weights_output_final_bias():
    W = pn.init((3, 5, 2), 0)
    flat = np.zeros_like(W.flat)
    flat[-2:] = [0.3, -0.7]
    np.testing.assert_array_equal(pn.forward(W.with_flat(flat), np.ones(3)), [0.3, -0.7])


def test_identity_linear_layer():
    W = pn.MlpParams((3, 3), np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    z = np.array([0.1, -2.0, 5.0])
    np.testing.assert_array_equal(pn.forward(W, z), z)


def test_forward_matches_naive_chain():
    W = pn.init((4, 7, 5, 2), 3)
    W = W.with_flat(W.flat + 0.1 * np.random.default_rng(0).normal(size=W.flat.size))
    for z in np.random.default_rng(1).normal(size=(5, 4)):
        np.testing.assert_allclose(pn.forward(W, z), naive_forward(W, z), rtol=1e-13, atol=1e-14)


def test_batched_forward_equals_rowwise():
    W = pn.init((3, 8, 1), 2)
    Z = np.random.default_rng(2).normal(size=(6, 3))
    # BLAS may block a matrix product differently from a matrix-vector product
    np.testing.assert_allclose(pn.forward(W, Z), np.array([pn.forward(W, z) for z in Z]), rtol=1e-14, atol=1e-15)


def test_zero_upstream_gives_zero_gradients():
    W = pn.init((3, 8, 2), 4)
    z = np.ones(3)
    assert not pn.grad_params(W, z, np.zeros(2)).any()
    assert not pn.grad_input(W, z, np.zeros(2)).any()


def test_linear_layer_gradients_closed_form():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(2, 3))
    W = pn.MlpParams((3, 2), np.concatenate([A.ravel(), np.zeros(2)]))
    z, c = rng.normal(size=3), rng.normal(size=2)
    g = pn.grad_params(W, z, c)
    np.testing.assert_allclose(g[:6].reshape(2, 3), np.outer(c, z))
    np.testing.assert_allclose(g[6:], c)
    np.testing.assert_allclose(pn.grad_input(W, z, c), A.T @ c)


@pytest.mark.parametrize("dims", [(4, 16, 2), (5, 32, 32, 1), (3, 64, 64, 3)])
def test_gradients_match_fd(dims):
    rng = np.random.default_rng(sum(dims))
    W = pn.init(dims, 7)
    Z, C = rng.normal(size=(3, dims[0])), rng.normal(size=(3, dims[-1]))
    obj = lambda flat: float((pn.forward(W.with_flat(flat), Z) * C).sum())
    assert rel_err(pn.grad_params(W, Z, C), central_fd(obj, W.flat)) <= 1e-5
    obj_z = lambda zf: float((pn.forward(W, zf.reshape(Z.shape)) * C).sum())
    assert rel_err(pn.grad_input(W, Z, C).ravel(), central_fd(obj_z, Z.ravel())) <= 1e-5


def test_jvp_and_input_jacobian_consistent():
    rng = np.random.default_rng(8)
    W = pn.init((4, 10, 3), 1)
    z, v = rng.normal(size=4), rng.normal(size=4)
    J = pn.input_jacobian(W, z)
    np.testing.assert_allclose(pn.jvp(W, z, v)[1], J @ v, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(J, central_fd(lambda zz: pn.forward(W, zz), z), rtol=1e-7, atol=1e-9)


def test_second_order_on_linear_network():
    # phi(W) = grad_delta |A delta|^2 . v = 2 (A delta)^T (A v); check d phi / dA by FD
    rng = np.random.default_rng(9)
    A = rng.normal(size=(2, 3))
    W = pn.MlpParams((3, 2), np.concatenate([A.ravel(), np.zeros(2)]))
    delta, v = rng.normal(size=3), rng.normal(size=3)
    u = pn.forward(W, delta)
    g_flat, _ = pn.second_order_vjp(W, delta, v, np.zeros(2), 2.0 * u)
    # hand formula for the tangent part: d/dA [2 (A delta)^T A v] with A delta held as cotangent
    hand = 2.0 * np.outer(u, v)
    np.testing.assert_allclose(g_flat[:6].reshape(2, 3), hand, rtol=1e-12)

    def phi(flat):
        Wf = W.with_flat(flat)
        return float(pn.grad_input(Wf, delta, 2.0 * pn.forward(Wf, delta)) @ v)

    full = central_fd(phi, W.flat)
    g_full, _ = pn.second_order_vjp(W, delta, v, 2.0 * pn.jvp(W, delta, v)[1], 2.0 * u)
    assert rel_err(g_full, full) <= 1e-5


def test_second_order_vanishes_at_zero_perturbation():
    # r(z, W, delta) = |pi(z) - pi(z+delta)|^2: its delta-gradient is 0 at delta=0 for every W
    rng = np.random.default_rng(10)
    W = pn.init((3, 8, 2), 2)
    z, v = rng.normal(size=3), rng.normal(size=3)
    e = pn.forward(W, z) - pn.forward(W, z)
    g_flat, g_z = pn.second_order_vjp(W, z, v, np.zeros(2), -2.0 * e)
    assert not g_flat.any() and not g_z.any()


@pytest.mark.parametrize("dims", [(4, 16, 2), (3, 32, 32, 1)])
def test_second_order_random_tanh_matches_fd_of_gradient(dims):
    rng = np.random.default_rng(11)
    W = pn.init(dims, 5)
    Z = rng.normal(size=(2, dims[0]))
    V = rng.normal(size=Z.shape)
    C = rng.normal(size=(2, dims[-1]))
    Co = rng.normal(size=(2, dims[-1]))

    def phi_w(flat):
        Wf = W.with_flat(flat)
        return float((pn.grad_input(Wf, Z, C) * V).sum() + (pn.forward(Wf, Z) * Co).sum())

    def phi_z(zf):
        Zf = zf.reshape(Z.shape)
        return float((pn.grad_input(W, Zf, C) * V).sum() + (pn.forward(W, Zf) * Co).sum())

    g_flat, g_z = pn.second_order_vjp(W, Z, V, Co, C)
    assert rel_err(g_flat, central_fd(phi_w, W.flat, 1e-5)) <= 1e-4
    assert rel_err(g_z.ravel(), central_fd(phi_z, Z.ravel(), 1e-5)) <= 1e-4


def test_init_deterministic_and_seed_dependent():
    a, b, c = pn.init((5, 32, 2), 1), pn.init((5, 32, 2), 1), pn.init((5, 32, 2), 2)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)


def test_init_scale_follows_fan_in():
    for fan_in in (16, 256):
        W = pn.init((fan_in, 200), 0)
        Wm, b = W.layers()[0]
        assert abs(Wm.std() * np.sqrt(fan_in) - 1.0) < 0.05
        assert not b.any()


def test_contract_errors():
    with pytest.raises(ContractError):
        pn.MlpParams((3, 2), np.zeros(5))
    with pytest.raises(ContractError):
        pn.forward(pn.init((3, 2), 0), np.zeros(4))


@given(st.integers(0, 2**31 - 1), st.floats(1.0, 50.0))
def test_forward_bounded_lipschitz_on_ball(seed, radius):
    rng = np.random.default_rng(seed)
    W = pn.init((3, 16, 16, 2), seed % 1000)
    bound = np.prod([np.linalg.norm(Wl, 2) for Wl, _ in W.layers()])
    z1, z2 = rng.uniform(-radius, radius, size=(2, 3))
    gap = np.linalg.norm(pn.forward(W, z1) - pn.forward(W, z2))
    assert gap <= bound * np.linalg.norm(z1 - z2) * (1 + 1e-12)
