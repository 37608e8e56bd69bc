"""Autodiff engine: every op against a float64 central finite-difference
oracle, plus the AdamW reference recurrence and checkpoint round-trips."""

import numpy as np
import pytest

from voxelworld import grad
from voxelworld.grad import AdamW, GradError, Tensor

EPS = 1e-3
REL_TOL = 1e-4


def silu64(x):
    return x / (1.0 + np.exp(-x))


def layer_norm64(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def fd_check(build_engine, reference, x0: np.ndarray):
    """Compare engine gradients with central differences of the f64 reference.

    build_engine(Tensor) -> scalar Tensor; reference(f64 array) -> float.
    """
    xt = Tensor(x0, requires_grad=True)
    loss = build_engine(xt)
    loss.backward()
    g = xt.grad.astype(np.float64)

    x64 = x0.astype(np.float64)
    flat = x64.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + EPS
        hi = reference(x64)
        flat[i] = orig - EPS
        lo = reference(x64)
        flat[i] = orig
        fd[i] = (hi - lo) / (2 * EPS)
    fd = fd.reshape(x0.shape)
    rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-2)
    assert rel.max() < REL_TOL, f"max relative error {rel.max():.2e}"


def rand(shape, seed, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, size=shape)
    # keep relu kinks away from the finite-difference window
    x[np.abs(x) < 2 * EPS] = 0.1
    return x.astype(np.float32)


# --------------------------------------------------------------------------
# forward examples


def test_matmul_known_product():
    a = Tensor(np.array([[1.0, 2, 3], [4, 5, 6]]))
    b = Tensor(np.array([[7.0, 8], [9, 10], [11, 12]]))
    assert np.allclose(grad.matmul(a, b).data, [[58, 64], [139, 154]])


def test_relu_values():
    out = grad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_layer_norm_constant_vector():
    out = grad.layer_norm(Tensor(np.full((2, 5), 3.0)))
    assert np.allclose(out.data, 0.0)


def test_sum_of_squares_analytic_grad():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    grad.sum_of_squares(x).backward()
    assert np.allclose(x.grad, [2.0, -4.0])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(GradError, match=r"\(2, 3\).*\(3, 2\)"):
        grad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_stale_graph_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = grad.mean(grad.mul(x, x))
    loss.backward()
    with pytest.raises(GradError, match="stale-graph"):
        loss.backward()


def test_disconnected_parameter_untouched_by_optimizer():
    used = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.full(2, 5.0), requires_grad=True)
    opt = AdamW([used, unused], lr=0.1, weight_decay=0.0)
    grad.sum_of_squares(used).backward()
    opt.step()
    assert np.array_equal(unused.data, [5.0, 5.0])
    assert not np.array_equal(used.data, [1.0, 1.0])


# --------------------------------------------------------------------------
# finite-difference oracle, one case per op


def test_fd_add_sub_mul():
    y = rand((3, 4), 1)
    fd_check(
        lambda x: grad.sum_of_squares(grad.mul(grad.add(x, Tensor(y)),
                                               grad.sub(x, Tensor(y)))),
        lambda x: float(np.sum(((x + y) * (x - y)) ** 2)),
        rand((3, 4), 2))


def test_fd_matmul():
    w = rand((4, 3), 3)
    fd_check(
        lambda x: grad.sum_of_squares(grad.matmul(x, Tensor(w))),
        lambda x: float(np.sum((x @ w) ** 2)),
        rand((2, 4), 4))


def test_fd_affine():
    w = rand((4, 3), 5)
    b = rand((3,), 6)
    fd_check(
        lambda x: grad.sum_of_squares(grad.affine(x, Tensor(w), Tensor(b))),
        lambda x: float(np.sum((x @ w + b) ** 2)),
        rand((2, 4), 7))


def test_fd_affine_weight_and_bias():
    x = rand((2, 4), 8)
    b = rand((3,), 9)
    fd_check(
        lambda w: grad.sum_of_squares(grad.affine(Tensor(x), w, Tensor(b))),
        lambda w: float(np.sum((x @ w + b) ** 2)),
        rand((4, 3), 10))
    w = rand((4, 3), 11)
    fd_check(
        lambda bb: grad.sum_of_squares(grad.affine(Tensor(x), Tensor(w), bb)),
        lambda bb: float(np.sum((x @ w + bb) ** 2)),
        rand((3,), 12))


def test_fd_relu():
    fd_check(
        lambda x: grad.sum_of_squares(grad.relu(x)),
        lambda x: float(np.sum(np.maximum(x, 0.0) ** 2)),
        rand((3, 5), 13))


def test_fd_silu():
    fd_check(
        lambda x: grad.sum_of_squares(grad.silu(x)),
        lambda x: float(np.sum(silu64(x) ** 2)),
        rand((3, 5), 14))


def test_fd_layer_norm():
    fd_check(
        lambda x: grad.sum_of_squares(grad.layer_norm(x)),
        lambda x: float(np.sum(layer_norm64(x) ** 2)),
        rand((2, 6), 15))


def test_fd_concat():
    y = rand((2, 3), 16)
    fd_check(
        lambda x: grad.sum_of_squares(grad.concat([x, Tensor(y)], axis=-1)),
        lambda x: float(np.sum(np.concatenate([x, y], axis=-1) ** 2)),
        rand((2, 4), 17))


def test_fd_mean():
    fd_check(
        lambda x: grad.mul(grad.mean(grad.mul(x, x)), Tensor(np.float32(3.0))),
        lambda x: float(np.mean(x * x) * 3.0),
        rand((4, 4), 18))


def test_fd_slice():
    fd_check(
        lambda x: grad.sum_of_squares(x[:, 1:3]),
        lambda x: float(np.sum(x[:, 1:3] ** 2)),
        rand((3, 5), 19))


def test_fd_reshape():
    fd_check(
        lambda x: grad.sum_of_squares(grad.reshape(x, (6, 2))),
        lambda x: float(np.sum(x.reshape(6, 2) ** 2)),
        rand((3, 4), 20))


def test_fd_broadcast():
    y = rand((3, 4), 21)
    fd_check(
        lambda x: grad.sum_of_squares(grad.mul(grad.broadcast_to(x, (3, 4)),
                                               Tensor(y))),
        lambda x: float(np.sum((np.broadcast_to(x, (3, 4)) * y) ** 2)),
        rand((4,), 22))


def test_fd_composite_mlp():
    # end-to-end through a small affine/silu/layer_norm stack
    w1 = rand((5, 8), 23)
    b1 = rand((8,), 24)
    w2 = rand((8, 2), 25)
    b2 = rand((2,), 26)

    def engine(x):
        h = grad.silu(grad.affine(x, Tensor(w1), Tensor(b1)))
        h = grad.layer_norm(h)
        return grad.sum_of_squares(grad.affine(h, Tensor(w2), Tensor(b2)))

    def ref(x):
        h = layer_norm64(silu64(x @ w1 + b1))
        return float(np.sum((h @ w2 + b2) ** 2))

    fd_check(engine, ref, rand((3, 5), 27))


# --------------------------------------------------------------------------
# optimizer


def adamw_reference(p, g, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.01):
    """Published AdamW recurrence, implemented independently in f64."""
    m, v, t = state
    t += 1
    p = p * (1.0 - lr * wd)
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p, (m, v, t)


def test_adamw_single_step_scalar():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    assert abs(p.data[0] - 0.9) < 1e-6


def test_adamw_zero_grad_no_motion():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == 3.0


def test_adamw_decoupled_decay():
    p = Tensor(np.array([2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert abs(p.data[0] - 2.0 * (1 - 0.1 * 0.5)) < 1e-7


def test_adamw_matches_reference_over_ten_steps():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=6).astype(np.float32)
    p = Tensor(p0.copy(), requires_grad=True)
    opt = AdamW([p], lr=3e-3, weight_decay=0.01)
    ref = p0.astype(np.float64)
    state = (np.zeros(6), np.zeros(6), 0)
    for step in range(10):
        g = rng.normal(size=6).astype(np.float32)
        p.grad = g.copy()
        opt.step()
        opt.zero_grad()
        ref, state = adamw_reference(ref, g.astype(np.float64), state, 3e-3)
    assert np.allclose(p.data, ref, atol=1e-5)


# --------------------------------------------------------------------------
# determinism and checkpoints


def test_backward_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(8, 8)).astype(np.float32), requires_grad=True)
        loss = grad.sum_of_squares(grad.silu(grad.matmul(x, w)))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])
    assert np.array_equal(a[2], b[2])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "fc.w": rng.normal(size=(3, 4)).astype(np.float32),
        "fc.b": rng.normal(size=4).astype(np.float32),
    }
    path = tmp_path / "model.bin"
    grad.save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"PSTW"
    back = grad.load_tensors(path)
    assert set(back) == {"fc.w", "fc.b"}
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])
