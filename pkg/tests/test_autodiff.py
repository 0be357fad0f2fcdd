import numpy as np
import pytest

from semgap import autodiff as ad
from semgap import model as M
from semgap.errors import ConfigError, ShapeError
from semgap.reference import run_reference

H = 1e-6
KINK_MARGIN = 1e-4


def test_relu_sum_gradient_uses_zero_at_negative_inputs():
    tape = ad.Tape()
    x = tape.leaf(np.array([-1.0, 2.0]), "x")
    g = ad.backward(tape, ad.total(ad.relu(x)), [x])["x"]
    assert g.grad.tolist() == [0.0, 1.0] and g.reachable


def test_relu_gradient_at_exact_zero_is_zero():
    tape = ad.Tape()
    x = tape.leaf(np.array([0.0, 0.0]), "x")
    assert ad.backward(tape, ad.total(ad.relu(x)), [x])["x"].grad.tolist() == [0.0, 0.0]


def test_linear_loss_gradient_is_the_input():
    rng = np.random.default_rng(0)
    xv = rng.standard_normal((1, 5))
    tape = ad.Tape()
    x = tape.const(xv)
    w = tape.leaf(rng.standard_normal((1, 5)), "w")
    b = tape.leaf(np.zeros(1), "b")
    g = ad.backward(tape, ad.total(ad.dense(x, w, b)), [w, b])
    assert np.array_equal(g["w"].grad, xv)
    assert g["b"].grad.tolist() == [1.0]


def test_non_scalar_loss_is_rejected():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3), "x")
    with pytest.raises(ShapeError):
        ad.backward(tape, ad.relu(x), [x])


def test_unreachable_variable_gets_flagged_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3), "x")
    y = tape.leaf(np.full((2, 2), 5.0), "y")
    g = ad.backward(tape, ad.total(x), [x, y])
    assert g["x"].reachable and not g["y"].reachable
    assert g["y"].grad.shape == (2, 2) and not g["y"].grad.any()


def test_variable_from_another_tape_is_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.leaf(np.ones(2), "x")
    with pytest.raises(ConfigError):
        ad.backward(t1, ad.total(x), [t2.leaf(np.ones(2), "z")])


def test_forward_values_are_the_reference_executor_bits():
    rng = np.random.default_rng(1)
    m = random_graph(rng, np.float32)
    x = rng.random((3,) + m.input_shape).astype(np.float32)
    _, _, out, _ = ad.trace(m, x)
    assert out.value.tobytes() == run_reference(m, x).tobytes()


def test_gradient_shapes_match_values():
    rng = np.random.default_rng(2)
    m = random_graph(rng, np.float64)
    x = rng.random((2,) + m.input_shape)
    tape, xin, out, pvars = ad.trace(m, x)
    g = ad.backward(tape, ad.cross_entropy(out, [0, 1]), [xin] + list(pvars.values()))
    for var in [xin] + list(pvars.values()):
        assert g[var.name].grad.shape == var.value.shape


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    m = random_graph(rng, np.float32)
    x = rng.random((4,) + m.input_shape).astype(np.float32)

    def grads():
        tape, xin, out, pvars = ad.trace(m, x)
        g = ad.backward(tape, ad.cross_entropy(out, [0, 1, 0, 1]), [xin] + list(pvars.values()))
        return b"".join(g[k].grad.tobytes() for k in sorted(g))

    assert grads() == grads()


def test_patch_overwrite_gradients():
    tape = ad.Tape()
    x = tape.leaf(np.ones((2, 1, 3, 3)), "x")
    p = tape.leaf(np.zeros((1, 2, 2)), "p")
    y = ad.patch_overwrite(x, p, 1, 1)
    g = ad.backward(tape, ad.total(y), [x, p])
    assert g["p"].grad.tolist() == [[[2.0, 2.0], [2.0, 2.0]]]
    assert g["x"].grad[:, :, 1:, 1:].sum() == 0 and g["x"].grad.sum() == 2 * 5


# --------------------------------------------------------------------------- finite-difference oracle

def random_graph(rng, dtype):
    """Small random chain: optional affine prologue, Conv or Dense, Relu, Dense head."""
    C, Hh, W = int(rng.integers(1, 3)), int(rng.integers(3, 6)), int(rng.integers(3, 6))
    k = int(rng.integers(2, 5))
    nodes = [M.input_node()]
    if rng.random() < 0.5:
        nodes.append(M.affine("pre", rng.uniform(0.5, 1.5, C).astype(dtype), rng.uniform(-0.2, 0.2, C).astype(dtype)))
        nodes.append(M.sub_const("sub", rng.uniform(-0.1, 0.1), dtype))
        nodes.append(M.div_const("div", rng.uniform(0.8, 1.2), dtype))
    if rng.random() < 0.5:
        F = int(rng.integers(1, 4))
        kh = int(rng.integers(1, 3))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        nodes.append(M.conv2d("conv", rng.standard_normal((F, C, kh, kh)).astype(dtype),
                              (0.1 * rng.standard_normal(F)).astype(dtype), stride, pad))
        nodes += [M.simple("relu", "Relu"), M.simple("flat", "Flatten")]
    else:
        hidden = int(rng.integers(2, 7))
        nodes += [M.simple("flat", "Flatten"),
                  M.dense("hid", (rng.standard_normal((hidden, C * Hh * W)) / 3).astype(dtype),
                          (0.1 * rng.standard_normal(hidden)).astype(dtype)),
                  M.simple("relu", "Relu")]
    probe = M.GraphModel(tuple(nodes), (C, Hh, W))
    width = probe.output_shape[0]
    nodes.append(M.dense("mid", (rng.standard_normal((4, width)) / 2).astype(dtype),
                         (0.1 * rng.standard_normal(4)).astype(dtype)))
    nodes.append(M.simple("relu2", "Relu"))
    nodes.append(M.dense("head", rng.standard_normal((k, 4)).astype(dtype), rng.standard_normal(k).astype(dtype)))
    nodes.append(M.simple("out", "Output"))
    return M.GraphModel(tuple(nodes), (C, Hh, W))


def loss_value(model, x, labels):
    z = run_reference(model, x)
    return float(-np.mean(ad.log_softmax(z)[np.arange(len(labels)), labels]))


def near_kink(model, x):
    cur = np.asarray(x)
    for i, n in enumerate(model.nodes):
        if n.kind != "Relu":
            continue
        prefix = M.GraphModel(model.nodes[:i], model.input_shape)
        if np.min(np.abs(run_reference(prefix, cur))) < KINK_MARGIN:
            return True
    return False


def central_difference(f, value):
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    g = grad.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + H
        up = f()
        flat[j] = old - H
        down = f()
        flat[j] = old
        g[j] = (up - down) / (2 * H)
    return grad


def relative_error(g, fd):
    """Max-norm relative error of one gradient tensor."""
    scale = max(np.abs(fd).max(), np.abs(g).max())
    return 0.0 if scale == 0 else float(np.abs(g - fd).max() / scale)


def fd_check(rng):
    while True:
        m = random_graph(rng, np.float64)
        x = rng.random((2,) + m.input_shape)
        if not near_kink(m, x):
            break
    labels = rng.integers(0, m.num_classes, 2)
    tape, xin, out, pvars = ad.trace(m, x)
    g = ad.backward(tape, ad.cross_entropy(out, labels), [xin] + list(pvars.values()))
    worst = relative_error(g["input"].grad, central_difference(lambda: loss_value(m, x, labels), x))
    for name, var in pvars.items():
        node_id, key = name.split(".")
        value = np.array(var.value)

        def f():
            mm = m.replace_node(m.node(node_id).with_params(**{key: value}))
            return loss_value(mm, x, labels)

        worst = max(worst, relative_error(g[name].grad, central_difference(f, value)))
    return worst


def max_fd_error(graphs, seed):
    rng = np.random.default_rng(seed)
    return max(fd_check(rng) for _ in range(graphs))


def test_gradients_match_central_differences_on_random_graphs():
    assert max_fd_error(20, seed=10) <= 1e-5
