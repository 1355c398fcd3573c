import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acap import tensor as T
from acap.gradcheck import gradcheck
from acap.nn import Parameter
from acap.optim import Adam, AdamState, adam_step
from acap.tensor import Tensor


def rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_matmul_identity(rng):
    a = rng.standard_normal((3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradcheck(rng):
    assert gradcheck(T.matmul, [rand(rng, 4, 3), rand(rng, 3, 2)]) < 1e-6


def test_conv2d_hand_case():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    k = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert T.conv2d(x, k, 1, 0).data.tolist() == [[[5.0]]]


def test_conv2d_zero_kernel(rng):
    out = T.conv2d(rand(rng, 2, 5, 5), Tensor(np.zeros((3, 2, 3, 3))), 1, 1)
    assert out.shape == (3, 5, 5) and not out.data.any()


def direct_conv(x, k, stride, pad):
    c, h, w = x.shape
    o = k.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1
    out = np.zeros((o, ho, wo))
    for f in range(o):
        for i in range(ho):
            for j in range(wo):
                out[f, i, j] = np.sum(xp[:, i * stride : i * stride + 3, j * stride : j * stride + 3] * k[f])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_direct_sum(rng, stride, pad):
    x, k = rng.standard_normal((2, 7, 6)), rng.standard_normal((3, 2, 3, 3))
    ours = T.conv2d(Tensor(x), Tensor(k), stride, pad).data
    assert ours.shape == (3, (7 + 2 * pad - 3) // stride + 1, (6 + 2 * pad - 3) // stride + 1)
    assert np.allclose(ours, direct_conv(x, k, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1)])
def test_conv2d_gradcheck(rng, stride, pad):
    err = gradcheck(lambda x, k: T.conv2d(x, k, stride, pad), [rand(rng, 2, 5, 5), rand(rng, 3, 2, 3, 3)])
    assert err < 1e-4


def test_conv2d_bad_shapes(rng):
    with pytest.raises(T.ShapeError):
        T.conv2d(rand(rng, 1, 2, 2), rand(rng, 1, 1, 3, 3), 1, 0)
    with pytest.raises(T.ShapeError):
        T.conv2d(rand(rng, 1, 4, 4), rand(rng, 1, 1, 3, 3), 1, 2)


def bn_inputs(rng, c=3):
    return rand(rng, 4, c, 5, 6), Tensor(rng.uniform(0.5, 1.5, c), requires_grad=True), rand(rng, c)


def test_batchnorm_train_normalises(rng):
    x = Tensor(rng.normal(3.0, 2.0, (4, 3, 5, 6)))
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, training=True).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1.0) < 1e-4)
    batch_mean = x.data.mean(axis=(0, 2, 3))
    assert np.allclose(rm, 0.1 * batch_mean)


def test_batchnorm_eval_identity(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=False)
    assert np.allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-15)
    assert np.max(np.abs(y.data - x)) < 1e-5 * np.max(np.abs(x))


def test_batchnorm_zero_variance_channel():
    x = Tensor(np.ones((2, 1, 3, 3)))
    y = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), np.zeros(1), np.ones(1), training=True)
    assert np.all(np.isfinite(y.data)) and not y.data.any()


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(rng, training):
    x, g, b = bn_inputs(rng)

    def fn(x, g, b):
        return T.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), training)

    assert gradcheck(fn, [x, g, b]) < 1e-4


def test_masked_batchnorm_gradcheck(rng):
    x, g, b = bn_inputs(rng)
    mask = (np.arange(5)[None, :] < np.array([5, 3, 4, 2])[:, None]).astype(float)[:, None, :, None]
    fn = lambda x, g, b: T.batchnorm2d(x, g, b, np.zeros(3), np.ones(3), True, mask=mask) * mask
    assert gradcheck(fn, [x, g, b]) < 1e-4


def test_softmax_and_relu():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 50.0))
def test_softmax_rows_property(rows, cols, scale):
    x = np.random.default_rng(rows * 31 + cols).standard_normal((rows, cols)) * scale
    y = T.softmax(Tensor(x), axis=-1).data
    assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-6)
    assert np.all(y >= 0) and np.all(y <= 1)


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: T.softmax(x, axis=-1),
        lambda x: T.log_softmax(x, axis=0),
        lambda x: T.gelu(x),
        lambda x: T.relu(x),
        lambda x: T.exp(x),
        lambda x: x.abs(),
        lambda x: (x * x + 2.0) ** 0.5,
        lambda x: T.log(x * x + 1.0),
        lambda x: x.sum(axis=0),
        lambda x: x.mean(axis=1, keepdims=True),
        lambda x: x.max(axis=1),
        lambda x: x.transpose(1, 0).reshape(-1)[2:9],
        lambda x: x[np.array([0, 2, 2]), 1:],
        lambda x: T.avg_pool2d(x.reshape(1, 1, 4, 5)),
        lambda x: T.concat([x, x * 2.0], axis=1),
        lambda x: x / (x * x + 1.0),
        lambda x: 1.0 - x,
    ],
)
def test_elementwise_and_shape_gradcheck(rng, fn):
    assert gradcheck(fn, [rand(rng, 4, 5)]) < 1e-4


def test_broadcast_gradcheck(rng):
    fn = lambda a, b: (a + b) * b - a / (b * b + 1.0)
    assert gradcheck(fn, [rand(rng, 3, 4), rand(rng, 4)]) < 1e-4


def test_batched_matmul_gradcheck(rng):
    assert gradcheck(T.matmul, [rand(rng, 2, 3, 4, 5), rand(rng, 5, 2)]) < 1e-4


def test_layer_norm_gradcheck(rng):
    x = rand(rng, 4, 192)
    g = Tensor(rng.uniform(0.5, 1.5, 192), requires_grad=True)
    b = rand(rng, 192)
    assert gradcheck(T.layer_norm, [x, g, b], probes=200) < 1e-4


def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert abs(loss.item() - np.log(4)) < 1e-12


def test_cross_entropy_margin_to_zero():
    losses = []
    for margin in (1.0, 10.0, 40.0):
        logits = np.zeros((2, 5))
        logits[[0, 1], [2, 4]] = margin
        losses.append(T.cross_entropy(Tensor(logits), [2, 4]).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-15


def test_cross_entropy_matches_oracle(rng):
    logits = rng.standard_normal((5, 7))
    targets = np.array([0, 6, 3, 1, 3])
    oracle = -np.mean([logits[i, t] - np.log(np.sum(np.exp(logits[i]))) for i, t in enumerate(targets)])
    assert abs(T.cross_entropy(Tensor(logits), targets).item() - oracle) < 1e-10


def test_cross_entropy_ignore_and_empty(rng):
    logits = rng.standard_normal((4, 5))
    full = T.cross_entropy(Tensor(logits[:2]), [1, 2]).item()
    assert abs(T.cross_entropy(Tensor(logits), [1, 2, 0, 0], ignore_id=0).item() - full) < 1e-14
    with pytest.raises(ValueError, match="empty loss"):
        T.cross_entropy(Tensor(logits), [0, 0, 0, 0], ignore_id=0)


def test_cross_entropy_gradcheck(rng):
    t = np.array([1, 0, 4, 2, 0, 3])
    assert gradcheck(lambda x: T.cross_entropy(x, t, ignore_id=0), [rand(rng, 6, 5)]) < 1e-4
    assert gradcheck(lambda x: T.cross_entropy(x, t, reduction="sum"), [rand(rng, 6, 5)]) < 1e-4


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_second_backward_raises():
    x = Tensor(2.0, requires_grad=True)
    y = x * x + x
    y.backward()
    with pytest.raises(T.GraphFreedError):
        y.backward()


def test_grads_accumulate_over_reused_nodes():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y * y + y).backward()  # x^4 + x^2
    assert x.grad == 4 * 8 + 2 * 2


def test_no_grad_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_adam_first_step_closed_form():
    p = Parameter((1,))
    p.name = "w"
    state = AdamState()
    adam_step([p], [np.array([1.0])], state, lr=1e-3)
    assert abs(p.data[0] - (-1e-3)) < 1e-9
    assert state.step_count == 1


def test_adam_zero_grad_leaves_param():
    p = Parameter((3,))
    p.data = np.array([0.5, -1.0, 2.0])
    opt = Adam([p], lr=1e-2)
    p.grad = np.zeros(3)
    opt.step()
    assert p.data.tolist() == [0.5, -1.0, 2.0]


def test_adam_skips_frozen():
    a, b = Parameter((2,)), Parameter((2,))
    a.name, b.name = "a", "b"
    b.freeze()
    opt = Adam([a, b], lr=0.1)
    for _ in range(5):
        a.grad = np.ones(2)
        b.grad = np.ones(2)
        opt.step()
    assert not b.data.any() and a.data[0] < 0
    assert opt.state.step_count == 5


def _adam_run(seed):
    rng = np.random.default_rng(seed)
    p = Parameter((4, 3))
    p.data = rng.standard_normal((4, 3))
    x = rng.standard_normal((5, 4))
    opt = Adam([p], lr=1e-2)
    for _ in range(100):
        loss = (T.matmul(Tensor(x), p) ** 2).mean()
        loss.backward()
        opt.step()
        opt.zero_grad()
    return p.data


def test_adam_determinism():
    assert _adam_run(7).tobytes() == _adam_run(7).tobytes()
