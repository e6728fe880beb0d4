import numpy as np
import pytest
import torch
from torch import nn

from numgame import diffcore
from numgame.errors import NonFiniteValue, NonScalarRoot

TOL = 1e-3


def test_forward_backward_square_sum():
    x = torch.tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = diffcore.forward_backward((x * x).sum(), [x])
    assert g.tolist() == [2.0, 4.0, 6.0]


def test_forward_backward_constant_root_gives_zero():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    (g,) = diffcore.forward_backward(torch.tensor(3.0), [x])
    assert g.tolist() == [0.0, 0.0]


def test_forward_backward_errors():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(NonScalarRoot):
        diffcore.forward_backward(x * 2, [x])
    with pytest.raises(NonFiniteValue) as err:
        diffcore.forward_backward(torch.log(x - 1.0).sum(), [x])
    assert err.value.op


def test_grad_check_square():
    assert diffcore.grad_check(lambda x: (x * x).sum(), [3.0], eps=1e-4) < 1e-6


def _seeded(module, seed=0):
    torch.manual_seed(seed)
    return module().double()


LAYERS = {
    "conv2d": (lambda: nn.Conv2d(2, 3, 3, padding=1), (1, 2, 5, 5), False),
    "maxpool": (lambda: nn.MaxPool2d(2), (1, 2, 4, 4), True),
    "avgpool": (lambda: nn.AvgPool2d(2), (1, 2, 4, 4), False),
    "linear": (lambda: nn.Linear(4, 3), (2, 4), False),
    "tanh": (lambda: nn.Tanh(), (3, 4), False),
    "relu": (lambda: nn.ReLU(), (3, 4), True),
    "sigmoid": (lambda: nn.Sigmoid(), (3, 4), False),
    "softmax": (lambda: nn.Softmax(dim=-1), (3, 4), False),
}


def _kink_mask(name, x, eps):
    if name == "relu":
        return np.abs(x) < 10 * eps
    if name == "maxpool":
        # ties within a pooling window make the max non-differentiable
        v = x.reshape(1, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 2, 2, 2, 4)
        srt = np.sort(v, axis=-1)
        close = (srt[..., -1] - srt[..., -2]) < 10 * eps
        mask = np.repeat(close[..., None], 4, axis=-1).reshape(1, 2, 2, 2, 2, 2)
        return mask.transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
    return None


@pytest.mark.parametrize("name", sorted(LAYERS))
@pytest.mark.parametrize("point", range(5))
def test_layer_grad_check(name, point):
    make, shape, _ = LAYERS[name]
    layer = _seeded(make, seed=point)
    rng = np.random.default_rng(100 + point)
    x = rng.normal(size=shape)
    w = torch.as_tensor(rng.normal(size=layer(torch.as_tensor(x)).shape))
    eps = 1e-6
    err = diffcore.grad_check(lambda t: (layer(t) * w).sum(), x, eps=eps, exclude=_kink_mask(name, x, eps))
    assert err < TOL


@pytest.mark.parametrize("point", range(5))
def test_parameter_grad_check_conv_pool_affine_chain(point):
    torch.manual_seed(point)
    conv = nn.Conv2d(1, 2, 3, padding=1).double()
    lin = nn.Linear(8, 1).double()
    x = torch.as_tensor(np.random.default_rng(point).normal(size=(1, 1, 4, 4)))
    w0 = conv.weight.detach().clone()

    def f(w):
        y = nn.functional.conv2d(x, w, conv.bias, padding=1)
        return lin(nn.functional.avg_pool2d(torch.tanh(y), 2).flatten(1)).sum()

    assert diffcore.grad_check(f, w0.numpy(), eps=1e-3) < TOL


@pytest.mark.parametrize("point", range(5))
def test_lstm_cell_grad_check(point):
    torch.manual_seed(point)
    cell = nn.LSTMCell(3, 4).double()
    rng = np.random.default_rng(point)
    h0 = torch.as_tensor(rng.normal(size=(2, 4)))
    c0 = torch.as_tensor(rng.normal(size=(2, 4)))
    x = rng.normal(size=(2, 3))

    def f(t):
        h, c = cell(t, (h0, c0))
        h, c = cell(t, (h, c))
        return (h * 1.3 + c).sum()

    assert diffcore.grad_check(f, x) < TOL


@pytest.mark.parametrize("point", range(5))
def test_relaxed_sampler_grad_check(point):
    rng = np.random.default_rng(point)
    logits = rng.normal(size=(2, 4))
    w = torch.as_tensor(rng.normal(size=(2, 4)))

    def f(t):
        g = torch.Generator().manual_seed(point)
        soft, _ = diffcore.straight_through_sample(t, 0.7, g, hard=False)
        return (soft * w).sum()

    assert diffcore.grad_check(f, logits) < TOL


def test_straight_through_forward_is_one_hot_backward_is_soft():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(6, 5, dtype=torch.float64, requires_grad=True)
    hard, soft = diffcore.straight_through_sample(logits, 1.0, g)
    assert torch.all(hard.detach().sum(-1) == 1)
    assert set(hard.detach().unique().tolist()) <= {0.0, 1.0}
    assert torch.equal(hard.detach().argmax(-1), soft.detach().argmax(-1))
    w = torch.randn(6, 5, dtype=torch.float64)
    (gh,) = torch.autograd.grad((hard * w).sum(), logits, retain_graph=True)
    (gs,) = torch.autograd.grad((soft * w).sum(), logits)
    torch.testing.assert_close(gh, gs)


def test_straight_through_is_deterministic_given_generator():
    logits = torch.randn(4, 3)
    a, _ = diffcore.straight_through_sample(logits, 0.5, torch.Generator().manual_seed(9))
    b, _ = diffcore.straight_through_sample(logits, 0.5, torch.Generator().manual_seed(9))
    assert torch.equal(a, b)


def test_straight_through_sampling_frequencies_follow_logits():
    probs = torch.tensor([0.6, 0.3, 0.1])
    logits = probs.log().expand(20000, 3)
    hard, _ = diffcore.straight_through_sample(logits, 1.0, torch.Generator().manual_seed(1))
    freq = hard.mean(0)
    torch.testing.assert_close(freq, probs, atol=0.02, rtol=0)


def test_gradient_of_sum_is_sum_of_gradients():
    torch.manual_seed(3)
    lin = nn.Linear(3, 2).double()
    x = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    f1 = lambda t: torch.tanh(lin(t)).sum()
    f2 = lambda t: (lin(t) ** 2).sum()
    (g1,) = torch.autograd.grad(f1(x), x)
    (g2,) = torch.autograd.grad(f2(x), x)
    (g12,) = torch.autograd.grad(f1(x) + f2(x), x)
    torch.testing.assert_close(g12, g1 + g2)


def test_optimizer_reaches_quadratic_optimum():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 4))
    hess = torch.as_tensor(a @ a.T + np.eye(4), dtype=torch.float64)
    target = torch.as_tensor(rng.normal(size=4))
    x = torch.zeros(4, dtype=torch.float64, requires_grad=True)
    opt = diffcore.make_optimizer([x], lr=1e-2)

    def loss():
        d = x - target
        return 0.5 * d @ hess @ d

    for _ in range(2000):
        opt.zero_grad()
        diffcore.forward_backward(loss(), [x])
        opt.step()
    assert float(loss().detach()) <= 1e-6


def test_weight_decay_shrinks_parameters_without_gradient():
    x = torch.ones(3, requires_grad=True)
    opt = diffcore.make_optimizer([x], lr=0.1, weight_decay=0.5)
    assert isinstance(opt, torch.optim.AdamW)
    x.grad = torch.zeros(3)
    opt.step()
    assert torch.allclose(x.detach(), torch.full((3,), 0.95))
    assert type(diffcore.make_optimizer([x])) is torch.optim.Adam


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 2))
    path = diffcore.save_checkpoint(tmp_path / "m.ckpt", dict(net.state_dict()), meta={"epoch": 3})
    raw = path.read_bytes()
    assert raw[:4] == diffcore.CHECKPOINT_MAGIC
    tensors, meta = diffcore.load_checkpoint(path)
    assert meta == {"epoch": 3}
    assert list(tensors) == list(net.state_dict())
    for k, v in net.state_dict().items():
        assert torch.equal(tensors[k], v)
    n_floats = sum(v.numel() for v in tensors.values())
    assert raw.endswith(np.concatenate([v.numpy().ravel() for v in tensors.values()]).astype("<f4").tobytes())
    assert len(raw) > 4 * n_floats


def test_check_finite():
    t = torch.tensor([1.0, float("inf")])
    with pytest.raises(NonFiniteValue) as err:
        diffcore.check_finite(t, "probe")
    assert err.value.op == "probe"
