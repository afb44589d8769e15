import numpy as np
import pytest
import torch

from conftest import central_difference, rel_error
from ugeforge.data import PerturbationBudget
from ugeforge.nets import (
    GeneratorSpec,
    NetworkSpec,
    ParameterView,
    build_generator,
    build_network,
    flat_param_gradient,
    load_param_view,
    load_params_into,
    save_param_view,
)
from ugeforge.seeding import fingerprint_module


def test_logits_shape_for_every_family():
    for family in ("plain-cnn", "resnet-small", "resnet-18-like", "tiny-mlp"):
        spec = NetworkSpec(family, num_classes=5, width_scale=0.25, seed=1, in_shape=(16, 16, 3))
        net = build_network(spec)
        x = torch.rand(7, 3, 16, 16)
        assert net(x).shape == (7, 5)


def test_same_seed_bitwise_identical_parameters():
    spec = NetworkSpec("plain-cnn", 4, 0.5, seed=9, in_shape=(16, 16, 1))
    a, b = build_network(spec), build_network(spec)
    assert fingerprint_module(a) == fingerprint_module(b)
    c = build_network(NetworkSpec("plain-cnn", 4, 0.5, seed=10, in_shape=(16, 16, 1)))
    assert fingerprint_module(a) != fingerprint_module(c)


def test_tiny_mlp_parameter_count_matches_arithmetic():
    spec = NetworkSpec("tiny-mlp", 2, 1.0, seed=0, in_shape=(16, 16, 1))
    net = build_network(spec)
    assert sum(p.numel() for p in net.parameters()) == 16 * 16 * 8 + 8 + 8 * 2 + 2


def test_unknown_family_rejected():
    with pytest.raises(ValueError, match="unknown network family"):
        NetworkSpec("vgg", 10)


def test_forward_is_pure():
    net = build_network(NetworkSpec("resnet-small", 4, 0.25, seed=3, in_shape=(16, 16, 1)))
    x = torch.rand(5, 1, 16, 16)
    before = fingerprint_module(net)
    out1 = net(x)
    out2 = net(x)
    assert torch.equal(out1, out2)
    assert fingerprint_module(net) == before


def test_generator_zero_budget_is_identity():
    gen = build_generator(GeneratorSpec(num_res_blocks=2, base_channels=8, seed=2),
                          PerturbationBudget(0.0), in_channels=1)
    x = torch.rand(6, 1, 16, 16)
    assert torch.equal(gen(x), x)


def test_generator_output_shapes():
    for shape in ((3, 32, 32), (1, 16, 16)):
        c = shape[0]
        gen = build_generator(GeneratorSpec(num_res_blocks=1, base_channels=8, seed=0),
                              PerturbationBudget(0.04), in_channels=c)
        x = torch.rand(2, *shape)
        assert gen(x).shape == x.shape


@pytest.mark.parametrize("mode", ["smooth", "hard"])
def test_generator_budget_brute_force(mode):
    # 10^4 random inputs, untrained (arbitrary) parameters, elementwise scan
    gen = build_generator(
        GeneratorSpec(num_res_blocks=1, base_channels=8, bounding_mode=mode, seed=4),
        PerturbationBudget(0.04),
        in_channels=1,
        dtype=torch.float64,
    )
    x = torch.rand(40, 1, 16, 16, dtype=torch.float64)  # 10240 inputs
    with torch.no_grad():
        xu = gen(x)
    assert float((xu - x).abs().max()) <= 0.04 + 1e-12
    assert float(xu.min()) >= 0.0 and float(xu.max()) <= 1.0


def test_generator_budget_holds_after_weight_scramble():
    # budget invariant must hold for all parameter settings, not trained ones
    gen = build_generator(GeneratorSpec(num_res_blocks=1, base_channels=8, seed=4),
                          PerturbationBudget(0.1), in_channels=1, dtype=torch.float64)
    with torch.no_grad():
        for p in gen.parameters():
            p.mul_(50.0).add_(1.0)
    x = torch.rand(16, 1, 16, 16, dtype=torch.float64)
    with torch.no_grad():
        xu = gen(x)
    assert float((xu - x).abs().max()) <= 0.1 + 1e-12


def _uniform_logit_setup():
    spec = NetworkSpec("tiny-mlp", 4, 1.0, seed=5, in_shape=(8, 8, 1))
    net = build_network(spec, dtype=torch.float64)
    theta = ParameterView.from_network(net)
    head_w = theta.names.index("head.weight")
    head_b = theta.names.index("head.bias")
    theta.vectors[head_w] = torch.zeros_like(theta.vectors[head_w])
    theta.vectors[head_b] = torch.zeros_like(theta.vectors[head_b])
    return net, theta, head_b


def test_flat_gradient_closed_form_softmax_oracle():
    # zero final layer forces uniform logits; the bias gradient is then
    # softmax - onehot averaged over the batch: (1/K - 1) at the true class
    net, theta, head_b = _uniform_logit_setup()
    x = torch.rand(6, 1, 8, 8, dtype=torch.float64)
    y = torch.full((6,), 2, dtype=torch.long)
    grads = flat_param_gradient(net, theta, x, y)
    bias_grad = grads.vectors[head_b].numpy()
    expected = np.full(4, 0.25)
    expected[2] = 0.25 - 1.0
    assert np.allclose(bias_grad, expected, atol=1e-12)


def test_flat_gradient_mean_reduction_duplicate_batch():
    net = build_network(NetworkSpec("tiny-mlp", 3, 2.0, seed=6, in_shape=(8, 8, 1)), dtype=torch.float64)
    theta = ParameterView.from_network(net)
    x = torch.rand(4, 1, 8, 8, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])
    g1 = flat_param_gradient(net, theta, x, y)
    g2 = flat_param_gradient(net, theta, torch.cat([x, x]), torch.cat([y, y]))
    for a, b in zip(g1.vectors, g2.vectors):
        assert torch.allclose(a, b, atol=1e-12)


def test_flat_gradient_additivity():
    net = build_network(NetworkSpec("tiny-mlp", 3, 2.0, seed=6, in_shape=(8, 8, 1)), dtype=torch.float64)
    theta = ParameterView.from_network(net)
    xa = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    xb = torch.rand(5, 1, 8, 8, dtype=torch.float64)
    ya = torch.tensor([0, 1, 2])
    yb = torch.tensor([2, 2, 0, 1, 0])
    ga = flat_param_gradient(net, theta, xa, ya)
    gb = flat_param_gradient(net, theta, xb, yb)
    gu = flat_param_gradient(net, theta, torch.cat([xa, xb]), torch.cat([ya, yb]))
    for a, b, u in zip(ga.vectors, gb.vectors, gu.vectors):
        combo = (3 * a + 5 * b) / 8
        assert float((combo - u).abs().max()) <= 1e-6


def test_flat_gradient_finite_difference_oracle():
    spec = NetworkSpec("tiny-mlp", 2, 0.25, seed=7, in_shape=(4, 4, 1))  # ~30 params
    net = build_network(spec, dtype=torch.float64)
    theta = ParameterView.from_network(net)
    assert theta.total_count < 60
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    analytic = torch.cat(flat_param_gradient(net, theta, x, y).vectors).numpy()

    import torch.nn.functional as F

    flat0 = torch.cat([v.clone() for v in theta.vectors])

    def loss_at(flat):
        vecs, start = [], 0
        for v in theta.vectors:
            vecs.append(flat[start : start + v.numel()])
            start += v.numel()
        view = ParameterView.from_groups(theta.names, vecs, theta.shapes)
        params = view.to_param_dict()
        logits = torch.func.functional_call(net, params, (x,))
        return F.cross_entropy(logits, y)

    numeric = central_difference(loss_at, flat0, h=1e-6)
    assert rel_error(analytic, numeric) <= 1e-4


def test_flat_gradient_deterministic_and_incompatible_view():
    net = build_network(NetworkSpec("tiny-mlp", 2, 1.0, seed=8, in_shape=(4, 4, 1)))
    theta = ParameterView.from_network(net)
    x = torch.rand(2, 1, 4, 4)
    y = torch.tensor([0, 1])
    g1 = flat_param_gradient(net, theta, x, y)
    g2 = flat_param_gradient(net, theta, x, y)
    for a, b in zip(g1.vectors, g2.vectors):
        assert torch.equal(a, b)
    other = build_network(NetworkSpec("plain-cnn", 2, 0.25, seed=8, in_shape=(4, 4, 1)))
    with pytest.raises(ValueError, match="incompatible parameter view"):
        flat_param_gradient(other, theta, x, y)


def test_param_view_snapshot_round_trip(tmp_path):
    net = build_network(NetworkSpec("plain-cnn", 3, 0.5, seed=12, in_shape=(8, 8, 1)))
    view = ParameterView.from_network(net)
    path = tmp_path / "net.snap"
    save_param_view(view, path, meta={"seed": 12, "epoch": 7})
    loaded, meta = load_param_view(path)
    assert meta == {"seed": 12, "epoch": 7}
    assert loaded.names == view.names
    assert loaded.fingerprint() == view.fingerprint()
    fresh = build_network(NetworkSpec("plain-cnn", 3, 0.5, seed=999, in_shape=(8, 8, 1)))
    load_params_into(fresh, loaded)
    assert fingerprint_module(fresh) == fingerprint_module(net)
