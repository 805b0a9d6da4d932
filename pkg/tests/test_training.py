import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from classprune.architectures import vgg
from classprune.forward import accuracy, forward, init_weights, weights_digest
from classprune.graph import LayerSpec, ModelGraph
from classprune.training import (
    DivergenceError, TrainConfig, finetune, l1_term, orth_layer, orth_layer_explicit,
    orth_term, total_loss, train,
)
from helpers import finite_difference_check


def single_conv(kernel_hw=(1, 1), in_hw=(2, 2), cin=1, cout=1, stride=1, padding=0):
    layers = [LayerSpec(0, "conv", in_channels=cin, out_channels=cout, kernel_size=kernel_hw,
                        stride=stride, padding=padding, bias=False)]
    return ModelGraph(layers, (cin, *in_hw), num_classes=2)


def small_net(batchnorm=False):
    # 40 + 148 + 111 = 299 parameters
    return vgg([4, "M", 4], input_shape=(1, 6, 6), num_classes=3, batchnorm=batchnorm)


# -- L1 ------------------------------------------------------------------------

def test_l1_all_zero_weights():
    g = small_net()
    w = {k: torch.zeros_like(v) for k, v in init_weights(g).items()}
    assert l1_term(g, w).item() == 0


def test_l1_hand_example():
    layers = [LayerSpec(0, "fc", in_channels=2, out_channels=2, bias=False)]
    g = ModelGraph(layers, (2, 1, 1), num_classes=2)
    w = {"0.weight": torch.tensor([[1.0, -2.0], [0.0, 3.0]])}
    assert l1_term(g, w).item() == 6.0


def test_l1_ignores_bias_and_batchnorm():
    g = small_net(batchnorm=True)
    w = init_weights(g, dtype=torch.float64)
    base = l1_term(g, w).item()
    for k in w:
        if not k.endswith("weight") or g[int(k.split(".")[0])].kind == "batchnorm":
            w[k] = w[k] + 5.0
    assert l1_term(g, w).item() == base


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_l1_positive_homogeneity(scale, seed):
    g = small_net()
    w = init_weights(g, seed=seed, dtype=torch.float64)
    scaled = {k: v * scale for k, v in w.items()}
    assert l1_term(g, scaled).item() == pytest.approx(scale * l1_term(g, w).item(), rel=1e-12)


# -- orthogonality ---------------------------------------------------------------

def test_orth_unit_kernel_is_zero():
    g = single_conv()
    k = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    assert orth_layer(k, g[0]).item() == 0.0
    assert orth_layer_explicit(k.numpy(), g[0]) == 0.0


@pytest.mark.parametrize("c", [0.0, 0.5, 2.0, -3.0])
def test_orth_scaled_unit_kernel(c):
    g = single_conv()
    k = torch.full((1, 1, 1, 1), c, dtype=torch.float64)
    assert orth_layer(k, g[0]).item() == pytest.approx(2 * abs(c * c - 1), abs=1e-12)


def test_orth_orthonormal_rows_give_zero():
    # two 1x1 filters on two channels forming a rotation matrix
    g = single_conv(cin=2, cout=2, in_hw=(3, 3))
    a = 0.3
    k = torch.tensor([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]],
                     dtype=torch.float64).reshape(2, 2, 1, 1)
    assert orth_layer(k, g[0]).item() == pytest.approx(0.0, abs=1e-7)


@settings(max_examples=40, deadline=None)
@given(
    cin=st.integers(1, 3), cout=st.integers(1, 3), kh=st.integers(1, 3), kw=st.integers(1, 3),
    h=st.integers(3, 6), w=st.integers(3, 6), stride=st.integers(1, 2),
    padding=st.integers(0, 1), seed=st.integers(0, 10_000),
)
def test_orth_fast_path_matches_explicit(cin, cout, kh, kw, h, w, stride, padding, seed):
    g = single_conv((kh, kw), (h, w), cin, cout, stride, padding)
    gen = torch.Generator().manual_seed(seed)
    k = torch.randn(cout, cin, kh, kw, generator=gen, dtype=torch.float64)
    fast = orth_layer(k, g[0]).item()
    slow = orth_layer_explicit(k.numpy(), g[0])
    assert fast >= 0
    assert fast == pytest.approx(slow, abs=1e-5, rel=1e-9)


def test_orth_term_independent_of_batch():
    g = small_net()
    w = init_weights(g, dtype=torch.float64)
    assert orth_term(g, w).item() == orth_term(g, {k: v.clone() for k, v in w.items()}).item()
    cfg = TrainConfig(lambda_l1=0, lambda_orth=1.0)
    x1 = torch.randn(4, 1, 6, 6, dtype=torch.float64)
    x2 = torch.randn(7, 1, 6, 6, dtype=torch.float64)
    y1, y2 = torch.zeros(4, dtype=torch.long), torch.ones(7, dtype=torch.long)
    p1, p2 = {}, {}
    total_loss(g, w, x1, y1, cfg, parts=p1)
    total_loss(g, w, x2, y2, cfg, parts=p2)
    assert p1["orth"] == p2["orth"]


# -- total loss -------------------------------------------------------------------

def test_loss_without_regularisers_is_cross_entropy():
    g = small_net()
    w = init_weights(g, dtype=torch.float64)
    x = torch.randn(5, 1, 6, 6, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1])
    cfg = TrainConfig(lambda_l1=0, lambda_orth=0)
    expected = F.cross_entropy(forward(g, w, x), y)
    assert total_loss(g, w, x, y, cfg).item() == expected.item()


def test_uniform_logits_give_log_c():
    g = small_net()
    w = {k: torch.zeros_like(v) for k, v in init_weights(g, dtype=torch.float64).items()}
    x = torch.randn(6, 1, 6, 6, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 2, 1, 0])
    parts = {}
    total_loss(g, w, x, y, TrainConfig(), parts=parts)
    assert parts["ce"] == pytest.approx(math.log(3), abs=1e-12)


def test_non_finite_loss_raises():
    g = small_net()
    w = init_weights(g, dtype=torch.float64)
    w["0.weight"][0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError):
        total_loss(g, w, torch.randn(2, 1, 6, 6, dtype=torch.float64),
                   torch.tensor([0, 1]), TrainConfig())


# -- finite-difference gradient checks ---------------------------------------------

@pytest.fixture
def grad_setup():
    g = small_net()
    n_params = sum(v.numel() for v in init_weights(g).values())
    assert n_params <= 1000
    w = init_weights(g, seed=5, dtype=torch.float64)
    for k in w:
        if k.endswith("bias"):
            w[k] = torch.randn_like(w[k]) * 0.1
    gen = torch.Generator().manual_seed(9)
    x = torch.randn(6, 1, 6, 6, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    return g, w, x, y


def test_gradcheck_cross_entropy(grad_setup):
    g, w, x, y = grad_setup
    assert finite_difference_check(lambda p: F.cross_entropy(forward(g, p, x), y), w) <= 1e-4


def test_gradcheck_l1_away_from_zero(grad_setup):
    g, w, _, _ = grad_setup
    worst = finite_difference_check(lambda p: l1_term(g, p), w,
                                    skip=lambda name, v: abs(v.item()) < 1e-4)
    assert worst <= 1e-4


def test_gradcheck_orth(grad_setup):
    g, w, _, _ = grad_setup
    assert finite_difference_check(lambda p: orth_term(g, p), w) <= 1e-4


def test_l1_subgradient_at_zero_is_zero():
    g = small_net()
    w = {k: torch.zeros_like(v).requires_grad_(True) for k, v in init_weights(g).items()}
    l1_term(g, w).backward()
    assert all(v.grad is None or v.grad.abs().sum() == 0 for v in w.values())


# -- training loop ----------------------------------------------------------------------

def test_zero_epochs_leaves_weights_unchanged(two_class_data):
    g = vgg([4, "M", 4], input_shape=(1, 6, 6), num_classes=2, batchnorm=False)
    w = init_weights(g)
    out = train(g, w, two_class_data, TrainConfig(epochs=0))
    assert weights_digest(out) == weights_digest(w)


def test_separable_data_is_learned(two_class_data):
    g = vgg([4, "M", 4], input_shape=(1, 6, 6), num_classes=2, batchnorm=True)
    cfg = TrainConfig(batch_size=16, epochs=20, lr_drop_epochs=[])
    w = train(g, init_weights(g, seed=0), two_class_data, cfg)
    assert accuracy(g, w, two_class_data.x_train, two_class_data.y_train) >= 0.95


def test_training_is_deterministic(two_class_data, tmp_path):
    g = vgg([4, "M", 4], input_shape=(1, 6, 6), num_classes=2)
    cfg = TrainConfig(batch_size=16, epochs=3)
    a = train(g, init_weights(g), two_class_data, cfg, curve_path=tmp_path / "a.csv")
    b = train(g, init_weights(g), two_class_data, cfg, curve_path=tmp_path / "b.csv")
    assert weights_digest(a) == weights_digest(b)
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_finetune_never_returns_worse_than_start(two_class_data):
    g = vgg([4, "M", 4], input_shape=(1, 6, 6), num_classes=2)
    w = train(g, init_weights(g), two_class_data, TrainConfig(batch_size=16, epochs=5))
    start = accuracy(g, w, two_class_data.x_val, two_class_data.y_val)
    # a huge learning rate wrecks the weights; the best candidate is the start
    _, best = finetune(g, w, two_class_data, TrainConfig(batch_size=16, learning_rate=50.0),
                       epochs=2)
    assert best >= start


def test_divergence_recovers_once_then_aborts(two_class_data, monkeypatch):
    import classprune.training as tr

    g = vgg([4], input_shape=(1, 6, 6), num_classes=2, batchnorm=False)
    calls = {"n": 0}
    real = tr.total_loss

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise DivergenceError("injected")
        return real(*args, **kwargs)

    monkeypatch.setattr(tr, "total_loss", flaky)
    out = train(g, init_weights(g), two_class_data, TrainConfig(batch_size=32, epochs=2))
    assert all(torch.isfinite(v).all() for v in out.values())

    def always(*args, **kwargs):
        raise DivergenceError("injected")

    monkeypatch.setattr(tr, "total_loss", always)
    with pytest.raises(DivergenceError, match="twice"):
        train(g, init_weights(g), two_class_data, TrainConfig(batch_size=32, epochs=2))


def test_config_validation_lists_violations():
    errors = TrainConfig(lambda_l1=-1, lambda_orth=-1, learning_rate=0).validate()
    assert len(errors) == 3
    assert TrainConfig().validate() == []


def test_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.weight_decay, cfg.momentum) == \
        (0.01, 256, 0.0005, 0.9)
    assert (cfg.lambda_l1, cfg.lambda_orth, cfg.max_finetune_epochs) == (1e-4, 1e-2, 130)
    assert np.isclose(cfg.lr_drop_factor, 0.1)
