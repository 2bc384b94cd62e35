import math

import numpy as np
import pytest

from hpdseg import gradcheck
from hpdseg.data import gen_synthetic
from hpdseg.errors import ArgumentError, ConfigError, DataError, ShapeError
from hpdseg.net import NetConfig, build_net, net_forward
from hpdseg.tensor import Rng
from hpdseg.train import (
    TrainConfig,
    ablate,
    ablation_text,
    ablation_tsv,
    cross_entropy,
    format_record,
    loss_ce_dice,
    poly_lr,
    sgd_step,
    train,
)

TINY_NET = NetConfig(depth=2, base_channels=4, classes=4)


@pytest.fixture(scope="module")
def tiny_data():
    return gen_synthetic(3, 12, size=32, prefix="train"), gen_synthetic(4, 4, size=32, prefix="val", offset=12)


def test_poly_lr_examples():
    assert poly_lr(0, 200) == 0.01
    assert poly_lr(200, 200) == 0.0
    assert poly_lr(50, 100, power=1.0) == 0.005


def test_poly_lr_monotone():
    lrs = [poly_lr(i, 1000) for i in range(1001)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("it", [-1, 201])
def test_poly_lr_out_of_range(it):
    with pytest.raises(ArgumentError):
        poly_lr(it, 200)


def test_sgd_zero_lr_is_identity():
    params = {"a.weight": np.array([1.0, -2.0])}
    sgd_step(params, {"a.weight": np.array([5.0, 5.0])}, 0.0, 0.1)
    assert params["a.weight"].tolist() == [1.0, -2.0]


def test_sgd_weight_decay_example():
    params = {"c.weight": np.array([1.0]), "c.bias": np.array([1.0]), "bn.gamma": np.array([1.0])}
    sgd_step(params, {k: np.zeros(1) for k in params}, 0.1, 0.1)
    assert params["c.weight"][0] == pytest.approx(0.99, abs=1e-15)
    assert params["c.bias"][0] == 1.0 and params["bn.gamma"][0] == 1.0


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"w.weight": np.zeros(2)}, {"w.weight": np.zeros(3)}, 0.1)


def test_sgd_step_reduces_loss_on_fixed_batch(tiny_data):
    train_set, _ = tiny_data
    net = build_net(TINY_NET, 0, dtype=np.float64)
    x = np.concatenate([s.image for s in train_set[:4]]).astype(np.float64)
    y = np.stack([s.labels for s in train_set[:4]])
    from hpdseg.net import net_backward

    logits, caches = net_forward(x, net, training=True)
    before, g = loss_ce_dice(logits, y)
    _, grads = net_backward(g, net, caches)
    sgd_step(net.params, grads, 1e-3, 0.0)
    after, _ = loss_ce_dice(net_forward(x, net, training=True)[0], y)
    assert after < before


def test_loss_limit_and_ln2():
    labels = np.array([[[0, 1], [1, 0]]])
    onehot = (labels[:, None] == np.arange(2)[None, :, None, None]).astype(float)
    loss, _ = loss_ce_dice(60.0 * (2 * onehot - 1), labels)
    assert loss < 1e-6
    ce, _ = cross_entropy(np.zeros((1, 2, 2, 2)), labels)
    assert ce == pytest.approx(math.log(2), abs=1e-15)


def test_loss_rejects_bad_labels():
    with pytest.raises(DataError):
        loss_ce_dice(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2))


def test_loss_gradient():
    assert gradcheck.check_loss() < gradcheck.TOL_COMPOSITE


def test_train_config_validation():
    for kw in ({"base_lr": 0}, {"power": 0}, {"loss_mix": 1.5}, {"batch_size": 1}, {"max_iters": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_train_zero_iters_returns_initial_net(tiny_data):
    net, history = train(TINY_NET, TrainConfig(max_iters=0, seed=2), tiny_data[0])
    assert history == []
    fresh = build_net(TINY_NET, Rng(2).child("init"))
    assert all(np.array_equal(net.params[k], fresh.params[k]) for k in net.params)


def test_train_is_bit_reproducible(tiny_data):
    cfg = TrainConfig(max_iters=6, batch_size=4, eval_every=3, seed=5)
    runs = [train(NetConfig(depth=2, base_channels=4, num_hpd=1), cfg, *tiny_data) for _ in range(2)]
    (net_a, hist_a), (net_b, hist_b) = runs
    assert [format_record(r) for r in hist_a] == [format_record(r) for r in hist_b]
    assert hist_a == hist_b
    assert all(np.array_equal(net_a.params[k], net_b.params[k]) for k in net_a.params)
    assert [r["iter"] for r in hist_a if "mdsc" in r] == [3, 6]


def test_train_rejects_mismatched_data(tiny_data):
    with pytest.raises(DataError):
        train(NetConfig(depth=2, base_channels=4, classes=3), TrainConfig(max_iters=1), tiny_data[0])
    with pytest.raises(DataError):
        train(TINY_NET, TrainConfig(max_iters=1, batch_size=16), tiny_data[0])


def test_format_record():
    assert format_record({"iter": 3, "lr": 0.01, "loss": 0.5}) == "iter=3 lr=0.01 loss=0.5"
    assert format_record({"iter": 3, "lr": 0.01, "loss": 0.5, "mdsc": 0.25}).endswith("mdsc=0.25")


def test_ablate_single_row_equals_plain_training(tiny_data):
    cfg = TrainConfig(max_iters=4, batch_size=4, seed=1)
    (row,) = ablate([0], TINY_NET, cfg, *tiny_data)
    net, history = train(TINY_NET, cfg, tiny_data[0])
    from hpdseg.train import evaluate

    assert row.mdsc == evaluate(net, tiny_data[1])[0]
    assert row.history == history


def test_ablate_table(tiny_data):
    cfg = TrainConfig(max_iters=2, batch_size=4, seed=1)
    rows = ablate([0, 1, 2], TINY_NET, cfg, *tiny_data)
    tsv = ablation_tsv(rows).splitlines()
    assert tsv[0].split("\t") == ["num_hpd", "mdsc", "dsc_1", "dsc_2", "dsc_3", "iters", "final_loss"]
    assert [line.split("\t")[0] for line in tsv[1:]] == ["0", "1", "2"]
    assert len(ablation_text(rows).splitlines()) == 4
    with pytest.raises(ConfigError):
        ablate([3], TINY_NET, cfg, *tiny_data)
