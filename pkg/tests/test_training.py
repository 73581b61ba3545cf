from types import SimpleNamespace

import numpy as np
import pytest

from hyperconv.checkpoint import load_checkpoint
from hyperconv.data import Dataset, separable_two_class
from hyperconv.network import NetworkConfig, build_network
from hyperconv.nn import softmax_cross_entropy
from hyperconv.tensor import Tensor, backward, build_graph, sum_
from hyperconv.training import (
    METRIC_COLUMNS,
    SGD,
    NonFiniteGradient,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    format_metrics,
    lr_at,
    sgd_step,
    train,
)


def small_net(seed=0, **kw):
    base = dict(
        variant="eq3", stage_depths=(1, 1), stem_channels=4, stage_channels=(4, 8), num_classes=2,
        in_channels=2, image_size=8, expansion=2, activation="relu",
    )
    base.update(kw)
    return build_network(NetworkConfig(**base), seed=seed)


def small_data(n=64, seed=0):
    return separable_two_class(n, image_size=8, channels=2, seed=seed)


def quick_cfg(**kw):
    base = dict(peak_lr=0.05, warmup_epochs=1, total_epochs=3, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


# -- schedule --------------------------------------------------------------------


def test_schedule_landmarks():
    cfg = TrainConfig(peak_lr=0.3, warmup_epochs=5, total_epochs=50)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(5, cfg) == pytest.approx(0.3, abs=1e-15)
    assert lr_at(27.5, cfg) == pytest.approx(0.15, abs=1e-15)
    assert lr_at(50, cfg) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(2.5, cfg) == pytest.approx(0.15)


def test_schedule_is_monotone_after_warmup():
    cfg = TrainConfig(peak_lr=1.0, warmup_epochs=2, total_epochs=10)
    values = [lr_at(t, cfg) for t in np.linspace(2, 10, 50)]
    assert all(b <= a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("t", [-0.1, 50.5])
def test_schedule_range(t):
    with pytest.raises(ValueError, match="outside"):
        lr_at(t, TrainConfig(total_epochs=50))


@pytest.mark.parametrize(
    "kw", [dict(warmup_epochs=20), dict(peak_lr=0.0), dict(backoff_factor=1.0), dict(momentum=1.0),
           dict(batch_size=0), dict(clip_activation_placement="sometimes")]
)
def test_train_config_errors(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- optimizer -------------------------------------------------------------------------


def scalar_model(value):
    return SimpleNamespace(params={"w": Tensor(np.array([value]), requires_grad=True)})


def set_quadratic_grad(model, target=3.0):
    w = model.params["w"]
    w.grad = None
    loss = sum_((w - target) * (w - target))
    backward(build_graph(loss), loss)


def test_zero_lr_leaves_weights(make_model, rng):
    model = make_model()
    before = {k: p.data.copy() for k, p in model.params.items()}
    for p in model.params.values():
        p.grad = rng.normal(size=p.shape)
    sgd_step(model, 0.0, TrainConfig())
    assert all(np.array_equal(before[k], p.data) for k, p in model.params.items())


def test_quadratic_converges():
    # heavy-ball roots for curvature 2 have modulus sqrt(momentum) here
    model = scalar_model(-5.0)
    opt = SGD(model, momentum=0.5)
    for _ in range(200):
        set_quadratic_grad(model)
        opt.step(0.1)
    assert abs(model.params["w"].data[0] - 3.0) < 1e-6


def test_plain_gradient_descent(rng):
    model = scalar_model(0.7)
    opt = SGD(model, momentum=0.0, weight_decay=0.0)
    w = 0.7
    for _ in range(25):
        set_quadratic_grad(model)
        opt.step(0.1)
        w = w - 0.1 * (2 * (w - 3.0))
        assert model.params["w"].data[0] == w


def test_momentum_and_decay_update():
    model = scalar_model(2.0)
    opt = SGD(model, momentum=0.5, weight_decay=0.1)
    model.params["w"].grad = np.array([1.0])
    opt.step(0.1)
    assert model.params["w"].data[0] == pytest.approx(2.0 - 0.1 * (1.0 + 0.2))
    model.params["w"].grad = np.array([1.0])
    opt.step(0.1)
    v = 0.5 * 1.2 + 1.0 + 0.1 * 1.88
    assert model.params["w"].data[0] == pytest.approx(1.88 - 0.1 * v)


def test_non_finite_gradient_blocks_the_update():
    model = scalar_model(1.0)
    model.params["w"].grad = np.array([np.nan])
    with pytest.raises(NonFiniteGradient):
        SGD(model).step(0.1)
    assert model.params["w"].data[0] == 1.0


def test_small_step_decreases_frozen_batch_loss():
    data = small_data(32)
    losses = []
    for lr in (1e-1, 1e-2, 1e-3, 1e-4, 1e-5):
        model = small_net().train()

        def loss_value():
            return softmax_cross_entropy(model(data.images), data.labels)

        loss = loss_value()
        backward(build_graph(loss), loss)
        sgd_step(model, lr, TrainConfig(momentum=0.0, weight_decay=0.0))
        losses.append(float(loss_value().data) < float(loss.data))
    assert any(losses)


# -- training loop ---------------------------------------------------------------------


def test_training_learns_and_logs(tmp_path):
    data = small_data(128)
    val = small_data(32, seed=1)
    model = small_net()
    lines = []
    result = train(model, data, quick_cfg(total_epochs=6), val=val, metrics_path=tmp_path / "m.csv", log=lines.append)
    assert len(result.metrics) == 6
    assert result.metrics[-1]["train_acc"] >= 0.9
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)
    assert len(lines) == 6
    assert not model.training


def test_fixed_seed_is_bit_identical():
    runs = [train(small_net(), small_data(), quick_cfg()).metrics_csv() for _ in range(2)]
    assert runs[0] == runs[1]
    other = train(small_net(), small_data(), quick_cfg(seed=1)).metrics_csv()
    assert other != runs[0]


def test_injected_blowup_restores_and_backs_off(tmp_path):
    fired = []

    def hook(model, epoch, step):
        if epoch == 1 and step == 1 and not fired:
            fired.append(True)
            model.params["head.weight"].data[0, 0] = np.inf

    lrs = []
    cfg = quick_cfg()
    ckpt = tmp_path / "c.ckpt"
    result = train(small_net(), small_data(), cfg, step_hook=hook, checkpoint_path=ckpt, log=lrs.append)
    assert fired and result.backoffs == 1
    assert [row["epoch"] for row in result.metrics] == [1, 2, 3]
    assert result.metrics[1]["backoff_count"] == 1
    clean = train(small_net(), small_data(), cfg).metrics
    assert result.metrics[0] == clean[0]
    assert result.metrics[1]["lr"] == pytest.approx(clean[1]["lr"] * 0.5)
    assert load_checkpoint(ckpt).all_finite()


def test_persistent_failure_raises_diverged():
    def hook(model, epoch, step):
        if epoch == 1:
            model.params["head.bias"].data[:] = np.nan

    with pytest.raises(TrainingDiverged) as info:
        train(small_net(), small_data(), quick_cfg(max_backoffs=2), step_hook=hook)
    assert info.value.epoch == 1
    assert info.value.attempts == 2


def test_dataset_model_mismatch():
    with pytest.raises(ValueError, match="channels"):
        train(small_net(in_channels=3), small_data(), quick_cfg())
    with pytest.raises(ValueError, match="classes"):
        train(small_net(), Dataset(np.zeros((4, 2, 8, 8)), [0, 1, 2, 2], 3), quick_cfg())


def test_evaluate_and_format():
    model = small_net()
    loss, acc = evaluate(model, small_data(16))
    assert loss > 0 and 0 <= acc <= 1
    text = format_metrics([{"epoch": 1, "lr": 0.1, "train_loss": 0.5, "train_acc": 1.0,
                            "val_loss": None, "val_acc": None, "backoff_count": 0}])
    assert text.splitlines()[1].startswith("1,0.1,0.5,1.0,")
