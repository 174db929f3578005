import numpy as np
import pytest

from halfbrain import model as M
from halfbrain import phantom
from halfbrain.engine import checkpoint as ckpt_io
from halfbrain.engine.gradcheck import check_op
from halfbrain.engine.layers import BatchNorm2d, Module
from halfbrain.engine.tensor import Tensor, no_grad
from halfbrain.errors import ConfigError, DimensionError, StateError
from halfbrain.pipeline import mirror

SHAPE = (11, 32, 32)
TINY = {"half_pretrain": 1, "head_train": 3, "finetune": 1, "baseline": 1}


@pytest.fixture(scope="module")
def tiny_data():
    corpus = phantom.generate(phantom.PhantomConfig(n_scans=24, shape=SHAPE, seed=3))
    train = M.Dataset.from_corpus(corpus[:16])
    val = M.Dataset.from_corpus(corpus[16:])
    return train, val


@pytest.fixture(scope="module")
def tiny_stage1(tiny_data):
    train, val = tiny_data
    return M.stage1_train(train, val, M.TrainPlan(TINY, batch_size=8))


def test_block_pools_stop_at_unit_extent():
    pools, out = M.block_pools((64, 32), 7)
    assert out == (1, 1)
    assert pools[:5] == [(2, 2)] * 5
    assert pools[5] == (2, 1) and pools[6] == (1, 1)


def test_encoder_feature_length():
    enc = M.HalfBrainEncoder(np.random.default_rng(0), (64, 32))
    assert enc.feature_dim == 64


def test_split_halves_layout(rng):
    x = rng.standard_normal((2, 3, 4, 6)).astype(np.float32)
    out = M.split_halves(Tensor(x)).data
    np.testing.assert_array_equal(out[:2], x[..., :3][..., ::-1])
    np.testing.assert_array_equal(out[2:], x[..., 3:])
    with pytest.raises(DimensionError):
        M.split_halves(Tensor(np.zeros((1, 1, 2, 5), np.float32)))


def test_split_and_log_odds_gradients(rng):
    assert check_op(M.split_halves, [rng.standard_normal((2, 2, 3, 4))], rng) < 1e-3
    assert check_op(lambda z: M.log_odds(z, 1), [rng.standard_normal((3, 2))], rng) < 1e-3
    assert check_op(lambda z: M.log_odds(z, slice(1, None)), [rng.standard_normal((3, 4))], rng) < 1e-3


def test_log_odds_matches_probability(rng):
    z = rng.standard_normal((5, 4))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    got = M.log_odds(Tensor(z), slice(1, None)).data
    np.testing.assert_allclose(got, np.log((1 - p[:, 0]) / p[:, 0]), rtol=1e-10)


def test_mtl_features_swap_under_mirroring(rng):
    model = M.MtlModel(rng, SHAPE)
    model.eval()
    x = rng.random((3, *SHAPE)).astype(np.float32)
    xm = np.stack([mirror(v) for v in x])
    with no_grad():
        f = model.features(Tensor(x)).data
        fm = model.features(Tensor(xm)).data
    d = f.shape[1] // 2
    np.testing.assert_allclose(fm[:, :d], f[:, d:], atol=1e-5)
    np.testing.assert_allclose(fm[:, d:], f[:, :d], atol=1e-5)


def test_train_plan_validation():
    with pytest.raises(ConfigError):
        M.TrainPlan({"warmup": 1})
    with pytest.raises(ConfigError):
        M.TrainPlan(batch_size=1)
    with pytest.raises(ConfigError):
        M.TrainPlan(depth=8)
    assert M.TrainPlan({"half_pretrain": 2}).epochs["head_train"] == 60


def test_dataset_halves(tiny_data):
    train, _ = tiny_data
    xs, ys = train.halves()
    assert xs.shape == (2 * len(train), 11, 32, 16)
    left = [lab.half_present("left") for lab in train.labels]
    assert list(ys[: len(train)]) == left


def test_stage1_checkpoint_and_history(tiny_stage1):
    model, ck, hist = tiny_stage1
    assert ck.stage == "half_pretrain"
    assert ck.meta["model"] == "half" and 0.0 <= ck.meta["val_acc"] <= 1.0
    assert hist.to_csv().splitlines()[0] == "epoch,stage,lr,train_loss,val_loss,val_acc"


def test_stage1_is_deterministic(tiny_data, tiny_stage1):
    train, val = tiny_data
    _, ck, _ = M.stage1_train(train, val, M.TrainPlan(TINY, batch_size=8))
    assert ckpt_io.dumps(ck) == ckpt_io.dumps(tiny_stage1[1])


def test_stage2_requires_stage1_checkpoint(tiny_data, tiny_stage1):
    train, val = tiny_data
    plan = M.TrainPlan(TINY, batch_size=8)
    _, mtl_ck, _ = M.stage2_train(tiny_stage1[1], train, val, plan)
    with pytest.raises(StateError):
        M.stage2_train(mtl_ck, train, val, plan)


def test_stage2_predictions_round_trip(tiny_data, tiny_stage1, tmp_path):
    train, val = tiny_data
    model, ck, _ = M.stage2_train(tiny_stage1[1], train, val, M.TrainPlan(TINY, batch_size=8))
    assert ck.stage in ("head_train", "finetune")
    # encoder weights start from the stage-1 checkpoint
    path = tmp_path / "mtl.hsckpt"
    ckpt_io.save(path, ck)
    again = M.model_from_checkpoint(ckpt_io.load(path))
    a = M.predict_dataset(M.model_from_checkpoint(ck), val)
    b = M.predict_dataset(again, val)
    assert a == b
    rec = a[0]
    assert set(rec) == {"scan_id", "p_lesion", "side_probs", "four_class"}
    assert abs(sum(rec["side_probs"]) - 1) < 1e-5
    one = M.predict(again, val.x[0])
    assert one["four_class"] == rec["four_class"]
    with pytest.raises(DimensionError):
        M.predict(again, np.zeros((11, 32, 30), np.float32))


def test_baseline_training_and_prediction(tiny_data):
    train, val = tiny_data
    model, ck, hist = M.baseline_train(train, val, M.TrainPlan(TINY, batch_size=8))
    assert ck.stage == "baseline" and ck.meta["model"] == "baseline"
    probs, cls = model.predict_arrays(val.x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    rec = M.baseline_predict(model, val.x[0])
    assert rec["four_class"] in ("none", "left", "right", "both")


def test_single_class_training_set_rejected(tiny_data):
    train, val = tiny_data
    neg = [i for i, lab in enumerate(train.labels) if not lab.presence]
    only = M.Dataset(train.x[neg], [train.labels[i] for i in neg],
                     [train.scan_ids[i] for i in neg], [train.timepoints[i] for i in neg])
    with pytest.raises(ConfigError):
        M.stage1_train(only, val, M.TrainPlan(TINY, batch_size=4))


def test_unknown_checkpoint_model_rejected():
    bad = ckpt_io.Checkpoint("x", {}, 0, {"model": "resnet"})
    with pytest.raises(StateError):
        M.model_from_checkpoint(bad)


def test_sweep_csv():
    text = M.sweep_csv([{"depth": 1, "val_acc": 0.5}, {"depth": 2, "val_acc": 0.75}])
    assert text == "depth,val_acc\n1,0.500000\n2,0.750000\n"


def test_recalibrate_bn_pools_batch_statistics(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.bn = BatchNorm2d(2)

        def forward(self, x):
            return self.bn(x)

    net = Net()
    x = rng.standard_normal((8, 2, 3, 3)).astype(np.float32) * [[[[2.0]], [[0.5]]]] + 1.0
    M.recalibrate_bn(net, x, count=8, batch=4)
    flat = x.transpose(1, 0, 2, 3).reshape(2, 2, -1).astype(np.float64)   # [channel, batch, values]
    means = flat.mean(axis=2)
    within = flat.var(axis=2, ddof=1).mean(axis=1)
    np.testing.assert_allclose(net.bn.running_mean, means.mean(axis=1), rtol=1e-5)
    np.testing.assert_allclose(net.bn.running_var, within + means.var(axis=1), rtol=1e-5)
    assert not net.training and net.bn.momentum == 0.1


def test_initial_loss_near_log_two(tiny_data):
    train, _ = tiny_data
    xs, ys = train.halves()
    pos = np.flatnonzero(ys == 1)[:4]
    neg = np.flatnonzero(ys == 0)[:4]
    idx = np.concatenate([pos, neg])
    net = M.HalfPresenceNet(np.random.default_rng(0), xs.shape[2:])
    loss = float(M.F.softmax_cross_entropy(net(Tensor(xs[idx])), ys[idx]).data)
    assert abs(loss - np.log(2)) <= 0.2


def test_head_phase_leaves_encoder_untouched(tiny_data, tiny_stage1):
    train, val = tiny_data
    plan = M.TrainPlan({**TINY, "finetune": 0}, batch_size=8)
    _, ck, _ = M.stage2_train(tiny_stage1[1], train, val, plan)
    for name, arr in tiny_stage1[1].arrays.items():
        if name.startswith("encoder."):
            np.testing.assert_array_equal(ck.arrays[name], arr)


def test_side_loss_ignores_negative_scans(rng):
    t1 = Tensor(rng.standard_normal((6, 2)))
    t2 = Tensor(rng.standard_normal((6, 3)))
    presence = np.array([1, 0, 1, 0, 0, 1])
    side = np.array([0, 2, 1, 1, 0, 2])
    _, _, l2 = M._mtl_losses(t1, t2, presence, side, 1.0)
    keep = presence == 1
    _, _, l2_pos = M._mtl_losses(Tensor(t1.data[keep]), Tensor(t2.data[keep]),
                                 presence[keep], side[keep], 1.0)
    assert float(l2.data) == pytest.approx(float(l2_pos.data), abs=1e-6)
    _, _, l2_none = M._mtl_losses(t1, t2, np.zeros(6, dtype=np.int64), side, 1.0)
    assert float(l2_none.data) == 0.0
