import numpy as np
import pytest

from dpfa import tensor as T
from dpfa.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dpfa.config import ConfigError, RunConfig, dump_config, parse_config
from dpfa.data import SceneSpec, synthesize_dataset
from dpfa.metrics import MetricsReport, confusion_matrix, cross_check, iou_from_confusion
from dpfa.networks import ClsNet, SegNet
from dpfa.optim import OptimizerState, adam_step, lr_at
from dpfa.tensor import Tensor
from dpfa.train import (
    BlockSet,
    TrainingDiverged,
    blocks_from_clouds,
    build_model,
    evaluate,
    load_model,
    train,
)

# --- optimizer ---------------------------------------------------------------


def test_adam_first_step_oracle():
    p = Tensor(np.array([0.5]), requires_grad=True)
    state = OptimizerState(lr=0.001)
    adam_step({"w": p}, {"w": np.array([1.0])}, state)
    # hand-rolled: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
    expect = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8)
    assert p.data[0] == pytest.approx(expect, abs=1e-15)
    assert p.data[0] - 0.5 == pytest.approx(-0.001, rel=1e-6)


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = OptimizerState()
    for _ in range(3):
        adam_step({"w": p}, {"w": np.zeros(2)}, state)
    assert p.data.tolist() == [1.0, -2.0] and state.step == 3


def test_adam_nonfinite_names_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(T.NonFiniteError, match="head.W"):
        adam_step({"head.W": p}, {"head.W": np.array([np.nan, 0.0])}, OptimizerState())
    assert p.data.tolist() == [0.0, 0.0]


def test_lr_schedule():
    s = OptimizerState(lr=0.001)
    assert lr_at(0, s) == 0.001
    assert lr_at(19, s) == 0.001
    assert lr_at(20, s) == pytest.approx(0.0007, rel=1e-12)
    assert lr_at(40, s) == pytest.approx(0.001 * 0.7**2, rel=1e-12)
    assert lr_at(40, s) == pytest.approx(0.00049, rel=1e-12)
    values = [lr_at(e, s) for e in range(100)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, s)


# --- metrics -----------------------------------------------------------------


def test_hand_computed_confusion():
    r = MetricsReport.from_confusion(np.array([[50, 10], [10, 30]]))
    assert r.oa == 0.8
    assert r.per_class_iou[0] == 50 / 70 and r.per_class_iou[1] == 30 / 50
    assert r.miou == (5 / 7 + 3 / 5) / 2
    assert r.count == 100


def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1])
    r = MetricsReport.from_confusion(confusion_matrix(y, y, 3))
    assert r.oa == 1.0 and r.miou == 1.0


def test_absent_class_skipped():
    conf = confusion_matrix([0, 0, 1], [0, 1, 1], 3)
    iou = iou_from_confusion(conf)
    assert np.isnan(iou[2])
    assert MetricsReport.from_confusion(conf).miou == (0.5 + 0.5) / 2


def test_confusion_orientation_and_recount():
    rng = np.random.default_rng(0)
    y, p = rng.integers(0, 4, 500), rng.integers(0, 4, 500)
    conf = confusion_matrix(y, p, 4)
    assert conf[1, 2] == np.count_nonzero((y == 1) & (p == 2))
    rep = MetricsReport.from_confusion(conf)
    cross_check(rep, y, p)
    bad = MetricsReport.from_confusion(conf + np.eye(4, dtype=int))
    with pytest.raises(AssertionError):
        cross_check(bad, y, p)


def test_report_output_and_equality():
    r = MetricsReport.from_confusion(np.array([[5, 1], [0, 4]]), ["wall", "chair"], latencies=[0.01, 0.02])
    lines = r.kv_lines()
    assert "oa=0.900000" in lines and any(l.startswith("iou.chair=") for l in lines)
    assert "latency.median_ms=15.000000" in lines
    assert "wall" in r.table()
    assert r == MetricsReport.from_confusion(np.array([[5, 1], [0, 4]]), ["wall", "chair"], latencies=[1.0])


# --- checkpoints ---------------------------------------------------------------


def tiny_seg(**kw):
    args = dict(in_width=9, num_classes=3, widths=(8, 8, 8), emb_width=16, head_widths=(8,), k=4, seed=0)
    args.update(kw)
    return SegNet(**args)


def test_checkpoint_round_trip(tmp_path):
    net = tiny_seg(dtype="float64")
    state = OptimizerState()
    params = net.parameters()
    adam_step(params, {k: np.ones_like(p.data) for k, p in params.items()}, state)
    rng = np.random.default_rng(3)
    save_checkpoint(tmp_path / "c.npz", params, state, epoch=7, model_config=net.config,
                    rng_states={"order": rng.bit_generator.state})
    ck = load_checkpoint(tmp_path / "c.npz")
    twin = tiny_seg(seed=99, dtype="float64")
    ck.load_into(twin)
    for k, p in net.parameters().items():
        assert np.array_equal(p.data, twin.parameters()[k].data) and twin.parameters()[k].dtype == np.float64
    assert ck.epoch == 7 and ck.state.step == 1
    assert all(np.array_equal(state.m[k], ck.state.m[k]) for k in state.m)
    g = np.random.default_rng()
    g.bit_generator.state = ck.rng_states["order"]
    assert g.random() == rng.random()


def test_empty_optimizer_round_trip(tmp_path):
    net = tiny_seg()
    save_checkpoint(tmp_path / "e.npz", net.parameters(), OptimizerState(), 0, net.config)
    ck = load_checkpoint(tmp_path / "e.npz")
    assert ck.state.step == 0 and ck.state.m == {}


def test_seg_checkpoint_into_cls_model(tmp_path):
    net = tiny_seg()
    save_checkpoint(tmp_path / "s.npz", net.parameters(), None, 0, net.config)
    cls = ClsNet(in_width=3, num_classes=3, widths=(8, 8, 8), cls_hidden=(8,), k=4)
    with pytest.raises(CheckpointError, match=r"shape mismatch for 'fa\.0\."):
        load_checkpoint(tmp_path / "s.npz").load_into(cls)


def test_truncated_and_version_errors(tmp_path):
    net = tiny_seg()
    path = save_checkpoint(tmp_path / "t.npz", net.parameters(), None, 0, net.config)
    data = path.read_bytes()
    (tmp_path / "cut.npz").write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.npz")
    import dpfa.checkpoint as ckmod

    old = ckmod.FORMAT_VERSION
    try:
        ckmod.FORMAT_VERSION = 99
        save_checkpoint(tmp_path / "v.npz", net.parameters(), None, 0, net.config)
    finally:
        ckmod.FORMAT_VERSION = old
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "v.npz")


# --- config ----------------------------------------------------------------------


def test_config_parse_and_defaults():
    cfg = parse_config("seed = 3\nwidths = 32,32,32\nlambda = 0.5\nbf.mode = regularizer  # comment\n")
    assert cfg.seed == 3 and cfg.widths == (32, 32, 32) and cfg.lam == 0.5 and cfg.bf_mode == "regularizer"
    d = RunConfig()
    assert d.batch_size == 5 and d.k == 20 and d.lr == 0.001 and d.decay == 0.7 and d.lam == 0.2
    assert (d.beta1, d.beta2, d.eps) == (0.9, 0.999, 1e-8)
    assert parse_config(dump_config(cfg)) == cfg


def test_config_errors():
    with pytest.raises(ConfigError, match="unknown"):
        parse_config("learning_rate = 1\n")
    with pytest.raises(ConfigError, match="lambda"):
        parse_config("lambda = 2\n")
    with pytest.raises(ConfigError, match="bad value"):
        parse_config("k = ten\n")


# --- training --------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_sets():
    cfg = toy_cfg()
    spec = SceneSpec(seed=0, width=(1.0, 1.0), depth=(1.0, 1.0), boxes=1, cylinders=1)
    tr = blocks_from_clouds(synthesize_dataset(spec, 4), cfg, 0).with_graphs(cfg.k)
    te = blocks_from_clouds(synthesize_dataset(spec, 2, offset=4), cfg, 1).with_graphs(cfg.k)
    return tr, te


def toy_cfg(**kw):
    base = dict(k=4, widths=(8, 8, 8), emb_width=16, head_widths=(16,), samples=128, epochs=3, batch_size=2)
    base.update(kw)
    return RunConfig(**base)


def _params_equal(a, b):
    pa, pb = a.parameters(), b.parameters()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_resume_reproduces_trajectory(toy_sets, tmp_path):
    tr, te = toy_sets
    full = train(toy_cfg(), tr, te, out_dir=tmp_path / "full")
    train(toy_cfg(), tr, te, out_dir=tmp_path / "part", stop_after_epoch=2)
    resumed = train(toy_cfg(), tr, te, resume=tmp_path / "part" / "last.npz", out_dir=tmp_path / "part")
    assert _params_equal(full.model, resumed.model)
    assert full.losses == resumed.losses
    assert full.history == resumed.history


def test_repeated_runs_identical(toy_sets):
    tr, te = toy_sets
    a = train(toy_cfg(epochs=2, bf_mode="regularizer"), tr, te)
    b = train(toy_cfg(epochs=2, bf_mode="regularizer"), tr, te)
    assert _params_equal(a.model, b.model) and a.history == b.history


def test_best_checkpoint_loads(toy_sets, tmp_path):
    tr, te = toy_sets
    res = train(toy_cfg(epochs=2), tr, te, out_dir=tmp_path)
    model, ck = load_model(tmp_path / "best.npz")
    assert ck.epoch == res.best_epoch
    assert evaluate(model, te) == res.best


def test_evaluate_rejects_class_mismatch(toy_sets):
    tr, _ = toy_sets
    model = build_model(toy_cfg(), 9, ["a", "b"])
    with pytest.raises(ValueError, match="classes"):
        evaluate(model, tr)


def test_nan_loss_aborts_with_location(toy_sets):
    tr, _ = toy_sets
    cfg = toy_cfg(epochs=1)
    model = build_model(cfg, 9, tr.class_table)
    model.head.layers[-1].b.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0 step 0"):
        train(cfg, tr, None, model=model)


def test_invalid_config_rejected_before_compute(toy_sets):
    tr, _ = toy_sets
    cfg = toy_cfg()
    cfg.batch_size = 0
    with pytest.raises(ConfigError):
        train(cfg, tr)


def test_class_weighting_runs(toy_sets):
    tr, te = toy_sets
    res = train(toy_cfg(epochs=1, class_weighting="inverse"), tr, te)
    assert np.isfinite(res.losses[0])


def test_classification_task():
    rng = np.random.default_rng(0)
    inputs = [rng.normal(size=(32, 3)).astype(np.float32) for _ in range(6)]
    data = BlockSet(inputs, [np.array([i % 2]) for i in range(6)], ["p", "q"]).with_graphs(4)
    cfg = RunConfig(task="cls", k=4, widths=(8, 8, 8), cls_hidden=(8,), epochs=2, batch_size=3)
    res = train(cfg, data, data)
    assert res.final.count == 6
