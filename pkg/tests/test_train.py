"""Optimizer, schedules, augmentation, datasets and the staged training loop."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bscnet import autodiff as ad
from bscnet.errors import EpochOutOfRange, InvalidConfig, ShapeMismatch
from bscnet.nets import NetworkSpec, build_network
from bscnet.search import SupernetConv
from bscnet.synthetic import SceneConfig, generate_scenes
from bscnet.train import (
    Adam,
    AdamState,
    AffineConfig,
    AffineTransform,
    Dataset,
    StageConfig,
    TrainConfig,
    adam_step,
    dataset_loss,
    evaluate,
    lr_at,
    pipeline_stages,
    read_history_csv,
    run_stage,
    scaled_schedule,
    split_dataset,
    train_pipeline,
    write_history_csv,
)


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on one scalar, written independently of the package."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


@pytest.fixture(scope="module")
def tiny_scenes():
    return generate_scenes(SceneConfig(num_points=1500, extent=1.0, num_objects=2), 2)


def tiny_spec(**kw):
    return NetworkSpec(**{**dict(family="unet", levels=2, base_filters=8, filters_step=8, num_classes=3), **kw})


def _alphas(net):
    return [m.alpha.value.copy() for _, m in net.named_modules() if isinstance(m, SupernetConv)]


def _weights(net):
    return {n: p.value.copy() for n, p in net.named_parameters() if not n.endswith("alpha")}


class TestAdam:
    def test_first_step_is_signed_lr(self):
        s = AdamState()
        (p,) = adam_step([np.array([1.0, 1.0])], [np.array([0.5, -2.0])], [s], 0.1)
        np.testing.assert_allclose(p, [0.9, 1.1], rtol=1e-7)
        assert s.t == 1

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10, allow_subnormal=False), min_size=1, max_size=8), st.floats(1e-4, 1e-1))
    def test_matches_scalar_oracle(self, grads, lr):
        state = AdamState()
        p = np.array([0.3])
        for g in grads:
            (p,) = adam_step([p], [np.array([g])], [state], lr)
        assert p[0] == pytest.approx(scalar_adam(0.3, grads, lr), rel=1e-9, abs=1e-12)

    def test_weight_decay_adds_to_gradient(self):
        a, b = AdamState(), AdamState()
        (p1,) = adam_step([np.array([2.0])], [np.array([1.0])], [a], 0.01, weight_decay=0.5)
        (p2,) = adam_step([np.array([2.0])], [np.array([2.0])], [b], 0.01)
        np.testing.assert_allclose(p1, p2)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step([np.zeros(2)], [np.zeros(3)], [AdamState()], 0.1)

    def test_optimizer_skips_frozen_and_gradless(self):
        a, b, c = ad.Parameter([1.0]), ad.Parameter([1.0]), ad.Parameter([1.0])
        a.grad, b.grad = np.array([1.0]), np.array([1.0])
        b.frozen = True
        Adam([a, b, c]).step(0.1)
        assert a.value[0] == pytest.approx(0.9)
        assert b.value[0] == 1.0 and c.value[0] == 1.0


class TestSchedule:
    def test_full_length_schedule(self):
        stage = StageConfig()
        assert [lr_at(e, stage) for e in (0, 59, 60, 99, 100, 127)] == pytest.approx(
            [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5], rel=1e-12
        )
        with pytest.raises(EpochOutOfRange):
            lr_at(128, stage)
        with pytest.raises(EpochOutOfRange):
            lr_at(-1, stage)

    def test_scaled_schedule(self):
        assert scaled_schedule(128) == (128, (60, 100))
        assert scaled_schedule(128, 2.0) == (256, (120, 200))
        assert scaled_schedule(20) == (20, (9, 16))
        assert scaled_schedule(1) == (1, ())

    @settings(max_examples=50)
    @given(st.integers(1, 400), st.floats(0.1, 3.0))
    def test_scaled_schedule_always_valid(self, epochs, scale):
        total, steps = scaled_schedule(epochs, scale)
        StageConfig(max_epochs=total, lr_steps=steps)  # must validate

    @pytest.mark.parametrize(
        "kw",
        [
            dict(precision="ternary"),
            dict(role="finetune"),
            dict(optimizer="sgd"),
            dict(lr_steps=(100, 60)),
            dict(max_epochs=50, lr_steps=(60,)),
            dict(lr0=0.0),
            dict(confidence_weight=-1.0),
        ],
    )
    def test_invalid_stage(self, kw):
        with pytest.raises(InvalidConfig):
            StageConfig(**kw)

    def test_train_config(self):
        with pytest.raises(InvalidConfig):
            TrainConfig([])
        with pytest.raises(InvalidConfig):
            TrainConfig([StageConfig()], batch_size=0)


class TestAugmentation:
    def test_inverse_round_trip(self, rng):
        pts = rng.normal(size=(50, 3))
        for _ in range(10):
            t = AffineTransform.sample(rng, AffineConfig())
            np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)

    def test_rotation_about_gravity_only(self, rng):
        t = AffineTransform.sample(rng, AffineConfig(translation=0.0))
        np.testing.assert_allclose(t.matrix[2, :2], 0.0)
        np.testing.assert_allclose(t.matrix[:2, 2], 0.0)
        s = t.matrix[2, 2]
        assert 0.9 <= s <= 1.1
        np.testing.assert_allclose(t.matrix[:2, :2] @ t.matrix[:2, :2].T, s * s * np.eye(2), atol=1e-12)

    def test_identity_config(self, rng):
        t = AffineTransform.sample(rng, AffineConfig.identity())
        np.testing.assert_allclose(t.matrix, np.eye(3))
        np.testing.assert_allclose(t.offset, 0.0)


class TestData:
    def test_split(self):
        train, val = split_dataset(list(range(10)), 0.2, seed=1)
        assert len(val) == 2 and sorted(train + val) == list(range(10))
        assert split_dataset(list(range(10)), 0.2, seed=1) == (train, val)
        train, val = split_dataset([1, 2], 0.1)
        assert len(val) == 1 and len(train) == 1
        assert split_dataset([1, 2], 0.0)[1] == []

    def test_dataset_caches_unaugmented(self, tiny_scenes):
        data = Dataset(tiny_scenes)
        assert data.get(0) is data.get(0)
        aug = Dataset(tiny_scenes, augment=AffineConfig())
        a = aug.get(0, np.random.default_rng(0))
        b = aug.get(0, np.random.default_rng(1))
        assert a.tensor.num_sites != b.tensor.num_sites or not np.array_equal(a.tensor.coords, b.tensor.coords)

    def test_history_csv_round_trip(self, tmp_path):
        hist = [dict(epoch=0, stage="1-pretrain", lr=1e-3, train_loss=0.123456789012345, val_miou=float("nan"))]
        write_history_csv(tmp_path / "h.csv", hist)
        back = read_history_csv(tmp_path / "h.csv")
        assert back[0]["train_loss"] == hist[0]["train_loss"]
        assert math.isnan(back[0]["val_miou"])
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,stage,lr,train_loss,val_miou"


class TestRunStage:
    def test_loss_drops_by_half(self, tiny_scenes):
        net = build_network(tiny_spec())
        data = Dataset(tiny_scenes)
        before = dataset_loss(net, data)
        stage = StageConfig("real", "pretrain", max_epochs=30, lr0=5e-3, lr_steps=())
        net, history = run_stage(net, data, stage, batch_size=2)
        assert len(history) == 30
        assert dataset_loss(net, data) <= 0.5 * before
        assert evaluate(net, data).miou > 0.5

    def test_deterministic(self, tiny_scenes):
        stage = StageConfig("binary", "binary-train", max_epochs=2, lr0=1e-3, lr_steps=())
        a, ha = run_stage(build_network(tiny_spec()), tiny_scenes, stage, seed=3)
        b, hb = run_stage(build_network(tiny_spec()), tiny_scenes, stage, seed=3)
        assert [r["train_loss"] for r in ha] == [r["train_loss"] for r in hb]
        for k, v in a.state_dict().items():
            np.testing.assert_array_equal(b.state_dict()[k], v)

    def test_dataset_loss_restores_buffers(self, tiny_scenes):
        net = build_network(tiny_spec())
        before = net.state_dict()
        dataset_loss(net, tiny_scenes)
        for k, v in net.state_dict().items():
            np.testing.assert_array_equal(before[k], v)

    def test_alternation(self, tiny_scenes):
        """Odd batches move only weights, even batches move only alpha."""
        net = build_network(tiny_spec(search_mode=True, groups=4))
        a0, w0 = _alphas(net), _weights(net)
        stage = StageConfig("binary", "supernet-search", max_epochs=1, lr_steps=(), confidence_weight=0.1)
        run_stage(net, tiny_scenes, stage, batch_size=2)  # one batch: a weight step
        a1, w1 = _alphas(net), _weights(net)
        assert all(np.array_equal(x, y) for x, y in zip(a0, a1))
        assert any(not np.array_equal(w0[k], w1[k]) for k in w0)
        run_stage(net, tiny_scenes, StageConfig("binary", "supernet-search", max_epochs=1, lr_steps=(), confidence_weight=0.1), batch_size=1)
        # two batches: step 1 weights, step 2 alpha
        a2 = _alphas(net)
        assert all(not np.array_equal(x, y) for x, y in zip(a1, a2))

    def test_frozen_flags_restored(self, tiny_scenes):
        net = build_network(tiny_spec(search_mode=True, groups=4))
        stage = StageConfig("binary", "supernet-search", max_epochs=1, lr_steps=(), confidence_weight=0.1)
        run_stage(net, tiny_scenes, stage, batch_size=1)
        assert not any(p.frozen for p in net.parameters())
        assert not net.training


class TestPipelines:
    def test_stage_lists(self):
        base = pipeline_stages("baseline", max_epochs=128)
        assert [(s.precision, s.role, s.lr0) for s in base] == [("real", "pretrain", 1e-3), ("binary", "binary-train", 2e-4)]
        search = pipeline_stages("search", "fcn")
        assert [s.role for s in search] == ["supernet-search", "pretrain", "binary-train"]
        assert search[0].confidence_weight == 0.1
        assert pipeline_stages("search", "unet")[0].confidence_weight == 0.01
        with pytest.raises(InvalidConfig):
            pipeline_stages("greedy")

    @pytest.mark.parametrize("pipeline", ["baseline", "manual", "search"])
    def test_runs_end_to_end(self, tiny_scenes, pipeline):
        stages = pipeline_stages(pipeline, max_epochs=1, confidence_weight=0.1)
        res = train_pipeline(pipeline, tiny_spec(groups=4), tiny_scenes, tiny_scenes[:1], stages=stages)
        assert res.net.binary
        assert len(res.history) == len(stages)
        assert [r["stage"] for r in res.history][0].startswith("1-")
        if pipeline == "baseline":
            assert res.shift_config is None
        else:
            assert len(res.shift_config) == res.net.spec.num_searchable()
            assert res.net.shift_config() == res.shift_config
        assert (res.supernet is not None) == (pipeline == "search")

    def test_stage_count_checked(self, tiny_scenes):
        with pytest.raises(InvalidConfig):
            train_pipeline("search", tiny_spec(), tiny_scenes, stages=pipeline_stages("baseline", max_epochs=1))
