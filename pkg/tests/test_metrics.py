"""Segmentation metrics, sign correspondence and cost accounting."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bscnet.errors import LayerNotFound, LengthMismatch
from bscnet.metrics import (
    CostReport,
    agreement,
    capture_layer,
    compute_metrics,
    confusion_matrix,
    count_cost,
    cost_breakdown,
    layer_sign_correspondence,
    parameter_census,
    sign_correspondence,
)
from bscnet.nets import NetworkSpec, build_network
from bscnet.sparse import KernelOffsets, build_kernel_map

from conftest import random_sparse


def tiny_unet(binary=True, **kw):
    spec = NetworkSpec(family="unet", levels=2, base_filters=8, filters_step=8, num_classes=3, binary=binary, **kw)
    return build_network(spec)


def brute_iou(pred, true, c):
    inter = np.sum((pred == c) & (true == c))
    union = np.sum((pred == c) | (true == c))
    return inter / union if union else math.nan


class TestSegmentationMetrics:
    def test_known_values(self):
        pred = [0, 0, 1, 1, 2]
        true = [0, 1, 1, 1, -100]
        m = compute_metrics(pred, true, 3)
        np.testing.assert_allclose(m.per_class_iou[:2], [0.5, 2 / 3])
        assert math.isnan(m.per_class_iou[2])
        assert m.miou == pytest.approx((0.5 + 2 / 3) / 2)
        assert m.macc == pytest.approx((1.0 + 2 / 3) / 2)
        assert m.acc == pytest.approx(0.75)

    def test_false_positive_class_counts_as_zero(self):
        """A class predicted but absent from the truth has IoU 0 and lowers the mean."""
        m = compute_metrics([0, 1], [0, 0], 2)
        assert m.per_class_iou == [0.5, 0.0]
        assert m.miou == pytest.approx(0.25)

    def test_confusion_matrix_orientation(self):
        cm = confusion_matrix([1, 1, 0], [0, 1, 1], 2)
        np.testing.assert_array_equal(cm, [[0, 1], [1, 1]])

    def test_all_ignored(self):
        m = compute_metrics([0, 1], [-100, -100], 2)
        assert (m.miou, m.macc, m.acc) == (0.0, 0.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            compute_metrics([0], [0, 1], 2)

    def test_json_nan_becomes_null(self):
        d = json.loads(compute_metrics([0], [0], 2).to_json())
        assert d["per_class_iou"] == [1.0, None]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 5).flatmap(lambda k: st.tuples(
        st.just(k),
        st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=80),
    )))
    def test_against_brute_force(self, case):
        k, pairs = case
        pred, true = np.array(pairs).T
        m = compute_metrics(pred, true, k)
        expected = [brute_iou(pred, true, c) for c in range(k)]
        np.testing.assert_allclose(m.per_class_iou, expected)
        assert m.miou == pytest.approx(np.nanmean(expected))
        assert 0.0 <= m.miou <= 1.0 and 0.0 <= m.acc <= 1.0
        assert m.acc == pytest.approx(np.mean(pred == true))


class TestSignCorrespondence:
    def test_agreement(self):
        assert agreement([1.0, -1.0, 0.0], [2.0, 3.0, 5.0]) == pytest.approx(2 / 3)
        with pytest.raises(LengthMismatch):
            agreement([1.0], [1.0, 2.0])

    def test_self_is_one(self, rng):
        net = tiny_unet()
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        assert sign_correspondence(net, net, x) == 1.0

    def test_real_vs_binary_in_unit_interval(self, rng):
        real = tiny_unet(binary=False)
        binary = tiny_unet(binary=True)
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        c = sign_correspondence(real, binary, x)
        assert 0.0 <= c <= 1.0

    def test_capture_layer(self, rng):
        net = tiny_unet()
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        layer = net.first_binary_layer()
        out = capture_layer(net, x, layer)
        inp = capture_layer(net, x, layer, inputs=True)
        assert out.shape == (x.num_sites, 8)
        assert inp.num_sites == x.num_sites
        with pytest.raises(LayerNotFound):
            capture_layer(net, x, "no.such.layer")
        with pytest.raises(LayerNotFound):
            capture_layer(net, x, "input_layer.bn")

    def test_layer_level_matches_network_level(self, rng):
        """Feeding the captured input to the layer in both modes gives the same number."""
        net = tiny_unet(binary=False)
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        layer_id = net.first_binary_layer()
        mod = dict(net.named_modules())[layer_id]
        inp = capture_layer(net, x, layer_id, inputs=True)
        binary = tiny_unet(binary=True)
        expected = sign_correspondence(net, binary, x)
        assert layer_sign_correspondence(inp, mod.weight.value, mod.directions) == pytest.approx(expected)


class TestCost:
    def test_ops_identity(self):
        r = CostReport.from_counts(6400, 100, 10, 64)
        assert r.ops == 6400 / 64 + 100
        assert r.storage_m == pytest.approx((10 + 2) / 1e6)

    def test_parameter_census_hand_count(self):
        assert parameter_census(tiny_unet(binary=True)) == (691, 14272)
        assert parameter_census(tiny_unet(binary=False)) == (691 + 14272, 0)

    def test_count_cost_partitions_trace(self, rng):
        net = tiny_unet()
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        report = count_cost(net, x)
        log = cost_breakdown(net, x)
        assert report.bops == sum(o for _, _, o, b in log if b)
        assert report.flops == sum(o for _, _, o, b in log if not b)
        assert report.ops == report.bops / 64 + report.flops
        assert report.sites == x.num_sites

    def test_first_conv_hand_count(self, rng):
        """Input layer FLOPs are 2 * (active pairs) * C_in * C_out."""
        net = tiny_unet()
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        pairs = build_kernel_map(x, x.coords, KernelOffsets.cube(3), 1).pair_counts().sum()
        log = cost_breakdown(net, x)
        first = [o for name, kind, o, _ in log if name == "input_layer.conv"]
        assert first == [2.0 * pairs * 1 * 8]

    def test_binary_mode_moves_ops_to_bops(self, rng):
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        real = count_cost(tiny_unet(binary=False), x)
        binary = count_cost(tiny_unet(binary=True), x)
        assert real.bops == 0
        assert binary.bops + binary.flops == pytest.approx(real.flops)
        assert binary.ops < real.ops
