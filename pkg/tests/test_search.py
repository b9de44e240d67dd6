"""Supernet relaxation, confidence loss, derivation and shift configurations."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bscnet import autodiff as ad
from bscnet.conv import sfsc_forward, shifted_sparse_conv
from bscnet.errors import IndivisibleGroups, ParseError, ShapeMismatch, SpaceTooLarge
from bscnet.nets import NetworkSpec, build_network
from bscnet.search import (
    CORNERS,
    DEFAULT_SPACE,
    STILL,
    SearchSpace,
    ShiftConfig,
    SupernetConv,
    confidence_loss,
    derive_architecture,
    design_space_size,
    format_count,
    manual_shift_config,
    random_shift_config,
    relax,
    supernet_forward,
    total_confidence_loss,
    window_masks,
    window_positions,
)

from conftest import assert_grads_close, random_sparse


def explicit_mixture(t, latents, pi, space=DEFAULT_SPACE):
    """sum_j pi[g, j] * shifted conv with the sub-window of latents[g] at s_j."""
    g, _, cin, cg = latents.shape
    out = np.zeros((t.num_sites, g * cg))
    for gi in range(g):
        for j, d in enumerate(space.directions):
            w = latents[gi, window_positions(d)]
            out[:, gi * cg:(gi + 1) * cg] += pi[gi, j] * shifted_sparse_conv(t, w, 3, d).features
    return out


class TestSearchSpace:
    def test_default_space(self):
        assert len(DEFAULT_SPACE) == 9
        assert DEFAULT_SPACE.directions[0] == STILL
        assert set(DEFAULT_SPACE.directions[1:]) == set(CORNERS)

    def test_validation(self):
        with pytest.raises(ValueError):
            SearchSpace(((1, 0, 0),))
        with pytest.raises(ValueError):
            SearchSpace((STILL, STILL))

    def test_window_positions(self):
        np.testing.assert_array_equal(window_positions(STILL)[13], 62)  # centre of the 5^3 cube
        with pytest.raises(SpaceTooLarge):
            window_positions((2, 0, 0))
        with pytest.raises(SpaceTooLarge):
            SupernetConv(2, 8, 2, SearchSpace((STILL, (2, 0, 0))))

    def test_masks_count(self):
        m = window_masks(DEFAULT_SPACE)
        assert m.shape == (125, 9)
        np.testing.assert_array_equal(m.sum(axis=0), 27)


class TestFusedSupernet:
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_fused_equals_explicit_sum(self, seed):
        rng = np.random.default_rng(seed)
        t = random_sparse(rng, grid=6, occupancy=0.25, channels=2)
        latents = rng.normal(size=(2, 125, 2, 3))
        pi = rng.uniform(size=(2, 9))
        got = supernet_forward(t, latents, pi).features
        np.testing.assert_allclose(got, explicit_mixture(t, latents, pi), rtol=1e-10, atol=1e-12)

    def test_one_hot_collapses_to_sfsc_real_and_binary(self, rng):
        t = random_sparse(rng, grid=6, occupancy=0.3, channels=3)
        latents = rng.normal(size=(4, 125, 3, 2))
        choice = [0, 3, 8, 3]
        pi = np.zeros((4, 9))
        pi[np.arange(4), choice] = 1.0
        dirs = [DEFAULT_SPACE.directions[j] for j in choice]
        w = np.concatenate([latents[g, window_positions(d)] for g, d in enumerate(dirs)], axis=2)
        for binary in (False, True):
            fused = supernet_forward(t, latents, pi, binary=binary).features
            ref = sfsc_forward(t, w, dirs, binary).features
            np.testing.assert_allclose(fused, ref, rtol=1e-10, atol=1e-12)

    def test_shape_checks(self, rng):
        t = random_sparse(rng)
        with pytest.raises(ShapeMismatch):
            supernet_forward(t, np.zeros((2, 27, 3, 1)), np.zeros((2, 9)))
        with pytest.raises(ShapeMismatch):
            supernet_forward(t, np.zeros((2, 125, 3, 1)), np.zeros((2, 8)))

    def test_alpha_gradient(self, rng):
        t = random_sparse(rng, grid=4, occupancy=0.4, channels=2)
        layer = SupernetConv(2, 4, groups=2, rng=rng)
        layer.alpha.value = rng.normal(size=(2, 9))
        proj = rng.normal(size=(t.num_sites, 4))

        def loss(alpha):
            pi = relax(alpha)
            return ad.sum(ad.mul(supernet_forward(t, layer.weight.value, pi).features, proj))

        assert_grads_close(loss, [layer.alpha], rtol=1e-6)

    def test_layer_group_divisibility(self):
        with pytest.raises(IndivisibleGroups):
            SupernetConv(2, 6, groups=4)


class TestConfidenceLoss:
    def test_sigmoid_values(self):
        assert confidence_loss(np.full((2, 9), 0.5)) == 0.0
        assert confidence_loss(np.array([[0.0, 1.0]])) == -0.5

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_sigmoid_bounds(self, values):
        loss = confidence_loss(np.array([values]))
        assert -0.5 <= loss <= 0.0

    def test_softmax_mode(self):
        pi = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
        assert confidence_loss(pi, "softmax") == pytest.approx(-np.log(0.7) - np.log(0.8))
        with pytest.raises(ValueError):
            confidence_loss(pi, "hard")

    def test_gradient_through_sigmoid(self, rng):
        alpha = ad.Parameter(rng.normal(size=(3, 9)) + 0.3)
        assert_grads_close(lambda a: confidence_loss(relax(a)), [alpha], rtol=1e-6)

    def test_relax_modes(self):
        a = np.array([[0.0, np.log(3.0)]])
        np.testing.assert_allclose(relax(a), [[0.5, 0.75]])
        np.testing.assert_allclose(relax(a, "softmax"), [[0.25, 0.75]])
        with pytest.raises(ValueError):
            relax(a, "tanh")


def _search_net(binary=False):
    spec = NetworkSpec(family="unet", levels=2, base_filters=8, filters_step=8, num_classes=3, groups=4, search_mode=True, binary=binary)
    return build_network(spec)


class TestDerivation:
    def test_argmax_consistent(self, rng):
        net = _search_net()
        layers = [m for _, m in net.named_modules() if isinstance(m, SupernetConv)]
        for m in layers:
            m.alpha.value = rng.normal(size=m.alpha.shape)
        config, derived = derive_architecture(net)
        assert len(config) == len(layers) == net.spec.num_searchable()
        for m, dirs in zip(layers, config):
            expected = [DEFAULT_SPACE.directions[j] for j in m.alpha.value.argmax(axis=1)]
            assert list(dirs) == expected
        assert derived.shift_config() == config

    def test_scale_invariant(self, rng):
        """Positive rescaling of alpha leaves the argmax, and hence the derivation, unchanged."""
        net = _search_net()
        for _, m in net.named_modules():
            if isinstance(m, SupernetConv):
                m.alpha.value = rng.normal(size=m.alpha.shape)
        config, derived = derive_architecture(net)
        for _, m in net.named_modules():
            if isinstance(m, SupernetConv):
                m.alpha.value = m.alpha.value * 7.5
        config2, derived2 = derive_architecture(net)
        assert config2 == config
        for k, v in derived.state_dict().items():
            np.testing.assert_array_equal(derived2.state_dict()[k], v)

    def test_weights_transferred(self, rng):
        net = _search_net()
        config, derived = derive_architecture(net)
        src = dict(net.named_modules())
        for name, m in derived.named_modules():
            if name in src and isinstance(src[name], SupernetConv):
                sup = src[name]
                cg = sup.weight.shape[3]
                for g, d in enumerate(m.directions):
                    np.testing.assert_array_equal(
                        m.weight.value[:, :, g * cg:(g + 1) * cg], sup.weight.value[g, window_positions(d)]
                    )
        shared = set(derived.state_dict()) & set(net.state_dict())
        for k in shared:
            if not k.endswith(".conv.weight"):
                np.testing.assert_array_equal(derived.state_dict()[k], net.state_dict()[k])

    def test_one_hot_supernet_matches_derived_net(self, rng):
        """With near one-hot selectors the supernet forward equals the derived network."""
        net = _search_net()
        for _, m in net.named_modules():
            if isinstance(m, SupernetConv):
                a = np.full(m.alpha.shape, -60.0)
                a[np.arange(m.groups), rng.integers(0, 9, m.groups)] = 60.0
                m.alpha.value = a
        _, derived = derive_architecture(net)
        x = random_sparse(rng, grid=8, occupancy=0.3, channels=1)
        np.testing.assert_allclose(net.predict(x), derived.predict(x), rtol=1e-9, atol=1e-12)

    def test_total_confidence_loss_sums_layers(self, rng):
        net = _search_net()
        layers = [m for _, m in net.named_modules() if isinstance(m, SupernetConv)]
        for m in layers:
            m.alpha.value = rng.normal(size=m.alpha.shape)
        total = float(ad.value(total_confidence_loss(net)))
        assert total == pytest.approx(sum(confidence_loss(relax(m.alpha.value)) for m in layers))


class TestShiftConfig:
    def test_text_round_trip(self, rng):
        cfg = random_shift_config(DEFAULT_SPACE, 4, 3, rng)
        assert ShiftConfig.loads(cfg.dumps()) == cfg
        assert ShiftConfig.from_indices(cfg.indices(DEFAULT_SPACE), DEFAULT_SPACE) == cfg

    def test_parse_errors(self):
        with pytest.raises(ParseError):
            ShiftConfig.loads("0,0,0 1,1\n")
        with pytest.raises(ParseError) as err:
            ShiftConfig.loads("0,0,0\na,b,c\n")
        assert err.value.line == 2

    def test_manual_presets(self):
        cfg = manual_shift_config("scannet", 8, 2)
        assert len(cfg) == 2
        assert cfg[0].count(STILL) == 4
        assert cfg[0].count((1, 1, 1)) == 2 and cfg[0].count((-1, -1, -1)) == 2
        nyu = manual_shift_config("nyu", 4)
        assert nyu[0] == ((0, 0, 0), (0, 0, 0), (1, 1, 0), (-1, -1, 0))
        with pytest.raises(IndivisibleGroups):
            manual_shift_config("nyu", 6)
        with pytest.raises(ValueError):
            manual_shift_config("kitti", 8)


class TestDesignSpace:
    def test_size(self):
        assert design_space_size(9, 8, 1) == 9**8
        assert format_count(design_space_size(8, 4, 13)) == "9.1e+46"
        with pytest.raises(ValueError):
            design_space_size(0, 1, 1)

    @settings(max_examples=50)
    @given(st.integers(1, 9), st.integers(1, 8), st.integers(1, 20))
    def test_exact_power(self, n_s, n_g, layers):
        assert design_space_size(n_s, n_g, layers) == n_s ** (n_g * layers)
