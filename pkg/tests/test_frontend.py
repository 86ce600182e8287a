import numpy as np
import pytest

from sparse_frontend import autodiff as ad
from sparse_frontend.autodiff import Tensor
from sparse_frontend.dictlearn import Dictionary
from sparse_frontend.frontend import (
    DecoderNet,
    EncoderOutput,
    FrontendConfig,
    atom_kernel,
    decode,
    encode,
    encode_op,
    plan_decoder_shapes,
    project,
    project_op,
    quantize_op,
    quantized_activation,
    select_top,
    select_top_op,
    smooth_activation_value,
)
from sparse_frontend.patches import extract_patches, make_grid


def unit_dictionary(rng, patch_dim, count):
    atoms = rng.normal(size=(patch_dim, count))
    atoms /= np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms)


@pytest.fixture
def small_setup(rng):
    grid = make_grid(8, 4, 2)
    dictionary = unit_dictionary(rng, grid.patch_dim, 16)
    config = FrontendConfig(grid, dictionary, top_k=3, defense_eps=8 / 255, threshold_scale=3.0)
    return grid, dictionary, config


class TestProjection:
    def test_zero_image_projects_to_zero(self, small_setup):
        grid, dictionary, _ = small_setup
        out = project(np.zeros((8, 8, 3)), dictionary, grid)
        assert out.shape == (3, 3, 16)
        np.testing.assert_array_equal(out, 0.0)

    def test_patch_equal_to_atom_gives_unit_coefficient(self, small_setup):
        grid, dictionary, _ = small_setup
        image = np.zeros((8, 8, 3))
        image[0:4, 0:4, :] = atom_kernel(dictionary, 4)[:, :, :, 5]
        out = project(image, dictionary, grid)
        assert out[0, 0, 5] == pytest.approx(1.0, abs=1e-6)

    def test_convolution_path_equals_extract_then_matmul(self, rng):
        ad.set_default_dtype(np.float64)
        grid = make_grid(8, 4, 2)
        dictionary = unit_dictionary(rng, grid.patch_dim, 16)
        image = rng.random((8, 8, 3))
        conv_path = project(image, dictionary, grid)
        explicit = extract_patches(image, grid) @ dictionary.atoms
        np.testing.assert_allclose(conv_path, explicit, atol=1e-6)

    def test_shape_mismatch_rejected(self, small_setup, rng):
        grid, dictionary, _ = small_setup
        with pytest.raises(ad.ShapeMismatchError):
            project_op(Tensor(rng.random((1, 8, 8, 4))), dictionary, grid)


class TestSelectTop:
    def test_keeps_largest_magnitudes(self):
        fiber = np.array([[[0.5, -0.9, 0.1, 0.0]]])
        out = select_top(fiber, 2)
        np.testing.assert_array_equal(out, [[[0.5, -0.9, 0.0, 0.0]]])

    def test_full_width_is_identity(self, rng):
        x = rng.normal(size=(2, 2, 5))
        np.testing.assert_array_equal(select_top(x, 5), x)

    def test_tie_breaks_to_lower_atom_index(self):
        fiber = np.array([[[0.3, -0.3, 0.2]]])
        out = select_top(fiber, 1)
        np.testing.assert_array_equal(out, [[[0.3, 0.0, 0.0]]])

    def test_kept_entries_are_verbatim(self, rng):
        x = rng.normal(size=(3, 3, 10)).astype(np.float32)
        out = select_top(x, 4)
        kept = out != 0
        assert np.array_equal(out[kept], x[kept])
        assert (np.count_nonzero(out, axis=-1) <= 4).all()

    def test_default_backward_routes_through_kept_entries(self):
        x = Tensor(np.array([[[0.5, -0.9, 0.1, 0.0]]]), requires_grad=True)
        out = select_top_op(x, 2)
        ad.backward(ad.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, [[[1.0, 1.0, 0.0, 0.0]]])

    def test_top_u_surrogate_widens_the_route(self):
        data = np.array([[[0.5, -0.9, 0.1, 0.05]]])
        ad.register_surrogate("top_k", "top-u-routing(3)")
        x = Tensor(data, requires_grad=True)
        ad.backward(ad.reduce_sum(select_top_op(x, 2)))
        np.testing.assert_array_equal(x.grad, [[[1.0, 1.0, 1.0, 0.0]]])

    def test_identity_surrogate_opens_route(self):
        data = np.array([[[0.5, -0.9, 0.1, 0.05]]])
        ad.register_surrogate("top_k", "identity")
        x = Tensor(data, requires_grad=True)
        ad.backward(ad.reduce_sum(select_top_op(x, 2)))
        np.testing.assert_array_equal(x.grad, [[[1.0, 1.0, 1.0, 1.0]]])


class TestQuantizedActivation:
    def setup_method(self):
        atoms = np.zeros((8, 1))
        atoms[:4, 0] = 0.5  # l2 norm 1, l1 norm 2
        self.dictionary = Dictionary(atoms)

    def test_coefficient_above_threshold_emits_l1_norm(self):
        # threshold = 3 * (8/255) * 2 ~= 0.18824 <= 0.20
        out = quantized_activation(np.array([[[0.20]]]), self.dictionary, 8 / 255, 3.0)
        assert out[0, 0, 0] == np.float32(2.0)

    def test_zero_input_stays_zero(self):
        out = quantized_activation(np.zeros((1, 1, 1)), self.dictionary, 8 / 255, 3.0)
        assert out[0, 0, 0] == 0.0

    def test_below_threshold_negative_coefficient_zeroed(self):
        out = quantized_activation(np.array([[[-0.15]]]), self.dictionary, 8 / 255, 3.0)
        assert out[0, 0, 0] == 0.0

    def test_threshold_is_inclusive(self):
        tau = 3.0 * (8 / 255) * 2.0
        out = quantized_activation(
            np.array([[[np.float32(tau)]]]), self.dictionary, 8 / 255, 3.0
        )
        assert out[0, 0, 0] == np.float32(2.0)

    def test_negative_survivor_gets_negative_norm(self):
        out = quantized_activation(np.array([[[-0.5]]]), self.dictionary, 8 / 255, 3.0)
        assert out[0, 0, 0] == np.float32(-2.0)

    def test_non_positive_eps_rejected(self):
        with pytest.raises(ValueError, match="defense_eps"):
            quantized_activation(np.zeros((1, 1, 1)), self.dictionary, 0.0, 3.0)

    def test_outputs_live_in_the_three_point_set(self, rng):
        d = Dictionary(rng.normal(size=(8, 6)) / np.linalg.norm(rng.normal(size=(8, 6)), axis=0))
        x = rng.normal(size=(4, 4, 6)).astype(np.float32)
        out = quantized_activation(x, d, 0.05, 2.0)
        l1 = d.l1_norms.astype(np.float32)
        for l in range(6):
            values = np.unique(out[:, :, l])
            allowed = {np.float32(0.0), np.float32(l1[l]), np.float32(-l1[l])}
            assert set(values.tolist()) <= {float(v) for v in allowed}

    def test_exact_backward_is_zero(self):
        x = Tensor(np.array([[[0.5]]]), requires_grad=True)
        out = quantize_op(x, self.dictionary, 8 / 255, 3.0)
        ad.backward(ad.reduce_sum(out))
        np.testing.assert_array_equal(x.grad, [[[0.0]]])

    def test_identity_surrogate_passes_gradient(self):
        ad.register_surrogate("quantize", "identity")
        x = Tensor(np.array([[[0.5]]]), requires_grad=True)
        ad.backward(ad.reduce_sum(quantize_op(x, self.dictionary, 8 / 255, 3.0)))
        np.testing.assert_array_equal(x.grad, [[[1.0]]])

    def test_smooth_surrogate_matches_value_function_slope(self):
        ad.set_default_dtype(np.float64)
        steepness = 4.0
        l1 = self.dictionary.l1_norms.astype(np.float64)
        tau = 3.0 * (8 / 255) * l1
        ad.register_surrogate("quantize", f"smooth-activation({steepness})")
        for point in (-0.4, -0.1, 0.0, 0.12, 0.3):
            x = Tensor(np.array([[[point]]]), requires_grad=True)
            ad.backward(ad.reduce_sum(quantize_op(x, self.dictionary, 8 / 255, 3.0)))
            h = 1e-6
            fd = (
                smooth_activation_value(np.array(point + h), l1, tau, steepness)
                - smooth_activation_value(np.array(point - h), l1, tau, steepness)
            ) / (2 * h)
            assert x.grad[0, 0, 0] == pytest.approx(float(fd[0]), rel=1e-5)

    def test_smooth_value_approaches_step_pair(self):
        l1 = np.array([2.0])
        tau = np.array([0.2])
        sharp = smooth_activation_value(np.array([0.5]), l1, tau, 200.0)
        assert sharp[0] == pytest.approx(2.0, abs=1e-6)
        inside = smooth_activation_value(np.array([0.0]), l1, tau, 200.0)
        assert inside[0] == pytest.approx(0.0, abs=1e-6)


class TestEncode:
    def test_zero_image_encodes_to_zero(self, small_setup):
        _, _, config = small_setup
        out = encode(np.zeros((8, 8, 3)), config)
        assert isinstance(out, EncoderOutput)
        np.testing.assert_array_equal(out.quantized, 0.0)

    def test_cifar_configuration_output_shape(self, rng):
        grid = make_grid(32, 4, 2)
        dictionary = unit_dictionary(rng, 48, 500)
        config = FrontendConfig(grid, dictionary, top_k=15, defense_eps=8 / 255)
        out = encode(rng.random((32, 32, 3)).astype(np.float32), config)
        assert out.quantized.shape == (15, 15, 500)
        assert (np.count_nonzero(out.quantized, axis=-1) <= 15).all()

    def test_sparsity_bound_per_fiber(self, small_setup, rng):
        _, _, config = small_setup
        out = encode(rng.random((8, 8, 3)), config)
        assert (np.count_nonzero(out.quantized, axis=-1) <= config.top_k).all()

    def test_raising_threshold_scale_never_adds_support(self, small_setup, rng):
        grid, dictionary, _ = small_setup
        image = rng.random((8, 8, 3))
        supports = []
        for scale in (1.5, 2.0, 3.0, 5.0):
            config = FrontendConfig(grid, dictionary, top_k=4, defense_eps=8 / 255,
                                    threshold_scale=scale)
            supports.append(encode(image, config).quantized != 0)
        for tighter, looser in zip(supports[1:], supports[:-1]):
            assert not np.any(tighter & ~looser)

    def test_encoder_is_locally_constant_at_generic_points(self, small_setup, rng):
        grid, dictionary, config = small_setup
        for _ in range(5):
            image = rng.random((8, 8, 3)).astype(np.float32)
            out = encode(image, config)
            margin = _stability_margin(out, config)
            if margin <= 1e-9:
                continue
            bump = rng.choice([-1.0, 1.0], size=image.shape) * 0.49 * margin
            shifted = encode(np.clip(image + bump, 0.0, 1.0).astype(np.float32), config)
            np.testing.assert_array_equal(out.quantized, shifted.quantized)

    def test_forward_identical_under_any_surrogate(self, small_setup, rng):
        _, _, config = small_setup
        image = rng.random((1, 8, 8, 3)).astype(np.float32)
        plain = encode_op(Tensor(image, requires_grad=True), config)
        with ad.surrogate_rules({"quantize": "smooth-activation(4.0)", "top_k": "top-u-routing(6)"}):
            wrapped = encode_op(Tensor(image, requires_grad=True), config)
        assert np.array_equal(plain.data, wrapped.data)


def _stability_margin(out: EncoderOutput, config: FrontendConfig) -> float:
    """Largest pixel-wise perturbation provably not changing the encoding.

    A pixel change of b moves every projection coefficient by at most
    b * max_l ||d_l||_1, so rank swaps need half the smallest selection gap
    and gate flips need the smallest |amplitude - threshold| distance.
    """
    magnitudes = np.abs(out.projections)
    m = magnitudes.shape[0]
    k = config.top_k
    sorted_mags = np.sort(magnitudes, axis=-1)[..., ::-1]
    rank_gap = float((sorted_mags[..., k - 1] - sorted_mags[..., k]).min())
    tau = config.thresholds.astype(np.float64)
    gate_gap = float(np.abs(np.abs(out.selected) - tau[None, None, :]).min())
    slack = min(rank_gap / 2.0, gate_gap)
    return slack / float(config.dictionary.l1_norms.max())


class TestDecoder:
    def test_planned_shapes_restore_cifar_size(self):
        specs = plan_decoder_shapes(15, 32)
        side = 15
        for spec in specs:
            side = (side - 1) * spec.stride - 2 * spec.padding + spec.kernel
        assert side == 32

    def test_zero_code_zero_bias_decodes_to_zero(self, rng):
        decoder = DecoderNet(7, 16, 16, hidden=(8, 8), seed=0)
        out = decode(np.zeros((7, 7, 16)), decoder)
        assert out.shape == (16, 16, 3)
        np.testing.assert_array_equal(out, 0.0)

    def test_full_size_decoder_restores_image_shape(self, rng):
        decoder = DecoderNet(15, 500, 32, hidden=(32, 16), seed=1)
        out = decode(rng.random((15, 15, 500)).astype(np.float32), decoder)
        assert out.shape == (32, 32, 3)

    def test_code_shape_mismatch_rejected(self, rng):
        decoder = DecoderNet(7, 16, 16, hidden=(8, 8), seed=0)
        with pytest.raises(ad.ShapeMismatchError):
            decode(rng.random((7, 7, 12)), decoder)

    def test_search_fallback_finds_nonstandard_chain(self):
        specs = plan_decoder_shapes(5, 13)
        side = 5
        for spec in specs:
            side = (side - 1) * spec.stride - 2 * spec.padding + spec.kernel
        assert side == 13

    def test_state_roundtrip(self, rng):
        a = DecoderNet(7, 16, 16, hidden=(8, 8), seed=3)
        b = DecoderNet(7, 16, 16, hidden=(8, 8), seed=4)
        b.load_state_arrays(a.state_arrays())
        x = rng.random((7, 7, 16)).astype(np.float32)
        np.testing.assert_array_equal(decode(x, a), decode(x, b))


class TestFrontendConfigValidation:
    def test_top_k_range(self, small_setup):
        grid, dictionary, _ = small_setup
        with pytest.raises(ValueError, match="top_k"):
            FrontendConfig(grid, dictionary, top_k=17, defense_eps=0.03)

    def test_threshold_scale_must_exceed_one(self, small_setup):
        grid, dictionary, _ = small_setup
        with pytest.raises(ValueError, match="threshold_scale"):
            FrontendConfig(grid, dictionary, top_k=3, defense_eps=0.03, threshold_scale=1.0)

    def test_dictionary_grid_consistency(self, rng):
        grid = make_grid(8, 4, 2)
        with pytest.raises(ValueError, match="patch dim"):
            FrontendConfig(grid, unit_dictionary(rng, 27, 16), top_k=3, defense_eps=0.03)
