import numpy as np
import pytest

from sparse_frontend import autodiff
from sparse_frontend.dictlearn import (
    ConvergenceError,
    Dictionary,
    DictLearnConfig,
    LearnResult,
    _sphere_column_sweep,
    learn_dictionary,
    objective,
    sparse_code,
)
from sparse_frontend.serialize import ContainerError
from lasso_oracle import brute_force_lasso, incoherent_unit_atoms, lasso_objective


def random_unit_atoms(rng, dim, count):
    atoms = rng.normal(size=(dim, count))
    return atoms / np.linalg.norm(atoms, axis=0)


class TestSparseCode:
    def test_single_atom_soft_threshold(self):
        d = Dictionary(np.array([[1.0], [0.0]]))
        code = sparse_code(np.array([2.0, 0.0]), d, l1_penalty=1.0)
        np.testing.assert_allclose(code, [1.0], atol=1e-9)

    def test_null_solution_above_penalty_threshold(self, rng):
        atoms = random_unit_atoms(rng, 4, 6)
        x = rng.normal(size=4)
        lam = float(np.abs(atoms.T @ x).max())
        code = sparse_code(x, Dictionary(atoms), l1_penalty=lam + 1e-9)
        np.testing.assert_array_equal(code, np.zeros(6))

    def test_matches_brute_force_enumeration(self, rng):
        for _ in range(25):
            dim = int(rng.integers(2, 5))
            count = int(rng.integers(2, 7))
            atoms = incoherent_unit_atoms(rng, dim, count)
            x = rng.normal(size=dim)
            lam = float(rng.uniform(0.05, 0.5))
            # coherent atoms amplify KKT slack into code error, so solve tighter
            got = sparse_code(x, Dictionary(atoms), lam, tol=1e-9, max_sweeps=50_000)
            want, _ = brute_force_lasso(x, atoms, lam)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_kkt_conditions_hold(self, rng):
        atoms = random_unit_atoms(rng, 6, 12)
        x = rng.normal(size=6)
        lam = 0.2
        code = sparse_code(x, Dictionary(atoms), lam, tol=1e-8)
        corr = atoms.T @ (x - atoms @ code)
        support = code != 0
        assert np.all(np.abs(corr) <= lam + 1e-7)
        np.testing.assert_allclose(corr[support], lam * np.sign(code[support]), atol=1e-7)

    def test_nonconvergence_raises_with_residual(self, rng):
        atoms = random_unit_atoms(rng, 4, 6)
        x = rng.normal(size=4) + 1.0
        with pytest.raises(ConvergenceError) as exc:
            sparse_code(x, Dictionary(atoms), 0.01, max_sweeps=0)
        assert exc.value.residual > 0

    def test_penalty_must_be_positive(self):
        d = Dictionary(np.eye(2))
        with pytest.raises(ValueError):
            sparse_code(np.ones(2), d, l1_penalty=0.0)


class TestObjective:
    def test_zero_codes(self, rng):
        atoms = random_unit_atoms(rng, 4, 6)
        patches = rng.normal(size=(5, 4))
        value = objective(patches, Dictionary(atoms), np.zeros((5, 6)), 1.0)
        assert value == pytest.approx(0.5 * float((patches**2).sum()), rel=1e-12)

    def test_perfect_reconstruction_leaves_penalty_term(self, rng):
        atoms = random_unit_atoms(rng, 4, 4)
        codes = rng.normal(size=(3, 4))
        patches = codes @ atoms.T
        lam = 0.7
        value = objective(patches, Dictionary(atoms), codes, lam)
        assert value == pytest.approx(lam * float(np.abs(codes).sum()), rel=1e-9)

    def test_unit_example_single_atom(self):
        d1 = np.array([0.6, 0.8])
        value = objective(d1[None, :], Dictionary(d1[:, None]), np.array([[1.0]]), 1.0)
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_two_patch_instance_cross_checked(self, rng):
        atoms = random_unit_atoms(rng, 3, 5)
        patches = rng.normal(size=(2, 3))
        codes = rng.normal(size=(2, 5))
        expected = sum(
            lasso_objective(patches[i], atoms, codes[i], 0.3) for i in range(2)
        )
        assert objective(patches, Dictionary(atoms), codes, 0.3) == pytest.approx(expected, rel=1e-12)


class TestDictionarySweep:
    def test_single_step_never_increases_fixed_code_objective(self, rng):
        for _ in range(10):
            dim, count, n = 6, 9, 40
            atoms = random_unit_atoms(rng, dim, count)
            codes = rng.normal(size=(n, count)) * (rng.random(size=(n, count)) < 0.3)
            patches = codes @ atoms.T + 0.1 * rng.normal(size=(n, dim))
            stat_a = codes.T @ codes
            stat_b = patches.T @ codes
            before = objective(patches, Dictionary(atoms), codes, 0.2)
            updated = atoms.copy()
            _sphere_column_sweep(updated, stat_a, stat_b)
            after = objective(patches, Dictionary(updated), codes, 0.2)
            assert after <= before + 1e-8
            np.testing.assert_allclose(np.linalg.norm(updated, axis=0), 1.0, atol=1e-12)


class TestLearnDictionary:
    def test_single_repeated_patch_rank_one_optimum(self):
        x = np.array([3.0, 4.0, 0.0, 0.0])
        patches = np.tile(x, (20, 1))
        result = learn_dictionary(patches, 1, DictLearnConfig(l1_penalty=0.1, iterations=20, seed=1))
        np.testing.assert_allclose(result.atoms[:, 0], x / 5.0, atol=1e-8)

    def test_unit_norm_atoms_and_monotone_objective(self, rng):
        true_atoms = random_unit_atoms(rng, 6, 10)
        codes = rng.normal(size=(400, 10)) * (rng.random(size=(400, 10)) < 0.25)
        patches = codes @ true_atoms.T + 0.02 * rng.normal(size=(400, 6))
        config = DictLearnConfig(l1_penalty=0.15, iterations=40, batch_size=64, seed=3)
        details: LearnResult = learn_dictionary(patches, 10, config, return_details=True)
        norms = np.linalg.norm(details.dictionary.atoms, axis=0)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)
        diffs = np.diff(details.objective_history)
        assert diffs.max() <= 1e-8

    def test_l1_norms_match_stored_atoms_exactly(self, rng):
        patches = rng.normal(size=(50, 5))
        result = learn_dictionary(patches, 4, DictLearnConfig(l1_penalty=0.3, iterations=5, seed=0))
        np.testing.assert_array_equal(result.l1_norms, np.abs(result.atoms).sum(axis=0))

    def test_deterministic_in_64bit_mode(self, rng):
        autodiff.set_default_dtype(np.float64)
        patches = rng.normal(size=(120, 6))
        config = DictLearnConfig(l1_penalty=0.2, iterations=15, batch_size=32, seed=9)
        first = learn_dictionary(patches, 8, config)
        second = learn_dictionary(patches, 8, config)
        assert np.array_equal(first.atoms, second.atoms)
        assert np.array_equal(first.l1_norms, second.l1_norms)

    def test_zero_patch_stream_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            learn_dictionary(np.zeros((30, 4)), 2, DictLearnConfig(iterations=2))

    def test_zero_variance_stream_rejected_for_multiple_atoms(self):
        patches = np.tile(np.array([1.0, 2.0, 0.0]), (30, 1))
        with pytest.raises(ValueError, match="variance"):
            learn_dictionary(patches, 2, DictLearnConfig(iterations=2))

    def test_planted_recovery_smoke(self, rng):
        # tiny version of the recovery oracle; the full-size one lives in acceptance
        true_atoms = random_unit_atoms(rng, 5, 8)
        idx = rng.integers(0, 8, size=(600, 2))
        coeff = rng.uniform(0.6, 1.4, size=(600, 2)) * rng.choice([-1.0, 1.0], size=(600, 2))
        patches = np.zeros((600, 5))
        for j in range(2):
            patches += coeff[:, j : j + 1] * true_atoms[:, idx[:, j]].T
        patches += 0.01 * rng.normal(size=patches.shape)
        result = learn_dictionary(
            patches, 8, DictLearnConfig(l1_penalty=0.1, iterations=120, batch_size=128, seed=5)
        )
        sims = np.abs(result.atoms.T @ true_atoms)
        matched = greedy_match_count(sims, 0.9)
        assert matched >= 4


def greedy_match_count(similarity: np.ndarray, threshold: float) -> int:
    """Count one-to-one |cosine| matches above threshold, greedily best-first."""
    sims = similarity.copy()
    matched = 0
    for _ in range(min(sims.shape)):
        i, j = np.unravel_index(np.argmax(sims), sims.shape)
        if sims[i, j] < threshold:
            break
        matched += 1
        sims[i, :] = -1.0
        sims[:, j] = -1.0
    return matched


class TestDictionaryContainer:
    def test_roundtrip_preserves_float32_bits(self, rng, tmp_path):
        atoms = random_unit_atoms(rng, 6, 9).astype(np.float32)
        d = Dictionary(atoms)
        path = tmp_path / "dict.scfd"
        d.save(path)
        loaded = Dictionary.load(path)
        assert np.array_equal(loaded.atoms, atoms)
        assert np.array_equal(loaded.l1_norms, np.abs(atoms).sum(axis=0).astype(np.float32))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.scfd"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ContainerError, match="magic"):
            Dictionary.load(path)

    def test_truncated_file_rejected(self, rng, tmp_path):
        path = tmp_path / "trunc.scfd"
        Dictionary(random_unit_atoms(rng, 4, 3)).save(path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ContainerError, match="bytes"):
            Dictionary.load(path)

    def test_overcomplete_validation_helper(self, rng):
        d = Dictionary(random_unit_atoms(rng, 4, 8))
        d.validate_unit_norms()
        with pytest.raises(ValueError, match="deviate"):
            Dictionary(2.0 * random_unit_atoms(rng, 4, 8)).validate_unit_norms()
