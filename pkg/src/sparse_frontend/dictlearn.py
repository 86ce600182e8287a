"""Patch-level dictionary learning by alternating sparse coding and atom updates.

The objective over a set of flattened patches x with codes alpha is

    sum_patches ( 0.5 * ||x - D @ alpha||_2^2 + l1_penalty * ||alpha||_1 )

minimized over codes and over dictionaries with unit-l2 columns (atoms).
Sparse coding is cyclic coordinate descent with soft thresholding, checked
against the lasso KKT conditions. The dictionary step is a column-wise
update from the sufficient statistics A = sum(alpha alpha^T) and
B = sum(x alpha^T); each column is replaced by the exact minimizer on the
unit sphere, so with codes fixed the objective cannot increase. Codes are
warm-started between passes, which makes the recorded objective history
non-increasing throughout the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .autodiff import get_default_dtype

_DEAD_ATOM_EPS = 1e-12


class ConvergenceError(RuntimeError):
    """Sparse coding failed to reach the KKT tolerance; carries the residual."""

    def __init__(self, residual: float, sweeps: int) -> None:
        super().__init__(
            f"coordinate descent stopped after {sweeps} sweeps with KKT residual {residual:.3e}"
        )
        self.residual = residual
        self.sweeps = sweeps


@dataclass
class Dictionary:
    """Unit-norm atoms over patch space, with their l1 norms cached."""

    atoms: np.ndarray  # (patch_dim, atom_count), columns are atoms
    l1_norms: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.atoms = np.asarray(self.atoms)
        if self.atoms.ndim != 2:
            raise ValueError(f"atoms must be (patch_dim, count), got {self.atoms.shape}")
        if self.l1_norms is None:
            self.l1_norms = np.abs(self.atoms).sum(axis=0)
        else:
            self.l1_norms = np.asarray(self.l1_norms)
            if self.l1_norms.shape != (self.atoms.shape[1],):
                raise ValueError("l1 norm vector does not match atom count")

    @property
    def patch_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def atom_count(self) -> int:
        return self.atoms.shape[1]

    def validate_unit_norms(self, tol: float = 1e-6) -> None:
        norms = np.linalg.norm(self.atoms, axis=0)
        worst = float(np.max(np.abs(norms - 1.0)))
        if worst > tol:
            raise ValueError(f"atom l2 norms deviate from 1 by {worst:.3e}")

    def save(self, path) -> None:
        serialize.save_dictionary_file(path, self.atoms)

    @classmethod
    def load(cls, path) -> "Dictionary":
        atoms, l1 = serialize.load_dictionary_file(path)
        return cls(atoms.astype(get_default_dtype()), l1.astype(get_default_dtype()))


@dataclass
class DictLearnConfig:
    l1_penalty: float = 1.0
    iterations: int = 1000
    batch_size: int = 256
    seed: int = 0
    tol: float = 1e-6
    max_sweeps: int = 200  # per-batch cap during learning; sparse_code defaults to 1000

    def __post_init__(self) -> None:
        if self.l1_penalty <= 0:
            raise ValueError("l1_penalty must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def _kkt_residual(gram_resid: np.ndarray, codes: np.ndarray, lam: float) -> np.ndarray:
    """Per-patch violation of the lasso optimality conditions.

    ``gram_resid`` is D^T (x - D alpha), shape (L, batch). On the support the
    correlation must equal lam * sign(alpha); elsewhere |correlation| <= lam.
    """
    on_support = codes != 0
    viol_support = np.abs(gram_resid - lam * np.sign(codes)) * on_support
    viol_off = np.maximum(np.abs(gram_resid) - lam, 0.0) * ~on_support
    return np.maximum(viol_support, viol_off).max(axis=0)


def _cd_lasso(
    targets: np.ndarray,
    atoms: np.ndarray,
    lam: float,
    tol: float,
    max_sweeps: int,
    warm: np.ndarray | None = None,
    strict: bool = True,
) -> np.ndarray:
    """Cyclic coordinate descent on a batch of columns sharing one dictionary.

    ``targets`` is (patch_dim, batch); returns codes (L, batch). Every
    coordinate update is the exact scalar minimizer, so each patch's
    objective is non-increasing sweep over sweep. ``strict`` demands the KKT
    residual reach ``tol`` (raising otherwise); non-strict mode stops once
    the sweep stagnates, which keeps descent guarantees and is what the
    dictionary-learning loop uses, since a near-converged code is still a
    valid descent step there.
    """
    patch_dim, batch = targets.shape
    count = atoms.shape[1]
    sq_norms = np.einsum("ij,ij->j", atoms, atoms)
    if warm is None:
        codes = np.zeros((count, batch))
        resid = targets.copy()
    else:
        codes = warm.copy()
        resid = targets - atoms @ codes
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for l in range(count):
            if sq_norms[l] == 0.0:
                continue
            atom = atoms[:, l]
            rho = atom @ resid + sq_norms[l] * codes[l]
            new = np.sign(rho) * np.maximum(np.abs(rho) - lam, 0.0) / sq_norms[l]
            delta = new - codes[l]
            nz = delta != 0.0
            if nz.any():
                resid[:, nz] -= np.outer(atom, delta[nz])
                codes[l] = new
                max_delta = max(max_delta, float(np.max(np.abs(delta))))
        if max_delta <= tol:
            if not strict:
                return codes
            residual = float(_kkt_residual(atoms.T @ resid, codes, lam).max())
            if residual <= tol:
                return codes
    if not strict:
        return codes
    residual = float(_kkt_residual(atoms.T @ (targets - atoms @ codes), codes, lam).max())
    raise ConvergenceError(residual, max_sweeps)


def sparse_code(
    patch: np.ndarray,
    dictionary: Dictionary,
    l1_penalty: float,
    tol: float = 1e-6,
    max_sweeps: int = 1000,
) -> np.ndarray:
    """Lasso code of one flattened patch against the dictionary.

    The result satisfies the KKT conditions within ``tol``: correlations of
    the residual with every atom stay within the penalty, with equality and
    sign agreement on the support.
    """
    if l1_penalty <= 0:
        raise ValueError("l1_penalty must be > 0")
    patch = np.asarray(patch, dtype=np.float64).reshape(-1)
    if patch.shape[0] != dictionary.patch_dim:
        raise ValueError(
            f"patch length {patch.shape[0]} does not match dictionary dim {dictionary.patch_dim}"
        )
    atoms = np.asarray(dictionary.atoms, dtype=np.float64)
    codes = _cd_lasso(patch[:, None], atoms, l1_penalty, tol, max_sweeps)
    return codes[:, 0]


def objective(
    patches: np.ndarray,
    dictionary: Dictionary,
    codes: np.ndarray,
    l1_penalty: float,
) -> float:
    """Reconstruction + l1 value summed over patches.

    ``patches`` is (count, patch_dim) and ``codes`` is (count, atom_count).
    """
    patches = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    codes = np.atleast_2d(np.asarray(codes, dtype=np.float64))
    if patches.shape[0] != codes.shape[0]:
        raise ValueError(f"{patches.shape[0]} patches vs {codes.shape[0]} codes")
    if patches.shape[1] != dictionary.patch_dim or codes.shape[1] != dictionary.atom_count:
        raise ValueError(
            f"shapes {patches.shape}/{codes.shape} do not match dictionary "
            f"({dictionary.patch_dim}, {dictionary.atom_count})"
        )
    resid = patches - codes @ np.asarray(dictionary.atoms, dtype=np.float64).T
    return float(0.5 * np.einsum("ij,ij->", resid, resid) + l1_penalty * np.abs(codes).sum())


@dataclass
class LearnResult:
    dictionary: Dictionary
    objective_history: np.ndarray  # average per-patch objective after each iteration
    codes: np.ndarray  # final codes for the training patches, (count, atom_count)


def learn_dictionary(
    patches: np.ndarray,
    atom_count: int,
    config: DictLearnConfig,
    return_details: bool = False,
):
    """Fit a unit-norm dictionary to flattened patches.

    ``patches`` is (count, patch_dim). Atoms are initialized from randomly
    chosen training patches. Each iteration recodes one batch (warm-started
    coordinate descent) and then runs one column-wise dictionary sweep from
    the up-to-date sufficient statistics, so the recorded average objective
    never increases. Atoms that no current code uses are re-seeded from the
    worst-reconstructed patch at full-pass boundaries. Deterministic for a
    fixed seed.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2:
        raise ValueError(f"patches must be (count, patch_dim), got {patches.shape}")
    count, patch_dim = patches.shape
    if count < atom_count:
        raise ValueError(f"need at least {atom_count} patches, got {count}")
    norms = np.linalg.norm(patches, axis=1)
    if float(norms.max()) == 0.0:
        raise ValueError("degenerate patch stream: all patches are zero")
    if atom_count > 1 and float(patches.var(axis=0).max()) == 0.0:
        raise ValueError("degenerate patch stream: zero variance cannot support multiple atoms")

    rng = np.random.default_rng(config.seed)
    lam = float(config.l1_penalty)

    # init: atoms are random nonzero training patches, normalized
    nonzero = np.flatnonzero(norms > 0)
    if nonzero.size < atom_count:
        raise ValueError("degenerate patch stream: too few nonzero patches")
    chosen = rng.choice(nonzero, size=atom_count, replace=False)
    atoms = (patches[chosen] / norms[chosen, None]).T.copy()

    codes = np.zeros((count, atom_count))
    stat_a = np.zeros((atom_count, atom_count))  # sum of alpha alpha^T
    stat_b = np.zeros((patch_dim, atom_count))  # sum of x alpha^T
    sq_sum = float(np.einsum("ij,ij->", patches, patches))
    l1_sum = 0.0

    order = rng.permutation(count)
    batch = max(1, min(config.batch_size, count))
    per_pass = -(-count // batch)  # batches per full pass
    history = np.empty(config.iterations)
    cursor = 0

    for it in range(config.iterations):
        idx = order[cursor : cursor + batch]
        if idx.size < batch:
            idx = np.concatenate([idx, order[: batch - idx.size]])
        cursor = (cursor + batch) % count
        idx = np.unique(idx)

        old = codes[idx].T
        new = _cd_lasso(
            patches[idx].T, atoms, lam, config.tol, config.max_sweeps, warm=old, strict=False
        )
        stat_a += new @ new.T - old @ old.T
        stat_b += patches[idx].T @ (new - old).T
        l1_sum += float(np.abs(new).sum() - np.abs(old).sum())
        codes[idx] = new.T

        _sphere_column_sweep(atoms, stat_a, stat_b)

        if (it + 1) % per_pass == 0:
            _reseed_dead_atoms(atoms, stat_a, patches, codes, rng)

        gram = atoms.T @ atoms
        fit = 0.5 * (np.einsum("ij,ij->", gram, stat_a) - 2.0 * np.einsum("ij,ij->", atoms, stat_b) + sq_sum)
        history[it] = (fit + lam * l1_sum) / count

    # norms are computed from the atoms as stored, so they match bit-for-bit
    result = Dictionary(atoms.astype(get_default_dtype()))
    if return_details:
        return LearnResult(result, history, codes)
    return result


def _sphere_column_sweep(atoms: np.ndarray, stat_a: np.ndarray, stat_b: np.ndarray) -> None:
    """One in-place column pass; each column gets its exact unit-sphere minimizer.

    With codes (hence the statistics) held fixed, the batch objective is
    quadratic in each column with an isotropic quadratic term, so the sphere
    minimizer has a closed form and the sweep can never increase the value.
    Columns no code uses are left untouched.
    """
    for l in range(atoms.shape[1]):
        if stat_a[l, l] <= _DEAD_ATOM_EPS:
            continue
        u = atoms[:, l] + (stat_b[:, l] - atoms @ stat_a[:, l]) / stat_a[l, l]
        norm = float(np.linalg.norm(u))
        if norm > 0:
            atoms[:, l] = u / norm


def _reseed_dead_atoms(atoms, stat_a, patches, codes, rng) -> None:
    """Replace unused atoms with the currently worst-reconstructed patch.

    Unused means no code touches the atom, so the swap cannot change the
    objective value.
    """
    dead = np.flatnonzero(np.diag(stat_a) <= _DEAD_ATOM_EPS)
    if dead.size == 0:
        return
    resid = patches - codes @ atoms.T
    errors = np.einsum("ij,ij->i", resid, resid)
    for l in dead:
        worst = int(np.argmax(errors))
        norm = float(np.linalg.norm(patches[worst]))
        if norm == 0.0:
            continue
        atoms[:, l] = patches[worst] / norm
        errors[worst] = -1.0  # do not hand the same patch to two dead atoms
