"""The defense frontend: patch projection, coefficient selection, quantizing
activation, and a transposed-convolution decoder that restores image size.

The three encoder stages are graph ops. Projection is an ordinary strided
convolution whose filters are the dictionary atoms. Selection keeps, per
patch fiber, the entries with the largest absolute values; its default
backward routes gradients through exactly the kept entries, and accepts
``identity`` or ``top-u-routing(U)`` surrogates. The activation maps each
surviving coefficient to 0 or +/- the atom's l1 norm depending on an
amplitude threshold; it is piecewise constant, so its exact derivative is
zero wherever defined, and attacks must register an ``identity`` or
``smooth-activation(k)`` surrogate to see through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dictlearn import Dictionary
from .patches import CHANNELS, PatchGrid

SELECT_KIND = "top_k"
QUANTIZE_KIND = "quantize"


@dataclass
class FrontendConfig:
    """Defense hyperparameters: how many coefficients survive per patch and
    how high the quantizer threshold sits relative to the design budget."""

    grid: PatchGrid
    dictionary: Dictionary
    top_k: int
    defense_eps: float  # perturbation budget the thresholds are sized for (pixel units)
    threshold_scale: float = 3.0

    def __post_init__(self) -> None:
        count = self.dictionary.atom_count
        if not 1 <= self.top_k <= count:
            raise ValueError(f"top_k must be in [1, {count}], got {self.top_k}")
        if self.threshold_scale <= 1.0:
            raise ValueError(f"threshold_scale must be > 1, got {self.threshold_scale}")
        if self.defense_eps <= 0.0:
            raise ValueError(f"defense_eps must be > 0, got {self.defense_eps}")
        if self.dictionary.patch_dim != self.grid.patch_dim:
            raise ValueError(
                f"dictionary patch dim {self.dictionary.patch_dim} does not match "
                f"grid patch dim {self.grid.patch_dim}"
            )

    @property
    def thresholds(self) -> np.ndarray:
        return (self.threshold_scale * self.defense_eps * self.dictionary.l1_norms).astype(
            self.dictionary.l1_norms.dtype
        )


@dataclass
class EncoderOutput:
    """All encoder intermediates, kept so attack surrogates can inspect them."""

    projections: np.ndarray  # (m, m, L) raw atom correlations
    selected: np.ndarray  # (m, m, L) after per-fiber top-k masking
    quantized: np.ndarray  # (m, m, L) entries in {0, +/- atom l1 norm}


def atom_kernel(dictionary: Dictionary, patch_side: int) -> np.ndarray:
    """Atoms as a conv filter bank of shape (n, n, 3, L)."""
    atoms = np.asarray(dictionary.atoms)
    expected = CHANNELS * patch_side**2
    if atoms.shape[0] != expected:
        raise ValueError(f"atoms have dim {atoms.shape[0]}, expected {expected}")
    return atoms.reshape(CHANNELS, patch_side, patch_side, -1).transpose(1, 2, 0, 3)


# ---------------------------------------------------------------------------
# Graph ops (batched; used by pipelines, training and attacks)
# ---------------------------------------------------------------------------


def project_op(images: Tensor, dictionary: Dictionary, grid: PatchGrid) -> Tensor:
    """Patch-wise atom correlations via strided convolution; (B,N,N,3) -> (B,m,m,L)."""
    kernel = Tensor(atom_kernel(dictionary, grid.patch_side))
    return ad.conv2d(images, kernel, stride=grid.stride, padding=0)


def _top_mask(values: np.ndarray, keep: int) -> np.ndarray:
    """Boolean mask of the per-fiber largest-|.| entries; ties break to the
    lower atom index (stable sort on descending magnitude)."""
    order = np.argsort(-np.abs(values), axis=-1, kind="stable")
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :keep], True, axis=-1)
    return mask


def _quantize_values(x: np.ndarray, l1: np.ndarray, tau: np.ndarray) -> np.ndarray:
    gate = np.abs(x) >= tau
    return np.where(gate, np.sign(x) * l1, np.zeros_like(x))


def select_top_op(projections: Tensor, keep: int) -> Tensor:
    """Keep the ``keep`` largest-magnitude entries of each patch fiber.

    Default backward routes the upstream gradient through the kept entries.
    Registered surrogates on this node kind widen the route (``top-u-routing``)
    or open it entirely (``identity``).
    """
    count = projections.shape[-1]
    if not 1 <= keep <= count:
        raise ValueError(f"keep must be in [1, {count}], got {keep}")
    mask = _top_mask(projections.data, keep)
    value = np.where(mask, projections.data, 0)
    data = projections.data

    def bwd(g: np.ndarray):
        rule = ad.active_surrogate(SELECT_KIND)
        if rule is None:
            return (g * mask,)
        name, param = rule
        if name == "identity":
            return (g.copy(),)
        if name == "top-u-routing":
            width = min(int(param), count)
            if width <= keep:
                return (g * mask,)
            return (g * _top_mask(data, width),)
        raise ValueError(f"surrogate {name!r} does not apply to {SELECT_KIND} nodes")

    return ad.make_node(value, SELECT_KIND, (projections,), bwd)


def quantize_op(
    selected: Tensor,
    dictionary: Dictionary,
    defense_eps: float,
    threshold_scale: float,
) -> Tensor:
    """Gate each coefficient on its amplitude and emit +/- the atom l1 norm.

    A coefficient survives when |value| >= threshold_scale * defense_eps *
    ||atom||_1 (inclusive); survivors keep only their sign, scaled by the
    atom's l1 norm. Exact derivative is zero a.e.; ``identity`` and
    ``smooth-activation(k)`` surrogates are understood.
    """
    if defense_eps <= 0:
        raise ValueError(f"defense_eps must be > 0, got {defense_eps}")
    l1 = np.asarray(dictionary.l1_norms, dtype=selected.data.dtype)
    tau = (threshold_scale * defense_eps * l1).astype(selected.data.dtype)
    value = _quantize_values(selected.data, l1, tau)
    data = selected.data

    def bwd(g: np.ndarray):
        rule = ad.active_surrogate(QUANTIZE_KIND)
        if rule is None:
            return (np.zeros_like(g),)
        name, param = rule
        if name == "identity":
            return (g.copy(),)
        if name == "smooth-activation":
            return (g * _smooth_activation_slope(data, l1, tau, float(param)),)
        raise ValueError(f"surrogate {name!r} does not apply to {QUANTIZE_KIND} nodes")

    return ad.make_node(value, QUANTIZE_KIND, (selected,), bwd)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def smooth_activation_value(x: np.ndarray, l1: np.ndarray, tau: np.ndarray, steepness: float):
    """Sigmoid-pair approximation of the quantizer: ~0 inside the threshold
    band, approaching +/- l1 outside, sharper as steepness grows."""
    a = _sigmoid(steepness * (x - tau) / tau)
    b = _sigmoid(steepness * (x + tau) / tau)
    return l1 * (a + b - 1.0)


def _smooth_activation_slope(x: np.ndarray, l1: np.ndarray, tau: np.ndarray, steepness: float):
    a = _sigmoid(steepness * (x - tau) / tau)
    b = _sigmoid(steepness * (x + tau) / tau)
    return l1 * steepness / tau * (a * (1.0 - a) + b * (1.0 - b))


def encode_op(images: Tensor, config: FrontendConfig) -> Tensor:
    """Full encoder as a graph: project, select, quantize."""
    proj = project_op(images, config.dictionary, config.grid)
    sel = select_top_op(proj, config.top_k)
    return quantize_op(sel, config.dictionary, config.defense_eps, config.threshold_scale)


# ---------------------------------------------------------------------------
# Single-image array API
# ---------------------------------------------------------------------------


def project(image: np.ndarray, dictionary: Dictionary, grid: PatchGrid) -> np.ndarray:
    """Correlation of every patch with every atom; (N,N,3) -> (m,m,L)."""
    image = np.asarray(image)
    with ad.no_grad():
        return project_op(Tensor(image[None]), dictionary, grid).data[0]


def select_top(projections: np.ndarray, keep: int) -> np.ndarray:
    """Per-fiber top-magnitude masking; preserves the caller's dtype."""
    projections = np.asarray(projections)
    count = projections.shape[-1]
    if not 1 <= keep <= count:
        raise ValueError(f"keep must be in [1, {count}], got {keep}")
    return np.where(_top_mask(projections, keep), projections, np.zeros_like(projections))


def quantized_activation(
    selected: np.ndarray,
    dictionary: Dictionary,
    defense_eps: float,
    threshold_scale: float,
) -> np.ndarray:
    """Amplitude gate + sign quantization; preserves the caller's dtype."""
    if defense_eps <= 0:
        raise ValueError(f"defense_eps must be > 0, got {defense_eps}")
    selected = np.asarray(selected)
    l1 = np.asarray(dictionary.l1_norms, dtype=selected.dtype)
    tau = (threshold_scale * defense_eps * l1).astype(selected.dtype)
    return _quantize_values(selected, l1, tau)


def encode(image: np.ndarray, config: FrontendConfig) -> EncoderOutput:
    """Run the encoder on one image and keep every intermediate."""
    image = np.asarray(image)
    expected = (config.grid.image_side, config.grid.image_side, CHANNELS)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} does not match grid {expected}")
    with ad.no_grad():
        proj = project_op(Tensor(image[None]), config.dictionary, config.grid)
        sel = select_top_op(proj, config.top_k)
        quant = quantize_op(sel, config.dictionary, config.defense_eps, config.threshold_scale)
    return EncoderOutput(proj.data[0], sel.data[0], quant.data[0])


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------


@dataclass
class DecoderLayerSpec:
    kernel: int
    stride: int
    padding: int
    out_channels: int


def plan_decoder_shapes(code_side: int, image_side: int, hidden: tuple[int, int] = (128, 64)) -> list[DecoderLayerSpec]:
    """Three transposed-conv layer extents taking (m,m,L) to (N,N,3).

    Prefers k3/s1/p1 -> k4/s2/p1 -> k3/s1/p0, which fits whenever
    N = 2m + 2 (true for the stride-2, 4-pixel-patch grids used here);
    otherwise searches a small extent grid for the first chain that fits.
    """
    preferred = [(3, 1, 1), (4, 2, 1), (3, 1, 0)]
    if _chain_output(code_side, preferred) == image_side:
        chain = preferred
    else:
        chain = _search_chain(code_side, image_side)
        if chain is None:
            raise ValueError(f"no 3-layer transposed-conv chain from {code_side} to {image_side}")
    channels = [hidden[0], hidden[1], CHANNELS]
    return [DecoderLayerSpec(k, s, p, c) for (k, s, p), c in zip(chain, channels)]


def _chain_output(side: int, chain) -> int:
    for k, s, p in chain:
        side = (side - 1) * s - 2 * p + k
        if side < 1:
            return -1
    return side


def _search_chain(code_side: int, image_side: int):
    options = [(k, s, p) for k in (2, 3, 4, 5) for s in (1, 2, 3) for p in (0, 1, 2)]
    for first in options:
        for second in options:
            for third in options:
                if _chain_output(code_side, [first, second, third]) == image_side:
                    return [first, second, third]
    return None


class DecoderNet:
    """Three transposed-convolution layers, each followed by a rectifier."""

    def __init__(self, code_side: int, code_channels: int, image_side: int,
                 hidden: tuple[int, int] = (128, 64), seed: int = 0) -> None:
        self.code_side = code_side
        self.image_side = image_side
        self.specs = plan_decoder_shapes(code_side, image_side, hidden)
        rng = np.random.default_rng(seed)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = code_channels
        for spec in self.specs:
            scale = np.sqrt(2.0 / (spec.kernel * spec.kernel * cin))
            w = rng.normal(size=(spec.kernel, spec.kernel, cin, spec.out_channels)) * scale
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(spec.out_channels), requires_grad=True))
            cin = spec.out_channels

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def forward(self, codes: Tensor) -> Tensor:
        out = codes
        for spec, w, b in zip(self.specs, self.weights, self.biases):
            out = ad.transposed_conv2d(out, w, stride=spec.stride, padding=spec.padding)
            out = ad.relu(ad.add(out, b))
        return out

    def state_arrays(self, prefix: str = "decoder") -> dict[str, np.ndarray]:
        arrays = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"{prefix}.w{i}"] = w.data
            arrays[f"{prefix}.b{i}"] = b.data
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "decoder") -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w.data = np.asarray(arrays[f"{prefix}.w{i}"], dtype=w.data.dtype)
            b.data = np.asarray(arrays[f"{prefix}.b{i}"], dtype=b.data.dtype)


def decode(quantized: np.ndarray, decoder: DecoderNet) -> np.ndarray:
    """Decode one (m,m,L) code tensor to an (N,N,3) image."""
    quantized = np.asarray(quantized)
    with ad.no_grad():
        out = decoder.forward(Tensor(quantized[None]))
    return out.data[0]
