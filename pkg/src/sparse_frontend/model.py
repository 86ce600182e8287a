"""Classifier network, pipeline assembly, and the joint training loop.

The classifier is a small configurable residual CNN (stem conv, one
residual block per width stage with strided transitions, global average
pool, dense head). When a pipeline carries the defense frontend, training
updates decoder and classifier together while the dictionary stays frozen;
gradients pass the quantizer through an identity surrogate and the
selection stage through its default kept-coefficient route.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor
from .dictlearn import Dictionary
from .frontend import QUANTIZE_KIND, DecoderNet, FrontendConfig, encode_op
from .patches import make_grid


class ClassifierNet:
    """Residual CNN over (B, side, side, 3) images producing class logits."""

    def __init__(
        self,
        image_side: int,
        num_classes: int,
        widths: tuple[int, ...] = (16, 32, 64),
        seed: int = 0,
    ) -> None:
        self.image_side = image_side
        self.num_classes = num_classes
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        self._params: list[Tensor] = []

        def conv_param(k, cin, cout):
            w = rng.normal(size=(k, k, cin, cout)) * np.sqrt(2.0 / (k * k * cin))
            t = Tensor(w, requires_grad=True)
            self._params.append(t)
            return t

        def bias_param(cout):
            t = Tensor(np.zeros(cout), requires_grad=True)
            self._params.append(t)
            return t

        self.stem_w = conv_param(3, 3, self.widths[0])
        self.stem_b = bias_param(self.widths[0])
        side = image_side
        self.blocks = []
        for i, width in enumerate(self.widths):
            if i > 0:
                down_w = conv_param(3, self.widths[i - 1], width)
                down_b = bias_param(width)
                side = ad.conv2d_output_size(side, 3, 2, 1)
            else:
                down_w = down_b = None
            block = {
                "down_w": down_w,
                "down_b": down_b,
                "w1": conv_param(3, width, width),
                "b1": bias_param(width),
                "w2": conv_param(3, width, width),
                "b2": bias_param(width),
            }
            self.blocks.append(block)
        self.head_w = Tensor(
            rng.normal(size=(self.widths[-1], num_classes)) * np.sqrt(1.0 / self.widths[-1]),
            requires_grad=True,
        )
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True)
        self._params.extend([self.head_w, self.head_b])

    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def forward(self, images: Tensor) -> Tensor:
        out = ad.relu(ad.add(ad.conv2d(images, self.stem_w, stride=1, padding=1), self.stem_b))
        for block in self.blocks:
            if block["down_w"] is not None:
                out = ad.relu(
                    ad.add(ad.conv2d(out, block["down_w"], stride=2, padding=1), block["down_b"])
                )
            inner = ad.relu(ad.add(ad.conv2d(out, block["w1"], stride=1, padding=1), block["b1"]))
            inner = ad.add(ad.conv2d(inner, block["w2"], stride=1, padding=1), block["b2"])
            out = ad.relu(ad.add(out, inner))
        b, h, w, c = out.shape
        pooled = ad.multiply(
            ad.reduce_sum(ad.reshape(out, (b, h * w, c)), axis=1), 1.0 / float(h * w)
        )
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)

    def state_arrays(self, prefix: str = "classifier") -> dict[str, np.ndarray]:
        return {f"{prefix}.p{i}": p.data for i, p in enumerate(self._params)}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "classifier") -> None:
        for i, p in enumerate(self._params):
            p.data = np.asarray(arrays[f"{prefix}.p{i}"], dtype=p.data.dtype)


@dataclass
class Pipeline:
    """Optional defense frontend (encoder config + decoder) ahead of a classifier."""

    classifier: ClassifierNet
    frontend: FrontendConfig | None = None
    decoder: DecoderNet | None = None

    def __post_init__(self) -> None:
        if (self.frontend is None) != (self.decoder is None):
            raise ValueError("frontend config and decoder must be provided together")

    @property
    def defended(self) -> bool:
        return self.frontend is not None

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.decoder is not None:
            params.extend(self.decoder.parameters())
        params.extend(self.classifier.parameters())
        return params

    def logits_op(self, images: Tensor) -> Tensor:
        out = images
        if self.frontend is not None:
            out = encode_op(out, self.frontend)
            out = self.decoder.forward(out)
        return self.classifier.forward(out)

    def logits(self, images: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.logits_op(Tensor(np.asarray(images))).data

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    eta_max: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "natural"  # or "adversarial"
    adv_eps: float = 8 / 255
    adv_step: float = 1 / 255
    adv_steps: int = 10
    horizontal_flip: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eta_max < 0:
            raise ValueError("eta_max must be >= 0")
        if self.mode not in ("natural", "adversarial"):
            raise ValueError(f"unknown training mode {self.mode!r}")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int) -> None:
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


def cyclic_lr(step: int, total_steps: int, eta_max: float) -> float:
    """One triangular cycle: rise from eta_max/10 to eta_max at 45% of the
    run, then fall back to eta_max/10 at the end."""
    if total_steps < 1:
        return eta_max
    base = eta_max / 10.0
    peak_at = 0.45 * total_steps
    frac = min(max(step, 0), total_steps)
    if frac <= peak_at:
        return base + (eta_max - base) * (frac / peak_at if peak_at > 0 else 1.0)
    return eta_max - (eta_max - base) * (frac - peak_at) / (total_steps - peak_at)


def train(dataset, pipeline: Pipeline, config: TrainConfig) -> TrainHistory:
    """SGD-with-momentum training of decoder (if any) and classifier.

    The dictionary inside a defended pipeline is not a parameter, so it
    stays bit-frozen. Deterministic for fixed seed and data.
    """
    images = np.asarray(dataset.images, dtype=ad.get_default_dtype())
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("empty dataset")
    params = pipeline.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    count = images.shape[0]
    batch = min(config.batch_size, count)
    steps_per_epoch = count // batch
    total_steps = max(config.epochs * steps_per_epoch, 1)
    history = TrainHistory()
    rules = {QUANTIZE_KIND: "identity"} if pipeline.defended else {}

    step = 0
    with ad.surrogate_rules(rules):
        for epoch in range(config.epochs):
            rng = np.random.default_rng([config.seed, epoch])
            order = rng.permutation(count)
            epoch_loss = 0.0
            epoch_hits = 0
            for s in range(steps_per_epoch):
                idx = order[s * batch : (s + 1) * batch]
                xb = images[idx]
                yb = labels[idx]
                if config.horizontal_flip:
                    flip = rng.random(len(idx)) < 0.5
                    xb = xb.copy()
                    xb[flip] = xb[flip, :, ::-1, :]
                if config.mode == "adversarial":
                    xb = _pgd_training_batch(pipeline, xb, yb, config, rng)
                x = Tensor(xb)
                logits = pipeline.logits_op(x)
                loss = ad.cross_entropy(logits, yb, reduction="mean")
                value = loss.item()
                if not np.isfinite(value):
                    raise DivergenceError(epoch)
                epoch_loss += value * len(idx)
                epoch_hits += int((np.argmax(logits.data, axis=1) == yb).sum())
                for p in params:
                    p.zero_grad()
                ad.backward(loss)
                lr = cyclic_lr(step, total_steps, config.eta_max)
                for p, v in zip(params, velocity):
                    np.multiply(v, config.momentum, out=v)
                    v -= lr * p.grad
                    p.data = p.data + v
                step += 1
            seen = steps_per_epoch * batch
            history.loss.append(epoch_loss / max(seen, 1))
            history.accuracy.append(epoch_hits / max(seen, 1))
    return history


def _pgd_training_batch(pipeline, xb, yb, config: TrainConfig, rng) -> np.ndarray:
    """Standard sign-step inner maximization used by adversarial training."""
    eps, delta = config.adv_eps, config.adv_step
    e = rng.uniform(-eps, eps, size=xb.shape).astype(xb.dtype)
    e = np.clip(xb + e, 0.0, 1.0) - xb
    for _ in range(config.adv_steps):
        x = Tensor(xb + e, requires_grad=True)
        loss = ad.cross_entropy(pipeline.logits_op(x), yb, reduction="sum")
        ad.backward(loss)
        e = np.clip(e + delta * np.sign(x.grad), -eps, eps).astype(xb.dtype)
        e = np.clip(xb + e, 0.0, 1.0) - xb
    return xb + e


def evaluate(dataset, pipeline: Pipeline, batch_size: int = 256) -> float:
    """Fraction of correct argmax predictions."""
    images = np.asarray(dataset.images, dtype=ad.get_default_dtype())
    labels = np.asarray(dataset.labels)
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start : start + batch_size]
        hits += int((pipeline.predict(chunk) == labels[start : start + batch_size]).sum())
    return hits / images.shape[0]


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def save_pipeline(path, pipeline: Pipeline, meta: dict | None = None, dict_file: str | None = None) -> None:
    spec: dict = {
        "image_side": pipeline.classifier.image_side,
        "num_classes": pipeline.classifier.num_classes,
        "widths": list(pipeline.classifier.widths),
        "defended": pipeline.defended,
    }
    arrays = pipeline.classifier.state_arrays()
    if pipeline.defended:
        fc = pipeline.frontend
        spec.update(
            {
                "patch_side": fc.grid.patch_side,
                "stride": fc.grid.stride,
                "top_k": fc.top_k,
                "defense_eps": fc.defense_eps,
                "threshold_scale": fc.threshold_scale,
                "decoder_hidden": [s.out_channels for s in pipeline.decoder.specs[:2]],
            }
        )
        arrays.update(pipeline.decoder.state_arrays())
        arrays["dictionary.atoms"] = np.asarray(fc.dictionary.atoms)
    header = {
        "pipeline": spec,
        "meta": meta or {},
        "dict_file": dict_file,
        "config_hash": config_hash({"pipeline": spec, "meta": meta or {}}),
    }
    serialize.save_weights_file(path, arrays, header)


def load_pipeline(path) -> tuple[Pipeline, dict]:
    header, arrays = serialize.load_weights_file(path)
    spec = header["pipeline"]
    classifier = ClassifierNet(
        spec["image_side"], spec["num_classes"], widths=tuple(spec["widths"])
    )
    classifier.load_state_arrays(arrays)
    if not spec["defended"]:
        return Pipeline(classifier), header
    dictionary = Dictionary(arrays["dictionary.atoms"].astype(ad.get_default_dtype()))
    grid = make_grid(spec["image_side"], spec["patch_side"], spec["stride"])
    fc = FrontendConfig(
        grid,
        dictionary,
        top_k=spec["top_k"],
        defense_eps=spec["defense_eps"],
        threshold_scale=spec["threshold_scale"],
    )
    decoder = DecoderNet(
        grid.patches_per_side,
        dictionary.atom_count,
        spec["image_side"],
        hidden=tuple(spec["decoder_hidden"]),
    )
    decoder.load_state_arrays(arrays)
    return Pipeline(classifier, frontend=fc, decoder=decoder), header
