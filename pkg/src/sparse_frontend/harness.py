"""Experiment orchestration: datasets, TOML experiment specs, attack sweeps
over parameter grids, defense comparison tables, and report persistence.

The synthetic task is a desk-scale stand-in for CIFAR-10: each class is an
oriented soft bar (robust, low amplitude) drawn over clutter bars and
uniform noise, plus a faint class-coded sign pattern on a fixed sparse
pixel subset. The sign pattern is the kind of non-robust shortcut feature
natural training latches onto, so undefended models collapse under small
lp-bounded attacks while the quantizing frontend, whose thresholds sit far
above the pattern's amplitude, never sees it.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, AttackReport, SurrogateConfig, attack_dataset, boundary_attack
from .dictlearn import DictLearnConfig, Dictionary, learn_dictionary
from .frontend import DecoderNet, FrontendConfig
from .model import ClassifierNet, Pipeline, TrainConfig, config_hash, evaluate, train
from .patches import extract_patches, make_grid

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CIFAR_RECORD = 3073
CIFAR_SIDE = 32

ROW_FIELDS = [
    "example_id",
    "clean_correct",
    "attack_success",
    "final_loss",
    "l2_norm",
    "lp_norm",
    "restarts_used",
]


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    provenance: str

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} vs labels {self.labels.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def count(self) -> int:
        return self.images.shape[0]

    @property
    def image_side(self) -> int:
        return self.images.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.count else 0

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.split, self.provenance)


# ---------------------------------------------------------------------------
# CIFAR-10 binary loader
# ---------------------------------------------------------------------------


def load_cifar10(path, split: str = "train") -> Dataset:
    """Parse standard CIFAR-10 binary batches (1 label byte + 3072 pixel
    bytes per record, channel planes row-major), scaling pixels to [0, 1].

    ``path`` may be one ``.bin`` file or a directory of them.
    """
    path = Path(path)
    files = sorted(path.glob("*.bin")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no .bin batches under {path}")
    images, labels = [], []
    for f in files:
        raw = f.read_bytes()
        if len(raw) % CIFAR_RECORD != 0:
            offset = len(raw) - (len(raw) % CIFAR_RECORD)
            raise ValueError(
                f"{f}: length {len(raw)} is not a whole number of {CIFAR_RECORD}-byte "
                f"records (trailing bytes start at offset {offset})"
            )
        data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = data[:, 0]
        bad = np.flatnonzero(batch_labels > 9)
        if bad.size:
            raise ValueError(f"{f}: record {bad[0]} has label {batch_labels[bad[0]]} > 9")
        planes = data[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0)
        labels.append(batch_labels.astype(np.int64))
    return Dataset(np.concatenate(images), np.concatenate(labels), split, "cifar10")


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    classes: int = 4
    image_side: int = 16
    train_samples: int = 2000
    test_samples: int = 400
    noise: float = 0.18
    bar_amplitude: float = 0.12
    bar_width: float = 1.3
    center_jitter: float = 2.5
    clutter_bars: int = 2
    clutter_amplitude: float = 0.8  # relative to bar_amplitude
    background: float = 0.35
    cue_amplitude: float = 0.015
    cue_fraction: float = 0.2
    cue_seed: int = 1234


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> Dataset:
    """Deterministic class-conditional bar images; see the module docstring."""
    count = spec.train_samples if split == "train" else spec.test_samples
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    cue_rng = np.random.default_rng(spec.cue_seed)
    side = spec.image_side
    cue_mask = cue_rng.random((side, side, 3)) < spec.cue_fraction
    cues = cue_rng.choice([-1.0, 1.0], size=(spec.classes, side, side, 3)) * cue_mask

    images = np.empty((count, side, side, 3), dtype=np.float32)
    labels = rng.integers(0, spec.classes, size=count)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    tint = np.array([1.0, 0.9, 0.8])

    def bar(angle, amp, cx, cy):
        span = np.abs((xx - cx) * -np.sin(angle) + (yy - cy) * np.cos(angle))
        return amp * np.exp(-((span / spec.bar_width) ** 2))

    for i in range(count):
        k = int(labels[i])
        canvas = np.full((side, side), spec.background)
        cx, cy = (side - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, 2)
        canvas += bar(np.pi * k / spec.classes, rng.uniform(0.8, 1.2) * spec.bar_amplitude, cx, cy)
        for _ in range(spec.clutter_bars):
            angle = rng.uniform(0, np.pi)
            ccx, ccy = rng.uniform(2, side - 3, 2)
            amp = rng.uniform(0.5, 1.0) * spec.clutter_amplitude * spec.bar_amplitude
            canvas += bar(angle, amp, ccx, ccy)
        img = canvas[:, :, None] * tint[None, None, :]
        img = img + spec.cue_amplitude * cues[k]
        img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, split, f"synthetic(seed={seed})")


# ---------------------------------------------------------------------------
# Experiment specification
# ---------------------------------------------------------------------------


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    path: str | None = None  # cifar10 batches; SPARSE_FRONTEND_DATA fallback
    attack_subset: int = 150
    synth: SynthSpec = field(default_factory=SynthSpec)


@dataclass
class DictionarySection:
    atoms: int = 64
    l1_penalty: float = 0.3
    iterations: int = 80
    batch_size: int = 256
    sample_images: int = 450
    tol: float = 1e-4
    max_sweeps: int = 60


@dataclass
class FrontendSection:
    enabled: bool = True
    patch_side: int = 4
    stride: int = 2
    top_k: int = 4
    threshold_scale: float = 3.0
    defense_eps: float = 8 / 255
    decoder_hidden: tuple[int, int] = (32, 16)


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    eta_max: float = 0.005
    momentum: float = 0.9
    mode: str = "natural"
    widths: tuple[int, ...] = (16, 32, 64)


@dataclass
class AttackSection:
    norm: str = "inf"
    epsilon: float = 8 / 255
    step_fraction: float = 0.125  # step size = fraction * epsilon
    steps: int = 30
    restarts: int = 3
    loss: str = "cross-entropy"
    activation_backward: str = "smooth"
    steepness: float = 4.0
    selection_backward: str = "top-u"
    route_factor: int = 2  # route width = factor * top_k


@dataclass
class SweepSection:
    epsilons: list[float] = field(default_factory=lambda: [0.0, 8 / 255, 32 / 255])
    restarts: list[int] | None = None
    top_k: list[int] | None = None


@dataclass
class CompareSection:
    variants: list[str] = field(default_factory=lambda: ["natural", "defended"])
    eps_inf: float = 8 / 255
    eps_l2: float = 0.6
    eps_l1: float = 7.5
    boundary_steps: int = 2000
    boundary_examples: int = 12


@dataclass
class ExperimentSpec:
    seed: int = 0
    output_dir: str = "runs/experiment"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    dictionary: DictionarySection = field(default_factory=DictionarySection)
    frontend: FrontendSection = field(default_factory=FrontendSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    compare: CompareSection = field(default_factory=CompareSection)

    def resolved(self) -> dict:
        """Experiment identity: every knob except where outputs land."""
        payload = asdict(self)
        payload.pop("output_dir")
        payload["frontend"]["decoder_hidden"] = list(self.frontend.decoder_hidden)
        payload["train"]["widths"] = list(self.train.widths)
        return payload

    def hash(self) -> str:
        return config_hash(self.resolved())


def _apply(section, values: dict, name: str):
    for key, value in values.items():
        if not hasattr(section, key):
            raise ValueError(f"unknown key {key!r} in [{name}]")
        current = getattr(section, key)
        if isinstance(current, tuple):
            value = tuple(value)
        setattr(section, key, value)
    return section


def load_experiment_spec(path) -> ExperimentSpec:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    spec = ExperimentSpec()
    spec.seed = int(raw.pop("seed", spec.seed))
    spec.output_dir = str(raw.pop("output_dir", spec.output_dir))
    synth_values = raw.get("dataset", {}).pop("synth", None)
    for name, section in (
        ("dataset", spec.dataset),
        ("dictionary", spec.dictionary),
        ("frontend", spec.frontend),
        ("train", spec.train),
        ("attack", spec.attack),
        ("sweep", spec.sweep),
        ("compare", spec.compare),
    ):
        if name in raw:
            _apply(section, raw.pop(name), name)
    if synth_values:
        _apply(spec.dataset.synth, synth_values, "dataset.synth")
    if raw:
        raise ValueError(f"unknown top-level sections: {sorted(raw)}")
    return spec


SCHEMA_TEMPLATE = """\
# sparse-frontend experiment configuration (TOML)
seed = 0
output_dir = "runs/experiment"

[dataset]
kind = "synthetic"        # "synthetic" | "cifar10"
# path = "/data/cifar10"  # cifar10 binary batches; SPARSE_FRONTEND_DATA is the fallback
attack_subset = 150       # test examples each attack point uses

[dataset.synth]           # synthetic task knobs (defaults shown)
classes = 4
image_side = 16
train_samples = 2000
test_samples = 400
noise = 0.18
bar_amplitude = 0.12
cue_amplitude = 0.015
cue_fraction = 0.2

[dictionary]
atoms = 64
l1_penalty = 0.3
iterations = 80
batch_size = 256
sample_images = 450       # images whose patches feed dictionary learning

[frontend]
enabled = true
patch_side = 4
stride = 2
top_k = 4
threshold_scale = 3.0
defense_eps = 0.03137254901960784
decoder_hidden = [32, 16]

[train]
epochs = 20
batch_size = 64
eta_max = 0.005
momentum = 0.9
mode = "natural"          # "natural" | "adversarial"
widths = [16, 32, 64]

[attack]
norm = "inf"              # "inf" | "l2" | "l1"
epsilon = 0.03137254901960784
step_fraction = 0.125     # step size = fraction * epsilon
steps = 30
restarts = 3
loss = "cross-entropy"    # or "cw-margin"
activation_backward = "smooth"   # "exact-zero" | "identity" | "smooth"
steepness = 4.0
selection_backward = "top-u"     # "top-k" | "top-u" | "identity"
route_factor = 2                 # gradient routes through factor * top_k coefficients

[sweep]
epsilons = [0.0, 0.00784, 0.01569, 0.03137, 0.06275, 0.12549, 0.25098, 0.50196]
# restarts = [1, 5, 20]   # optional extra axis
# top_k = [2, 4, 8]       # optional defense axis (retrains per value)

[compare]
variants = ["natural", "defended"]
eps_inf = 0.03137254901960784
eps_l2 = 0.6
eps_l1 = 7.5
boundary_steps = 2000
boundary_examples = 12
"""


# ---------------------------------------------------------------------------
# Pipeline assembly
# ---------------------------------------------------------------------------


def resolve_dataset(spec: ExperimentSpec, split: str) -> Dataset:
    section = spec.dataset
    if section.kind == "synthetic":
        return synth_dataset(section.synth, spec.seed, split)
    if section.kind == "cifar10":
        import os

        path = section.path or os.environ.get("SPARSE_FRONTEND_DATA")
        if not path:
            raise ValueError("cifar10 dataset needs a path (or SPARSE_FRONTEND_DATA)")
        return load_cifar10(path, split)
    raise ValueError(f"unknown dataset kind {section.kind!r}")


def sample_patch_pool(images: np.ndarray, grid, sample_images: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 17])
    take = min(sample_images, images.shape[0])
    idx = rng.choice(images.shape[0], size=take, replace=False)
    pools = [extract_patches(images[i], grid).reshape(-1, grid.patch_dim) for i in idx]
    return np.concatenate(pools).astype(np.float64)


def learn_spec_dictionary(spec: ExperimentSpec, train_set: Dataset) -> Dictionary:
    grid = make_grid(train_set.image_side, spec.frontend.patch_side, spec.frontend.stride)
    pool = sample_patch_pool(train_set.images, grid, spec.dictionary.sample_images, spec.seed)
    config = DictLearnConfig(
        l1_penalty=spec.dictionary.l1_penalty,
        iterations=spec.dictionary.iterations,
        batch_size=spec.dictionary.batch_size,
        seed=spec.seed,
        tol=spec.dictionary.tol,
        max_sweeps=spec.dictionary.max_sweeps,
    )
    return learn_dictionary(pool, spec.dictionary.atoms, config)


def build_pipeline(
    spec: ExperimentSpec,
    train_set: Dataset,
    defended: bool,
    dictionary: Dictionary | None = None,
    top_k: int | None = None,
    mode: str | None = None,
) -> Pipeline:
    """Assemble and train one pipeline variant, deterministically."""
    classifier = ClassifierNet(
        train_set.image_side, train_set.num_classes, widths=spec.train.widths, seed=spec.seed
    )
    if defended:
        if dictionary is None:
            dictionary = learn_spec_dictionary(spec, train_set)
        grid = make_grid(train_set.image_side, spec.frontend.patch_side, spec.frontend.stride)
        fc = FrontendConfig(
            grid,
            dictionary,
            top_k=top_k or spec.frontend.top_k,
            defense_eps=spec.frontend.defense_eps,
            threshold_scale=spec.frontend.threshold_scale,
        )
        decoder = DecoderNet(
            grid.patches_per_side,
            dictionary.atom_count,
            train_set.image_side,
            hidden=spec.frontend.decoder_hidden,
            seed=spec.seed,
        )
        pipeline = Pipeline(classifier, frontend=fc, decoder=decoder)
    else:
        pipeline = Pipeline(classifier)
    config = TrainConfig(
        epochs=spec.train.epochs,
        batch_size=spec.train.batch_size,
        eta_max=spec.train.eta_max,
        momentum=spec.train.momentum,
        seed=spec.seed,
        mode=mode or spec.train.mode,
    )
    train(train_set, pipeline, config)
    return pipeline


def attack_config_for(
    spec: ExperimentSpec,
    epsilon: float,
    defended: bool,
    top_k: int,
    restarts: int | None = None,
    norm: str | None = None,
    loss: str | None = None,
) -> AttackConfig:
    a = spec.attack
    if defended:
        surrogate = SurrogateConfig(
            activation_backward=a.activation_backward,
            steepness=a.steepness,
            selection_backward=a.selection_backward,
            route_width=a.route_factor * top_k if a.selection_backward == "top-u" else None,
        )
    else:
        surrogate = SurrogateConfig()
    return AttackConfig(
        norm=norm or a.norm,
        epsilon=epsilon,
        step_size=max(a.step_fraction * epsilon, 1e-12),
        steps=a.steps,
        restarts=restarts if restarts is not None else a.restarts,
        loss=loss or a.loss,
        seed=spec.seed,
        surrogate=surrogate,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_rows_csv(path, report: AttackReport, hash_tag: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_hash"] + ROW_FIELDS)
        for row in report.rows:
            writer.writerow(
                [hash_tag]
                + [
                    _fmt(getattr(row, name))
                    for name in ROW_FIELDS
                ]
            )


def run_sweep(spec: ExperimentSpec, progress=None) -> dict:
    """Train the configured pipeline(s) and attack across the sweep grid.

    Writes, under ``spec.output_dir``: per-point example-level CSVs, an
    aggregate ``sweep.csv``, and ``manifest.json`` binding the config hash
    to every result. A failed point is recorded and skipped. Returns the
    manifest. Byte-identical outputs for identical specs.
    """
    if not spec.sweep.epsilons:
        raise ValueError("sweep grid is empty: no epsilon values configured")
    out = Path(spec.output_dir)
    (out / "points").mkdir(parents=True, exist_ok=True)
    hash_tag = spec.hash()
    train_set = resolve_dataset(spec, "train")
    test_set = resolve_dataset(spec, "test")
    attack_pool = test_set.subset(spec.dataset.attack_subset)

    defended = spec.frontend.enabled
    dictionary = learn_spec_dictionary(spec, train_set) if defended else None
    top_k_values = spec.sweep.top_k or [spec.frontend.top_k]
    restart_values = spec.sweep.restarts or [None]

    pipelines: dict[int, Pipeline] = {}
    for k in top_k_values:
        if progress:
            progress(f"training variant top_k={k}" if defended else "training natural model")
        pipelines[k] = build_pipeline(spec, train_set, defended, dictionary, top_k=k)

    grid = [
        {"top_k": k, "epsilon": eps, "restarts": r}
        for k in top_k_values
        for eps in spec.sweep.epsilons
        for r in restart_values
    ]
    manifest: dict = {"config_hash": hash_tag, "config": spec.resolved(), "points": []}
    aggregate_rows = []
    for index, point in enumerate(grid):
        pipeline = pipelines[point["top_k"]]
        entry = {"index": index, **{k: v for k, v in point.items() if v is not None}}
        if progress:
            progress(f"point {index + 1}/{len(grid)}: {entry}")
        try:
            clean_acc = evaluate(attack_pool, pipeline)
            if point["epsilon"] == 0.0:
                adv_acc, mean_l2, rows_file = clean_acc, float("nan"), ""
            else:
                config = attack_config_for(
                    spec, point["epsilon"], defended, point["top_k"], restarts=point["restarts"]
                )
                report = attack_dataset(attack_pool.images, attack_pool.labels, pipeline, config)
                adv_acc = report.adversarial_accuracy
                mean_l2 = report.mean_l2_over_successes
                rows_file = f"points/point_{index:03d}_rows.csv"
                write_rows_csv(out / rows_file, report, hash_tag)
            entry.update(
                status="ok",
                clean_accuracy=clean_acc,
                adversarial_accuracy=adv_acc,
                mean_l2_successes=mean_l2,
                rows_file=rows_file,
            )
        except Exception as exc:  # record-and-continue: one bad point must not kill a sweep
            entry.update(status=f"failed: {exc}")
        manifest["points"].append(entry)
        aggregate_rows.append(entry)

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["config_hash", "index", "variant_top_k", "epsilon", "restarts",
             "clean_accuracy", "adversarial_accuracy", "mean_l2_successes", "status"]
        )
        for entry in aggregate_rows:
            writer.writerow(
                [
                    hash_tag,
                    entry["index"],
                    _fmt(entry.get("top_k", "")),
                    _fmt(entry.get("epsilon", "")),
                    _fmt(entry.get("restarts", spec.attack.restarts)),
                    _fmt(entry.get("clean_accuracy", "")),
                    _fmt(entry.get("adversarial_accuracy", "")),
                    _fmt(entry.get("mean_l2_successes", "")),
                    entry["status"],
                ]
            )
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


# ---------------------------------------------------------------------------
# Defense comparison (one row per variant, Table-1-shaped columns)
# ---------------------------------------------------------------------------

COMPARE_COLUMNS = [
    "variant",
    "clean",
    "pgd_inf_ce",
    "pgd_inf_cw",
    "pgd_l2",
    "pgd_l1",
    "boundary_mean_l2",
]


def compare_defenses(spec: ExperimentSpec, progress=None) -> list[dict]:
    """Evaluate each configured variant under the five whitebox columns and
    the decision-boundary norm; writes ``compare.csv`` under output_dir."""
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = resolve_dataset(spec, "train")
    test_set = resolve_dataset(spec, "test")
    attack_pool = test_set.subset(spec.dataset.attack_subset)
    cmp = spec.compare
    dictionary = None
    if any(v == "defended" for v in cmp.variants):
        dictionary = learn_spec_dictionary(spec, train_set)

    results = []
    for variant in cmp.variants:
        if variant not in ("natural", "defended", "adv-trained"):
            raise ValueError(f"unknown variant {variant!r}")
        defended = variant == "defended"
        mode = "adversarial" if variant == "adv-trained" else "natural"
        if progress:
            progress(f"training variant {variant}")
        pipeline = build_pipeline(spec, train_set, defended, dictionary, mode=mode)
        row = {"variant": variant, "clean": evaluate(attack_pool, pipeline)}
        budgets = [
            ("pgd_inf_ce", "inf", cmp.eps_inf, "cross-entropy"),
            ("pgd_inf_cw", "inf", cmp.eps_inf, "cw-margin"),
            ("pgd_l2", "l2", cmp.eps_l2, "cross-entropy"),
            ("pgd_l1", "l1", cmp.eps_l1, "cross-entropy"),
        ]
        for column, norm, eps, loss in budgets:
            if progress:
                progress(f"  {variant}: {column}")
            config = attack_config_for(
                spec, eps, defended, spec.frontend.top_k, norm=norm, loss=loss
            )
            report = attack_dataset(attack_pool.images, attack_pool.labels, pipeline, config)
            row[column] = report.adversarial_accuracy
        if progress:
            progress(f"  {variant}: boundary walk")
        row["boundary_mean_l2"] = _mean_boundary_norm(
            pipeline, attack_pool, train_set, cmp.boundary_steps, cmp.boundary_examples, spec.seed
        )
        results.append(row)

    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COMPARE_COLUMNS)
        for row in results:
            writer.writerow([_fmt(row[c]) if c != "variant" else row[c] for c in COMPARE_COLUMNS])
    return results


def _mean_boundary_norm(pipeline, pool: Dataset, reference: Dataset, steps, examples, seed) -> float:
    norms = []
    for i in range(min(examples, pool.count)):
        x, y = pool.images[i], int(pool.labels[i])
        if int(pipeline.predict(x[None])[0]) != y:
            continue  # distance-to-flip is only meaningful from a correct decision
        try:
            _, norm = boundary_attack(x, y, pipeline, reference, steps=steps, seed=[seed, 31, i])
        except ValueError:
            continue  # no adversarial start reachable for this example
        norms.append(norm)
    return float(np.mean(norms)) if norms else float("nan")
