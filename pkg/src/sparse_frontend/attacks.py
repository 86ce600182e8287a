"""Adaptive attack engine: lp-bounded projected gradient ascent with random
restarts, margin loss, surrogate backward passes, gradient smoothing, and a
decision-only boundary walk.

Perturbation updates follow the normalized-gradient iteration: the gradient
of the loss at x+e is normalized in the chosen norm (or reduced to its sign
for the l-inf convention), scaled by the step size, added to e, projected
back into the epsilon ball, and finally re-measured after clamping x+e to
the pixel box. Restart j draws its start from a stream seeded by (seed, j),
so enlarging the restart budget extends, never reshuffles, the search.
Restart 0 starts from the clean point; later restarts start uniformly
inside the budget ball.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .frontend import QUANTIZE_KIND, SELECT_KIND

__all__ = [
    "SurrogateConfig",
    "SmoothingConfig",
    "AttackConfig",
    "AttackRow",
    "AttackReport",
    "project_lp_ball",
    "pgd_step",
    "cw_margin_loss",
    "cw_margin_op",
    "smoothed_gradient",
    "pgd_attack",
    "attack_dataset",
    "boundary_attack",
]


def _canonical_norm(p) -> float:
    if p in ("inf", "linf", np.inf) or (isinstance(p, float) and np.isinf(p)):
        return np.inf
    if p in (1, 1.0, "l1", "1"):
        return 1.0
    if p in (2, 2.0, "l2", "2"):
        return 2.0
    raise ValueError(f"norm must be one of 1, 2, inf; got {p!r}")


@dataclass
class SurrogateConfig:
    """Backward-pass replacements for the defense's non-differentiable stages.

    ``activation_backward``: 'exact-zero' (true a.e. derivative), 'identity',
    or 'smooth' (sigmoid-pair slope with the given steepness).
    ``selection_backward``: 'top-k' (route through kept entries; the default
    graph behavior), 'top-u' (route through the ``route_width`` largest), or
    'identity'.
    """

    activation_backward: str = "exact-zero"
    steepness: float = 4.0
    selection_backward: str = "top-k"
    route_width: int | None = None

    def __post_init__(self) -> None:
        if self.activation_backward not in ("exact-zero", "identity", "smooth"):
            raise ValueError(f"unknown activation backward {self.activation_backward!r}")
        if self.selection_backward not in ("top-k", "top-u", "identity"):
            raise ValueError(f"unknown selection backward {self.selection_backward!r}")
        if self.steepness <= 0:
            raise ValueError("steepness must be > 0")
        if self.selection_backward == "top-u" and not self.route_width:
            raise ValueError("top-u selection backward needs route_width")

    def registry_rules(self, kept_coefficients: int | None = None) -> dict[str, str]:
        rules: dict[str, str] = {}
        if self.activation_backward == "identity":
            rules[QUANTIZE_KIND] = "identity"
        elif self.activation_backward == "smooth":
            rules[QUANTIZE_KIND] = f"smooth-activation({self.steepness})"
        if self.selection_backward == "identity":
            rules[SELECT_KIND] = "identity"
        elif self.selection_backward == "top-u":
            if kept_coefficients is not None and self.route_width < kept_coefficients:
                raise ValueError(
                    f"route_width {self.route_width} must be >= kept coefficients "
                    f"{kept_coefficients}"
                )
            rules[SELECT_KIND] = f"top-u-routing({self.route_width})"
        return rules


@dataclass
class SmoothingConfig:
    samples: int = 40
    radius: float = 1 / 255

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.radius < 0:
            raise ValueError("radius must be >= 0")


@dataclass
class AttackConfig:
    norm: object = "inf"
    epsilon: float = 8 / 255
    step_size: float = 1 / 255
    steps: int = 40
    restarts: int = 1
    loss: str = "cross-entropy"  # or "cw-margin"
    seed: int = 0
    normalize_mode: str | None = None  # 'sign' (inf default) or 'lp'
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    smoothing: SmoothingConfig | None = None

    def __post_init__(self) -> None:
        self.norm = _canonical_norm(self.norm)
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.steps < 0 or self.restarts < 1:
            raise ValueError("steps must be >= 0 and restarts >= 1")
        if self.loss not in ("cross-entropy", "cw-margin"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.normalize_mode is None:
            self.normalize_mode = "sign" if self.norm == np.inf else "lp"
        if self.normalize_mode not in ("sign", "lp"):
            raise ValueError(f"unknown normalize mode {self.normalize_mode!r}")
        if self.normalize_mode == "sign" and self.norm != np.inf:
            raise ValueError("sign mode applies to the inf norm only")


# ---------------------------------------------------------------------------
# Ball projections and the PGD update
# ---------------------------------------------------------------------------


def _l1_project_rows(rows: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection of each row onto the l1 ball (sort-threshold)."""
    out = rows.copy()
    norms = np.abs(rows).sum(axis=1)
    needs = norms > radius
    if not needs.any():
        return out
    mags = np.abs(rows[needs])
    srt = np.sort(mags, axis=1)[:, ::-1]
    css = np.cumsum(srt, axis=1)
    counts = np.arange(1, rows.shape[1] + 1)
    candidate = (css - radius) / counts
    rho = (srt > candidate).sum(axis=1)  # number of active coordinates
    theta = candidate[np.arange(len(rho)), rho - 1]
    shrunk = np.sign(rows[needs]) * np.maximum(mags - theta[:, None], 0.0)
    out[needs] = shrunk
    return out


def _dtype_bound(radius: float, dtype) -> np.ndarray:
    """Largest value of ``dtype`` that does not exceed ``radius``."""
    bound = np.asarray(radius, dtype=dtype)
    if float(bound) > radius:
        bound = np.nextafter(bound, np.asarray(0, dtype=dtype))
    return bound


def _project_rows(rows: np.ndarray, p: float, radius: float) -> np.ndarray:
    """Project each row onto the lp ball; the returned rows measure inside
    the budget in float64 even when stored at working precision."""
    dtype = rows.dtype
    if p == np.inf:  # pure clamping, exact in any dtype
        bound = _dtype_bound(radius, dtype)
        return np.clip(rows, -bound, bound)
    r64 = rows.astype(np.float64)
    if p == 2.0:
        norms = np.linalg.norm(r64, axis=1, keepdims=True)
        scale = np.where(norms > radius, radius / np.maximum(norms, 1e-30), 1.0)
        out64 = r64 * scale
    else:
        out64 = _l1_project_rows(r64, radius)
    out = out64.astype(dtype)
    # rounding to working precision may overshoot; shave until the float64
    # measurement sits within half the budget slack
    for _ in range(8):
        norms = _row_norms(out, p)
        over = norms > radius * (1 + 5e-10)
        if not over.any():
            break
        shrink = (radius * (1.0 - 1e-7)) / norms[over]
        out[over] = (out[over].astype(np.float64) * shrink[:, None]).astype(dtype)
    return out


def project_lp_ball(e: np.ndarray, p, epsilon: float) -> np.ndarray:
    """Project a perturbation onto the lp ball of the given radius."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    p = _canonical_norm(p)
    e = np.asarray(e)
    return _project_rows(e.reshape(1, -1), p, epsilon).reshape(e.shape)


def _row_norms(rows: np.ndarray, p: float) -> np.ndarray:
    rows = rows.astype(np.float64, copy=False)
    if p == np.inf:
        return np.abs(rows).max(axis=1)
    if p == 2.0:
        return np.linalg.norm(rows, axis=1)
    return np.abs(rows).sum(axis=1)


def _pgd_step_rows(x, e, grad, p, epsilon, step_size, mode):
    # rows with an all-zero gradient stall: returned bit-identical, no division
    alive = np.abs(grad).max(axis=1) > 0
    out = e.copy()
    if not alive.any():
        return out
    xa, ea, ga = x[alive], e[alive], grad[alive]
    if mode == "sign":
        moved = ea + step_size * np.sign(ga)
    else:
        norms = _row_norms(ga, p)
        moved = ea + step_size * ga / norms[:, None]
    projected = _project_rows(moved.astype(e.dtype, copy=False), p, epsilon)
    # working precision must be settled before the final budget check: a
    # downcast after the check could round back over the budget
    clamped = (np.clip(xa + projected, 0.0, 1.0) - xa).astype(e.dtype, copy=False)
    over = _row_norms(clamped, p) > epsilon * (1 + 1e-12)
    if over.any():
        clamped[over] = _project_rows(clamped[over], p, epsilon)
    out[alive] = clamped
    return out


def pgd_step(x: np.ndarray, e: np.ndarray, grad: np.ndarray, config: AttackConfig) -> np.ndarray:
    """One projected ascent update for a single example.

    A zero gradient leaves the perturbation unchanged (the attack loop
    counts such steps as stalled in its diagnostics).
    """
    x, e, grad = np.asarray(x), np.asarray(e), np.asarray(grad)
    if grad.shape != x.shape or e.shape != x.shape:
        raise ad.ShapeMismatchError("pgd_step", x.shape, e.shape, grad.shape)
    out = _pgd_step_rows(
        x.reshape(1, -1),
        e.reshape(1, -1),
        grad.reshape(1, -1),
        config.norm,
        config.epsilon,
        config.step_size,
        config.normalize_mode,
    )
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def cw_margin_op(logits: Tensor, labels, reduction: str = "sum") -> Tensor:
    """Margin loss: highest incorrect logit minus the correct logit.

    Positive iff the example is misclassified; gradient ascent on it pushes
    toward misclassification. Ties among incorrect logits route the
    gradient to the first of them.
    """
    single = logits.data.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.shape[1] < 2:
        raise ValueError("margin loss needs at least two classes")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ad.ShapeMismatchError("cw_margin", logits.shape, y.shape)
    if reduction not in ("sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, y] = -np.inf
    top_incorrect = masked.argmax(axis=1)
    per_example = z[rows, top_incorrect] - z[rows, y]
    value = per_example.sum() if reduction == "sum" else per_example

    def bwd(g: np.ndarray):
        grad = np.zeros_like(z)
        gg = np.broadcast_to(g, (z.shape[0],)) if reduction != "sum" else np.full(z.shape[0], float(g))
        grad[rows, top_incorrect] += gg
        grad[rows, y] -= gg
        return (grad[0] if single else grad,)

    return ad.make_node(np.asarray(value), "cw_margin", (logits,), bwd)


def cw_margin_loss(logits: np.ndarray, label) -> float:
    """Array-level margin loss for one example."""
    with ad.no_grad():
        return float(cw_margin_op(Tensor(np.asarray(logits)), label).data)


def _loss_op(config: AttackConfig, logits: Tensor, labels) -> Tensor:
    if config.loss == "cw-margin":
        return cw_margin_op(logits, labels, reduction="sum")
    return ad.cross_entropy(logits, labels, reduction="sum")


def _per_example_losses(config: AttackConfig, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = logits
    rows = np.arange(z.shape[0])
    if config.loss == "cw-margin":
        masked = z.copy()
        masked[rows, labels] = -np.inf
        return masked.max(axis=1) - z[rows, labels]
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
    return lse - z[rows, labels]


# ---------------------------------------------------------------------------
# Gradient queries
# ---------------------------------------------------------------------------


def _input_gradient(pipeline, points: np.ndarray, labels: np.ndarray, config: AttackConfig):
    """Loss gradient at the given input points; sum reduction keeps the
    per-example gradients independent of batch size."""
    x = Tensor(points, requires_grad=True)
    loss = _loss_op(config, pipeline.logits_op(x), labels)
    ad.backward(loss)
    return x.grad


def smoothed_gradient(x, e, grad_fn, samples: int, radius: float, seed: int) -> np.ndarray:
    """Average of ``grad_fn`` over uniform draws in the radius-box around x+e."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    x, e = np.asarray(x), np.asarray(e)
    rng = np.random.default_rng(seed)
    total = np.zeros_like(x, dtype=np.float64)
    for _ in range(samples):
        eta = rng.uniform(-radius, radius, size=x.shape).astype(x.dtype) if radius > 0 else 0.0
        total += grad_fn(x + e + eta)
    return (total / samples).astype(x.dtype)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class AttackRow:
    example_id: int
    clean_correct: bool
    attack_success: bool
    final_loss: float
    l2_norm: float
    lp_norm: float
    restarts_used: int
    stalled_steps: int = 0


@dataclass
class AttackReport:
    rows: list[AttackRow]
    epsilon: float
    norm: float
    perturbations: np.ndarray | None = None  # (count, ...) final e per example

    @property
    def adversarial_accuracy(self) -> float:
        if not self.rows:
            return 0.0
        return 1.0 - sum(r.attack_success for r in self.rows) / len(self.rows)

    @property
    def mean_l2_over_successes(self) -> float:
        """Mean perturbation size over attacked successes; clean mistakes
        (success with zero perturbation) are excluded."""
        norms = [r.l2_norm for r in self.rows if r.attack_success and r.clean_correct]
        return float(np.mean(norms)) if norms else float("nan")

    def validate_budgets(self, tolerance: float = 1e-9) -> None:
        for row in self.rows:
            if row.lp_norm > self.epsilon * (1 + tolerance):
                raise AssertionError(
                    f"example {row.example_id}: lp norm {row.lp_norm} exceeds budget {self.epsilon}"
                )


# ---------------------------------------------------------------------------
# The restart-loop attack
# ---------------------------------------------------------------------------


def _restart_init(rng, shape: tuple[int, int], config: AttackConfig) -> np.ndarray:
    """Uniform start inside the budget ball: the full cube for inf, a uniform
    direction at a uniform radius otherwise."""
    if config.norm == np.inf:
        return rng.uniform(-config.epsilon, config.epsilon, size=shape)
    direction = rng.normal(size=shape)
    norms = _row_norms(direction, config.norm)
    radius = rng.uniform(0.0, config.epsilon, size=(shape[0], 1))
    return direction / np.maximum(norms[:, None], 1e-30) * radius


def attack_dataset(images: np.ndarray, labels: np.ndarray, pipeline, config: AttackConfig) -> AttackReport:
    """Run the configured attack on a batch; returns one row per example.

    Examples the clean pipeline already misclassifies count as successes
    with a zero perturbation and are excluded from the mean-l2 aggregate.
    The first restart whose final iterate misclassifies wins for each
    example; failing that, the restart with the highest final loss.
    """
    images = np.asarray(images, dtype=ad.get_default_dtype())
    labels = np.asarray(labels, dtype=np.int64)
    count = images.shape[0]
    flat = images.reshape(count, -1)
    kept = pipeline.frontend.top_k if getattr(pipeline, "frontend", None) else None
    rules = config.surrogate.registry_rules(kept)

    clean_pred = pipeline.predict(images)
    clean_correct = clean_pred == labels
    clean_losses = _per_example_losses(config, pipeline.logits(images), labels)

    best_e = np.zeros_like(flat)
    best_loss = np.full(count, -np.inf)
    success = ~clean_correct
    restarts_used = np.zeros(count, dtype=int)
    stalled = np.zeros(count, dtype=int)
    active_mask = clean_correct.copy()  # only attack what the model gets right

    with ad.surrogate_rules(rules):
        for j in range(config.restarts):
            if not active_mask.any():
                break
            idx = np.flatnonzero(active_mask)
            x = flat[idx]
            rng = np.random.default_rng([config.seed, j])
            if j == 0:
                e = np.zeros_like(x)
            else:
                e = _restart_init(rng, x.shape, config).astype(x.dtype)
                e = _project_rows(e, config.norm, config.epsilon)
                e = (np.clip(x + e, 0.0, 1.0) - x).astype(x.dtype, copy=False)
                over = _row_norms(e, config.norm) > config.epsilon * (1 + 1e-12)
                if over.any():
                    e[over] = _project_rows(e[over], config.norm, config.epsilon)
            shaped = (len(idx),) + images.shape[1:]
            for _ in range(config.steps):
                points = (x + e).reshape(shaped)
                if config.smoothing is not None:
                    grad = smoothed_gradient(
                        points,
                        np.zeros_like(points),
                        lambda q: _input_gradient(pipeline, q.astype(images.dtype), labels[idx], config),
                        config.smoothing.samples,
                        config.smoothing.radius,
                        seed=int(rng.integers(2**31)),
                    )
                else:
                    grad = _input_gradient(pipeline, points, labels[idx], config)
                gflat = grad.reshape(len(idx), -1)
                stalled[idx] += (np.abs(gflat).max(axis=1) == 0).astype(int)
                e = _pgd_step_rows(
                    x, e, gflat, config.norm, config.epsilon, config.step_size, config.normalize_mode
                )
            logits = pipeline.logits((x + e).reshape(shaped))
            losses = _per_example_losses(config, logits, labels[idx])
            miss = logits.argmax(axis=1) != labels[idx]

            improved = losses > best_loss[idx]
            take = improved & ~success[idx]
            rows_to_update = idx[take]
            best_loss[rows_to_update] = losses[take]
            best_e[rows_to_update] = e[take]

            newly = miss & ~success[idx]
            won = idx[newly]
            success[won] = True
            best_e[won] = e[newly]
            best_loss[won] = losses[newly]
            restarts_used[won] = j + 1
            active_mask[won] = False

    restarts_used[active_mask] = config.restarts  # exhausted without success
    rows = []
    for i in range(count):
        if not clean_correct[i]:
            rows.append(
                AttackRow(i, False, True, float(clean_losses[i]), 0.0, 0.0, 0)
            )
            continue
        e_i = best_e[i]
        rows.append(
            AttackRow(
                i,
                True,
                bool(success[i]),
                float(best_loss[i]) if np.isfinite(best_loss[i]) else float(clean_losses[i]),
                float(np.linalg.norm(e_i)),
                float(_row_norms(e_i[None], config.norm)[0]),
                int(restarts_used[i]),
                int(stalled[i]),
            )
        )
    report = AttackReport(
        rows, config.epsilon, config.norm, perturbations=best_e.reshape(images.shape)
    )
    report.validate_budgets()
    adv = flat + best_e
    if adv.min() < -1e-6 or adv.max() > 1 + 1e-6:
        raise AssertionError("an adversarial image leaves the pixel box")
    return report


def pgd_attack(x: np.ndarray, y: int, pipeline, config: AttackConfig) -> tuple[np.ndarray, AttackRow]:
    """Attack a single example; returns (perturbation, report row)."""
    report = attack_dataset(np.asarray(x)[None], np.asarray([y]), pipeline, config)
    return report.perturbations[0], report.rows[0]


# ---------------------------------------------------------------------------
# Decision-boundary walk
# ---------------------------------------------------------------------------


def boundary_attack(
    x: np.ndarray,
    y: int,
    pipeline,
    dataset,
    steps: int,
    seed: int = 0,
    spherical_step: float = 0.01,
    source_step: float = 0.01,
    step_adaptation: float = 1.5,
    trials_per_adaptation: int = 25,
) -> tuple[np.ndarray, float]:
    """Decision-only walk that shrinks an adversarial perturbation's l2 norm.

    Starts from the closest differently-labeled dataset point (falling back
    to the closest one the model actually classifies away from ``y`` when
    that literal start is not adversarial). Each iteration proposes an
    orthogonal move along the sphere around ``x`` followed by a contraction
    toward ``x``; proposals are accepted only if they stay misclassified and
    do not increase the distance. Step sizes adapt to the recent acceptance
    rate. Returns the final perturbation and its l2 norm.
    """
    x = np.asarray(x, dtype=np.float64)
    others = np.flatnonzero(np.asarray(dataset.labels) != y)
    if others.size == 0:
        raise ValueError("dataset holds no differently-labeled point to start from")
    candidates = np.asarray(dataset.images, dtype=x.dtype)[others]
    dists = np.linalg.norm(candidates.reshape(len(others), -1) - x.reshape(1, -1), axis=1)
    order = np.argsort(dists, kind="stable")
    start = candidates[order[0]]
    if steps > 0 and int(pipeline.predict(start[None])[0]) == y:
        start = None
        for k in order[1:]:
            if int(pipeline.predict(candidates[k][None])[0]) != y:
                start = candidates[k]
                break
        if start is None:
            raise ValueError("no candidate start point is misclassified by the pipeline")

    rng = np.random.default_rng(seed)
    current = start.copy()
    dist = float(np.linalg.norm(current - x))
    sphere_hits: list[bool] = []
    shrink_hits: list[bool] = []
    sph, src = spherical_step, source_step

    def adversarial(point) -> bool:
        return int(pipeline.predict(point[None])[0]) != y

    for _ in range(steps):
        if dist == 0.0:
            break
        u = (x - current).reshape(-1)
        u_hat = u / max(np.linalg.norm(u), 1e-30)
        eta = rng.normal(size=u.shape).astype(x.dtype)
        eta -= (eta @ u_hat) * u_hat
        eta *= sph * dist / max(float(np.linalg.norm(eta)), 1e-30)
        offset = (current.reshape(-1) + eta) - x.reshape(-1)
        offset *= dist / max(float(np.linalg.norm(offset)), 1e-30)
        on_sphere = np.clip(x.reshape(-1) + offset, 0.0, 1.0).reshape(x.shape).astype(x.dtype)
        sphere_ok = float(np.linalg.norm(on_sphere - x)) <= dist and adversarial(on_sphere)
        sphere_hits.append(sphere_ok)
        if sphere_ok:
            candidate = x.reshape(-1) + (on_sphere - x).reshape(-1) * (1.0 - src)
            candidate = np.clip(candidate, 0.0, 1.0).reshape(x.shape).astype(x.dtype)
            cand_dist = float(np.linalg.norm(candidate - x))
            shrink_ok = cand_dist <= dist and adversarial(candidate)
            shrink_hits.append(shrink_ok)
            if shrink_ok:
                current, dist = candidate, cand_dist
            else:
                # keep the slide along the sphere; the distance does not grow
                current = on_sphere
                dist = float(np.linalg.norm(on_sphere - x))
        # the two step sizes adapt on separate statistics so a stalled
        # contraction cannot freeze the angular exploration
        if len(sphere_hits) >= trials_per_adaptation:
            rate = float(np.mean(sphere_hits))
            sphere_hits.clear()
            if rate > 0.5:
                sph = min(sph * step_adaptation, 0.5)
            elif rate < 0.2:
                sph = max(sph / step_adaptation, 1e-7)
        if len(shrink_hits) >= trials_per_adaptation:
            rate = float(np.mean(shrink_hits))
            shrink_hits.clear()
            if rate > 0.5:
                src = min(src * step_adaptation, 0.5)
            elif rate < 0.2:
                src = max(src / step_adaptation, 1e-7)
    e = current - x
    return e, float(np.linalg.norm(e))
