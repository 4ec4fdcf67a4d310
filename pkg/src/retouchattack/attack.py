"""The retouching attack: chained masked retouching, the ascent objective and the loop.

For every mask region ``k`` the sampled operators are applied in action order
to the running image and the result is blended back through the region's soft
mask. The chosen operator of slot ``(k, m)`` runs with parameters
``neutral + (Z - neutral) * D`` where ``D`` is the hard decision (1 in the
forward pass). The gradient on ``D`` is handed to the soft Gumbel sample
unchanged (straight-through) and from there to the logits.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from retouchattack import drm
from retouchattack.diffnet import AdamState, adam_update
from retouchattack.imagecore import (
    ColorState,
    ImageTensor,
    linear_to_srgb_array,
    linear_to_srgb_vjp,
    srgb_to_linear_array,
)
from retouchattack.palettemask import composite, composite_backward, compute_masks, extract_palette
from retouchattack.retouchops import NUM_OPS, OpKind, op_backward, op_forward

logger = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    """Attack hyperparameters. Defaults are the settled values used throughout."""

    k: int = 5
    m: int = 30
    n: int = NUM_OPS
    persistent_iters: int = 30
    lambda_drm: float = 50.0
    lr_p: float = 1.0
    lr_z: float = 0.0005
    max_iters: int = 1000
    tau: float = 1.0
    seed: int = 0
    style: str = "statistic"
    victim_path: str | None = None

    def validate(self):
        for name in ("k", "m", "persistent_iters", "max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n != NUM_OPS:
            raise ValueError(f"n must equal the number of operators ({NUM_OPS}), got {self.n}")
        if not 1 <= self.k <= 16:
            raise ValueError(f"k must be in [1, 16], got {self.k}")
        for name in ("lr_p", "lr_z", "tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lambda_drm < 0:
            raise ValueError(f"lambda_drm must be >= 0, got {self.lambda_drm}")
        if self.style not in ("statistic", "predictor", "none"):
            raise ValueError(f"unknown style loss kind {self.style!r}")
        return self


# ------------------------------------------------------------- retouch chain


@dataclass
class RetouchTape:
    masks: np.ndarray
    stages: list
    linear_out: np.ndarray


def _slot_params(tables: drm.DecisionTables, kind: OpKind, k: int, m: int, weight: float):
    z = tables.params[kind][k, m]
    if weight == 1.0:
        return z, z - kind.neutral
    dev = z - kind.neutral
    return kind.neutral + dev * weight, dev


def retouch_forward(x_lin: np.ndarray, masks: np.ndarray, tables: drm.DecisionTables,
                    plan: drm.RetouchPlan, weights=None):
    """Retouch a linear image region by region and return it in nonlinear sRGB.

    ``weights`` optionally replaces the hard decision value of each chosen slot
    (shape ``(K, M)``); it exists for relaxation checks.
    """
    x_lin = np.asarray(x_lin, dtype=np.float64)
    k_count, m_count = plan.choice.shape
    if masks.shape != (k_count,) + x_lin.shape[:2]:
        raise ValueError(f"masks shape {masks.shape} does not match plan ({k_count} regions) and image {x_lin.shape}")
    stages = []
    x = x_lin
    for k in range(k_count):
        y = x
        steps = []
        for m in range(m_count):
            kind = OpKind(int(plan.choice[k, m]))
            w = 1.0 if weights is None else float(weights[k, m])
            params, dev = _slot_params(tables, kind, k, m, w)
            y, tape = op_forward(kind, y, params)
            steps.append((kind, tape, dev, w))
        stages.append((x, steps))
        x = composite(x, y, masks[k])
    return linear_to_srgb_array(x), RetouchTape(masks, stages, x)


def retouch_backward(tape: RetouchTape, upstream: np.ndarray, n_masks: int, n_actions: int):
    """Pull a gradient on the nonlinear output back to the tables.

    Returns ``(d_params, d_decision)`` with ``d_params[n]`` shaped like the
    parameter table of kind ``n`` and ``d_decision`` shaped ``(K, M, N)``.
    """
    g = linear_to_srgb_vjp(tape.linear_out, upstream)
    d_params = [np.zeros((n_masks, n_actions, kind.dim)) for kind in OpKind]
    d_decision = np.zeros((n_masks, n_actions, NUM_OPS))
    for k in range(len(tape.stages) - 1, -1, -1):
        _, steps = tape.stages[k]
        g_base, g_y = composite_backward(tape.masks[k], g)
        for m in range(len(steps) - 1, -1, -1):
            kind, op_tape, dev, w = steps[m]
            g_y, g_p = op_backward(kind, op_tape, g_y)
            d_params[kind][k, m] += g_p * w
            d_decision[k, m, kind] += float(np.dot(g_p, dev))
        g = g_base + g_y
    return d_params, d_decision


# --------------------------------------------------------------- objective


def dynamic_weights(task_loss: float, style_loss: float, drm_loss: float):
    """Magnitude-matching weights; treated as constants within an iteration."""
    j = abs(task_loss)
    return j / (abs(style_loss) + 1e-8), j / (abs(drm_loss) + 1e-8)


def lr_schedule(iteration: int, base_p: float = 1.0, base_z: float = 0.0005, max_iters: int = 1000):
    """Linear ramp to ten times the base rates at ``max_iters``, flat afterwards."""
    frac = min(max(iteration, 0), max_iters) / max_iters
    scale = 1.0 + 9.0 * frac
    return base_p * scale, base_z * scale


def check_success(victim, image: np.ndarray, label: int) -> bool:
    """True when the victim's top logit (lowest index on ties) is not ``label``."""
    return int(np.argmax(victim.logits(np.asarray(image)))) != int(label)


@dataclass
class ObjectiveValue:
    value: float
    task: float
    style: float
    drm: float
    lambda_style: float
    lambda_drm_dynamic: float
    image: np.ndarray
    logits: np.ndarray
    d_logits: np.ndarray
    d_params: list


def objective(x_lin, masks, tables, plan, victim, label, style, lambda_drm=50.0):
    """Ascent objective (task loss minus weighted style and diversity penalties).

    Returns the value together with its gradient w.r.t. the logits and the
    parameter tables.
    """
    fake, tape = retouch_forward(x_lin, masks, tables, plan)
    task, d_task, logits = victim.loss_and_input_grad(fake, int(label))
    if style is None:
        style_loss, d_style = 0.0, np.zeros_like(fake)
    else:
        style_loss, d_style = style.loss_and_grad(fake)
    dist = drm.plan_distribution(plan)
    drm_loss, d_row = drm.drm_regularization(dist)
    lam_style, lam_drm = dynamic_weights(task, style_loss, drm_loss)

    value = task - lam_style * style_loss - lambda_drm * lam_drm * drm_loss
    d_img = d_task - lam_style * d_style
    k_count, m_count = plan.choice.shape
    d_params, d_decision = retouch_backward(tape, d_img, k_count, m_count)
    d_soft = d_decision - lambda_drm * lam_drm * d_row
    d_logits = drm.softmax_backward(plan.soft, d_soft, plan.tau)
    return ObjectiveValue(
        float(value), float(task), float(style_loss), float(drm_loss), lam_style, lam_drm,
        fake, logits, d_logits, d_params,
    )  # fmt: skip


# --------------------------------------------------------------------- loop


@dataclass
class IterationRecord:
    iteration: int
    task: float
    style: float
    drm: float
    objective: float
    success: bool
    predicted: int


@dataclass
class AttackResult:
    image: ImageTensor
    success: bool
    iterations: int
    first_success: int | None
    chosen_iteration: int
    history: list
    plan: list
    seed: int
    predicted_before: int
    predicted_after: int
    chosen_style: float = field(default=float("nan"))

    def losses(self) -> dict:
        return {
            "task": [r.task for r in self.history],
            "style": [r.style for r in self.history],
            "drm": [r.drm for r in self.history],
            "success": [r.success for r in self.history],
        }


def run_attack(image: ImageTensor, label: int, victim, style=None, config: AttackConfig | None = None):
    """Search decision tables that make ``victim`` misclassify a retouched ``image``.

    Iterations are numbered from 1; iteration ``t`` evaluates the tables after
    ``t - 1`` Adam updates. After the first misclassified iterate the loop runs
    exactly ``persistent_iters`` more iterations and returns the misclassified
    iterate with the smallest style loss (earliest on ties). Without any success
    by ``max_iters`` it returns the iterate with the largest task loss.
    """
    config = (config or AttackConfig()).validate()
    image.require(ColorState.NONLINEAR_SRGB)
    x_nl = image.data
    x_lin = srgb_to_linear_array(x_nl)
    lin_img = ImageTensor(x_lin, ColorState.LINEAR_SRGB)
    palette = extract_palette(lin_img, config.k, config.seed)
    masks = compute_masks(lin_img, palette)

    rng = np.random.default_rng(config.seed)
    tables = drm.DecisionTables.neutral(config.k, config.m)
    adam = AdamState()
    history = []
    successes = []
    best_fail = None
    first_success = None
    predicted_before = int(np.argmax(victim.logits(x_nl)))

    t = 0
    while True:
        t += 1
        plan = drm.sample_plan(tables, config.tau, rng)
        obj = objective(x_lin, masks, tables, plan, victim, label, style, config.lambda_drm)
        predicted = int(np.argmax(obj.logits))
        success = predicted != int(label)
        history.append(IterationRecord(t, obj.task, obj.style, obj.drm, obj.value, success, predicted))
        if success:
            if first_success is None:
                first_success = t
                logger.debug("first success at iteration %d", t)
            successes.append((obj.style, t, obj.image, plan, predicted))
        elif first_success is None and (best_fail is None or obj.task > best_fail[0]):
            best_fail = (obj.task, t, obj.image, plan, predicted)

        if first_success is not None and t >= first_success + config.persistent_iters:
            break
        if first_success is None and t >= config.max_iters:
            break

        lr_p, lr_z = lr_schedule(t - 1, config.lr_p, config.lr_z, config.max_iters)
        state = tables.as_dict()
        grads = {"logits": -obj.d_logits}
        grads.update({kind.label: -obj.d_params[kind] for kind in OpKind})
        rates = {name: (lr_p if name == "logits" else lr_z) for name in state}
        tables = drm.DecisionTables.from_dict(adam_update(state, grads, adam, rates)).projected()

    if successes:
        chosen = min(successes, key=lambda s: (s[0], s[1]))
        style_value, chosen_t, fake, plan, predicted = chosen
    else:
        _, chosen_t, fake, plan, predicted = best_fail
        style_value = history[chosen_t - 1].style
    return AttackResult(
        image=ImageTensor(fake, ColorState.NONLINEAR_SRGB),
        success=bool(successes),
        iterations=t,
        first_success=first_success,
        chosen_iteration=chosen_t,
        history=history,
        plan=plan.describe(),
        seed=config.seed,
        predicted_before=predicted_before,
        predicted_after=predicted,
        chosen_style=float(style_value),
    )


class RetouchAttack(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` attacks every image, ``fit_transform`` returns them.

    ``X`` holds nonlinear sRGB images ``(n, H, W, 3)`` and ``y`` their true labels.
    """

    def __init__(self, victim=None, style=None, k=5, m=30, persistent_iters=30, lambda_drm=50.0,
                 lr_p=1.0, lr_z=0.0005, max_iters=1000, tau=1.0, random_state=0):
        self.victim = victim
        self.style = style
        self.k = k
        self.m = m
        self.persistent_iters = persistent_iters
        self.lambda_drm = lambda_drm
        self.lr_p = lr_p
        self.lr_z = lr_z
        self.max_iters = max_iters
        self.tau = tau
        self.random_state = random_state

    def config(self) -> AttackConfig:
        return AttackConfig(
            k=self.k, m=self.m, persistent_iters=self.persistent_iters, lambda_drm=self.lambda_drm,
            lr_p=self.lr_p, lr_z=self.lr_z, max_iters=self.max_iters, tau=self.tau,
            seed=self.random_state,
        ).validate()  # fmt: skip

    def fit(self, X, y):
        if self.victim is None:
            raise ValueError("a victim classifier is required")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        y = np.atleast_1d(np.asarray(y, dtype=np.intp))
        if len(X) != len(y):
            raise ValueError(f"got {len(X)} images but {len(y)} labels")
        cfg = self.config()
        self.results_ = [run_attack(ImageTensor(x), int(label), self.victim, self.style, cfg) for x, label in zip(X, y)]
        return self

    def transform(self, X=None):
        check_is_fitted(self, "results_")
        return np.stack([r.image.data for r in self.results_])

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X)

    def success_rate(self) -> float:
        check_is_fitted(self, "results_")
        return float(np.mean([r.success for r in self.results_]))


def config_dict(config: AttackConfig) -> dict:
    return asdict(config)
