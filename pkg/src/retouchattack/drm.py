"""Decision sampling over retouching operators.

The decision state is a table of logits (one categorical distribution per mask
region and action slot) plus one parameter slot per operator kind. Each attack
iteration draws a hard operator choice per slot with the Gumbel-Softmax trick;
gradients reach the logits through the soft relaxation (straight-through).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from retouchattack.retouchops import NUM_OPS, OpKind, project

SMOOTHING_EPS = 1e-6


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the logits of ``softmax(logits / tau)``."""
    inner = np.sum(upstream * probs, axis=-1, keepdims=True)
    return probs * (upstream - inner) / tau


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, tau: float, rng: np.random.Generator, noise=None):
    """Draw ``(hard, soft)`` along the last axis.

    ``hard`` is the one-hot of ``argmax(soft)`` (lowest index on ties). Pass
    ``noise`` to reuse a previous Gumbel draw.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        noise = sample_gumbel(logits.shape, rng)
    soft = softmax((logits + noise) / tau)
    hard = np.zeros_like(soft)
    np.put_along_axis(hard, np.argmax(soft, axis=-1)[..., None], 1.0, axis=-1)
    return hard, soft


@dataclass
class DecisionTables:
    """Optimizable state: ``logits`` of shape ``(K, M, N)`` and per-kind parameters.

    ``params[n]`` holds the slots of operator kind ``n`` with shape ``(K, M, dim_n)``.
    """

    logits: np.ndarray
    params: list

    @classmethod
    def neutral(cls, k: int, m: int) -> DecisionTables:
        logits = np.zeros((k, m, NUM_OPS))
        params = [np.broadcast_to(kind.neutral, (k, m, kind.dim)).copy() for kind in OpKind]
        return cls(logits, params)

    @property
    def n_masks(self) -> int:
        return self.logits.shape[0]

    @property
    def n_actions(self) -> int:
        return self.logits.shape[1]

    def probabilities(self) -> np.ndarray:
        return softmax(self.logits)

    def projected(self) -> DecisionTables:
        return DecisionTables(
            self.logits.copy(), [project(kind, p) for kind, p in zip(OpKind, self.params)]
        )

    def copy(self) -> DecisionTables:
        return DecisionTables(self.logits.copy(), [p.copy() for p in self.params])

    def as_dict(self) -> dict:
        out = {"logits": self.logits}
        out.update({kind.label: p for kind, p in zip(OpKind, self.params)})
        return out

    @classmethod
    def from_dict(cls, d: dict) -> DecisionTables:
        return cls(d["logits"], [d[kind.label] for kind in OpKind])


@dataclass
class RetouchPlan:
    """One sampled operator sequence per mask region.

    ``hard``/``soft``/``noise`` have shape ``(K, M, N)``; ``choice`` is ``(K, M)``.
    ``selected[k][m]`` is the parameter vector of the chosen operator.
    """

    hard: np.ndarray
    soft: np.ndarray
    noise: np.ndarray
    choice: np.ndarray
    selected: list
    tau: float

    @property
    def n_decisions(self) -> int:
        return int(self.choice.size)

    def describe(self) -> list:
        return [
            [
                {"op": OpKind(int(self.choice[k, m])).label, "params": self.selected[k][m].tolist()}
                for m in range(self.choice.shape[1])
            ]
            for k in range(self.choice.shape[0])
        ]


def sample_plan(tables: DecisionTables, tau: float, rng: np.random.Generator, noise=None) -> RetouchPlan:
    noise = sample_gumbel(tables.logits.shape, rng) if noise is None else noise
    hard, soft = gumbel_softmax(tables.logits, tau, rng, noise=noise)
    choice = np.argmax(hard, axis=-1)
    k_count, m_count = choice.shape
    selected = [
        [tables.params[choice[k, m]][k, m].copy() for m in range(m_count)] for k in range(k_count)
    ]
    return RetouchPlan(hard, soft, noise, choice, selected, tau)


@dataclass
class SampledOpDistribution:
    """Aggregate operator distribution ``sp`` and its uniform reference ``sq``."""

    sp: np.ndarray
    sq: np.ndarray
    eps: float
    rows: int


def plan_distribution(source, eps: float = SMOOTHING_EPS) -> SampledOpDistribution:
    """Mean of the soft rows of a plan (or of the table probabilities), then smoothed."""
    rows = source.soft if isinstance(source, RetouchPlan) else np.asarray(source.probabilities())
    flat = rows.reshape(-1, rows.shape[-1])
    n = flat.shape[1]
    sp = (flat.mean(axis=0) + eps) / (1.0 + n * eps)
    return SampledOpDistribution(sp, np.full(n, 1.0 / n), eps, flat.shape[0])


def drm_regularization(dist: SampledOpDistribution):
    """KL(sp || uniform) and its gradient w.r.t. each soft row.

    The gradient has shape ``(N,)`` and is shared by every row that was averaged.
    """
    sp, sq = dist.sp, dist.sq
    live = sp > 0
    ratio = np.where(live, sp / sq, 1.0)
    loss = float(np.sum(np.where(live, sp * np.log(ratio), 0.0)))
    d_sp = np.where(live, np.log(ratio) + 1.0, 0.0)
    n = sp.size
    d_row = d_sp / (1.0 + n * dist.eps) / dist.rows
    return loss, d_row
