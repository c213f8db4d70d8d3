"""Task vectors, their scaled sums, and explainability transfer.

Every binary operation refuses vectors whose layout fingerprints differ.
A task vector keeps the rounding residual of its defining difference, and
sums use compensated accumulation, so ``base + (ft - base)`` gives back
``ft`` bit for bit.  Multi-term sums run in a canonical (provenance-sorted)
order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import CompatibilityError, ParameterVector
from .numerics import ContractError

LAMBDA2_GRID = tuple(round(0.1 * i, 1) for i in range(13))
ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))


class UndefinedSimilarityError(ValueError):
    pass


def two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """s, e with s = fl(a + b) and s + e = a + b exactly."""
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def compensated_sum(parts: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Sum2 cascade: result as accurate as a doubled-precision sum, split hi/lo."""
    s = np.array(parts[0], dtype=np.float64)
    sigma = np.zeros_like(s)
    for p in parts[1:]:
        s, q = two_sum(s, p)
        sigma = sigma + q
    return two_sum(s, sigma)


@dataclass(frozen=True, eq=False)
class TaskVector:
    values: np.ndarray
    layout_fingerprint: str
    base_id: str = ""
    finetuned_id: str = ""
    delta: str = "ft-base"
    layout: tuple = field(default=(), repr=False)
    residual: np.ndarray | None = field(default=None, repr=False)

    def parts(self, lam: float = 1.0) -> list[np.ndarray]:
        if self.residual is None:
            return [lam * self.values]
        return [lam * self.values, lam * self.residual]

    @property
    def provenance(self) -> str:
        return f"{self.delta}:{self.finetuned_id}:{self.base_id}"

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def scaled(self, lam: float) -> "TaskVector":
        res = None if self.residual is None else lam * self.residual
        return TaskVector(lam * self.values, self.layout_fingerprint, self.base_id,
                          self.finetuned_id, f"{lam!r}*({self.delta})", self.layout, res)


@dataclass(frozen=True)
class TransferConfig:
    lambda1: float = 1.0
    lambda2: float = 0.8

    def __post_init__(self):
        if not (math.isfinite(self.lambda1) and math.isfinite(self.lambda2)):
            raise ValueError("scaling coefficients must be finite")


def _check(a_fp: str, b_fp: str) -> None:
    if a_fp != b_fp:
        raise CompatibilityError(f"layout fingerprint mismatch: {a_fp} vs {b_fp}")


def _id(theta: ParameterVector, given: str | None) -> str:
    return given if given is not None else theta.content_fingerprint


def task_vector(theta_ft: ParameterVector, theta_base: ParameterVector,
                ft_id: str | None = None, base_id: str | None = None,
                delta: str = "ft-base") -> TaskVector:
    _check(theta_ft.base_fingerprint, theta_base.base_fingerprint)
    hi, lo = two_sum(theta_ft.values, -theta_base.values)
    return TaskVector(hi, theta_base.base_fingerprint, _id(theta_base, base_id),
                      _id(theta_ft, ft_id), delta, theta_base.layout, lo)


def apply(theta_base: ParameterVector, terms: Sequence[tuple[float, TaskVector]]) -> ParameterVector:
    """theta_base + sum(lam * tau), terms accumulated in provenance order."""
    for _, tau in terms:
        _check(theta_base.base_fingerprint, tau.layout_fingerprint)
    ordered = sorted(terms, key=lambda t: (t[1].provenance, t[0]))
    parts = [theta_base.values]
    for lam, tau in ordered:
        parts += tau.parts(lam)
    return theta_base.with_values(compensated_sum(parts)[0])


def combine(terms: Sequence[tuple[float, TaskVector]], delta: str) -> TaskVector:
    if not terms:
        raise ValueError("combine needs at least one term")
    fp = terms[0][1].layout_fingerprint
    for _, t in terms:
        _check(fp, t.layout_fingerprint)
    parts = []
    for lam, t in terms:
        parts += t.parts(lam)
    hi, lo = compensated_sum(parts)
    first = terms[0][1]
    return TaskVector(hi, fp, first.base_id, "+".join(t.finetuned_id for _, t in terms),
                      delta, first.layout, lo)


def explainability_vector(theta_ft_star: ParameterVector, theta_ft: ParameterVector,
                          roles: tuple[str, str] = ("ft*", "ft"),
                          star_id: str | None = None, ft_id: str | None = None) -> TaskVector:
    """theta_ft* - theta_ft for one domain."""
    if tuple(roles) != ("ft*", "ft"):
        raise ContractError(f"explainability vector needs roles (ft*, ft), got {roles}")
    return task_vector(theta_ft_star, theta_ft, ft_id=star_id, base_id=ft_id, delta="ft*-ft")


def analogy(tau_c: TaskVector, tau_a: TaskVector, tau_b: TaskVector) -> TaskVector:
    """tau_c - tau_a + tau_b."""
    _check(tau_c.layout_fingerprint, tau_a.layout_fingerprint)
    _check(tau_c.layout_fingerprint, tau_b.layout_fingerprint)
    hi, lo = compensated_sum(tau_c.parts() + tau_a.parts(-1.0) + tau_b.parts())
    return TaskVector(hi, tau_c.layout_fingerprint, tau_c.base_id,
                      f"{tau_c.finetuned_id}-{tau_a.finetuned_id}+{tau_b.finetuned_id}",
                      "analogy", tau_c.layout, lo)


def transfer(theta_base: ParameterVector, tau_target_ft: TaskVector, tau_source_star: TaskVector,
             cfg: TransferConfig = TransferConfig()) -> ParameterVector:
    """theta_base + lambda1 * tau_target_ft + lambda2 * tau_source_star."""
    if tau_source_star.delta != "ft*-ft":
        raise ContractError(f"source vector has provenance {tau_source_star.delta!r}, need ft*-ft")
    _check(theta_base.base_fingerprint, tau_target_ft.layout_fingerprint)
    _check(theta_base.base_fingerprint, tau_source_star.layout_fingerprint)
    parts = [theta_base.values] + tau_target_ft.parts(cfg.lambda1)
    if cfg.lambda2 != 0.0:
        parts += tau_source_star.parts(cfg.lambda2)
    return theta_base.with_values(compensated_sum(parts)[0])


def cosine_similarity(a: TaskVector, b: TaskVector) -> float:
    _check(a.layout_fingerprint, b.layout_fingerprint)
    na, nb = np.linalg.norm(a.values), np.linalg.norm(b.values)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero task vector")
    return float(np.clip(np.dot(a.values / na, b.values / nb), -1.0, 1.0))
