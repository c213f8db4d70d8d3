"""Patch-level Shapley values for the class-``c`` logit.

Two estimators over the same coalition game: brute-force enumeration (the
oracle) and Kernel SHAP, a weighted least-squares fit with the efficiency
constraint eliminated analytically.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from math import comb, factorial
from typing import Callable, Sequence

import numpy as np

from .model import HeadMatrix, ModelConfig, ParameterVector, forward, patchify
from .seeding import rng_for

MAX_EXACT_PATCHES = 20
BASELINES = ("mean", "zeros", "blur")


class EnumerationLimitError(ValueError):
    pass


@dataclass(frozen=True)
class ShapConfig:
    P: int = 200
    baseline: str = "mean"
    seed: int = 0

    def validate(self, M: int) -> None:
        if self.P < 1:
            raise ValueError("perturbation count must be positive")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline policy {self.baseline!r}")
        if self.P < M + 2:
            warnings.warn(f"P={self.P} < M+2={M + 2}: regression is underdetermined, "
                          "ridge fallback will be used", RuntimeWarning, stacklevel=3)


# masking ---------------------------------------------------------------------

def unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    B = patches.shape[0]
    g, p, ch = cfg.grid, cfg.patch_size, cfg.channels
    y = patches.reshape(B, g, g, ch, p, p).transpose(0, 3, 1, 4, 2, 5)
    return y.reshape(B, ch, g * p, g * p)


def mask_apply(x: np.ndarray, mask: np.ndarray, baseline: np.ndarray,
               cfg: ModelConfig) -> np.ndarray:
    """Compose images from ``x`` (present patches) and ``baseline`` (absent ones).

    ``mask`` may be a single (M,) vector or a batch (n, M); the result has a
    matching leading axis.
    """
    mask = np.asarray(mask, dtype=bool)
    single = mask.ndim == 1
    masks = np.atleast_2d(mask)
    xp = patchify(np.asarray(x, dtype=np.float64)[None], cfg)[0]
    bp = patchify(np.asarray(baseline, dtype=np.float64)[None], cfg)[0]
    out = unpatchify(np.where(masks[:, :, None], xp[None], bp[None]), cfg)
    return out[0] if single else out


def make_baseline(images: np.ndarray, policy: str, cfg: ModelConfig) -> np.ndarray:
    """Baseline image for masked patches.

    ``mean`` is the dataset mean image (so each patch takes its per-position
    mean); ``blur`` replaces every patch of the mean image by its average.
    """
    images = np.asarray(images, dtype=np.float64)
    if policy == "zeros":
        return np.zeros(images.shape[1:])
    mean = images.mean(axis=0)
    if policy == "mean":
        return mean
    if policy == "blur":
        p = patchify(mean[None], cfg)[0]
        p = p.reshape(cfg.num_patches, cfg.channels, -1).mean(axis=2, keepdims=True)
        p = np.broadcast_to(p, (cfg.num_patches, cfg.channels, cfg.patch_size ** 2))
        return unpatchify(p.reshape(1, cfg.num_patches, -1), cfg)[0]
    raise ValueError(f"unknown baseline policy {policy!r}")


class Game:
    """Value function v(S) = class-c logit of the masked image."""

    def __init__(self, theta: ParameterVector, head: HeadMatrix, x: np.ndarray, c: int,
                 baseline: np.ndarray, cfg: ModelConfig, chunk: int = 2048):
        if not 0 <= c < head.num_classes:
            raise IndexError(f"class {c} outside {head.num_classes} classes")
        self.theta, self.head, self.x, self.c = theta, head, x, c
        self.baseline, self.cfg, self.chunk = baseline, cfg, chunk
        self.M = cfg.num_patches
        self.calls = 0

    def __call__(self, masks: np.ndarray) -> np.ndarray:
        masks = np.atleast_2d(np.asarray(masks, dtype=bool))
        out = np.empty(masks.shape[0])
        for s in range(0, masks.shape[0], self.chunk):
            imgs = mask_apply(self.x, masks[s:s + self.chunk], self.baseline, self.cfg)
            out[s:s + self.chunk] = forward(self.theta, self.head, imgs, self.cfg).logits[:, self.c]
        self.calls += masks.shape[0]
        return out


def value(theta, head, x, mask, baseline, c, cfg) -> float:
    return float(Game(theta, head, x, c, baseline, cfg)(np.asarray(mask)[None])[0])


# exact -----------------------------------------------------------------------

def all_masks(M: int) -> np.ndarray:
    """Every coalition as a boolean row; row ``i`` has bit ``m`` of ``i`` in column ``m``."""
    ids = np.arange(2 ** M, dtype=np.int64)
    return ((ids[:, None] >> np.arange(M)) & 1).astype(bool)


def shapley_from_table(v: np.ndarray, M: int) -> np.ndarray:
    """Shapley values from a full table ``v[i]`` indexed by coalition bitmask."""
    ids = np.arange(2 ** M, dtype=np.int64)
    sizes = np.zeros(2 ** M, dtype=np.int64)
    for m in range(M):
        sizes += (ids >> m) & 1
    w = np.array([factorial(s) * factorial(M - s - 1) / factorial(M) for s in range(M)])
    phi = np.empty(M)
    for m in range(M):
        without = ids[((ids >> m) & 1) == 0]
        phi[m] = np.dot(w[sizes[without]], v[without | (1 << m)] - v[without])
    return phi


def exact_game(v_fn: Callable[[np.ndarray], np.ndarray], M: int) -> np.ndarray:
    if M > MAX_EXACT_PATCHES:
        raise EnumerationLimitError(
            f"exact Shapley over M={M} patches needs 2^{M} evaluations; use kernel_shap")
    return shapley_from_table(v_fn(all_masks(M)), M)


def exact_shapley(theta, head, x, c, baseline, cfg: ModelConfig) -> np.ndarray:
    M = cfg.num_patches
    if M > MAX_EXACT_PATCHES:
        raise EnumerationLimitError(
            f"exact Shapley over M={M} patches needs 2^{M} evaluations; use kernel_shap")
    return exact_game(Game(theta, head, x, c, baseline, cfg), M)


# kernel SHAP -----------------------------------------------------------------

def kernel_weight(s: int, M: int) -> float:
    """SHAP kernel weight of one coalition of size ``s`` (infinite at 0 and M)."""
    if s <= 0 or s >= M:
        return float("inf")
    return (M - 1) / (comb(M, s) * s * (M - s))


def sample_coalitions(M: int, P: int, rng: np.random.Generator) -> np.ndarray:
    """P proper coalitions, sizes drawn with probability proportional to the total
    kernel mass ``comb(M, s) * kernel_weight(s)``, members uniform given the size."""
    sizes = np.arange(1, M)
    mass = (M - 1) / (sizes * (M - sizes))
    size_draw = rng.choice(sizes, size=P, p=mass / mass.sum())
    out = np.zeros((P, M), dtype=bool)
    for i, s in enumerate(size_draw):
        out[i, rng.choice(M, size=s, replace=False)] = True
    return out


def _canonical_order(masks: np.ndarray) -> np.ndarray:
    keys = masks.astype(np.int64) @ (1 << np.arange(masks.shape[1], dtype=np.int64))
    return np.argsort(keys, kind="stable")


def constrained_wls(masks: np.ndarray, y: np.ndarray, weights: np.ndarray,
                    total: float) -> np.ndarray:
    """min Σ w (y - z·φ)² subject to Σφ = total, last coordinate eliminated."""
    Z = masks.astype(np.float64)
    M = Z.shape[1]
    A = Z[:, :-1] - Z[:, -1:]
    b = y - Z[:, -1] * total
    Aw = A * weights[:, None]
    N = Aw.T @ A
    r = Aw.T @ b
    if np.linalg.matrix_rank(N) < M - 1:
        warnings.warn("singular normal equations in kernel SHAP; adding ridge 1e-10",
                      RuntimeWarning, stacklevel=2)
        N = N + 1e-10 * np.eye(M - 1)
    head = np.linalg.solve(N, r)
    return np.append(head, total - head.sum())


def kernel_shap_game(v_fn: Callable[[np.ndarray], np.ndarray], M: int, P: int,
                     rng: np.random.Generator | None = None,
                     enumerate_all: bool = False) -> np.ndarray:
    """Kernel SHAP on an arbitrary coalition game ``v_fn(masks) -> values``.

    With ``enumerate_all`` (or P covering every proper coalition) each proper
    coalition enters once with its kernel weight; otherwise P coalitions are
    sampled from the kernel distribution and weighted uniformly, which is the
    kernel weight divided by the sampling probability up to a constant.
    """
    n_proper = 2 ** M - 2
    if enumerate_all or P >= n_proper:
        masks = all_masks(M)[1:-1]
        weights = np.array([kernel_weight(int(s), M) for s in masks.sum(axis=1)])
    else:
        masks = sample_coalitions(M, P, rng)
        weights = np.ones(P)
    order = _canonical_order(masks)
    masks, weights = masks[order], weights[order]
    ends = v_fn(np.vstack([np.zeros((1, M), bool), np.ones((1, M), bool), masks]))
    v_empty, v_full, v = ends[0], ends[1], ends[2:]
    return constrained_wls(masks, v - v_empty, weights, v_full - v_empty)


def kernel_shap(theta, head, x, c, baseline, cfg: ModelConfig, shap: ShapConfig,
                enumerate_all: bool = False) -> np.ndarray:
    M = cfg.num_patches
    shap.validate(M)
    rng = rng_for("kernel-shap", shap.seed)
    return kernel_shap_game(Game(theta, head, x, c, baseline, cfg), M, shap.P, rng,
                            enumerate_all=enumerate_all)


def budget_curve(phi_of_budget: Callable[[int, int], np.ndarray], truths: Sequence[np.ndarray],
                 budgets: Sequence[int], metric: Callable[[np.ndarray, np.ndarray], float]):
    """Rows ``(P, mean, lo, hi, n)`` with a 95% normal-approximation interval.

    ``phi_of_budget(P, i)`` returns the estimate for sample ``i`` at budget P.
    """
    rows = []
    for P in budgets:
        scores = np.array([metric(phi_of_budget(P, i), t) for i, t in enumerate(truths)])
        m = float(scores.mean())
        half = 1.96 * float(scores.std(ddof=1)) / np.sqrt(len(scores)) if len(scores) > 1 else 0.0
        rows.append((int(P), m, float(m - half), float(m + half), len(scores)))
    return rows
