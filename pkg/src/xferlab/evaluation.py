"""Accuracy, E-RMSE, IoU@K, infidelity, normalisation and Pearson analyses."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .data import Dataset
from .model import HeadMatrix, ModelConfig, ParameterVector, forward, predict_class
from .numerics import ContractError
from .seeding import rng_for
from .shapley import Game

METRICS = ("accuracy", "e_rmse", "iou_at_1", "iou_at_10", "infidelity")


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class InfidelityConfig:
    draws: int = 32
    drop_prob: float = 0.25
    seed: int = 0


@dataclass
class MetricsReport:
    accuracy: float
    e_rmse: float
    iou_at_1: float
    iou_at_10: float
    infidelity: float
    n: int
    model: str
    dataset: str

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class CorrelationResult:
    r: float
    p: float
    n: int


# per-sample metrics -----------------------------------------------------------

def top_k(phi: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the lower index."""
    order = np.lexsort((np.arange(phi.size), -np.asarray(phi)))
    return order[:k]


def iou_at_k(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if not 1 <= k <= pred.size:
        raise ValueError(f"K={k} outside [1, {pred.size}]")
    a, b = set(top_k(pred, k).tolist()), set(top_k(truth, k).tolist())
    return len(a & b) / len(a | b)


def infidelity_game(game, phi_hat: np.ndarray, M: int, cfg: InfidelityConfig) -> float:
    """Mean of (sum of phi over dropped patches - logit drop)^2 over random drops."""
    rng = rng_for("infidelity", cfg.seed)
    dropped = rng.random((cfg.draws, M)) < cfg.drop_prob
    vals = game(np.vstack([np.ones((1, M), bool), ~dropped]))
    full, kept = vals[0], vals[1:]
    pred = dropped.astype(np.float64) @ np.asarray(phi_hat, dtype=np.float64)
    return float(np.mean((pred - (full - kept)) ** 2))


def infidelity(theta, head, x, y, phi_hat, baseline, cfg: ModelConfig,
               icfg: InfidelityConfig = InfidelityConfig()) -> float:
    return infidelity_game(Game(theta, head, x, y, baseline, cfg), phi_hat,
                           cfg.num_patches, icfg)


def accuracy(theta, head, dataset: Dataset, cfg: ModelConfig) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset")
    out = forward(theta, head, dataset.pixels(), cfg)
    return float(np.mean(predict_class(out.logits) == dataset.labels()))


def e_rmse_from(attributions: np.ndarray, labels: np.ndarray, phi: np.ndarray) -> float:
    picked = attributions[np.arange(len(labels)), :, labels]
    return math.sqrt(float(np.mean(np.sum((picked - phi) ** 2, axis=1))))


def e_rmse(theta, head, dataset: Dataset, cfg: ModelConfig) -> float:
    phi, mask = dataset.phi_matrix()
    if not mask.all():
        raise ContractError(f"{dataset.dataset_id}: {int((~mask).sum())} samples lack phi")
    out = forward(theta, head, dataset.pixels(), cfg)
    return e_rmse_from(out.attributions, dataset.labels(), phi)


def evaluate(theta: ParameterVector, head: HeadMatrix, dataset: Dataset, cfg: ModelConfig,
             baseline: np.ndarray, icfg: InfidelityConfig = InfidelityConfig(),
             model_id: str = "") -> MetricsReport:
    """All metrics on the explained subset (accuracy over every sample)."""
    x, y = dataset.pixels(), dataset.labels()
    out = forward(theta, head, x, cfg)
    acc = float(np.mean(predict_class(out.logits) == y))
    phi, mask = dataset.phi_matrix()
    if not mask.any():
        raise ContractError(f"{dataset.dataset_id} has no explained samples")
    rows = np.flatnonzero(mask)
    A = out.attributions[rows]
    yr = y[rows]
    picked = A[np.arange(rows.size), :, yr]
    M = cfg.num_patches
    iou1 = np.mean([iou_at_k(picked[i], phi[r], 1) for i, r in enumerate(rows)])
    k10 = min(10, M)
    iou10 = np.mean([iou_at_k(picked[i], phi[r], k10) for i, r in enumerate(rows)])
    infid = np.mean([infidelity(theta, head, x[r], int(y[r]), picked[i], baseline, cfg,
                                InfidelityConfig(icfg.draws, icfg.drop_prob,
                                                 hash_seed(icfg.seed, dataset.images[r].id)))
                     for i, r in enumerate(rows)])
    return MetricsReport(acc, e_rmse_from(A, yr, phi[rows]), float(iou1), float(iou10),
                         float(infid), int(rows.size), model_id or theta.content_fingerprint,
                         dataset.dataset_id)


def hash_seed(*parts) -> int:
    from .seeding import derive_seed
    return derive_seed(*parts)


# normalisation --------------------------------------------------------------

def normalized_report(report: MetricsReport, reference: MetricsReport) -> MetricsReport:
    if report.dataset != reference.dataset:
        raise ValueError(f"reports on different datasets: {report.dataset} vs {reference.dataset}")
    vals = {}
    for m in METRICS:
        ref = getattr(reference, m)
        if ref == 0:
            raise UndefinedMetricError(f"reference {m} is zero")
        vals[m] = getattr(report, m) / ref
    return MetricsReport(n=report.n, model=report.model, dataset=report.dataset, **vals)


# correlation ----------------------------------------------------------------

def pearson(xs: Sequence[float], ys: Sequence[float]) -> CorrelationResult:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    n = x.size
    if n < 3 or y.size != n:
        raise ValueError(f"pearson needs >= 3 paired values, got {n} and {y.size}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("zero variance: correlation undefined")
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    if abs(r) == 1.0:
        return CorrelationResult(r, 0.0, n)
    t2 = r * r * df / (1.0 - r * r)
    # two-sided tail of Student t: I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(0.5 * df, 0.5, df / (df + t2)))
    return CorrelationResult(r, min(max(p, 0.0), 1.0), n)


# tables ---------------------------------------------------------------------

def write_csv(rows: Iterable[dict], columns: Sequence[str], sep: str = ",") -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), delimiter=sep, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r[c]) for c in columns})
    return buf.getvalue()


def read_csv(text: str, sep: str = ",") -> list[dict[str, str]]:
    return list(csv.DictReader(io.StringIO(text), delimiter=sep))


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return str(v)


REPORT_COLUMNS = tuple(f.name for f in fields(MetricsReport))


def report_row(report: MetricsReport, **extra) -> dict:
    row = asdict(report)
    row.update(extra)
    return row


def mean_interval(values: Sequence[float]) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if v.size < 2:
        return m, m, m
    half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return m, m - half, m + half


def warn(msg: str) -> None:
    warnings.warn(msg, RuntimeWarning, stacklevel=2)
