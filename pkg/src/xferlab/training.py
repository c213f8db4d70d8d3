"""Training under L_alpha = alpha * CE + (1 - alpha) * explanation loss."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Dataset
from .model import HeadMatrix, ModelConfig, ParameterVector, head_outputs, param_tensors
from .numerics import ContractError, Tape, Tensor
from .seeding import rng_for

log = logging.getLogger(__name__)

ROLES = ("base", "ft", "ft*")


class NumericFailure(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 3e-4
    epochs: int = 30
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs >= 0")


@dataclass
class TrainedArtifact:
    theta: ParameterVector
    config: TrainConfig
    role: str
    base_fingerprint: str
    losses: list[float] = field(default_factory=list)
    dataset_id: str = ""

    @property
    def fingerprint(self) -> str:
        return self.theta.content_fingerprint

    def snapshot(self) -> dict[str, str]:
        out = {k: repr(v) for k, v in asdict(self.config).items()}
        out.update(role=self.role, base_fingerprint=self.base_fingerprint,
                   dataset_id=self.dataset_id, fingerprint=self.fingerprint,
                   final_loss=repr(self.losses[-1]) if self.losses else "nan")
        return out


def role_for_alpha(alpha: float) -> str:
    return "ft" if alpha == 1.0 else "ft*"


# losses ----------------------------------------------------------------------

def explanation_loss(attributions, labels, phi) -> Tensor:
    """Mean over samples of ||Phi[:, y] - phi||^2 using only the label column."""
    attributions = attributions if isinstance(attributions, Tensor) else Tensor(attributions)
    labels = np.asarray(labels, dtype=np.int64)
    if phi is None:
        raise ContractError("explanation loss requested without supervision")
    phi = np.asarray(phi, dtype=np.float64)
    picked = nx.take_columns(attributions, labels)
    if picked.shape != phi.shape:
        raise nx.DimensionError(f"attributions {picked.shape} vs supervision {phi.shape}")
    return nx.mul(nx.total(nx.square(nx.sub(picked, phi))), 1.0 / phi.shape[0])


def loss_alpha(logits: Tensor, attributions: Tensor, labels, phi, alpha: float,
               phi_mask=None) -> Tensor:
    """alpha * CE + (1 - alpha) * L_exp; L_exp averages over rows where ``phi_mask`` holds."""
    labels = np.asarray(labels, dtype=np.int64)
    terms = []
    if alpha > 0.0:
        terms.append(nx.mul(nx.cross_entropy(logits, labels), alpha))
    if alpha < 1.0:
        if phi is None:
            raise ContractError(f"alpha={alpha} < 1 needs explanation supervision")
        if phi_mask is None:
            phi_mask = np.ones(len(labels), dtype=bool)
        rows = np.flatnonzero(phi_mask)
        if rows.size:
            sel = attributions if rows.size == len(labels) else _rows(attributions, rows)
            terms.append(nx.mul(explanation_loss(sel, labels[rows], np.asarray(phi)[rows]),
                                1.0 - alpha))
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


def _rows(t: Tensor, rows: np.ndarray) -> Tensor:
    parts = [nx.slice_axis(t, 0, int(r), int(r) + 1) for r in rows]
    return parts[0] if len(parts) == 1 else nx.concat(parts, axis=0)


def batch_loss_and_grad(theta: ParameterVector, head: HeadMatrix, x: np.ndarray, y, phi,
                        alpha: float, cfg: ModelConfig, phi_mask=None):
    """Loss value and flat gradient (in layout order) for one batch."""
    params = param_tensors(theta, cfg, requires_grad=True)
    with Tape() as tape:
        logits, attrs = head_outputs(params, head.W, x, cfg)
        loss = loss_alpha(logits, attrs, y, phi, alpha, phi_mask)
    if loss.requires_grad:
        tape.backward(loss)
    grad = np.concatenate([
        (params[n].grad if params[n].grad is not None else np.zeros(s)).reshape(-1)
        for n, s, _ in theta.layout])
    return loss.item(), grad


# optimisation ----------------------------------------------------------------

class AdamW:
    def __init__(self, size: int, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        values = values * (1.0 - c.learning_rate * c.weight_decay)
        return values - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grad
    n = float(np.linalg.norm(grad))
    return grad * (max_norm / n) if n > max_norm else grad


def finetune(theta_init: ParameterVector, dataset: Dataset, head: HeadMatrix,
             cfg: TrainConfig, model_cfg: ModelConfig, role: str | None = None,
             base_fingerprint: str | None = None) -> TrainedArtifact:
    if tuple(head.class_names) != tuple(dataset.class_names):
        raise ContractError("head classes do not match the dataset label space")
    x_all, y_all = dataset.pixels(), dataset.labels()
    phi_all, mask_all = dataset.phi_matrix()
    if cfg.alpha < 1.0 and not mask_all.any():
        raise ContractError(f"alpha={cfg.alpha} run on {dataset.dataset_id} without supervision")
    W_before = head.W.copy()
    theta = theta_init
    opt = AdamW(theta.size, cfg)
    losses: list[float] = []
    n = len(dataset)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_for("batches", cfg.seed, epoch).permutation(n)
        epoch_loss, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                loss, grad = batch_loss_and_grad(theta, head, x_all[idx], y_all[idx], phi_all[idx],
                                                 cfg.alpha, model_cfg, mask_all[idx])
            except FloatingPointError as exc:
                raise NumericFailure(f"{exc} at step {step} (lr={cfg.learning_rate})") from exc
            if not np.isfinite(loss) or not np.isfinite(grad).all():
                raise NumericFailure(f"non-finite loss at step {step} (lr={cfg.learning_rate})")
            grad = clip_by_norm(grad, cfg.grad_clip_norm)
            theta = theta.with_values(opt.step(theta.values, grad))
            epoch_loss += loss * len(idx)
            seen += len(idx)
            step += 1
        losses.append(epoch_loss / max(seen, 1))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    if not np.array_equal(W_before, head.W):
        raise ContractError("head matrix changed during training")
    return TrainedArtifact(theta, cfg, role or role_for_alpha(cfg.alpha),
                           base_fingerprint or theta_init.content_fingerprint,
                           losses, dataset.dataset_id)


def pretrain(model_cfg: ModelConfig, mixture: Dataset, head: HeadMatrix,
             cfg: TrainConfig, theta_init: ParameterVector | None = None) -> TrainedArtifact:
    from .model import init_parameters
    if cfg.alpha != 1.0:
        raise ContractError("pretraining is classification-only (alpha = 1)")
    theta0 = theta_init if theta_init is not None else init_parameters(model_cfg)
    art = finetune(theta0, mixture, head, cfg, model_cfg, role="base",
                   base_fingerprint=theta0.content_fingerprint)
    art.base_fingerprint = art.fingerprint
    return art


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")
