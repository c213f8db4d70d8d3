"""Self-explaining ViT classifier with a frozen class-embedding head.

The feature extractor turns an image into M+1 token features ([CLS] first).
The head ``W`` (K x C) is applied to every token: the [CLS] row gives the
logits and patch row ``m`` gives the attributions of patch ``m`` for every
class.  ``W`` is never part of the trainable parameter vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .seeding import array_digest, derive_seed, digest


class CompatibilityError(ValueError):
    """Parameter layouts or fingerprints do not line up."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        for f in ("image_size", "patch_size", "channels", "embed_dim", "num_layers",
                  "num_heads", "mlp_ratio"):
            if getattr(self, f) <= 0:
                raise ConfigurationError(f"{f} must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        K, M = self.embed_dim, self.num_patches
        H = self.mlp_ratio * K
        shapes = {
            "cls_token": (1, K),
            "pos_embed": (M + 1, K),
            "patch_embed.w": (self.patch_dim, K),
            "patch_embed.b": (K,),
            "ln_final.g": (K,),
            "ln_final.b": (K,),
        }
        for i in range(self.num_layers):
            p = f"blocks.{i}."
            shapes.update({
                p + "ln1.g": (K,), p + "ln1.b": (K,),
                p + "attn.qkv.w": (K, 3 * K), p + "attn.qkv.b": (3 * K,),
                p + "attn.proj.w": (K, K), p + "attn.proj.b": (K,),
                p + "ln2.g": (K,), p + "ln2.b": (K,),
                p + "mlp.fc1.w": (K, H), p + "mlp.fc1.b": (H,),
                p + "mlp.fc2.w": (H, K), p + "mlp.fc2.b": (K,),
            })
        return shapes


# flat parameter vectors -----------------------------------------------------

Layout = tuple[tuple[str, tuple[int, ...], int], ...]


def make_layout(shapes: Mapping[str, Sequence[int]]) -> Layout:
    out, off = [], 0
    for name in sorted(shapes):
        shp = tuple(int(d) for d in shapes[name])
        out.append((name, shp, off))
        off += int(np.prod(shp))
    return tuple(out)


def layout_fingerprint(layout: Layout) -> str:
    text = "\n".join(f"{n}:{'x'.join(map(str, s))}@{o}" for n, s, o in layout)
    return digest(text.encode("utf-8"))


@dataclass(frozen=True, eq=False)
class ParameterVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        n = sum(int(np.prod(s)) for _, s, _ in self.layout)
        off = 0
        for _, s, o in self.layout:
            if o != off:
                raise CompatibilityError("layout offsets are not contiguous")
            off += int(np.prod(s))
        if v.shape != (n,):
            raise CompatibilityError(f"values of shape {v.shape} do not cover layout of size {n}")

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def base_fingerprint(self) -> str:
        return layout_fingerprint(self.layout)

    @property
    def content_fingerprint(self) -> str:
        return digest(self.base_fingerprint.encode(), array_digest(self.values).encode())

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=np.float64), self.layout)

    def check_compatible(self, other: "ParameterVector") -> None:
        if self.layout != other.layout:
            raise CompatibilityError(
                f"layout fingerprints differ: {self.base_fingerprint} vs {other.base_fingerprint}")


def flatten(named: Mapping[str, np.ndarray]) -> ParameterVector:
    layout = make_layout({k: np.shape(v) for k, v in named.items()})
    values = np.concatenate([np.asarray(named[n], dtype=np.float64).reshape(-1)
                             for n, _, _ in layout]) if layout else np.zeros(0)
    return ParameterVector(values, layout)


def unflatten(theta: ParameterVector, expected: Layout | None = None) -> dict[str, np.ndarray]:
    if expected is not None and layout_fingerprint(expected) != theta.base_fingerprint:
        raise CompatibilityError(
            f"layout fingerprint {theta.base_fingerprint} != expected {layout_fingerprint(expected)}")
    out = {}
    for name, shp, off in theta.layout:
        out[name] = theta.values[off:off + int(np.prod(shp))].reshape(shp)
    return out


def init_parameters(cfg: ModelConfig) -> ParameterVector:
    rng = np.random.default_rng(derive_seed("init", cfg.seed))
    named = {}
    for name, shp in sorted(cfg.parameter_shapes().items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            named[name] = np.ones(shp)
        elif leaf == "b":
            named[name] = np.zeros(shp)
        else:
            named[name] = rng.normal(0.0, 0.02, size=shp)
    return flatten(named)


def config_layout(cfg: ModelConfig) -> Layout:
    return make_layout(cfg.parameter_shapes())


# head -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HeadMatrix:
    W: np.ndarray
    class_names: tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0]

    def subset(self, names: Sequence[str]) -> "HeadMatrix":
        idx = [self.class_names.index(n) for n in names]
        return HeadMatrix(self.W[:, idx].copy(), tuple(names))


def class_embedding(name: str, K: int, registry_seed: int) -> np.ndarray:
    v = np.random.default_rng(derive_seed("class-embedding", registry_seed, name)).normal(size=K)
    return v / np.linalg.norm(v)


def make_head(class_names: Sequence[str], K: int, registry_seed: int = 0) -> HeadMatrix:
    names = tuple(class_names)
    if not names:
        raise ConfigurationError("head needs at least one class name")
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ConfigurationError(f"duplicate class names: {dup}")
    W = np.stack([class_embedding(n, K, registry_seed) for n in names], axis=1)
    return HeadMatrix(W, names)


# forward --------------------------------------------------------------------

@dataclass
class SelfExplainingOutput:
    logits: np.ndarray        # (C,) or (B, C)
    attributions: np.ndarray  # (M, C) or (B, M, C)


def patchify(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, ch, H, W) -> (B, M, ch*p*p), patches in row-major grid order."""
    B = x.shape[0]
    g, p = cfg.grid, cfg.patch_size
    y = x.reshape(B, cfg.channels, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return y.reshape(B, g * g, cfg.patch_dim)


def _check_geometry(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != want:
        raise DimensionError(f"image shape {x.shape} does not match model geometry {want}")
    return x


def _linear(h: Tensor, params, name: str) -> Tensor:
    return nx.add(nx.matmul(h, params[name + ".w"]), params[name + ".b"])


def _attention(h: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    B, T, K = h.shape
    nh = cfg.num_heads
    d = K // nh
    qkv = _linear(h, params, prefix + "attn.qkv")
    qkv = nx.transpose(nx.reshape(qkv, (B, T, 3, nh, d)), (2, 0, 3, 1, 4))
    q = nx.reshape(nx.slice_axis(qkv, 0, 0, 1), (B, nh, T, d))
    k = nx.reshape(nx.slice_axis(qkv, 0, 1, 2), (B, nh, T, d))
    v = nx.reshape(nx.slice_axis(qkv, 0, 2, 3), (B, nh, T, d))
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    ctx = nx.matmul(nx.softmax(scores, axis=-1), v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (B, T, K))
    return _linear(ctx, params, prefix + "attn.proj")


def features(params: Mapping[str, Tensor], x: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Token features (B, M+1, K) after the final layer norm."""
    B = x.shape[0]
    K = cfg.embed_dim
    tok = _linear(Tensor(patchify(x, cfg)), params, "patch_embed")
    cls = nx.broadcast_to(nx.reshape(params["cls_token"], (1, 1, K)), (B, 1, K))
    h = nx.add(nx.concat([cls, tok], axis=1), params["pos_embed"])
    for i in range(cfg.num_layers):
        p = f"blocks.{i}."
        a = nx.layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
        h = nx.add(h, _attention(a, params, p, cfg))
        m = nx.layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        m = _linear(nx.gelu(_linear(m, params, p + "mlp.fc1")), params, p + "mlp.fc2")
        h = nx.add(h, m)
    return nx.layer_norm(h, params["ln_final.g"], params["ln_final.b"], cfg.ln_eps)


def head_outputs(params: Mapping[str, Tensor], W: np.ndarray, x: np.ndarray,
                 cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Differentiable (logits (B, C), attributions (B, M, C)) from one pass."""
    out = nx.matmul(features(params, x, cfg), Tensor(W))
    logits = nx.reshape(nx.slice_axis(out, 1, 0, 1), (out.shape[0], out.shape[2]))
    return logits, nx.slice_axis(out, 1, 1, out.shape[1])


def param_tensors(theta: ParameterVector, cfg: ModelConfig,
                  requires_grad: bool = False) -> dict[str, Tensor]:
    named = unflatten(theta, config_layout(cfg))
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in named.items()}


def forward(theta: ParameterVector, head: HeadMatrix, x: np.ndarray, cfg: ModelConfig,
            batch_size: int = 4096) -> SelfExplainingOutput:
    """Logits and patch attributions for one image (C,H,W) or a batch (B,C,H,W)."""
    single = np.ndim(x) == 3
    xb = _check_geometry(x, cfg)
    if head.embed_dim != cfg.embed_dim:
        raise DimensionError(f"head K={head.embed_dim} but model K={cfg.embed_dim}")
    params = param_tensors(theta, cfg)
    logits, attrs = [], []
    for s in range(0, xb.shape[0], batch_size):
        lg, at = head_outputs(params, head.W, xb[s:s + batch_size], cfg)
        logits.append(lg.data)
        attrs.append(at.data)
    L = np.concatenate(logits) if logits else np.zeros((0, head.num_classes))
    A = np.concatenate(attrs) if attrs else np.zeros((0, cfg.num_patches, head.num_classes))
    if not (np.isfinite(L).all() and np.isfinite(A).all()):
        raise FloatingPointError("forward produced non-finite outputs")
    if single:
        return SelfExplainingOutput(L[0], A[0])
    return SelfExplainingOutput(L, A)


def predict_class(output: SelfExplainingOutput | np.ndarray) -> int | np.ndarray:
    """argmax of the logits; ``np.argmax`` already breaks ties by lowest index."""
    logits = output.logits if isinstance(output, SelfExplainingOutput) else np.asarray(output)
    if logits.ndim == 1:
        return int(np.argmax(logits))
    return np.argmax(logits, axis=-1)
