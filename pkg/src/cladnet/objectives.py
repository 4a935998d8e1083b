"""Self-supervised objectives and the label-free transformer update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .augment import AugmentSpec, two_views
from .autograd import GradTape, Tensor
from .modules import Module
from .optim import Adam
from .sslnet import CrossAttentionTransformer

SSL_LOSSES = ("barlow_twins", "ntxent", "byol")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class SSLConfig:
    loss: str = "barlow_twins"
    lambda_bt: float = 1.0
    temperature: float = 0.5
    momentum: float = 0.99
    epochs: int = 50
    lr: float = 1e-3
    augmentation: AugmentSpec = AugmentSpec()

    def __post_init__(self):
        if self.loss not in SSL_LOSSES:
            raise ValueError(f"unknown ssl loss {self.loss!r}; choose from {SSL_LOSSES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lambda_bt < 0:
            raise ValueError("lambda_bt must be >= 0")


def _check_views(r1: Tensor, r2: Tensor) -> None:
    if r1.shape != r2.shape or r1.ndim != 2:
        raise ValueError(f"views must be equal [B, D] matrices, got {r1.shape} and {r2.shape}")
    if r1.shape[0] < 2:
        raise ValueError("need a batch of at least 2 windows")


def cross_correlation(r1, r2, eps: float = NORM_EPS) -> Tensor:
    """``C_ij = sum_b r1[b,i] r2[b,j] / (||r1[:,i]|| ||r2[:,j]||)`` with eps-guarded norms."""
    r1, r2 = ag.as_tensor(r1), ag.as_tensor(r2)
    _check_views(r1, r2)
    num = ag.matmul(ag.transpose(r1), r2)
    n1 = ag.sqrt(ag.tsum(r1 * r1, axis=0) + eps)
    n2 = ag.sqrt(ag.tsum(r2 * r2, axis=0) + eps)
    return num / (ag.reshape(n1, (-1, 1)) * ag.reshape(n2, (1, -1)))


def barlow_twins_loss(r1, r2, lambda_bt: float = 1.0) -> Tensor:
    c = cross_correlation(r1, r2)
    eye = np.eye(c.shape[0], dtype=c.dtype)
    diag = ag.tsum(c * eye, axis=1)
    on = ag.tsum((1.0 - diag) ** 2)
    off = ag.tsum(c * c * (1.0 - eye))
    return on + lambda_bt * off


def _normalize_rows(z: Tensor) -> Tensor:
    return z / ag.sqrt(ag.tsum(z * z, axis=1, keepdims=True) + NORM_EPS)


def ntxent_loss(r1, r2, temperature: float = 0.5) -> Tensor:
    """NT-Xent over the ``2B`` rows; the positive of row ``i`` is its other view."""
    r1, r2 = ag.as_tensor(r1), ag.as_tensor(r2)
    _check_views(r1, r2)
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    b = r1.shape[0]
    z = _normalize_rows(ag.concat([r1, r2], axis=0))
    sim = ag.matmul(z, ag.transpose(z)) * (1.0 / temperature)
    sim = sim + np.eye(2 * b) * -1e9
    logp = ag.log_softmax(sim, axis=1)
    rows = np.arange(2 * b)
    pos = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    return -ag.mean(logp[rows, pos])


# ---------------------------------------------------------------------- BYOL


class Predictor(Module):
    def __init__(self, d_model: int, rng: np.random.Generator | None = None, identity: bool = False, dtype=np.float64):
        super().__init__()
        if identity or rng is None:
            w = np.eye(d_model, dtype=dtype)
        else:
            w = (np.eye(d_model) + rng.normal(scale=0.1 / np.sqrt(d_model), size=(d_model, d_model))).astype(dtype)
        self.add_param("weight", w)
        self.add_param("bias", np.zeros(d_model, dtype))

    def __call__(self, r):
        return ag.matmul(r, self.params["weight"]) + self.params["bias"]


def _byol_term(p: Tensor, t: np.ndarray) -> Tensor:
    diff = _normalize_rows(p) - _normalize_rows(Tensor(t))
    return ag.mean(ag.tsum(diff * diff, axis=1))


def byol_loss(online, predictor: Predictor, target, v1, v2, train: bool = False, rng=None) -> Tensor:
    """Symmetrized squared distance between normalized predictions and target projections."""
    with ag.no_grad():
        t1 = target.forward(v1).data
        t2 = target.forward(v2).data
    p1 = predictor(online.forward(v1, train, rng))
    p2 = predictor(online.forward(v2, train, rng))
    return _byol_term(p1, t2) + _byol_term(p2, t1)


def momentum_update(target: Module, online: Module, momentum: float) -> Module:
    for k, t in target.params.items():
        t.data = momentum * t.data + (1.0 - momentum) * online.params[k].data
    return target


class BYOLState:
    def __init__(self, online: CrossAttentionTransformer, rng: np.random.Generator, momentum: float = 0.99):
        self.momentum = momentum
        self.predictor = Predictor(online.d_model, rng, dtype=online.dtype)
        self.target = online.clone()
        for p in self.target.params.values():
            p.requires_grad = False


def byol_step(online, state: BYOLState, views, optimizer: Adam, train: bool = True, rng=None):
    """One optimizer step on online + predictor, then the momentum update; returns ``(loss, target)``."""
    v1, v2 = views
    with GradTape() as tape:
        loss = byol_loss(online, state.predictor, state.target, v1, v2, train, rng)
    grads = tape.backward(loss)
    optimizer.step(grads)
    momentum_update(state.target, online, state.momentum)
    return loss.item(), state.target


# ---------------------------------------------------------------- train step


def ssl_loss(transformer, v1: np.ndarray, v2: np.ndarray, cfg: SSLConfig, train: bool, rng) -> Tensor:
    r1 = transformer.forward(v1, train, rng)
    r2 = transformer.forward(v2, train, rng)
    if cfg.loss == "barlow_twins":
        return barlow_twins_loss(r1, r2, cfg.lambda_bt)
    if cfg.loss == "ntxent":
        return ntxent_loss(r1, r2, cfg.temperature)
    raise ValueError(f"ssl_loss does not handle {cfg.loss!r}")


def make_ssl_optimizer(transformer, cfg: SSLConfig, rng: np.random.Generator):
    """Adam over the transformer (and the BYOL predictor when needed)."""
    byol = None
    params = dict(transformer.params)
    if cfg.loss == "byol":
        byol = BYOLState(transformer, rng, cfg.momentum)
        params.update({f"predictor.{k}": v for k, v in byol.predictor.params.items()})
    return Adam(params, lr=cfg.lr), byol


def ssl_train_step(
    X: np.ndarray,
    transformer: CrossAttentionTransformer,
    cfg: SSLConfig,
    optimizer: Adam,
    rng: np.random.Generator,
    byol: BYOLState | None = None,
) -> float:
    """Augment twice, forward both views, update the transformer; returns the pre-update loss.

    Only window data reaches this function.
    """
    if len(X) < 2:
        raise ValueError("ssl_train_step needs a batch of at least 2 windows")
    aug_rng, drop_rng = rng.spawn(2)
    v1, v2 = two_views(X, cfg.augmentation, aug_rng)
    if cfg.loss == "byol":
        if byol is None:
            raise ValueError("byol loss needs a BYOLState")
        loss, _ = byol_step(transformer, byol, (v1, v2), optimizer, True, drop_rng)
        return loss
    with GradTape() as tape:
        loss = ssl_loss(transformer, v1, v2, cfg, True, drop_rng)
    grads = tape.backward(loss)
    optimizer.step(grads)
    return loss.item()
