"""Residual 1-D CNN, fusion with the transformer representation, and distillation training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DEFAULT_DTYPE, GradTape, ShapeError, Tensor
from .modules import Module, glorot
from .optim import Adam

DISTILL_MODES = ("l2_logits", "kl_softmax")


@dataclass(frozen=True)
class CNNConfig:
    kernel_size: int = 5
    widths: tuple[int, ...] = (32, 64, 128)
    convs_per_block: int = 4
    pool: int = 2
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if not self.widths or self.convs_per_block < 1 or self.pool < 1:
            raise ValueError("need at least one block, one conv per block and pool >= 1")


class CNNClassifier(Module):
    """CNN feature extractor plus linear head over ``concat(h, r)``.

    ``rep_dim`` is the width of the transformer representation fed to the
    head; 0 disables the fusion input.
    """

    def __init__(
        self,
        in_channels: int,
        n_classes: int,
        cfg: CNNConfig,
        rng: np.random.Generator,
        rep_dim: int = 0,
        dtype=DEFAULT_DTYPE,
    ):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.rep_dim = rep_dim
        k = cfg.kernel_size
        c_in = in_channels
        for b, c_out in enumerate(cfg.widths):
            for j in range(cfg.convs_per_block):
                src = c_in if j == 0 else c_out
                self.add_param(f"block.{b}.conv.{j}.weight", glorot(rng, (c_out, src, k), src * k, c_out * k, dtype))
                self.add_param(f"block.{b}.conv.{j}.bias", np.zeros(c_out, dtype))
            if c_in != c_out:
                self.add_param(f"block.{b}.shortcut.weight", glorot(rng, (c_out, c_in, 1), c_in, c_out, dtype))
            self.add_param(f"block.{b}.norm.gain", np.ones(c_out, dtype))
            self.add_param(f"block.{b}.norm.bias", np.zeros(c_out, dtype))
            c_in = c_out
        self.feature_dim = c_in
        fan_in = c_in + rep_dim
        self.add_param("head.weight", glorot(rng, (fan_in, n_classes), fan_in, n_classes, dtype))
        self.add_param("head.bias", np.zeros(n_classes, dtype))

    def block(self, b: int, h) -> Tensor:
        """One residual block on ``[B, C, L]``: convs, pool, ReLU, then LayerNorm(shortcut + block)."""
        p, cfg = self.params, self.cfg
        pad = cfg.kernel_size // 2
        y = h
        for j in range(cfg.convs_per_block):
            y = ag.conv1d(y, p[f"block.{b}.conv.{j}.weight"], p[f"block.{b}.conv.{j}.bias"], padding=pad)
        y = ag.relu(ag.avg_pool1d(y, cfg.pool, cfg.pool))
        shortcut = h
        if f"block.{b}.shortcut.weight" in p:
            shortcut = ag.conv1d(h, p[f"block.{b}.shortcut.weight"])
        shortcut = ag.avg_pool1d(shortcut, cfg.pool, cfg.pool)
        out = ag.layer_norm(ag.swapaxes(shortcut + y, -1, -2), p[f"block.{b}.norm.gain"], p[f"block.{b}.norm.bias"], cfg.ln_eps)
        return ag.swapaxes(out, -1, -2)

    def features(self, x) -> Tensor:
        """Feature vector ``[B, C_last]`` for windows ``[B, l, d]``."""
        x = ag.as_tensor(x)
        if x.shape[-1] != self.in_channels:
            raise ShapeError("cnn_forward", "channels", self.in_channels, x.shape[-1])
        h = ag.swapaxes(x, -1, -2)
        for b in range(len(self.cfg.widths)):
            h = self.block(b, h)
        return ag.mean(h, axis=-1)

    def logits(self, x, r=None) -> Tensor:
        return fuse_and_classify(self.features(x), r, self.params["head.weight"], self.params["head.bias"])

    __call__ = logits

    def predict(self, x: np.ndarray, r: np.ndarray | None = None, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits as a plain array."""
        if len(x) == 0:
            return np.zeros((0, self.n_classes))
        out = []
        with ag.no_grad():
            for i in range(0, len(x), batch_size):
                ri = None if r is None else r[i : i + batch_size]
                out.append(self.logits(x[i : i + batch_size], ri).data)
        return np.concatenate(out)


def cnn_forward(x, model: CNNClassifier, train: bool = False) -> Tensor:
    # the CNN has no stochastic layers, so train and eval forwards coincide
    return model.features(x)


def fuse_and_classify(h, r, weight, bias) -> Tensor:
    """``concat(h, r) @ weight + bias``; ``r`` enters as a constant (no gradient flows into it)."""
    h = ag.as_tensor(h)
    parts = [h]
    if r is not None:
        r_data = r.data if isinstance(r, Tensor) else np.asarray(r)
        parts.append(Tensor(r_data))
    width = sum(p.shape[-1] for p in parts)
    w = ag.as_tensor(weight)
    if w.shape[0] != width:
        raise ShapeError("fuse_and_classify", "features", w.shape[0], width)
    o = parts[0] if len(parts) == 1 else ag.concat(parts, axis=-1)
    if o.ndim == 1:
        return ag.reshape(ag.matmul(ag.reshape(o, (1, -1)), w), (w.shape[1],)) + bias
    return ag.matmul(o, w) + bias


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    y = np.asarray(y, dtype=np.intp)
    logp = ag.log_softmax(logits, axis=-1)
    return -ag.mean(logp[np.arange(len(y)), y])


def distillation_loss(student, teacher, mode: str = "l2_logits") -> Tensor:
    """Batch mean of ``||s - t||^2`` (``l2_logits``) or ``KL(softmax(t) || softmax(s))`` (``kl_softmax``)."""
    student = ag.as_tensor(student)
    t = teacher.data if isinstance(teacher, Tensor) else np.asarray(teacher, dtype=student.dtype)
    if student.shape != t.shape:
        raise ShapeError("distillation_loss", "outputs", t.shape, student.shape)
    if mode == "l2_logits":
        diff = student - Tensor(t)
        per = ag.tsum(diff * diff, axis=-1)
    elif mode == "kl_softmax":
        shifted = t - t.max(axis=-1, keepdims=True)
        log_pt = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        pt = np.exp(log_pt)
        per = ag.tsum(Tensor(pt) * (Tensor(log_pt) - ag.log_softmax(student, axis=-1)), axis=-1)
    else:
        raise ValueError(f"unknown distillation mode {mode!r}; choose from {DISTILL_MODES}")
    return ag.mean(per)


class ModelSnapshot:
    """Frozen copy of a classifier taken after finishing a subject."""

    def __init__(self, model: CNNClassifier, subject: int | None = None):
        self.model = model.clone()
        self.subject = subject
        for p in self.model.params.values():
            p.requires_grad = False
            p.data.flags.writeable = False
        self._checksum = self.model.checksum()

    def checksum(self) -> str:
        return self.model.checksum()

    def verify(self) -> bool:
        return self.checksum() == self._checksum

    def outputs(self, x: np.ndarray, r: np.ndarray | None = None) -> np.ndarray:
        return self.model.predict(x, r)


def snapshot(model: CNNClassifier, subject: int | None = None) -> ModelSnapshot:
    return ModelSnapshot(model, subject)


@dataclass
class StepResult:
    total: float
    ce: float
    distill: float
    extra: float = 0.0


def supervised_loss(model, x, y, r=None, teacher: ModelSnapshot | None = None, lambda_distill=1.0, mode="l2_logits"):
    """Returns ``(total, ce, distill)`` tensors; the distillation term is present only with a teacher."""
    logits = model.logits(x, r)
    ce = cross_entropy(logits, y)
    if teacher is None:
        return ce, ce, None
    distill = distillation_loss(logits, teacher.outputs(x, r), mode)
    return ce + lambda_distill * distill, ce, distill


def supervised_train_step(
    x: np.ndarray,
    y: np.ndarray,
    model: CNNClassifier,
    optimizer: Adam,
    r: np.ndarray | None = None,
    teacher: ModelSnapshot | None = None,
    lambda_distill: float = 1.0,
    mode: str = "l2_logits",
    penalty=None,
) -> StepResult | None:
    """One update of CNN + head on labeled windows; ``None`` when the batch has no labels.

    ``penalty`` is an optional callable returning an extra scalar loss term
    (the EWC baseline uses it).
    """
    if lambda_distill < 0:
        raise ValueError("lambda_distill must be >= 0")
    keep = np.asarray(y) >= 0
    if not keep.any():
        return None
    x, y = x[keep], np.asarray(y)[keep]
    r = None if r is None else np.asarray(r)[keep]
    with GradTape() as tape:
        total, ce, distill = supervised_loss(model, x, y, r, teacher, lambda_distill, mode)
        extra = penalty() if penalty is not None else None
        if extra is not None:
            total = total + extra
    grads = tape.backward(total)
    optimizer.step(grads)
    return StepResult(
        total.item(),
        ce.item(),
        0.0 if distill is None else distill.item(),
        0.0 if extra is None else extra.item(),
    )
