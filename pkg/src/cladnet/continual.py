"""Subject-sequential training, baseline strategies and forgetting metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import autograd as ag
from .autograd import GradTape, Tensor
from .classifier import (
    DISTILL_MODES,
    CNNClassifier,
    CNNConfig,
    ModelSnapshot,
    snapshot,
    supervised_train_step,
)
from .dataio import WindowSet
from .objectives import SSLConfig, make_ssl_optimizer, ssl_train_step
from .optim import Adam
from .sslnet import BodyPartition, CrossAttentionTransformer, TransformerConfig

log = logging.getLogger(__name__)

STRATEGIES = ("clad", "lwf", "ewc", "er", "naive")


# -------------------------------------------------------------------- metrics


def _check_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValueError(f"accuracy matrix must be square and non-empty, got shape {A.shape}")
    return A


def final_accuracy(A) -> float:
    """Mean accuracy over subjects after the last task."""
    A = _check_matrix(A)
    return float(A[:, -1].mean())


def forgetting_measure(A) -> float:
    """Mean gap between each subject's best accuracy over all tasks and its final accuracy."""
    A = _check_matrix(A)
    return float((A.max(axis=1) - A[:, -1]).mean())


def learning_accuracy(A) -> float:
    """Mean accuracy on each subject right after training on it."""
    A = _check_matrix(A)
    return float(np.diag(A).mean())


def summarize(A) -> dict[str, float]:
    return {"FA": final_accuracy(A), "FM": forgetting_measure(A), "LA": learning_accuracy(A)}


# ------------------------------------------------------------- replay buffer


class ReplayBuffer:
    """Reservoir-sampled store of ``(window, label, subject)`` triples."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.rng = rng
        self.items: list[tuple[np.ndarray, int, int]] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, x: np.ndarray, y: int, subject: int) -> None:
        self.seen += 1
        if self.capacity == 0:
            return
        if len(self.items) < self.capacity:
            self.items.append((x, int(y), int(subject)))
            return
        j = int(self.rng.integers(0, self.seen))
        if j < self.capacity:
            self.items[j] = (x, int(y), int(subject))

    def sample(self, k: int) -> list[tuple[np.ndarray, int, int]]:
        k = min(k, len(self.items))
        if k == 0:
            return []
        idx = self.rng.choice(len(self.items), size=k, replace=False)
        return [self.items[i] for i in idx]


def er_update(buffer: ReplayBuffer, X: np.ndarray, y: np.ndarray, subject: np.ndarray) -> None:
    for xi, yi, si in zip(X, y, subject):
        if yi >= 0:
            buffer.add(xi, yi, si)


def er_sample(buffer: ReplayBuffer, X: np.ndarray, y: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Current batch followed by up to ``k`` uniformly drawn buffer items."""
    replay = buffer.sample(k)
    if not replay:
        return X, y
    return (
        np.concatenate([X, np.stack([r[0] for r in replay])]),
        np.concatenate([y, np.array([r[1] for r in replay], dtype=y.dtype)]),
    )


# ------------------------------------------------------------------------ EWC


@dataclass
class FisherInfo:
    fisher: dict[str, np.ndarray]
    anchor: dict[str, np.ndarray]


def ewc_prepare(
    model: CNNClassifier,
    X: np.ndarray,
    n_batches: int,
    batch_size: int,
    rng: np.random.Generator,
    r: np.ndarray | None = None,
    previous: FisherInfo | None = None,
) -> FisherInfo:
    """Diagonal Fisher estimate from ``n_batches`` sampled batches.

    Every sampled window contributes the squared gradient of its own
    log-likelihood under the model's predicted label; the estimate is the mean
    over all sampled windows. With ``previous`` the new estimate is added to
    the old one (online EWC).
    """
    fisher = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    n_batches = max(1, n_batches)
    count = 0
    for _ in range(n_batches):
        idx = rng.choice(len(X), size=min(batch_size, len(X)), replace=False)
        for i in idx:
            ri = None if r is None else r[i : i + 1]
            with GradTape() as tape:
                logits = model.logits(X[i : i + 1], ri)
                pred = int(logits.data.argmax())
                ll = ag.log_softmax(logits, axis=-1)[0, pred]
            grads = tape.backward(ll)
            for k, p in model.params.items():
                g = grads.get(p)
                if g is not None:
                    fisher[k] += g * g
            count += 1
    fisher = {k: v / count for k, v in fisher.items()}
    if previous is not None:
        fisher = {k: v + previous.fisher[k] for k, v in fisher.items()}
    return FisherInfo(fisher, model.state_dict())


def ewc_penalty(params: dict[str, Tensor], info: FisherInfo, lambda_ewc: float) -> Tensor:
    """``(lambda/2) * sum F * (theta - theta_star)^2``."""
    total = None
    for k, p in params.items():
        diff = p - Tensor(info.anchor[k])
        term = ag.tsum(Tensor(info.fisher[k]) * diff * diff)
        total = term if total is None else total + term
    return total * (0.5 * lambda_ewc)


# ------------------------------------------------------------------ strategies


@dataclass(frozen=True)
class ResolvedStrategy:
    """What a strategy actually switches on; two configs are equivalent iff these match."""

    use_transformer: bool
    use_distill: bool
    lambda_distill: float | None
    distill_mode: str | None
    use_ewc: bool
    lambda_ewc: float | None
    fisher_batches: int | None
    use_er: bool
    er_capacity: int | None
    er_replay_fraction: float | None


_KIND_DEFAULTS = {
    "clad": (True, True),
    "lwf": (False, True),
    "naive": (False, False),
    "er": (False, False),
    "ewc": (False, False),
}


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "clad"
    transformer: bool | None = None
    distill: bool | None = None
    lambda_distill: float = 1.0
    distill_mode: str = "l2_logits"
    lambda_ewc: float = 100.0
    fisher_batches: int = 10
    er_capacity: int = 200
    er_replay_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.distill_mode not in DISTILL_MODES:
            raise ValueError(f"unknown distill_mode {self.distill_mode!r}")
        if min(self.lambda_distill, self.lambda_ewc) < 0:
            raise ValueError("strategy weights must be >= 0")
        if self.er_capacity < 0:
            raise ValueError("er_capacity must be >= 0")
        if not 0.0 <= self.er_replay_fraction <= 1.0:
            raise ValueError("er_replay_fraction must lie in [0, 1]")

    def resolved(self) -> ResolvedStrategy:
        if self.kind in ("er", "ewc") and (self.transformer or self.distill):
            raise ValueError(f"strategy {self.kind!r} is a CNN-only baseline; transformer/distill overrides are not supported")
        use_t, use_d = _KIND_DEFAULTS[self.kind]
        use_t = use_t if self.transformer is None else self.transformer
        use_d = use_d if self.distill is None else self.distill
        ewc = self.kind == "ewc"
        er = self.kind == "er"
        return ResolvedStrategy(
            use_transformer=use_t,
            use_distill=use_d,
            lambda_distill=self.lambda_distill if use_d else None,
            distill_mode=self.distill_mode if use_d else None,
            use_ewc=ewc,
            lambda_ewc=self.lambda_ewc if ewc else None,
            fisher_batches=self.fisher_batches if ewc else None,
            use_er=er,
            er_capacity=self.er_capacity if er else None,
            er_replay_fraction=self.er_replay_fraction if er else None,
        )


@dataclass(frozen=True)
class RunConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")


# ------------------------------------------------------------------ the stream


class StreamData(Protocol):
    subjects: list[int]

    def train(self, subject: int) -> WindowSet: ...

    def test(self, subject: int) -> WindowSet: ...


class SubjectStreams:
    """Per-subject train/test access over prepared window sets."""

    def __init__(self, train: WindowSet, test: WindowSet, subjects: list[int]):
        self._train = train
        self._test = test
        self.subjects = list(subjects)

    @classmethod
    def from_prepared(cls, prepared) -> "SubjectStreams":
        return cls(prepared.train, prepared.test, prepared.subject_order)

    def train(self, subject: int) -> WindowSet:
        return self._train.for_subject(subject)

    def test(self, subject: int) -> WindowSet:
        return self._test.for_subject(subject)


@dataclass
class TaskLog:
    subject: int
    ssl_loss: list[float] = field(default_factory=list)
    ce_loss: list[float] = field(default_factory=list)
    distill_loss: list[float] = field(default_factory=list)
    skipped_steps: int = 0


@dataclass
class StreamResult:
    A: np.ndarray
    subjects: list[int]
    logs: list[TaskLog]
    strategy: ResolvedStrategy
    classifier: CNNClassifier | None = None
    transformer: CrossAttentionTransformer | None = None
    checkpoints: list[dict] = field(default_factory=list)

    @property
    def metrics(self) -> dict[str, float]:
        return summarize(self.A)


def accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float((logits.argmax(axis=-1) == y).mean())


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if len(idx) >= min_size:
            yield idx


def run_stream(
    data: StreamData,
    strategy: StrategyConfig,
    partition: BodyPartition,
    n_classes: int,
    run: RunConfig = RunConfig(),
    transformer_cfg: TransformerConfig = TransformerConfig(),
    cnn_cfg: CNNConfig = CNNConfig(),
    ssl_cfg: SSLConfig = SSLConfig(),
    keep_checkpoints: bool = False,
) -> StreamResult:
    """Train subject by subject and fill ``A[t, t']`` after every task.

    Raw windows of a subject are read only while that subject is the current
    task; ER keeps its own copies in the replay buffer.
    """
    subjects = list(data.subjects)
    if len(subjects) < 2:
        raise ValueError("a stream needs at least two subjects")
    if n_classes < 2:
        raise ValueError("need at least two classes")
    res = strategy.resolved()
    init_t, init_c, shuffle_rng, ssl_rng, buffer_rng, fisher_rng, byol_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(run.seed).spawn(7)
    )

    d = partition.n_channels
    transformer = None
    ssl_opt = byol = None
    if res.use_transformer:
        transformer = CrossAttentionTransformer(partition, transformer_cfg, init_t)
        ssl_opt, byol = make_ssl_optimizer(transformer, ssl_cfg, byol_rng)
    rep_dim = transformer_cfg.d_model if res.use_transformer else 0
    model = CNNClassifier(d, n_classes, cnn_cfg, init_c, rep_dim=rep_dim)

    buffer = ReplayBuffer(res.er_capacity, buffer_rng) if res.use_er else None
    replay_k = int(round(res.er_replay_fraction * run.batch_size)) if res.use_er else 0
    teacher: ModelSnapshot | None = None
    fisher = None

    T = len(subjects)
    A = np.zeros((T, T))
    logs = []
    checkpoints = []
    for t, subject in enumerate(subjects):
        train = data.train(subject)
        task = TaskLog(subject)
        if len(train) and train.X.shape[-1] != d:
            raise ValueError(f"subject {subject}: {train.X.shape[-1]} channels, partition expects {d}")

        r_train = None
        if transformer is not None:
            for _ in range(ssl_cfg.epochs):
                for idx in _batches(len(train), run.batch_size, shuffle_rng, min_size=2):
                    task.ssl_loss.append(ssl_train_step(train.X[idx], transformer, ssl_cfg, ssl_opt, ssl_rng, byol))
            r_train = transformer.represent(train.X)

        labeled = np.flatnonzero(train.y >= 0)
        optimizer = Adam(model.params, lr=run.lr)
        penalty = None
        if fisher is not None:
            info = fisher
            penalty = lambda: ewc_penalty(model.params, info, res.lambda_ewc)  # noqa: E731
        for epoch in range(run.epochs):
            for bidx in _batches(len(labeled), run.batch_size, shuffle_rng):
                idx = labeled[bidx]
                xb, yb = train.X[idx], train.y[idx]
                rb = None if r_train is None else r_train[idx]
                if buffer is not None:
                    n_cur = len(xb)
                    xb, yb = er_sample(buffer, xb, yb, replay_k)
                    if rb is not None and len(xb) > n_cur:
                        rb = np.concatenate([rb, transformer.represent(xb[n_cur:])])
                    if epoch == 0:
                        er_update(buffer, train.X[idx], train.y[idx], train.subject[idx])
                step = supervised_train_step(
                    xb,
                    yb,
                    model,
                    optimizer,
                    r=rb,
                    teacher=teacher if res.use_distill else None,
                    lambda_distill=res.lambda_distill or 0.0,
                    mode=res.distill_mode or "l2_logits",
                    penalty=penalty,
                )
                if step is None:
                    task.skipped_steps += 1
                    continue
                task.ce_loss.append(step.ce)
                task.distill_loss.append(step.distill)
        if not len(labeled):
            log.warning("subject %s has no labeled training windows", subject)

        if res.use_distill:
            teacher = snapshot(model, subject)
        if res.use_ewc and len(train):
            fisher = ewc_prepare(model, train.X, res.fisher_batches, run.batch_size, fisher_rng, r_train, fisher)
        if keep_checkpoints:
            checkpoints.append(
                {
                    "subject": subject,
                    "classifier": model.state_dict(),
                    "transformer": None if transformer is None else transformer.state_dict(),
                }
            )

        for s_idx, s in enumerate(subjects):
            test = data.test(s)
            r_test = None if transformer is None else transformer.represent(test.X)
            A[s_idx, t] = accuracy(model.predict(test.X, r_test), test.y)
        logs.append(task)
        log.info("task %d (subject %s): accuracies %s", t + 1, subject, np.round(A[:, t], 4).tolist())

    return StreamResult(A, subjects, logs, res, model, transformer, checkpoints)
