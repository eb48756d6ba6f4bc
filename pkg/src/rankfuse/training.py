"""Two-stage optimization for the fusion ranker.

Stage 1 warms up the relevance-level module alone as a 4-class classifier
over the labeled levels. Stage 2 trains everything on the pointwise click
cross-entropy plus an optional listwise consistency term, with the
relevance-level group stepped at a much smaller rate so the warm start is
fine-tuned rather than overwritten.

The consistency term synthesizes a priority label per impression,
alpha*y + beta*(1-y)*rsl, and penalizes the KL divergence between the
softmax of those priorities and the softmax of the model scores over each
group (whole batch by default). Labels are constants: gradients flow into
scores only. gamma == 0 skips the term entirely, so a zeroed weight and a
disabled regularizer run byte-identical code paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import TrainingError, ValidationError
from .model import ModelParams, TrainingCache, rsl_logits_batch, score_batch

GROUPINGS = ("batch", "query-group")


@dataclass
class TrainConfig:
    batch_size: int = 4096
    lr_stage1: float = 1e-4
    lr_base: float = 1e-4
    lr_rsl_finetune: float = 1e-5
    lr_prim: float = 1e-4
    alpha: float = 4.0
    beta: float = 1.0
    gamma: float = 0.3
    stage1_epochs: int = 5
    stage2_epochs: int = 10
    seed: int = 0
    grouping: str = "batch"
    momentum: float = 0.0
    no_two_stage: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch_size must be at least 2")
        for name in ("lr_stage1", "lr_base", "lr_rsl_finetune", "lr_prim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValidationError("epoch counts must be nonnegative")
        if self.grouping not in GROUPINGS:
            raise ValidationError(f"grouping {self.grouping!r} not in {GROUPINGS}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError("momentum must be in [0,1)")


@dataclass
class RiskReport:
    stage: str
    epoch: int
    batch: int
    ctr_risk: float
    regularizer: float
    total: float

    def to_line(self) -> str:
        return (
            f"{self.epoch}\t{self.stage}\t{self.batch}"
            f"\t{self.ctr_risk:.10f}\t{self.regularizer:.10f}\t{self.total:.10f}"
        )


# ---------------------------------------------------------------------------
# loss pieces


def ctr_risk(final_scores: ad.Tensor, clicks: np.ndarray) -> ad.Tensor:
    """Pointwise click cross-entropy; scores must already sit inside (0,1)."""
    scores = final_scores if isinstance(final_scores, ad.Tensor) else ad.Tensor(final_scores)
    y = np.asarray(clicks, dtype=np.float64)
    if scores.data.ndim != 1 or scores.data.shape != y.shape:
        raise ValidationError("scores and clicks must be matching 1D")
    if y.size == 0:
        raise ValidationError("empty batch")
    if np.any(scores.data <= 0.0) or np.any(scores.data >= 1.0):
        raise ValidationError("scores must lie strictly inside (0,1); clamp upstream")
    term = ad.add(
        ad.mul(ad.Tensor(y), ad.log(scores)),
        ad.mul(ad.Tensor(1.0 - y), ad.log(ad.add(ad.mul(scores, -1.0), 1.0))),
    )
    return ad.mul(ad.tmean(term), -1.0)


def listwise_label(y: int, rsl: int, alpha: float, beta: float) -> float:
    """Priority of an impression for the listwise view: clicks dominate at
    alpha, unclicked items fall back to beta-scaled relevance level."""
    if y not in (0, 1):
        raise ValidationError(f"click label {y!r} not binary")
    if rsl not in (1, 2, 3, 4):
        raise ValidationError(f"rsl {rsl!r} outside 1..4")
    return alpha * y + beta * (1 - y) * rsl


def listwise_labels(y: np.ndarray, rsl: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    rsl = np.asarray(rsl, dtype=np.float64)
    return alpha * y + beta * (1.0 - y) * rsl


def consistency_regularizer(final_scores: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """KL(softmax(labels) || softmax(scores)) over one group; labels constant."""
    scores = final_scores if isinstance(final_scores, ad.Tensor) else ad.Tensor(final_scores)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.data.ndim != 1 or labels.shape != scores.data.shape:
        raise ValidationError("scores and labels must be matching 1D")
    if labels.size < 2:
        raise ValidationError("consistency regularizer needs at least 2 items")
    p = ad.np_softmax(labels)
    return ad.kl_divergence(ad.Tensor(p), ad.softmax(scores))


def grouped_regularizer(
    final_scores: ad.Tensor, labels: np.ndarray, group_keys: np.ndarray | None
) -> ad.Tensor:
    """Mean regularizer over listwise groups; `None` keys mean one batch-wide
    group. Groups with fewer than 2 impressions carry no signal and are
    skipped; all-singleton batches contribute exactly 0."""
    if group_keys is None:
        return consistency_regularizer(final_scores, labels)
    keys = np.asarray(group_keys)
    if keys.shape != final_scores.data.shape:
        raise ValidationError("group keys must align with scores")
    terms = []
    for key in np.unique(keys):
        rows = np.nonzero(keys == key)[0]
        if rows.size < 2:
            continue
        terms.append(consistency_regularizer(ad.select_rows(final_scores, rows), labels[rows]))
    if not terms:
        return ad.Tensor(np.zeros(()))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.mul(total, 1.0 / len(terms))


def stage1_loss(params: ModelParams, batch) -> ad.Tensor:
    """Multi-class cross-entropy of the relevance-level head on rsl labels."""
    logp = ad.log_softmax(rsl_logits_batch(params, batch))
    return ad.mul(ad.tmean(ad.select_columns(logp, batch.rsl - 1)), -1.0)


def total_risk(batch, params: ModelParams, config: TrainConfig, *, stage="stage2", epoch=0, batch_no=0):
    """Stage-2 objective on one batch: returns (loss tensor, RiskReport)."""
    if batch.size < 2:
        raise ValidationError("stage-2 batches need at least 2 impressions")
    out = score_batch(params, batch)
    risk = ctr_risk(out["final"], batch.y)
    if config.gamma == 0.0:
        loss = risk
        reg_val = 0.0
    else:
        labels = listwise_labels(batch.y, batch.rsl, config.alpha, config.beta)
        keys = batch.group_keys if config.grouping == "query-group" else None
        reg = grouped_regularizer(out["final"], labels, keys)
        loss = ad.add(risk, ad.mul(reg, config.gamma))
        reg_val = float(reg.data)
    report = RiskReport(
        stage=stage,
        epoch=epoch,
        batch=batch_no,
        ctr_risk=float(risk.data),
        regularizer=reg_val,
        total=float(loss.data),
    )
    return loss, report


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(
    params: list[ad.Parameter],
    rates: dict[str, float],
    momentum: float = 0.0,
    velocities: dict[str, np.ndarray] | None = None,
) -> None:
    """Plain SGD per learning-rate group; optional heavy-ball momentum."""
    for p in params:
        lr = rates.get(p.group)
        if lr is None:
            continue
        if momentum > 0.0:
            assert velocities is not None
            v = velocities.setdefault(p.name, np.zeros_like(p.data))
            v *= momentum
            v += p.grad
            p.data -= lr * v
        else:
            p.data -= lr * p.grad


def _check_finite(loss_val: float, report: RiskReport, rows: np.ndarray) -> None:
    if not np.isfinite(loss_val):
        raise TrainingError(
            f"non-finite loss at epoch {report.epoch} {report.stage} batch {report.batch}: "
            f"ctr={report.ctr_risk!r} reg={report.regularizer!r}; "
            f"batch rows {rows[:8].tolist()}{'...' if rows.size > 8 else ''}"
        )


# ---------------------------------------------------------------------------
# stages


def pretrain_rsl(
    cache: TrainingCache, params: ModelParams, config: TrainConfig
) -> tuple[ModelParams, list[RiskReport]]:
    """Stage 1: warm up the relevance-level group only; everything else is
    untouched (bit-identical, not merely unchanged in expectation)."""
    if params.rsl_layers is None:
        raise ValidationError("variant has no relevance-level module to pretrain")
    levels = np.unique(cache.rsl)
    if levels.size < 2:
        raise TrainingError("relevance pretraining needs at least 2 distinct levels")
    reports: list[RiskReport] = []
    if config.stage1_epochs == 0:
        return params, reports
    rng = np.random.default_rng(config.seed + 1)
    trainable = [p for layer in params.rsl_layers for p in layer.params()]
    rates = {"rsl-finetune": config.lr_stage1}
    velocities: dict[str, np.ndarray] = {}
    for epoch in range(config.stage1_epochs):
        order = rng.permutation(cache.n)
        for batch_no, lo in enumerate(range(0, cache.n, config.batch_size)):
            rows = order[lo : lo + config.batch_size]
            batch = cache.batch(rows)
            ad.zero_grad(trainable)
            with ad.Tape() as tape:
                loss = stage1_loss(params, batch)
            report = RiskReport("stage1", epoch, batch_no, float(loss.data), 0.0, float(loss.data))
            _check_finite(float(loss.data), report, rows)
            tape.backward(loss)
            sgd_step(trainable, rates, config.momentum, velocities)
            reports.append(report)
    return params, reports


def train_stage2(
    cache: TrainingCache, params: ModelParams, config: TrainConfig
) -> tuple[ModelParams, list[RiskReport]]:
    """Joint training on the full objective with per-group rates."""
    rsl_rate = config.lr_base if config.no_two_stage else config.lr_rsl_finetune
    rates = {"base": config.lr_base, "rsl-finetune": rsl_rate, "prim": config.lr_prim}
    trainable = list(params.all_params().values())
    reports: list[RiskReport] = []
    rng = np.random.default_rng(config.seed + 2)
    velocities: dict[str, np.ndarray] = {}
    for epoch in range(config.stage2_epochs):
        order = rng.permutation(cache.n)
        for batch_no, lo in enumerate(range(0, cache.n, config.batch_size)):
            rows = order[lo : lo + config.batch_size]
            if rows.size < 2:
                continue  # the listwise term is undefined on singletons
            batch = cache.batch(rows)
            ad.zero_grad(trainable)
            with ad.Tape() as tape:
                loss, report = total_risk(
                    batch, params, config, stage="stage2", epoch=epoch, batch_no=batch_no
                )
            _check_finite(float(loss.data), report, rows)
            tape.backward(loss)
            sgd_step(trainable, rates, config.momentum, velocities)
            reports.append(report)
    return params, reports


def train_two_stage(
    cache: TrainingCache, params: ModelParams, config: TrainConfig
) -> tuple[ModelParams, list[RiskReport]]:
    """Stage 1 (unless disabled or absent) followed by Stage 2."""
    reports: list[RiskReport] = []
    if not config.no_two_stage and params.rsl_layers is not None:
        params, stage1 = pretrain_rsl(cache, params, config)
        reports.extend(stage1)
    params, stage2 = train_stage2(cache, params, config)
    reports.extend(stage2)
    return params, reports


def rsl_accuracy(cache: TrainingCache, params: ModelParams, batch_size: int = 4096) -> float:
    """Argmax accuracy of the relevance-level head over a cached dataset."""
    hits = 0
    for lo in range(0, cache.n, batch_size):
        rows = np.arange(lo, min(lo + batch_size, cache.n), dtype=np.int64)
        batch = cache.batch(rows)
        pred = np.argmax(rsl_logits_batch(params, batch).data, axis=-1) + 1
        hits += int((pred == batch.rsl).sum())
    return hits / cache.n
