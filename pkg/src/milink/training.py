"""Losses and the training loop.

Two objectives: a max-margin hinge loss over candidate sets, and its
noise-aware variant that down-weights each term by the predicted
probability that the candidate set is trustworthy, regularized by a KL
penalty steering the batch-mean noise probability toward a prior.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .candidates import sample_negatives
from .evaluation import evaluate, link_batch
from .model import LinkingModel, forward_batch

__all__ = [
    "TrainState",
    "hinge_loss",
    "loss_l1",
    "kl_bernoulli",
    "loss_l2",
    "train",
    "TRAIN_MODES",
]

log = logging.getLogger(__name__)

TRAIN_MODES = ("mil", "mil-nd", "supervised")


def _as_column(x) -> Tensor:
    if isinstance(x, Tensor):
        if x.value.ndim == 2 and x.value.shape[1] == 1:
            return x
        raise ad.ShapeError(f"expected an (n, 1) score column, got shape {x.value.shape}")
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1, 1)
    return ad.constant(arr)


def hinge_loss(pos_scores, neg_scores, margin: float) -> Tensor:
    """[max(neg) + margin - max(pos)]_+ as a (1, 1) tensor.

    Scores may be tensors, arrays, lists, or bare floats; both sides must
    be nonempty.
    """
    pos = _as_column(pos_scores)
    neg = _as_column(neg_scores)
    if pos.value.size == 0:
        raise ValueError("hinge_loss: empty positive scores")
    if neg.value.size == 0:
        raise ValueError("hinge_loss: empty negative scores")
    gap = ad.add_const(ad.sub(ad.max_over(neg), ad.max_over(pos)), margin)
    return ad.relu(gap)


def _hinge_column(model, fb) -> Tensor:
    """Per-point hinge losses (P, 1) from a batched forward pass."""
    max_pos = ad.segment_max(fb.pos_scores, fb.pos_starts)
    max_neg = ad.segment_max(fb.neg_scores, fb.neg_starts)
    return ad.relu(ad.add_const(ad.sub(max_neg, max_pos), model.config.margin))


def loss_l1(model: LinkingModel, points, tape: Tape | None = None) -> Tensor:
    """Sum of per-point hinge losses over a batch."""
    points = list(points)
    if not points:
        raise ValueError("loss_l1: empty batch")
    fb = forward_batch(model, points, tape, with_negatives=True)
    return ad.sum_all(_hinge_column(model, fb))


def kl_bernoulli(p_mean, p_star: float) -> Tensor:
    """KL divergence of Bernoulli(p_mean) from Bernoulli(p_star).

    Both probabilities must lie strictly inside (0, 1); the sigmoid that
    produces noise probabilities guarantees the open interval.
    """
    if not (0.0 < p_star < 1.0):
        raise ValueError(f"kl_bernoulli: p_star must lie in (0, 1), got {p_star}")
    p = p_mean if isinstance(p_mean, Tensor) else ad.constant([[float(p_mean)]])
    if np.any(p.value <= 0.0) or np.any(p.value >= 1.0):
        raise ValueError("kl_bernoulli: p_mean must lie in (0, 1)")
    q = ad.add_const(ad.scale(p, -1.0), 1.0)
    return ad.add(
        ad.mul(p, ad.log(ad.scale(p, 1.0 / p_star))),
        ad.mul(q, ad.log(ad.scale(q, 1.0 / (1.0 - p_star)))),
    )


def loss_l2(model: LinkingModel, points, tape: Tape | None = None,
            eta: float | None = None, p_star: float | None = None) -> Tensor:
    """Noise-weighted hinge sum plus the batch-level KL regularizer.

    Each hinge term is weighted by the predicted probability that the
    point's candidate set is valid; the KL term steers the batch-mean
    noise probability toward the prior.  Gradients flow into both the
    linking and noise-detection parameters.
    """
    points = list(points)
    if not points:
        raise ValueError("loss_l2: empty batch")
    eta = model.config.eta if eta is None else eta
    p_star = model.config.prior_noise if p_star is None else p_star
    fb = forward_batch(model, points, tape, with_negatives=True, with_noise=True)
    hinge = _hinge_column(model, fb)
    keep = ad.add_const(ad.scale(fb.p_noise, -1.0), 1.0)
    weighted = ad.sum_all(ad.mul(keep, hinge))
    reg = kl_bernoulli(ad.mean_rows(fb.p_noise), p_star)
    return ad.add(weighted, ad.scale(reg, eta))


@dataclass
class TrainState:
    """Bookkeeping for one training run."""
    mode: str
    seed: int
    epoch: int = 0
    best_f1: float = float("-inf")
    best_epoch: int = -1
    patience_left: int = 0
    n_skipped: int = 0
    mean_p_noise: list[float] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def _batch_loss(model, batch, tape, mode) -> tuple[Tensor, float | None]:
    if mode == "mil-nd":
        fb = forward_batch(model, batch, tape, with_negatives=True, with_noise=True)
        hinge = _hinge_column(model, fb)
        keep = ad.add_const(ad.scale(fb.p_noise, -1.0), 1.0)
        weighted = ad.sum_all(ad.mul(keep, hinge))
        p_mean = ad.mean_rows(fb.p_noise)
        loss = ad.add(weighted, ad.scale(kl_bernoulli(p_mean, model.config.prior_noise),
                                         model.config.eta))
        return loss, p_mean.item()
    return loss_l1(model, batch, tape), None


def train(model: LinkingModel, train_points, dev_points, config=None,
          mode: str = "mil", seed: int = 0, log_path=None, kb=None,
          resample_negatives: bool = False) -> TrainState:
    """Minibatch Adam training with early stopping on dev micro-F1 ("All").

    Points with an empty positive or negative set are skipped with a
    counted warning.  The parameters of the best dev epoch are restored
    before returning.  ``resample_negatives`` redraws each point's negative
    set at every epoch (requires ``kb``).
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown training mode '{mode}'; expected one of {TRAIN_MODES}")
    cfg = model.config if config is None else config
    if resample_negatives and kb is None:
        raise ValueError("resample_negatives requires the knowledge base")
    usable = [dp for dp in train_points if dp.positive and dp.negative]
    state = TrainState(mode=mode, seed=seed)
    state.n_skipped = sum(1 for dp in train_points if not (dp.positive and dp.negative))
    if state.n_skipped:
        log.warning("skipping %d training points with empty candidate sets", state.n_skipped)
    if not usable:
        raise ValueError("no usable training points (all have empty candidate sets)")
    dev_points = list(dev_points)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    neg_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))

    best_values = model.params.snapshot()
    state.patience_left = cfg.patience
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.monotonic()
            state.epoch = epoch
            if resample_negatives:
                n_neg = max(len(dp.negative) for dp in usable)
                usable = [
                    type(dp)(mention=dp.mention, tokens=dp.tokens, positive=dp.positive,
                             negative=tuple(sample_negatives(kb, dp.positive, n_neg, neg_rng)),
                             noise_label=dp.noise_label)
                    for dp in usable
                ]
            order = rng.permutation(len(usable))
            total_loss = 0.0
            p_means = []
            for at in range(0, len(order), cfg.batch_size):
                batch = [usable[i] for i in order[at:at + cfg.batch_size]]
                tape = Tape()
                loss, p_mean = _batch_loss(model, batch, tape, mode)
                ad.backward(tape, loss)
                ad.adam_step(model.params.trainables(), cfg.lr)
                total_loss += loss.item()
                if p_mean is not None:
                    p_means.append(p_mean)
            epoch_p = float(np.mean(p_means)) if p_means else None
            if epoch_p is not None:
                state.mean_p_noise.append(epoch_p)

            preds = link_batch(model, dev_points)
            report = evaluate(preds, dev_points, setting="all")
            record = {
                "epoch": epoch,
                "train_loss": total_loss / len(usable),
                "dev_precision": report.precision,
                "dev_recall": report.recall,
                "dev_f1": report.f1,
                "mean_p_noise": epoch_p,
                "wallclock_sec": round(time.monotonic() - t0, 3),
            }
            state.history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d: loss %.4f dev F1 %.4f%s", epoch, record["train_loss"],
                     report.f1, f" mean p_N {epoch_p:.3f}" if epoch_p is not None else "")

            if report.f1 > state.best_f1:
                state.best_f1 = report.f1
                state.best_epoch = epoch
                best_values = model.params.snapshot()
                state.patience_left = cfg.patience
            else:
                state.patience_left -= 1
                if state.patience_left <= 0:
                    log.info("early stopping after epoch %d (best epoch %d)", epoch, state.best_epoch)
                    break
    finally:
        if log_fh:
            log_fh.close()
    model.params.restore(best_values)
    return state
