"""Training protocol: Adam with two learning-rate groups, CCC loss, teacher
forcing, LR halving on validation plateau, early stopping, base-predictor
pretraining for chain ordering, evaluation and few-shot adaptation."""

import csv
import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nx
from .augment import AugmentConfig, random_augment
from .data import FoldSplit, select
from .errors import ConfigError, InputError
from .fileio import atomic_open
from .metrics import mean_ccc_loss, mse_loss, per_emotion_ccc
from .model import EMOTIONS, forward_batch, init_model, predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_chain: float = 1e-4
    lr_frontend: float = 1e-5
    batch_size: int = 8
    min_epochs: int = 10
    max_epochs: int = 50
    patience: int = 10
    lr_halving: bool = True
    seed: int = 0
    augment: Optional[AugmentConfig] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 for a CCC loss, got {self.batch_size}")
        if not 1 <= self.min_epochs <= self.max_epochs:
            raise ConfigError(f"need 1 <= min_epochs <= max_epochs, got {self.min_epochs}, {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.lr_chain < 0 or self.lr_frontend < 0:
            raise ConfigError("learning rates must be non-negative")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise InputError(f"non-finite gradient for parameter {name}")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise InputError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def batch_loss_and_grads(model, features, Y, teacher_forcing=True, loss="ccc"):
    """Loss over one batch and its gradient for every model parameter."""
    Y = np.asarray(Y, dtype=np.float64)
    tape = nx.Tape()
    pv = {k: tape.leaf(v) for k, v in model.params.items()}
    Y_hat = forward_batch(model, features, teacher=Y if teacher_forcing else None, params=pv)
    fn = mean_ccc_loss if loss == "ccc" else mse_loss
    value, g = fn(Y, Y_hat.value)
    out = nx.attach_scalar(value, Y_hat, g)
    grads = tape.backward(out)
    return value, {k: grads[v.index] for k, v in pv.items()}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mean_ccc: float
    val_ccc: np.ndarray
    lr_chain: float
    lr_frontend: float


@dataclass
class TrainReport:
    emotions: tuple
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_ccc: float = float("-inf")
    stop_reason: str = ""
    halvings: list = field(default_factory=list)
    dropped_batches: int = 0
    train_mode: str = "teacher_forcing"
    eval_mode: str = "autoregressive"

    def summary_rows(self):
        header = (["epoch", "train_loss", "val_mean_ccc"] + [f"ccc_{e}" for e in self.emotions]
                  + ["lr_chain", "lr_frontend"])
        rows = [[r.epoch, repr(r.train_loss), repr(r.val_mean_ccc)]
                + [repr(float(c)) for c in r.val_ccc] + [repr(r.lr_chain), repr(r.lr_frontend)]
                for r in self.epochs]
        return header, rows

    def log_lines(self):
        lines = [f"train_mode={self.train_mode} eval_mode={self.eval_mode}"]
        for r in self.epochs:
            lines.append(f"epoch {r.epoch}: train_loss={r.train_loss:.6f} val_mean_ccc={r.val_mean_ccc:.6f} "
                         f"lr_chain={r.lr_chain:.3g} lr_frontend={r.lr_frontend:.3g}")
        for epoch, lc, lf in self.halvings:
            lines.append(f"lr halved after epoch {epoch}: lr_chain={lc:.3g} lr_frontend={lf:.3g}")
        lines.append(f"dropped_batches={self.dropped_batches}")
        lines.append(f"best_epoch={self.best_epoch} best_val_mean_ccc={self.best_val_ccc:.6f} "
                     f"stop_reason={self.stop_reason}")
        return lines


def write_report(report, csv_path, log_path=None):
    header, rows = report.summary_rows()
    with atomic_open(csv_path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if log_path is not None:
        with atomic_open(log_path, "w", encoding="utf-8") as f:
            f.write("\n".join(report.log_lines()) + "\n")


def sample_seed(seed, epoch, file_id):
    """Augmentation seed depending only on (run seed, epoch, sample id)."""
    return int(np.random.SeedSequence([seed, epoch, zlib.crc32(file_id.encode())]).generate_state(1)[0])


def _epoch_features(samples, config, epoch, extractor):
    if config.augment is None or extractor is None:
        return [s.features for s in samples]
    out = []
    for s in samples:
        if s.waveform is None:
            out.append(s.features)
        else:
            w = random_augment(s.waveform, config.augment, sample_seed(config.seed, epoch, s.file_id))
            out.append(extractor(w))
    return out


def _clean_features(samples, extractor):
    if extractor is None:
        return [s.features for s in samples]
    return [extractor(s.waveform) if s.waveform is not None else s.features for s in samples]


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    dropped = 0
    if batches and len(batches[-1]) < 2:
        batches.pop()
        dropped = 1
    return batches, dropped


def train(model, train_set, val_set, config, extractor=None):
    """Train ``model`` (a copy is made) and return ``(best_model, report)``.

    ``extractor`` maps a waveform to a ``T x D`` feature matrix and is only
    used when ``config.augment`` is set and samples carry waveforms.
    """
    if not train_set or len(val_set) < 2:
        raise InputError("training needs a non-empty train set and at least 2 validation samples")
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    lr = {"chain": config.lr_chain, "frontend": config.lr_frontend}
    groups = {g: [k for k in model.params if model.group_of(k) == g] for g in lr}
    states = {g: AdamState() for g in lr}
    Y_train = np.array([s.scores for s in train_set])
    Y_val = np.array([s.scores for s in val_set])
    val_features = _clean_features(val_set, extractor)

    report = TrainReport(model.emotions)
    best_params = {k: v.copy() for k, v in model.params.items()}
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        feats = _epoch_features(train_set, config, epoch, extractor)
        batches, dropped = _batches(len(train_set), config.batch_size, rng)
        if not batches:
            raise InputError("no usable training batch: need at least 2 training samples")
        if dropped:
            log.info("epoch %d: dropped a trailing batch of size 1", epoch)
        report.dropped_batches += dropped
        losses = []
        for idx in batches:
            loss, grads = batch_loss_and_grads(model, [feats[i] for i in idx], Y_train[idx])
            losses.append(loss)
            for g, names in groups.items():
                new, states[g] = adam_step({k: model.params[k] for k in names},
                                           {k: grads[k] for k in names}, states[g], lr[g])
                model.params.update(new)

        val_ccc = per_emotion_ccc(Y_val, predict(model, val_features))
        val_mean = float(val_ccc.mean())
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_mean, val_ccc,
                                         lr["chain"], lr["frontend"]))
        log.debug("epoch %d loss %.5f val mean ccc %.5f", epoch, np.mean(losses), val_mean)

        if val_mean > report.best_val_ccc:
            report.best_val_ccc = val_mean
            report.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if config.lr_halving:
                lr = {g: v / 2.0 for g, v in lr.items()}
                report.halvings.append((epoch, lr["chain"], lr["frontend"]))
                log.info("epoch %d: validation CCC did not improve, halving learning rates", epoch)
        if since_best >= config.patience and epoch >= config.min_epochs:
            report.stop_reason = "early_stop"
            break
    else:
        report.stop_reason = "max_epochs"

    model.params = best_params
    return model, report


def evaluate_predictions(Y, Y_hat, reduction="pooled", groups=None):
    """Per-emotion CCC and its mean, pooled or averaged over index groups."""
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape[0] < 2:
        raise InputError("evaluation needs at least 2 samples")
    if reduction == "pooled":
        per = per_emotion_ccc(Y, Y_hat)
    elif reduction == "per-fold-mean":
        if not groups:
            raise InputError("per-fold-mean needs fold groups")
        per = np.mean([per_emotion_ccc(Y[g], Y_hat[g]) for g in map(np.asarray, groups)], axis=0)
    else:
        raise InputError(f"unknown reduction {reduction!r}")
    return per, float(per.mean())


def evaluate(model, samples, reduction="pooled", folds=None):
    """Autoregressive inference on ``samples`` then CCC per emotion.

    ``folds`` is a list of file-id collections, one per fold, used by the
    ``per-fold-mean`` reduction.
    """
    if len(samples) < 2:
        raise InputError("evaluation needs at least 2 samples")
    Y = np.array([s.scores for s in samples])
    Y_hat = predict(model, [s.features for s in samples])
    groups = None
    if folds is not None:
        pos = {s.file_id: i for i, s in enumerate(samples)}
        groups = [[pos[i] for i in sorted(f) if i in pos] for f in folds]
    return evaluate_predictions(Y, Y_hat, reduction, groups)


def _single_emotion(samples, c):
    return [replace(s, scores=s.scores[c:c + 1]) for s in samples]


def train_base_predictors(samples, splits, config, embed_dim=16, attention_dim=8,
                          emotions=EMOTIONS, extractor=None):
    """Best validation CCC of one independent single-head model per emotion.

    ``splits`` is a :class:`~nvchain.data.FoldSplit` or a list of them; with
    several folds the per-emotion CCCs are averaged over folds.
    """
    if isinstance(splits, FoldSplit):
        splits = [splits]
    pairs = [(select(samples, f.train_ids), select(samples, f.val_ids)) for f in splits]
    D = samples[0].features.shape[1]
    out = np.zeros(len(emotions))
    for c, emo in enumerate(emotions):
        scores = []
        for train_set, val_set in pairs:
            m = init_model(D, embed_dim, attention_dim, emotions=(emo,), seed=config.seed + c)
            _, rep = train(m, _single_emotion(train_set, c), _single_emotion(val_set, c),
                           config, extractor)
            scores.append(rep.best_val_ccc)
        out[c] = float(np.mean(scores))
        log.info("base predictor %s: val CCC %.4f", emo, out[c])
    return out


def adapt_few_shot(model, support, epochs=10, lr=1e-6, batch_size=8, seed=0):
    """Fine-tune every parameter on a few samples of a new speaker."""
    if not support:
        raise InputError("support set is empty")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    model = model.copy()
    support = list(support)
    if len(support) == 1:
        support = support * 2
    B = max(2, min(batch_size, len(support)))
    rng = np.random.default_rng(seed)
    state = AdamState()
    Y = np.array([s.scores for s in support])
    for _ in range(epochs):
        batches, _ = _batches(len(support), B, rng)
        for idx in batches:
            ids = {support[i].file_id for i in idx}
            # a batch of one sample repeated has no CCC; use squared error there
            loss_kind = "mse" if len(ids) == 1 else "ccc"
            _, grads = batch_loss_and_grads(model, [support[i].features for i in idx], Y[idx],
                                            loss=loss_kind)
            model.params, state = adam_step(model.params, grads, state, lr)
    return model


def cross_validate(samples, folds, make_model, config, extractor=None):
    """Train one model per fold; evaluate pooled and per-fold-mean.

    Returns ``(models, reports, pooled, per_fold_mean)`` where the last two
    are ``(per_emotion_ccc, mean_ccc)`` pairs over out-of-fold predictions.
    """
    pos = {s.file_id: i for i, s in enumerate(samples)}
    Y = np.array([s.scores for s in samples])
    Y_hat = np.full_like(Y, np.nan)
    models, reports, groups = [], [], []
    for fold in folds:
        tr = [s for s in samples if s.file_id in fold.train_ids]
        va = [s for s in samples if s.file_id in fold.val_ids]
        m, rep = train(make_model(fold), tr, va, config, extractor)
        idx = [pos[s.file_id] for s in va]
        Y_hat[idx] = predict(m, _clean_features(va, extractor))
        models.append(m)
        reports.append(rep)
        groups.append(idx)
    covered = sorted(i for g in groups for i in g)
    pooled = evaluate_predictions(Y[covered], Y_hat[covered])
    remap = {i: k for k, i in enumerate(covered)}
    per_fold = evaluate_predictions(Y[covered], Y_hat[covered], "per-fold-mean",
                                    [[remap[i] for i in g] for g in groups])
    return models, reports, pooled, per_fold
