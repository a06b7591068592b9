"""Command-line entry point: ``nvchain <command> [options]``.

Run settings come from an optional ``key = value`` file (``--config``) and
are overridden by flags of the same name (``lr_chain`` -> ``--lr-chain``).
"""

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from functools import partial

import numpy as np

from . import augment as aug
from .data import (Sample, check_fold, load_manifest, load_samples, read_features, read_fold, select,
                   speaker_disjoint_kfold, write_fold)
from .errors import ConfigError, NVChainError
from .fileio import atomic_open
from .model import (EMOTIONS, REFERENCE_CHAIN_ORDER, compute_chain_order, init_model, load_model, predict,
                    save_model)
from .training import TrainConfig, adapt_few_shot, evaluate, train, train_base_predictors, write_report

log = logging.getLogger("nvchain")


@dataclass
class RunConfig:
    manifest: str = ""
    feature_dir: str = ""  # overrides the manifest directory for relative feature paths
    model_out: str = "model.ecm"
    report_out: str = "report.csv"
    chain_order_out: str = "chain_order.txt"
    fold_file: str = ""
    k: int = 5
    fold_index: int = 0
    split_seed: int = 0
    embed_dim: int = 64
    attention_dim: int = 32
    chain_order: str = "reference"
    chained: bool = True
    init_seed: int = 0
    lr_chain: float = 1e-4
    lr_frontend: float = 1e-5
    batch_size: int = 8
    min_epochs: int = 10
    max_epochs: int = 50
    patience: int = 10
    lr_halving: bool = True
    seed: int = 0
    augment: bool = False
    wav_dir: str = ""
    pitch_lo: float = -300.0
    pitch_hi: float = 300.0
    rate_lo: float = 0.8
    rate_hi: float = 1.2
    n_bands: int = 16
    vad: bool = True

    def train_config(self):
        augment = None
        if self.augment:
            augment = aug.AugmentConfig((self.pitch_lo, self.pitch_hi), (self.rate_lo, self.rate_hi))
        return TrainConfig(self.lr_chain, self.lr_frontend, self.batch_size, self.min_epochs,
                           self.max_epochs, self.patience, self.lr_halving, self.seed, augment)


RUN_FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(name, raw):
    kind = RUN_FIELDS[name].type
    try:
        if kind is bool:
            return parse_bool(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text, source="<config>"):
    values = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in RUN_FIELDS:
            raise ConfigError(f"{source}:{no}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def resolve_config(args):
    values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            values.update(parse_config_text(f.read(), args.config))
    for name in RUN_FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = _convert(name, flag)
    return RunConfig(**values)


def add_run_flags(p):
    p.add_argument("--config", help="key = value settings file")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE",
                       help=f"(default: {f.default})")


# helpers ----------------------------------------------------------------------

def _manifest(cfg):
    if not cfg.manifest:
        raise ConfigError("no manifest given (set 'manifest' or --manifest)")
    m = load_manifest(cfg.manifest)
    if cfg.feature_dir:
        m = replace(m, root=cfg.feature_dir)
    return m


def _extractor(cfg):
    return partial(aug.band_energy_features, n_bands=cfg.n_bands)


def _attach_waveforms(samples, cfg):
    for s in samples:
        path = os.path.join(cfg.wav_dir, s.file_id + ".wav")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing wav file: {path}")
        w = aug.read_wav(path)
        s.waveform = aug.vad_trim(w) if cfg.vad else w
    return samples


def _samples(cfg):
    m = _manifest(cfg)
    if cfg.augment:
        if not cfg.wav_dir:
            raise ConfigError("augment = true needs wav_dir")
        samples = [Sample(r.file_id, r.speaker_id, np.array(r.scores), None) for r in m.records]
        _attach_waveforms(samples, cfg)
        return m, samples, _extractor(cfg)
    return m, load_samples(m), None


def _feature_dim(samples, extractor):
    if extractor is not None:
        return extractor(samples[0].waveform).shape[1]
    dims = {s.features.shape[1] for s in samples}
    if len(dims) != 1:
        raise ConfigError(f"feature files disagree on dimension: {sorted(dims)}")
    return dims.pop()


def _fold(cfg, manifest):
    if cfg.fold_file:
        fold = read_fold(cfg.fold_file, cfg.fold_index)
    else:
        if not 0 <= cfg.fold_index < cfg.k:
            raise ConfigError(f"fold_index {cfg.fold_index} outside 0..{cfg.k - 1}")
        fold = speaker_disjoint_kfold(manifest, cfg.k, cfg.split_seed)[cfg.fold_index]
    check_fold(manifest, fold)
    return fold


def _chain_order(value):
    value = value.strip()
    if value == "reference":
        return REFERENCE_CHAIN_ORDER
    if value == "canonical":
        return EMOTIONS
    if value.startswith("@"):
        with open(value[1:], encoding="utf-8") as f:
            value = f.read().strip()
    return tuple(p.strip().lower() for p in value.split(","))


def _scores_csv(ids, Y):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["File_ID"] + [e.capitalize() for e in EMOTIONS])
    for fid, row in zip(ids, Y):
        w.writerow([fid] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _write_text(path, text):
    with atomic_open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


# commands ---------------------------------------------------------------------

def cmd_split(args):
    m = load_manifest(args.manifest)
    folds = speaker_disjoint_kfold(m, args.k, args.seed)
    for fold in folds:
        check_fold(m, fold)
    os.makedirs(args.out_dir, exist_ok=True)
    for fold in folds:
        write_fold(os.path.join(args.out_dir, f"fold_{fold.fold_index}.csv"), fold)
        print(f"fold {fold.fold_index}: train={len(fold.train_ids)} val={len(fold.val_ids)}")
    return 0


def cmd_chain_order(args):
    cfg = resolve_config(args)
    m, samples, extractor = _samples(cfg)
    fold = _fold(cfg, m)
    ccc = train_base_predictors(samples, fold, cfg.train_config(), cfg.embed_dim, cfg.attention_dim,
                                extractor=extractor)
    order = ",".join(EMOTIONS[i] for i in compute_chain_order(ccc))
    _write_text(cfg.chain_order_out, order + "\n")
    for e, v in zip(EMOTIONS, ccc):
        print(f"base_ccc_{e}={v:.6f}")
    print(f"chain_order={order}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    m, samples, extractor = _samples(cfg)
    fold = _fold(cfg, m)
    D = _feature_dim(samples, extractor)
    model = init_model(D, cfg.embed_dim, cfg.attention_dim, chain_order=_chain_order(cfg.chain_order),
                       seed=cfg.init_seed, chained=cfg.chained)
    model, report = train(model, select(samples, fold.train_ids), select(samples, fold.val_ids),
                          cfg.train_config(), extractor)
    save_model(cfg.model_out, model)
    write_report(report, cfg.report_out, os.path.splitext(cfg.report_out)[0] + ".log")
    print(f"best_epoch={report.best_epoch} best_val_mean_ccc={report.best_val_ccc:.6f} "
          f"stop_reason={report.stop_reason}")
    return 0


def cmd_evaluate(args):
    model = load_model(args.model)
    m = load_manifest(args.manifest)
    samples = load_samples(m, model.feature_dim)
    folds = [read_fold(p, i).val_ids for i, p in enumerate(args.folds)] if args.folds else None
    per, mean = evaluate(model, samples, args.reduction, folds)
    lines = ["emotion,ccc"] + [f"{e},{v!r}" for e, v in zip(model.emotions, per)] + [f"mean,{mean!r}"]
    for e, v in zip(model.emotions, per):
        print(f"ccc_{e}={v:.6f}")
    print(f"mean_ccc={mean:.6f}")
    if args.out:
        _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def cmd_predict(args):
    model = load_model(args.model)
    feats = [read_features(p, model.feature_dim) for p in args.features]
    Y = predict(model, feats)
    ids = [os.path.splitext(os.path.basename(p))[0] for p in args.features]
    _write_text(args.out, _scores_csv(ids, Y))
    return 0


def cmd_adapt(args):
    model = load_model(args.model)
    support = load_samples(load_manifest(args.support), model.feature_dim)
    adapted = adapt_few_shot(model, support, args.epochs, args.lr, args.batch_size, args.seed)
    save_model(args.out, adapted)
    return 0


def cmd_augment(args):
    w = aug.read_wav(args.input)
    drawn = aug.draw_augment_params(aug.AugmentConfig(), args.seed)
    cents = drawn[0] if args.cents is None else args.cents
    rate = drawn[1] if args.rate is None else args.rate
    out = aug.time_stretch(aug.pitch_shift(w, cents), rate)
    if args.vad:
        out = aug.vad_trim(out)
    aug.write_wav(args.output, out)
    print(f"cents={cents:.3f} rate={rate:.4f} samples={len(out)} clipped={out.n_clipped}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="nvchain", description="Emotion-chain regression on nonverbal vocalizations.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write speaker-disjoint fold files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("chain-order", help="train base predictors and write the chain order")
    add_run_flags(p)
    p.set_defaults(func=cmd_chain_order)

    p = sub.add_parser("train", help="train a model on one fold")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-emotion CCC of a model on a manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--reduction", choices=("pooled", "per-fold-mean"), default="pooled")
    p.add_argument("--folds", nargs="*", default=None, help="fold files whose val sets define the folds")
    p.add_argument("--out", help="CSV summary path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="score feature files")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("features", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("adapt", help="few-shot fine-tune on a support manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-6)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("augment", help="pitch-shift and rate-change a WAV file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cents", type=float)
    p.add_argument("--rate", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vad", action="store_true", help="trim silence after augmenting")
    p.set_defaults(func=cmd_augment)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (NVChainError, ValueError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"nvchain: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
