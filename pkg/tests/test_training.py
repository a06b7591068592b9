from dataclasses import replace

import numpy as np
import pytest

from conftest import DIMS, synth_config
from nvchain.data import generate_synthetic_dataset, speaker_disjoint_kfold, synthetic_speaker
from nvchain.errors import ConfigError, InputError
from nvchain.metrics import per_emotion_ccc
from nvchain.model import EMOTIONS, REFERENCE_CHAIN_ORDER, compute_chain_order, init_model, predict
from nvchain.training import (AdamState, TrainConfig, adam_step, adapt_few_shot, evaluate,
                              evaluate_predictions, train, train_base_predictors, write_report)
from oracles import ccc_exact


def fresh(seed=0, chained=True):
    return init_model(DIMS["D"], DIMS["H"], DIMS["A"], chain_order=REFERENCE_CHAIN_ORDER, seed=seed,
                      chained=chained)


# Adam -------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=(3, 4))}
    g = {"w": rng.normal(size=(3, 4))}
    new, state = adam_step(p, g, AdamState(), 1e-3)
    np.testing.assert_allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=0, atol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_is_noop():
    p = {"w": np.arange(4.0)}
    state = AdamState()
    for _ in range(5):
        p2, state = adam_step(p, {"w": np.zeros(4)}, state, 1e-2)
        assert p2["w"].tobytes() == p["w"].tobytes()
    assert state.step == 5


def test_adam_group_ratio():
    g = {"w": np.array([0.3, -2.0, 1e-3])}
    p = {"w": np.zeros(3)}
    a, _ = adam_step(p, g, AdamState(), 1e-4)
    b, _ = adam_step(p, g, AdamState(), 1e-5)
    np.testing.assert_allclose(a["w"] / b["w"], 10.0, rtol=0, atol=1e-9)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(InputError, match="frontend.W"):
        adam_step({"frontend.W": np.zeros(2)}, {"frontend.W": np.array([0.0, np.inf])}, AdamState(), 1e-3)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(min_epochs=20, max_epochs=10)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    cfg = TrainConfig()
    assert (cfg.lr_chain, cfg.lr_frontend, cfg.batch_size) == (1e-4, 1e-5, 8)
    assert (cfg.min_epochs, cfg.max_epochs, cfg.patience) == (10, 50, 10)


# train ------------------------------------------------------------------------

def test_learnability(trained_chain):
    _, report = trained_chain
    assert report.best_val_ccc >= 0.95


def test_report_invariants(trained_chain):
    _, report = trained_chain
    vals = [r.val_mean_ccc for r in report.epochs]
    assert report.best_val_ccc == max(vals) == vals[report.best_epoch - 1]
    assert report.stop_reason in ("max_epochs", "early_stop")
    assert (report.train_mode, report.eval_mode) == ("teacher_forcing", "autoregressive")
    assert all(len(r.val_ccc) == 10 for r in report.epochs)
    lrs = [(r.lr_chain, r.lr_frontend) for r in report.epochs]
    assert all(a[0] >= b[0] and a[1] >= b[1] for a, b in zip(lrs, lrs[1:]))
    # every drop in the learning rate is a logged halving
    drops = [r.epoch for r, nxt in zip(report.epochs, report.epochs[1:]) if nxt.lr_chain < r.lr_chain]
    assert drops == [e for e, _, _ in report.halvings if e < len(report.epochs)]


def test_returned_model_is_best_snapshot(synth_split):
    tr, va = synth_split
    cfg = synth_config(lr_chain=0.1, lr_frontend=0.01, lr_halving=False, patience=50, max_epochs=30)
    model, report = train(fresh(), tr, va, cfg)
    assert report.best_epoch != len(report.epochs)
    ccc = per_emotion_ccc(np.array([s.scores for s in va]), predict(model, [s.features for s in va]))
    assert float(ccc.mean()) == report.best_val_ccc
    assert report.best_val_ccc > report.epochs[-1].val_mean_ccc


def test_shuffled_labels_stop_early(synth_split):
    tr, va = synth_split
    perm = np.random.default_rng(0).permutation(len(tr))
    shuffled = [replace(s, scores=tr[p].scores) for s, p in zip(tr, perm)]
    _, report = train(fresh(), shuffled, va, synth_config())
    assert report.stop_reason == "early_stop"
    assert abs(report.best_val_ccc) <= 0.2


def test_training_is_deterministic(synth_split):
    tr, va = synth_split
    cfg = synth_config(max_epochs=3, min_epochs=1)
    m1, r1 = train(fresh(), tr[:40], va, cfg)
    m2, r2 = train(fresh(), tr[:40], va, cfg)
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)
    assert r1.summary_rows() == r2.summary_rows()


def test_input_model_untouched(synth_split):
    tr, va = synth_split
    m = fresh()
    before = {k: v.copy() for k, v in m.params.items()}
    train(m, tr[:20], va, synth_config(max_epochs=1, min_epochs=1))
    assert all(before[k].tobytes() == m.params[k].tobytes() for k in before)


def test_trailing_single_batch_is_dropped(synth_split):
    tr, va = synth_split
    _, report = train(fresh(), tr[:9], va, synth_config(max_epochs=3, min_epochs=1))
    assert report.dropped_batches == 3


def test_training_needs_two_samples(synth_split):
    tr, va = synth_split
    with pytest.raises(InputError):
        train(fresh(), tr[:1], va, synth_config(max_epochs=1, min_epochs=1))
    with pytest.raises(InputError):
        train(fresh(), [], va, synth_config())


def test_write_report(tmp_path, trained_chain):
    _, report = trained_chain
    write_report(report, tmp_path / "r.csv", tmp_path / "r.log")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    header = lines[0].split(",")
    assert header[:3] == ["epoch", "train_loss", "val_mean_ccc"]
    assert header[3:13] == [f"ccc_{e}" for e in EMOTIONS] and header[13:] == ["lr_chain", "lr_frontend"]
    assert len(lines) == len(report.epochs) + 1
    log = (tmp_path / "r.log").read_text()
    assert "eval_mode=autoregressive" in log and f"stop_reason={report.stop_reason}" in log


# evaluate ---------------------------------------------------------------------

def test_evaluate_stub_predictions():
    Y = np.random.default_rng(0).uniform(size=(6, 10))
    per, mean = evaluate_predictions(Y, Y)
    assert np.all(per == 1.0) and mean == 1.0
    per, mean = evaluate_predictions(Y, np.full_like(Y, 0.4))
    assert np.all(per == 0.0) and mean == 0.0
    with pytest.raises(InputError):
        evaluate_predictions(Y[:1], Y[:1])


def test_pooled_and_per_fold_mean_differ():
    Y = np.array([[0.1], [0.2], [0.8], [0.9]])
    Yh = np.array([[0.15], [0.25], [0.7], [0.95]])
    pooled, _ = evaluate_predictions(Y, Yh)
    folded, _ = evaluate_predictions(Y, Yh, "per-fold-mean", [[0, 1], [2, 3]])
    assert abs(pooled[0] - ccc_exact(Yh[:, 0], Y[:, 0])) <= 1e-12
    expected = (ccc_exact(Yh[:2, 0], Y[:2, 0]) + ccc_exact(Yh[2:, 0], Y[2:, 0])) / 2
    assert abs(folded[0] - expected) <= 1e-12
    assert abs(pooled[0] - folded[0]) > 0.1


def test_evaluate_model(trained_chain, synth_split):
    model, report = trained_chain
    _, va = synth_split
    per, mean = evaluate(model, va)
    assert mean == report.best_val_ccc
    ids = sorted(s.file_id for s in va)
    per_fold, _ = evaluate(model, va, "per-fold-mean", folds=[ids[:len(ids) // 2], ids[len(ids) // 2:]])
    assert per_fold.shape == (10,)


# chain ordering ---------------------------------------------------------------

def test_base_predictors_put_easy_before_noise():
    ds = generate_synthetic_dataset(200, 10, 16, seed=3, noise_emotions=("awkwardness",))
    fold = speaker_disjoint_kfold(ds.manifest, 5, seed=0)[0]
    cfg = synth_config(max_epochs=15)
    v = train_base_predictors(ds.samples, fold, cfg, embed_dim=8, attention_dim=4)
    easy, noise = EMOTIONS.index("awe"), EMOTIONS.index("awkwardness")
    assert v[easy] > v[noise]
    order = compute_chain_order(v)
    assert order.index(easy) < order.index(noise)
    assert order[-1] == noise


# few-shot ---------------------------------------------------------------------

def _support(synth, seed, n=2):
    g = synth.generator
    offset = g.mixing @ np.random.default_rng(100 + seed).normal(0, 1.0, g.mixing.shape[1])
    return synthetic_speaker(g, n, offset, seed=200 + seed)


def _support_ccc(model, support):
    Y = np.array([s.scores for s in support])
    return per_emotion_ccc(Y, predict(model, [s.features for s in support])).mean()


def test_adapt_zero_lr_is_noop(trained_chain, synth):
    model, _ = trained_chain
    out = adapt_few_shot(model, _support(synth, 0), lr=0.0)
    assert all(out.params[k].tobytes() == model.params[k].tobytes() for k in model.params)


@pytest.mark.parametrize("seed", range(3))
def test_adapt_improves_support_ccc(trained_chain, synth, seed):
    model, _ = trained_chain
    support = _support(synth, seed)
    before = {k: v.copy() for k, v in model.params.items()}
    adapted = adapt_few_shot(model, support, epochs=10, lr=1e-6)
    assert _support_ccc(adapted, support) > _support_ccc(model, support)
    assert all(before[k].tobytes() == model.params[k].tobytes() for k in before)


def test_adapt_deterministic(trained_chain, synth):
    model, _ = trained_chain
    support = _support(synth, 1, n=5)
    a = adapt_few_shot(model, support, lr=1e-4, batch_size=2, seed=4)
    b = adapt_few_shot(model, support, lr=1e-4, batch_size=2, seed=4)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_adapt_single_sample_uses_duplicate(trained_chain, synth):
    model, _ = trained_chain
    support = _support(synth, 2, n=1)
    adapted = adapt_few_shot(model, support, lr=1e-3)
    s = support[0]
    err = lambda m: float(np.mean((predict(m, [s.features])[0] - s.scores) ** 2))  # noqa: E731
    assert err(adapted) < err(model)


def test_adapt_empty_support():
    with pytest.raises(InputError):
        adapt_few_shot(fresh(), [])
