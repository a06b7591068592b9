import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvchain import data as Dm
from nvchain.errors import BadMagicError, InputError, ManifestError, ShapeError, TruncatedError, VersionError
from nvchain.metrics import per_emotion_ccc
from nvchain.model import EMOTIONS
from nvchain.numerics import sigmoid

HEADER = ",".join(Dm.MANIFEST_HEADER)


def row(fid, spk, scores, path="f.ftr"):
    return ",".join([fid, spk] + [str(s) for s in scores] + [path])


def make_manifest(spk_of):
    recs = tuple(Dm.SampleRecord(f, s, (0.5,) * 10, f + ".ftr") for f, s in spk_of)
    return Dm.Manifest(recs)


# manifest ---------------------------------------------------------------------

def test_parse_two_rows():
    text = "\n".join([HEADER, row("a", "s1", [0.1] * 10), row("b", "s2", [0.9] * 10)]) + "\n"
    m = Dm.parse_manifest(text)
    assert len(m) == 2 and m.records[1].scores == (0.9,) * 10
    assert m.speakers == ["s1", "s2"]


def test_score_out_of_range_names_row_and_column():
    scores = [0.1] * 10
    scores[3] = 1.2
    text = "\n".join([HEADER, row("a", "s1", [0.1] * 10), row("b", "s1", scores)])
    with pytest.raises(ManifestError, match=r"row 3, column Distress"):
        Dm.parse_manifest(text)


def test_permuted_columns_give_same_manifest():
    rng = np.random.default_rng(0)
    scores = rng.uniform(size=(3, 10)).round(4)
    plain = "\n".join([HEADER] + [row(f"f{i}", "s", scores[i]) for i in range(3)])
    perm = rng.permutation(len(Dm.MANIFEST_HEADER))
    lines = [line.split(",") for line in plain.split("\n")]
    shuffled = "\n".join(",".join(cells[j] for j in perm) for cells in lines)
    assert Dm.parse_manifest(shuffled) == Dm.parse_manifest(plain)


@pytest.mark.parametrize("text, pattern", [
    (HEADER.replace(",Awe", "") + "\n", "missing column"),
    (HEADER + "\n" + row("a", "s", [0.1] * 10) + "\n" + row("a", "s", [0.2] * 10), "duplicate"),
    (HEADER + "\n" + row("a", "s", ["x"] + [0.1] * 9), "not a number"),
    (HEADER + "\n" + "a,s,0.1", "expected 13 fields"),
    (HEADER + "\n", "no data rows"),
])
def test_manifest_errors(text, pattern):
    with pytest.raises(ManifestError, match=pattern):
        Dm.parse_manifest(text)


def test_manifest_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    recs = tuple(Dm.SampleRecord(f"f{i}", f"s{i % 3}", tuple(rng.uniform(size=10)), f"f{i}.ftr")
                 for i in range(6))
    m = Dm.Manifest(recs, root=str(tmp_path))
    Dm.write_manifest(tmp_path / "m.csv", m)
    assert Dm.load_manifest(tmp_path / "m.csv") == m


# folds ------------------------------------------------------------------------

def test_kfold_balances_speaker_counts():
    m = make_manifest([(f"f{i}", f"spk{i:04d}") for i in range(1139)])
    folds = Dm.speaker_disjoint_kfold(m, 5, seed=0)
    assert sorted(len(f.val_ids) for f in folds) == [227, 228, 228, 228, 228]
    assert {len(f.train_ids) for f in folds} <= {911, 912}


def test_kfold_two_speakers():
    m = make_manifest([("a1", "a"), ("a2", "a"), ("b1", "b")])
    vals = {f.val_ids for f in Dm.speaker_disjoint_kfold(m, 2, seed=3)}
    assert vals == {frozenset({"a1", "a2"}), frozenset({"b1"})}


def test_kfold_errors():
    m = make_manifest([("a1", "a"), ("b1", "b")])
    with pytest.raises(InputError):
        Dm.speaker_disjoint_kfold(m, 1)
    with pytest.raises(InputError):
        Dm.speaker_disjoint_kfold(m, 3)


manifests = st.lists(st.tuples(st.integers(0, 10**6), st.integers(0, 30)), min_size=2, max_size=60,
                     unique_by=lambda t: t[0])


@settings(max_examples=1000, deadline=None)
@given(manifests, st.integers(2, 6), st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_kfold_properties(rows, k, seed, rnd):
    pairs = [(f"f{a}", f"s{b}") for a, b in rows]
    m = make_manifest(pairs)
    if len(m.speakers) < k:
        with pytest.raises(InputError):
            Dm.speaker_disjoint_kfold(m, k, seed)
        return
    folds = Dm.speaker_disjoint_kfold(m, k, seed)
    assert len(folds) == k
    for f in folds:
        Dm.check_fold(m, f)
    # every sample validates exactly once
    all_val = [i for f in folds for i in f.val_ids]
    assert sorted(all_val) == sorted(p[0] for p in pairs)
    spk = dict(pairs)
    sizes = [len({spk[i] for i in f.val_ids}) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert Dm.speaker_disjoint_kfold(m, k, seed) == folds
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert Dm.speaker_disjoint_kfold(make_manifest(shuffled), k, seed) == folds


def test_fold_file_round_trip(tmp_path):
    fold = Dm.FoldSplit(2, frozenset({"a", "b"}), frozenset({"c"}))
    Dm.write_fold(tmp_path / "fold.csv", fold)
    assert Dm.read_fold(tmp_path / "fold.csv", 2) == fold


# feature files ----------------------------------------------------------------

def test_features_round_trip(tmp_path):
    x = np.array([[1.0, -2.5], [0.25, 3.0], [1e-3, 7.0]], dtype=np.float32).astype(np.float64)
    Dm.write_features(tmp_path / "x.ftr", x)
    back = Dm.read_features(tmp_path / "x.ftr")
    assert back.dtype == np.float64 and back.tobytes() == x.tobytes()
    raw = (tmp_path / "x.ftr").read_bytes()
    assert raw[:4] == b"FTR1" and struct.unpack("<3I", raw[4:16]) == (1, 3, 2)
    assert len(raw) == 16 + 4 * 6


@settings(max_examples=200)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_features_round_trip_float32_values(T, D, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2**32, size=(T, D), dtype=np.uint64).astype(np.uint32)
    with np.errstate(invalid="ignore"):
        x = bits.view(np.float32).astype(np.float64)
    x[~np.isfinite(x)] = 1.5
    assert Dm.decode_features(Dm.encode_features(x)).tobytes() == x.tobytes()


def test_features_subnormal_float32_survive():
    x = np.array([[np.finfo(np.float32).smallest_subnormal, -1e-40]], dtype=np.float32).astype(np.float64)
    assert Dm.decode_features(Dm.encode_features(x)).tobytes() == x.tobytes()


def test_features_errors():
    good = Dm.encode_features(np.ones((3, 2)))
    with pytest.raises(TruncatedError, match="unexpected end of file"):
        Dm.decode_features(good[:-1])
    with pytest.raises(TruncatedError):
        Dm.decode_features(good[:10])
    with pytest.raises(BadMagicError):
        Dm.decode_features(b"NOPE" + good[4:])
    with pytest.raises(VersionError):
        Dm.decode_features(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(ShapeError):
        Dm.decode_features(b"FTR1" + struct.pack("<3I", 1, 0, 2))
    with pytest.raises(ShapeError):
        Dm.decode_features(good + b"\0\0\0\0")
    with pytest.raises(InputError):
        Dm.encode_features(np.zeros((0, 2)))
    with pytest.raises(InputError):
        Dm.encode_features(np.array([[np.nan]]))


def test_read_features_dim_check(tmp_path):
    Dm.write_features(tmp_path / "x.ftr", np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Dm.read_features(tmp_path / "x.ftr", expected_dim=4)


# synthetic corpus -------------------------------------------------------------

def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = os.path.join(dirpath, name)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_synthetic_byte_identical(tmp_path):
    Dm.generate_synthetic_dataset(30, 4, 6, seed=5, out_dir=str(tmp_path / "a"))
    Dm.generate_synthetic_dataset(30, 4, 6, seed=5, out_dir=str(tmp_path / "b"))
    a, b = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert len(a) == 31 and a == b
    Dm.generate_synthetic_dataset(30, 4, 6, seed=6, out_dir=str(tmp_path / "c"))
    assert _tree_bytes(tmp_path / "c") != a


def test_synthetic_files_load_back(tmp_path):
    ds = Dm.generate_synthetic_dataset(12, 3, 5, seed=2, out_dir=str(tmp_path))
    m = Dm.load_manifest(tmp_path / "manifest.csv")
    samples = Dm.load_samples(m, expected_dim=5)
    for s, ref in zip(samples, ds.samples):
        assert s.features.tobytes() == ref.features.tobytes()
        np.testing.assert_array_equal(s.scores, ref.scores)


def test_synthetic_shapes_and_speakers(synth):
    assert len(synth.samples) == 400 and len(synth.manifest.speakers) == 20
    for s in synth.samples:
        assert 20 <= s.features.shape[0] <= 80 and s.features.shape[1] == 16
    Y = synth.manifest.scores()
    assert np.all((Y > 0) & (Y < 1))


def test_synthetic_dependency_is_exact(synth):
    src, dep = (EMOTIONS.index(e) for e in Dm.DEPENDENT_PAIR)
    Y = synth.manifest.scores()
    g = synth.generator.dependency(Y[:, src])
    assert np.corrcoef(Y[:, dep], g)[0, 1] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(Y[:, dep], g, rtol=0, atol=1e-12)


def test_linear_probe_on_generating_signal(synth):
    """Least squares from the signal to each score's logit recovers the scores."""
    g = synth.generator
    idx = [EMOTIONS.index(e) for e in g.latent_emotions]
    Y = synth.manifest.scores()[:, idx]
    # the latent itself
    U = np.hstack([synth.latents, np.ones((len(Y), 1))])
    coef, *_ = np.linalg.lstsq(U, synth.drives[:, idx], rcond=None)
    assert per_emotion_ccc(Y, sigmoid(U @ coef)).min() >= 0.99
    # the observable frame means
    X = np.hstack([[s.features.mean(axis=0) for s in synth.samples], np.ones((len(Y), 1))])
    coef, *_ = np.linalg.lstsq(X, synth.drives[:, idx], rcond=None)
    assert per_emotion_ccc(Y, sigmoid(X @ coef)).min() >= 0.99


def test_synthetic_degenerate_sizes():
    with pytest.raises(InputError):
        Dm.generate_synthetic_dataset(5, 1, 4, seed=0)
    with pytest.raises(InputError):
        Dm.generate_synthetic_dataset(3, 4, 4, seed=0)


def test_load_samples_missing_file(tmp_path):
    m = Dm.Manifest((Dm.SampleRecord("a", "s", (0.5,) * 10, "nope.ftr"),), root=str(tmp_path))
    with pytest.raises(FileNotFoundError, match="missing feature file"):
        Dm.load_samples(m)
