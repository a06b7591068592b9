"""Manifests, feature files, speaker-disjoint folds and a synthetic corpus."""

import csv
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, InputError, ManifestError, ShapeError,
                     TruncatedError, VersionError)
from .fileio import atomic_open, atomic_write_bytes
from .model import EMOTIONS
from .numerics import sigmoid

FEATURE_MAGIC = b"FTR1"
FEATURE_VERSION = 1

ID_COLUMN = "File_ID"
SPEAKER_COLUMN = "Speaker_ID"
PATH_COLUMN = "Feature_Path"


def emotion_header(name):
    return name.capitalize()


MANIFEST_HEADER = [ID_COLUMN, SPEAKER_COLUMN] + [emotion_header(e) for e in EMOTIONS] + [PATH_COLUMN]


@dataclass(frozen=True)
class SampleRecord:
    file_id: str
    speaker_id: str
    scores: tuple
    feature_path: str


@dataclass(frozen=True)
class Manifest:
    records: tuple
    emotions: tuple = EMOTIONS
    root: str = ""  # directory that relative feature paths resolve against

    def __len__(self):
        return len(self.records)

    @property
    def speakers(self):
        return sorted({r.speaker_id for r in self.records})

    def scores(self):
        return np.array([r.scores for r in self.records], dtype=np.float64)

    def subset(self, ids):
        ids = set(ids)
        return Manifest(tuple(r for r in self.records if r.file_id in ids), self.emotions, self.root)

    def resolve(self, record):
        if os.path.isabs(record.feature_path):
            return record.feature_path
        return os.path.join(self.root, record.feature_path)


@dataclass
class Sample:
    """One in-memory training example."""

    file_id: str
    speaker_id: str
    scores: np.ndarray
    features: np.ndarray
    waveform: object = None


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: frozenset
    val_ids: frozenset


# manifest ---------------------------------------------------------------------

def load_manifest(path):
    """Parse a manifest CSV; emotion columns may appear in any order."""
    with open(path, newline="", encoding="utf-8") as f:
        return parse_manifest(f.read(), root=os.path.dirname(os.path.abspath(path)))


def parse_manifest(text, root=""):
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ManifestError("row 1: missing header row") from None
    for col in MANIFEST_HEADER:
        if col not in header:
            raise ManifestError(f"row 1, column {col}: missing column")
    pos = {h: i for i, h in enumerate(header)}
    records = []
    seen = set()
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ManifestError(f"row {line_no}: expected {len(header)} fields, got {len(row)}")
        file_id = row[pos[ID_COLUMN]].strip()
        if not file_id:
            raise ManifestError(f"row {line_no}, column {ID_COLUMN}: empty file id")
        if file_id in seen:
            raise ManifestError(f"row {line_no}, column {ID_COLUMN}: duplicate file id {file_id!r}")
        seen.add(file_id)
        scores = []
        for emo in EMOTIONS:
            col = emotion_header(emo)
            raw = row[pos[col]].strip()
            try:
                value = float(raw)
            except ValueError:
                raise ManifestError(f"row {line_no}, column {col}: not a number: {raw!r}") from None
            if not 0.0 <= value <= 1.0:
                raise ManifestError(f"row {line_no}, column {col}: score {raw} outside [0, 1]")
            scores.append(value)
        records.append(SampleRecord(file_id, row[pos[SPEAKER_COLUMN]].strip(), tuple(scores),
                                    row[pos[PATH_COLUMN]].strip()))
    if not records:
        raise ManifestError("manifest has no data rows")
    return Manifest(tuple(records), EMOTIONS, root)


def format_manifest(manifest):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in manifest.records:
        w.writerow([r.file_id, r.speaker_id] + [repr(float(s)) for s in r.scores] + [r.feature_path])
    return buf.getvalue()


def write_manifest(path, manifest):
    with atomic_open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_manifest(manifest))


# folds ------------------------------------------------------------------------

def speaker_disjoint_kfold(manifest, k, seed=0):
    """Partition speakers into ``k`` groups of near-equal speaker count.

    Fold ``i`` validates on every sample of speaker group ``i`` and trains on
    the rest.
    """
    if k < 2:
        raise InputError(f"k must be at least 2, got {k}")
    speakers = manifest.speakers
    if len(speakers) < k:
        raise InputError(f"{len(speakers)} speakers cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(speakers))
    all_ids = frozenset(r.file_id for r in manifest.records)
    folds = []
    for i, group in enumerate(np.array_split(perm, k)):
        val_speakers = {speakers[j] for j in group}
        val = frozenset(r.file_id for r in manifest.records if r.speaker_id in val_speakers)
        folds.append(FoldSplit(i, all_ids - val, val))
    return folds


def check_fold(manifest, fold):
    """Raise if a fold violates coverage or speaker disjointness."""
    spk = {r.file_id: r.speaker_id for r in manifest.records}
    if fold.train_ids & fold.val_ids:
        raise InputError(f"fold {fold.fold_index}: train and validation share samples")
    if (fold.train_ids | fold.val_ids) != set(spk):
        raise InputError(f"fold {fold.fold_index}: does not cover the manifest")
    shared = {spk[i] for i in fold.train_ids} & {spk[i] for i in fold.val_ids}
    if shared:
        raise InputError(f"fold {fold.fold_index}: speakers in both sets: {sorted(shared)[:5]}")


def format_fold(fold):
    lines = [f"{ID_COLUMN},Role"]
    lines += [f"{i},train" for i in sorted(fold.train_ids)]
    lines += [f"{i},val" for i in sorted(fold.val_ids)]
    return "\n".join(lines) + "\n"


def write_fold(path, fold):
    with atomic_open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_fold(fold))


def read_fold(path, fold_index=0):
    train, val = set(), set()
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            role = row["Role"].strip()
            if role == "train":
                train.add(row[ID_COLUMN].strip())
            elif role == "val":
                val.add(row[ID_COLUMN].strip())
            else:
                raise ManifestError(f"{path}: unknown role {role!r}")
    return FoldSplit(fold_index, frozenset(train), frozenset(val))


# feature files ----------------------------------------------------------------

def encode_features(values):
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InputError(f"feature sequence must be T x D with T, D >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("feature sequence contains NaN or Inf")
    x32 = x.astype("<f4")
    if not np.all(np.isfinite(x32)):
        raise InputError("feature values overflow 32-bit float storage")
    T, D = x.shape
    return FEATURE_MAGIC + struct.pack("<3I", FEATURE_VERSION, T, D) + x32.tobytes()


def decode_features(data):
    if len(data) < 4:
        if FEATURE_MAGIC.startswith(bytes(data)) and data:
            raise TruncatedError("feature header")
        raise BadMagicError("not a feature file")
    if data[:4] != FEATURE_MAGIC:
        raise BadMagicError("not a feature file")
    if len(data) < 16:
        raise TruncatedError("feature header")
    version, T, D = struct.unpack_from("<3I", data, 4)
    if version != FEATURE_VERSION:
        raise VersionError(f"unsupported feature file version {version}")
    if T == 0 or D == 0:
        raise ShapeError(f"invalid feature shape T={T} D={D}")
    need = 16 + 4 * T * D
    if len(data) < need:
        raise TruncatedError("feature payload")
    if len(data) > need:
        raise ShapeError(f"{len(data) - need} bytes beyond declared shape T={T} D={D}")
    x = np.frombuffer(data, dtype="<f4", count=T * D, offset=16).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise ShapeError("feature file contains NaN or Inf")
    return x.reshape(T, D)


def write_features(path, values):
    """Store a ``T x D`` sequence; values are rounded to 32-bit floats."""
    atomic_write_bytes(path, encode_features(values))


def read_features(path, expected_dim=None):
    with open(path, "rb") as f:
        x = decode_features(f.read())
    if expected_dim is not None and x.shape[1] != expected_dim:
        raise ShapeError(f"{path}: feature dim {x.shape[1]} != expected {expected_dim}")
    return x


def load_samples(manifest, expected_dim=None):
    """Read every feature file a manifest points at."""
    samples = []
    for r in manifest.records:
        path = manifest.resolve(r)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing feature file: {path}")
        samples.append(Sample(r.file_id, r.speaker_id, np.array(r.scores),
                              read_features(path, expected_dim)))
    return samples


def select(samples, ids):
    ids = set(ids)
    return [s for s in samples if s.file_id in ids]


# synthetic corpus ---------------------------------------------------------------

DEPENDENT_PAIR = ("amusement", "sadness")


@dataclass
class SyntheticGenerator:
    """Known generative process for end-to-end tests.

    Each independent emotion ``e`` has a latent ``u_e ~ N(0, 1)`` and score
    ``sigmoid(slope * u_e)``.  Frames are ``offset_speaker + M u + noise``.
    The dependency source uses the steeper ``source_slope``.  The dependent
    emotion's score is ``dependency(score_source)`` and has no latent of its
    own; emotions in ``noise_emotions`` get uniform scores that
    the features say nothing about.
    """

    D: int
    mixing: np.ndarray
    latent_emotions: tuple
    dependent: tuple = DEPENDENT_PAIR
    noise_emotions: tuple = ()
    slope: float = 1.5
    source_slope: float = 3.0
    coupling: tuple = (6.0, -2.0, -3.0)
    frame_noise: float = 0.5
    speaker_scale: float = 0.5
    speaker_basis: np.ndarray = field(default=None, repr=False)
    min_frames: int = 20
    max_frames: int = 80

    def dependency(self, y_src):
        """Score of the dependent emotion as a function of its source's score."""
        y = np.clip(np.asarray(y_src, dtype=np.float64), 1e-12, 1 - 1e-12)
        u = np.log(y / (1 - y)) / self.source_slope
        a, c, b = self.coupling
        return sigmoid(a * y + c * u + b)

    def speaker_offset(self, rng):
        return self.speaker_basis @ rng.normal(0.0, self.speaker_scale, self.speaker_basis.shape[1])

    def draw(self, n, rng):
        """Latents ``[n, K]``, drives ``[n, C]`` (pre-sigmoid) and scores ``[n, C]``."""
        C = len(EMOTIONS)
        u = rng.normal(size=(n, len(self.latent_emotions)))
        drive = np.zeros((n, C))
        for k, emo in enumerate(self.latent_emotions):
            slope = self.source_slope if emo == self.dependent[0] else self.slope
            drive[:, EMOTIONS.index(emo)] = slope * u[:, k]
        for emo in self.noise_emotions:
            y = rng.uniform(0.02, 0.98, n)
            drive[:, EMOTIONS.index(emo)] = np.log(y / (1 - y))
        src, dep = (EMOTIONS.index(e) for e in self.dependent)
        y_src = sigmoid(drive[:, src])
        y_dep = self.dependency(y_src)
        drive[:, dep] = np.log(y_dep / (1 - y_dep))
        scores = sigmoid(drive)
        scores[:, dep] = y_dep
        return u, drive, scores

    def frames(self, latent, offset, rng):
        T = int(rng.integers(self.min_frames, self.max_frames + 1))
        x = offset + self.mixing @ latent + rng.normal(0.0, self.frame_noise, (T, self.D))
        # match what a reader of the 32-bit feature file would see
        return x.astype(np.float32).astype(np.float64)


def make_generator(D, seed, noise_emotions=(), dependent=DEPENDENT_PAIR, **kwargs):
    rng = np.random.default_rng([seed, 0x5EED])
    latent = tuple(e for e in EMOTIONS if e not in noise_emotions and e != dependent[1])
    K = len(latent)
    if dependent[0] not in latent:
        raise InputError(f"dependency source {dependent[0]!r} must carry a feature signal")
    Q, _ = np.linalg.qr(rng.normal(size=(D, D)))
    if D >= K:
        mixing = Q[:, :K]
        spk = Q[:, K:] if D > K else np.zeros((D, 1))
    else:
        mixing = rng.normal(size=(D, K)) / np.sqrt(D)
        spk = Q
    return SyntheticGenerator(D, mixing, latent, tuple(dependent), tuple(noise_emotions),
                              speaker_basis=spk, **kwargs)


@dataclass
class SyntheticDataset:
    manifest: Manifest
    samples: list
    drives: np.ndarray
    latents: np.ndarray
    generator: SyntheticGenerator


def generate_synthetic_dataset(n_samples, n_speakers, D, seed, out_dir=None,
                               noise_emotions=(), dependent=DEPENDENT_PAIR, **kwargs):
    """Deterministic synthetic corpus; writes manifest + features if ``out_dir``."""
    if n_speakers < 2 or n_samples < n_speakers or D < 1:
        raise InputError(f"need n_samples >= n_speakers >= 2 and D >= 1, "
                         f"got n_samples={n_samples} n_speakers={n_speakers} D={D}")
    gen = make_generator(D, seed, noise_emotions, dependent, **kwargs)
    rng = np.random.default_rng(seed)
    offsets = [gen.speaker_offset(rng) for _ in range(n_speakers)]
    owner = rng.permutation(np.concatenate([np.arange(n_speakers),
                                            rng.integers(0, n_speakers, n_samples - n_speakers)]))
    latents, drives, scores = gen.draw(n_samples, rng)
    records, samples = [], []
    for i in range(n_samples):
        fid = f"s{i:05d}"
        spk = f"spk{owner[i]:03d}"
        x = gen.frames(latents[i], offsets[owner[i]], rng)
        rel = os.path.join("features", fid + ".ftr")
        records.append(SampleRecord(fid, spk, tuple(float(v) for v in scores[i]), rel))
        samples.append(Sample(fid, spk, scores[i].copy(), x))
    manifest = Manifest(tuple(records), EMOTIONS, out_dir or "")
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "features"), exist_ok=True)
        for rec, s in zip(records, samples):
            write_features(os.path.join(out_dir, rec.feature_path), s.features)
        write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return SyntheticDataset(manifest, samples, drives, latents, gen)


def synthetic_speaker(generator, n, offset, seed, prefix="new"):
    """Samples of one extra speaker with an explicit feature ``offset``."""
    rng = np.random.default_rng(seed)
    latents, _, scores = generator.draw(n, rng)
    return [Sample(f"{prefix}{i:03d}", prefix, scores[i].copy(),
                   generator.frames(latents[i], offset, rng)) for i in range(n)]
