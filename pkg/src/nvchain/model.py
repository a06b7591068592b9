"""Front-end, attentive pooling and the linear sigmoid classifier chain.

Per frame ``h_t = tanh(W_f x_t + b_f)``; attention scores
``e_t = v . tanh(W_a h_t + b_a)`` are softmaxed over time and the embedding
is ``z = sum_t alpha_t h_t``.  Chain position ``p`` predicts emotion
``chain_order[p]`` from ``z`` concatenated with the scores already produced at
positions ``0..p-1`` (ground truth under teacher forcing, the model's own
sigmoid outputs otherwise).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import BadMagicError, InputError, ShapeError, TruncatedError, VersionError

EMOTIONS = (
    "amusement", "awe", "awkwardness", "distress", "excitement",
    "fear", "horror", "sadness", "surprise", "triumph",
)

REFERENCE_CHAIN_ORDER = (
    "awe", "surprise", "amusement", "fear", "horror",
    "sadness", "distress", "excitement", "triumph", "awkwardness",
)

FRONTEND_PREFIX = "frontend."
MAGIC = b"ECM1"


def resolve_chain_order(order, emotions=EMOTIONS):
    """Turn emotion names or indices into a validated tuple of indices."""
    if order is None:
        return tuple(range(len(emotions)))
    idx = []
    for item in order:
        if isinstance(item, str):
            if item not in emotions:
                raise InputError(f"unknown emotion {item!r} in chain order")
            idx.append(emotions.index(item))
        else:
            idx.append(int(item))
    if sorted(idx) != list(range(len(emotions))):
        raise InputError(f"chain order {tuple(order)} is not a permutation of {len(emotions)} emotions")
    return tuple(idx)


@dataclass
class EmotionChainModel:
    emotions: tuple
    chain_order: tuple
    params: dict = field(repr=False)
    chained: bool = True

    @property
    def n_emotions(self):
        return len(self.emotions)

    @property
    def feature_dim(self):
        return self.params["frontend.W"].shape[1]

    @property
    def embed_dim(self):
        return self.params["frontend.W"].shape[0]

    @property
    def attention_dim(self):
        return self.params["pool.W"].shape[0]

    def copy(self):
        return EmotionChainModel(
            self.emotions, self.chain_order,
            {k: v.copy() for k, v in self.params.items()}, self.chained,
        )

    def param_names(self):
        return list(self.params)

    def group_of(self, name):
        return "frontend" if name.startswith(FRONTEND_PREFIX) else "chain"


def _shapes(C, D, H, A, chained=True):
    shapes = {
        "frontend.W": (H, D),
        "frontend.b": (H,),
        "pool.W": (A, H),
        "pool.b": (A,),
        "pool.v": (A,),
    }
    for p in range(C):
        shapes[f"chain.{p}.W"] = (1, H + p if chained else H)
        shapes[f"chain.{p}.b"] = (1,)
    return shapes


def init_model(D, H, A, emotions=EMOTIONS, chain_order=None, seed=0, chained=True):
    """Xavier-uniform weights, zero biases, deterministic per ``seed``."""
    if min(D, H, A) < 1:
        raise InputError(f"model dimensions must be positive, got D={D} H={H} A={A}")
    emotions = tuple(emotions)
    order = resolve_chain_order(chain_order, emotions)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _shapes(len(emotions), D, H, A, chained).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_out, fan_in = shape if len(shape) == 2 else (1, shape[0])
        r = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-r, r, size=shape)
    return EmotionChainModel(emotions, order, params, chained)


def _as_features(features, D):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"features must be a T x D matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise InputError("empty sequence after VAD trim")
    if x.shape[1] != D:
        raise InputError(f"feature dim {x.shape[1]} does not match model dim {D}")
    return x


def _embed(p, x):
    h = nx.tanh_elem(nx.linear(x, p["frontend.W"], p["frontend.b"]))
    u = nx.tanh_elem(nx.linear(h, p["pool.W"], p["pool.b"]))
    e = nx.linear(u, nx.reshape(p["pool.v"], (1, -1)))
    alpha = nx.softmax(nx.reshape(e, (-1,)))
    return nx.weighted_sum(alpha, h)


def _chain(model, p, Z, teacher):
    C = model.n_emotions
    outs = [None] * C
    prev = []
    for pos, emo in enumerate(model.chain_order):
        inp = nx.concat([Z] + prev, axis=1) if prev else Z
        y = nx.sigmoid(nx.linear(inp, p[f"chain.{pos}.W"], p[f"chain.{pos}.b"]))
        outs[emo] = y
        if model.chained:
            prev.append(teacher[:, emo:emo + 1] if teacher is not None else y)
    return nx.concat(outs, axis=1)


def _check_teacher(teacher, n, C):
    t = np.asarray(teacher, dtype=np.float64)
    if t.shape != (n, C):
        raise InputError(f"teacher scores shape {t.shape} != {(n, C)}")
    if not np.all((t >= 0.0) & (t <= 1.0)):
        raise InputError("teacher scores must lie in [0, 1]")
    return t


def embed(model, features):
    """Attentively pooled embedding ``z[H]`` of one ``T x D`` feature sequence."""
    return _embed(model.params, _as_features(features, model.feature_dim))


def attention_weights(model, features):
    p = model.params
    x = _as_features(features, model.feature_dim)
    h = np.tanh(x @ p["frontend.W"].T + p["frontend.b"])
    e = np.tanh(h @ p["pool.W"].T + p["pool.b"]) @ p["pool.v"]
    return nx.softmax(e)


def predict_chain(model, z, teacher=None):
    """Scores in canonical emotion order for one embedding ``z``."""
    Z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if Z.shape[1] != model.embed_dim:
        raise InputError(f"embedding width {Z.shape[1]} != {model.embed_dim}")
    if teacher is not None:
        teacher = _check_teacher(np.reshape(teacher, (1, -1)), 1, model.n_emotions)
    return _chain(model, model.params, Z, teacher)[0]


def forward_batch(model, batch, teacher=None, params=None):
    """Predictions ``[N, C]`` for a list of feature sequences.

    ``params`` may map names to :class:`~nvchain.numerics.Var` handles, in
    which case the whole pass is recorded on their tape.
    """
    p = model.params if params is None else params
    D = model.feature_dim
    Z = nx.stack([_embed(p, _as_features(x, D)) for x in batch])
    if teacher is not None:
        teacher = _check_teacher(teacher, len(batch), model.n_emotions)
    return _chain(model, p, Z, teacher)


def predict(model, batch):
    """Autoregressive predictions ``[N, C]`` for many sequences.

    Each sequence runs on its own so a row never depends on its neighbours
    (batched BLAS products can differ in the last bit by row position).
    """
    if len(batch) == 0:
        return np.zeros((0, model.n_emotions))
    return np.concatenate([forward_batch(model, [x]) for x in batch])


def compute_chain_order(base_ccc):
    """Indices sorted by CCC descending, ties by canonical index ascending."""
    v = np.asarray(base_ccc, dtype=np.float64)
    if v.ndim != 1:
        raise InputError("base CCC must be a vector")
    if np.any(np.isnan(v)):
        raise InputError("base CCC contains NaN")
    return tuple(sorted(range(v.size), key=lambda i: (-v[i], i)))


# model file -----------------------------------------------------------------

def serialize_model(model):
    C = model.n_emotions
    D, H, A = model.feature_dim, model.embed_dim, model.attention_dim
    out = [MAGIC, struct.pack("<4I", C, D, H, A), struct.pack(f"<{C}I", *model.chain_order)]
    for name, shape in _shapes(C, D, H, A, model.chained).items():
        arr = model.params[name]
        rows, cols = shape if len(shape) == 2 else (1, shape[0])
        out.append(struct.pack("<2I", rows, cols))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedError(what)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def deserialize_model(data, emotions=None):
    data = bytes(data)
    if len(data) >= 4 and data[:3] == MAGIC[:3] and data[:4] != MAGIC:
        raise VersionError(f"unsupported model file version {data[3:4]!r}")
    if data[:4] != MAGIC:
        if len(data) < 4 and MAGIC.startswith(data):
            raise TruncatedError("model header")
        raise BadMagicError("not a model file")
    r = _Reader(data)
    r.take(4, "magic")
    C, D, H, A = struct.unpack("<4I", r.take(16, "model header"))
    if min(C, D, H, A) < 1:
        raise ShapeError(f"invalid model dimensions C={C} D={D} H={H} A={A}")
    order = struct.unpack(f"<{C}I", r.take(4 * C, "chain order"))
    if emotions is None:
        emotions = EMOTIONS if C == len(EMOTIONS) else tuple(f"emotion{i}" for i in range(C))
    if len(emotions) != C:
        raise ShapeError(f"model has {C} emotions, {len(emotions)} names given")
    try:
        order = resolve_chain_order(order, tuple(emotions))
    except InputError as exc:
        raise ShapeError(str(exc)) from None

    params = {}
    chained = True
    for name, shape in _shapes(C, D, H, A, True).items():
        rows, cols = struct.unpack("<2I", r.take(8, f"block header of {name}"))
        if name == "chain.1.W" and cols == H:
            chained = False
        if not chained and name.startswith("chain."):
            shape = _shapes(C, D, H, A, False)[name]
        expect = shape if len(shape) == 2 else (1, shape[0])
        if (rows, cols) != expect:
            raise ShapeError(f"{name}: stored shape {(rows, cols)} != expected {expect}")
        raw = r.take(8 * rows * cols, f"parameter block {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise ShapeError(f"{len(data) - r.pos} trailing bytes after last parameter block")
    return EmotionChainModel(tuple(emotions), order, params, chained)


def save_model(path, model):
    from .fileio import atomic_write_bytes
    atomic_write_bytes(path, serialize_model(model))


def load_model(path, emotions=None):
    with open(path, "rb") as f:
        return deserialize_model(f.read(), emotions)
