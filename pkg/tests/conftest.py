import os
import sys

# single-threaded BLAS: runtime bounds are stated for one thread
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest  # noqa: E402

sys.path.insert(0, os.path.dirname(__file__))

from nvchain.data import generate_synthetic_dataset, select, speaker_disjoint_kfold  # noqa: E402
from nvchain.model import REFERENCE_CHAIN_ORDER, init_model  # noqa: E402
from nvchain.training import TrainConfig, train  # noqa: E402

# Desk-scale protocol: the default 1e-4 / 1e-5 pair is far too small to
# converge on 400 samples in 50 epochs, so both groups are scaled up 300x
# keeping their 10:1 ratio.
SYNTH_LR_CHAIN = 3e-2
SYNTH_LR_FRONTEND = 3e-3
DIMS = dict(D=16, H=16, A=8)


def synth_config(**kw):
    base = dict(lr_chain=SYNTH_LR_CHAIN, lr_frontend=SYNTH_LR_FRONTEND, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic_dataset(400, 20, 16, seed=1)


@pytest.fixture(scope="session")
def synth_split(synth):
    fold = speaker_disjoint_kfold(synth.manifest, 5, seed=0)[0]
    return select(synth.samples, fold.train_ids), select(synth.samples, fold.val_ids)


@pytest.fixture(scope="session")
def trained_chain(synth_split):
    tr, va = synth_split
    m = init_model(DIMS["D"], DIMS["H"], DIMS["A"], chain_order=REFERENCE_CHAIN_ORDER, seed=0)
    return train(m, tr, va, synth_config())


@pytest.fixture(scope="session")
def trained_independent(synth_split):
    tr, va = synth_split
    m = init_model(DIMS["D"], DIMS["H"], DIMS["A"], chain_order=REFERENCE_CHAIN_ORDER, seed=0,
                   chained=False)
    return train(m, tr, va, synth_config())
