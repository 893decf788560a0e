import numpy as np
import pytest

from argpipe.model import FeatureVector, SvmModel
from argpipe.synth import CorpusSpec, generate_bundle, generate_corpus


def random_fv(rng, dim, density=0.3):
    mask = rng.random(dim) < density
    idx = np.flatnonzero(mask)
    return FeatureVector(idx, rng.normal(size=idx.size), dim)


def random_model(rng, n_sv, dim, name="m"):
    svs = [(float(rng.normal()), random_fv(rng, dim)) for _ in range(n_sv)]
    return SvmModel.build(name, svs, float(rng.normal()), dim)


def dense_score(model, x, dim):
    """Independent oracle: dense support-vector matrix times a dense input."""
    sv = np.zeros((model.num_support_vectors, dim))
    for i, (_, v) in enumerate(model.support_vectors):
        sv[i, v.indices] = v.values
    return float(model.alpha_y @ (sv @ x.to_dense(dim)) + model.bias)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusSpec(num_files=3, sentences_per_file=60, vocab_size=300, seed=7))


@pytest.fixture(scope="session")
def small_bundle(small_corpus):
    return generate_bundle(small_corpus.dictionary, 9, 10, 12, seed=3)
