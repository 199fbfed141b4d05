import numpy as np
import pytest

from seqrank.dataio import (VISUAL_RANGE, TEXTUAL_RANGE, FeatureTable,
                            build_corpus, build_feature_store)

# four interactions per user, split 0.75 -> 3 train / 1 test, every test
# item unseen in training so nobody gets filtered out
RAW = {
    "alice": ["i1", "i2", "i3", "i4"],
    "bob": ["i2", "i3", "i5", "i1"],
    "carol": ["i5", "i4", "i2", "i6"],
}


@pytest.fixture
def toy_corpus():
    return build_corpus(RAW, min_len=2, split_frac=0.75)


@pytest.fixture
def toy_feats(toy_corpus):
    rng = np.random.default_rng(3)
    vis = FeatureTable(2, {it: rng.uniform(*VISUAL_RANGE, 2)
                           for it in toy_corpus.items}, *VISUAL_RANGE)
    tex = FeatureTable(2, {it: rng.uniform(*TEXTUAL_RANGE, 2)
                           for it in toy_corpus.items}, *TEXTUAL_RANGE)
    return build_feature_store(toy_corpus, vis, tex)
