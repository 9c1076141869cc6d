import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from moe_sc import tensor as T
from moe_sc.fem import (
    FEMConfig, FeatureExtractionModule, compression_ratio, fem_forward, hard_threshold, ste_threshold,
)
from moe_sc.tensor import Tensor
from moe_sc.training import AdamW


def test_threshold_examples():
    np.testing.assert_array_equal(hard_threshold(np.array([0.9, 0.2, 0.6]), 0.5), [1, 0, 1])
    np.testing.assert_array_equal(hard_threshold(np.array([0.5]), 0.5), [1])
    # nothing above threshold: best row survives
    np.testing.assert_array_equal(hard_threshold(np.array([0.1, 0.3, 0.2]), 0.5), [0, 1, 0])


def test_threshold_respects_padding():
    out = hard_threshold(np.array([[0.1, 0.2, 0.9]]), 0.5, valid=np.array([[True, True, False]]))
    np.testing.assert_array_equal(out, [[0, 1, 0]])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)), elements=st.floats(0, 1)),
       st.floats(0.05, 0.95))
def test_threshold_properties(soft, t):
    hard = hard_threshold(soft, t)
    assert set(np.unique(hard)) <= {0.0, 1.0}
    assert np.all(hard.sum(axis=-1) >= 1)
    assert np.all(hard[soft >= t] == 1)


def test_ste_passes_gradient_unchanged():
    soft = T.parameter(np.array([0.9, 0.2, 0.6]))
    g = np.array([1.0, -2.0, 3.0])
    (ste_threshold(soft, 0.5) * Tensor(g)).sum().backward()
    np.testing.assert_array_equal(soft.grad, g)


def test_compression_ratio():
    assert compression_ratio([1, 0, 1, 0]) == 0.5
    assert compression_ratio([1]) == 1.0
    with pytest.raises(ValueError):
        compression_ratio([0, 0])
    with pytest.raises(ValueError):
        compression_ratio([])


def test_fresh_module_keeps_everything():
    fem = FeatureExtractionModule(16, FEMConfig())
    z = Tensor(np.random.default_rng(0).standard_normal((3, 7, 16)).astype(np.float32))
    for snr in (-5.0, 10.0, 25.0):
        assert np.all(fem(z, snr).hard.data == 1)


def test_mask_contract():
    fem = FeatureExtractionModule(16, FEMConfig(n_extractors=3, init_bias=0.0))
    z = Tensor(np.random.default_rng(1).standard_normal((5, 16)).astype(np.float32))
    mp = fem_forward(z, 7.0, fem)
    assert mp.soft.shape == mp.hard.shape == (5,)
    assert np.all((mp.soft > 0) & (mp.soft < 1))
    assert 0 <= mp.extractor_index < 3
    assert mp.hard.sum() >= 1


def test_single_extractor_has_one_choice():
    fem = FeatureExtractionModule(16, FEMConfig(n_extractors=1))
    z = Tensor(np.zeros((2, 4, 16), np.float32))
    np.testing.assert_array_equal(fem(z, np.array([0.0, 20.0])).extractor_index, [0, 0])


def test_snr_changes_scores():
    fem = FeatureExtractionModule(16, FEMConfig(n_extractors=1))
    z = Tensor(np.random.default_rng(2).standard_normal((1, 4, 16)).astype(np.float32))
    assert not np.allclose(fem(z, -5.0).soft.data, fem(z, 25.0).soft.data)


def test_gradient_check_float64():
    fem = FeatureExtractionModule(6, FEMConfig(n_extractors=2, feature_hidden=5, snr_hidden=3)).astype(np.float64)
    z = T.parameter(np.random.default_rng(3).standard_normal((2, 4, 6)))
    w = Tensor(np.random.default_rng(4).standard_normal((2, 4)))
    err = T.grad_check(lambda: (fem(z, np.array([3.0, 12.0])).soft * w).sum(), [z] + fem.parameters())
    assert err < 1e-4


def test_rate_loss_alone_drives_mask_to_floor():
    rng = np.random.default_rng(0)
    fem = FeatureExtractionModule(8, FEMConfig(n_extractors=2))
    z = Tensor(rng.standard_normal((4, 10, 8)).astype(np.float32))
    opt = AdamW(fem.parameters(), lr=0.05)
    kept = []
    for _ in range(200):
        hard = fem(z, 10.0).hard
        kept.append(int(hard.data.sum()))
        opt.zero_grad()
        hard.mean().backward()
        opt.step()
    assert kept[-1] == 4
    windows = [max(kept[i:i + 10]) for i in range(0, 200, 10)]
    assert all(a >= b for a, b in zip(windows, windows[1:]))
