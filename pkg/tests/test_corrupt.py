import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import naive
from hirtaxa import rng
from hirtaxa.corrupt import (DnaNoiseConfig, ImageNoiseConfig, blur_image, corrupt_dna,
                             corrupt_dna_trace, corruption_stats, levenshtein)
from hirtaxa.errors import BadAlphabet, BadKernel, ConfigInvalid


def random_dna(seed, n, alphabet="ACGT"):
    idx = rng.stream(seed, rng.DATA, 9).integers(len(alphabet), n)
    return "".join(alphabet[i] for i in idx)


# blur ------------------------------------------------------------------------
def test_blur_constant_preserved():
    img = np.full((16, 16), 0.3)
    for k in (1, 3, 7, 15):
        assert np.allclose(blur_image(img, ImageNoiseConfig(kernel_size=k)), 0.3, atol=1e-15)


def test_blur_k1_identity():
    img = np.random.default_rng(0).uniform(size=(8, 8))
    assert np.array_equal(blur_image(img, ImageNoiseConfig(kernel_size=1)), img)


def test_blur_impulse():
    img = np.zeros((16, 16))
    img[8, 8] = 1.0
    out = blur_image(img, ImageNoiseConfig(kernel_size=7))
    expected = np.zeros((16, 16))
    expected[5:12, 5:12] = 1 / 49
    assert np.allclose(out, expected, atol=1e-15)


def test_blur_matches_naive():
    img = np.random.default_rng(1).uniform(size=(9, 11))
    ref = np.array(naive.box_blur(img.tolist(), 5))
    out = blur_image(img, ImageNoiseConfig(kernel_size=5))
    assert out.shape == img.shape
    assert np.allclose(out, ref, atol=1e-14)
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("k", [0, 2, -3, 4])
def test_blur_bad_kernel(k):
    with pytest.raises(BadKernel):
        blur_image(np.zeros((4, 4)), ImageNoiseConfig(kernel_size=k))


# DNA corruption -------------------------------------------------------------
def test_all_off_identity():
    s = random_dna(0, 150)
    assert corrupt_dna(s, DnaNoiseConfig.off()) == s


def test_full_mask():
    s = random_dna(1, 77)
    assert corrupt_dna(s, DnaNoiseConfig.off(p_mask=1.0)) == "N" * 77


def test_truncation_only():
    s = random_dna(2, 100)
    assert corrupt_dna(s, DnaNoiseConfig.off(tail_truncation=0.1)) == s[:90]


def test_dropout_run_only():
    s = random_dna(3, 200)
    out = corrupt_dna(s, DnaNoiseConfig.off(dropout_run_fraction=0.05, seed=4))
    stats = corruption_stats(s, out)
    assert stats.n_count == 10 and stats.length_delta == 0
    start = out.index("N")
    assert out[start:start + 10] == "N" * 10


def test_bad_alphabet_and_config():
    with pytest.raises(BadAlphabet):
        corrupt_dna("ACGX")
    with pytest.raises(ConfigInvalid):
        DnaNoiseConfig(p_sub=1.5).validate()
    with pytest.raises(ConfigInvalid):
        DnaNoiseConfig(tail_truncation=1.0).validate()


def test_substitution_always_changes_base():
    s = random_dna(5, 300)
    out = corrupt_dna(s, DnaNoiseConfig.off(p_sub=1.0))
    assert all(a != b for a, b in zip(s, out)) and "N" not in out
    n_in = corrupt_dna("N" * 50, DnaNoiseConfig.off(p_sub=1.0))
    assert "N" not in n_in


def test_stages_match_reference():
    cfg = DnaNoiseConfig(p_sub=0.1, p_mask=0.05, p_ins=0.05, p_del=0.05, seed=11)
    for case in range(20):
        s = random_dna(100 + case, 80 + case, "ACGTN")
        trace = corrupt_dna_trace(s, cfg, rng.stream(cfg.seed, rng.CORRUPT, case))
        ref = naive.corrupt_reference(s, cfg, rng.stream(cfg.seed, rng.CORRUPT, case))
        assert trace.stages == ref


def test_seeded_determinism():
    s = random_dna(6, 200)
    cfg = DnaNoiseConfig(seed=3)
    assert corrupt_dna(s, cfg) == corrupt_dna(s, cfg)
    assert corrupt_dna(s, cfg) != corrupt_dna(s, DnaNoiseConfig(seed=4))


def test_substitution_rate_within_3_sigma():
    n, subs = 0, 0
    for seed in range(50):
        s = random_dna(seed, 200)
        trace = corrupt_dna_trace(s, DnaNoiseConfig(seed=seed))
        n += len(s)
        subs += trace.n_sub
    sigma = math.sqrt(n * 0.01 * 0.99)
    assert abs(subs - n * 0.01) <= 3 * sigma


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="ACGTN", min_size=0, max_size=120), st.integers(0, 2 ** 32))
def test_length_bookkeeping(s, seed):
    trace = corrupt_dna_trace(s, DnaNoiseConfig(seed=seed))
    post_indel = len(s) + trace.n_ins - trace.n_del
    assert len(trace.stages[3]) == post_indel
    assert trace.run_length == (math.floor(0.05 * post_indel + 0.5) if post_indel else 0)
    assert len(trace.output) == post_indel - math.floor(0.1 * post_indel)
    assert set(trace.output) <= set("ACGTN")


def _mean_ci(x, pick, reps=400):
    means = [x[pick.integers(0, len(x), len(x))].mean() for _ in range(reps)]
    return np.percentile(means, [2.5, 97.5])


@pytest.mark.slow
@pytest.mark.parametrize("param,grid", [
    ("p_sub", [0.0, 0.02, 0.1]), ("p_mask", [0.0, 0.02, 0.1]),
    ("p_ins", [0.0, 0.02, 0.1]), ("p_del", [0.0, 0.02, 0.1]),
    ("dropout_run_fraction", [0.0, 0.05, 0.2]), ("tail_truncation", [0.0, 0.1, 0.3]),
])
def test_monotone_expected_damage(param, grid):
    pick = np.random.default_rng(0)
    cis = []
    for value in grid:
        cfg = DnaNoiseConfig(**{param: value})
        dists = []
        for rep in range(80):
            s = random_dna(rep, 60)
            out = corrupt_dna(s, cfg, rng.stream(rep, rng.CORRUPT, 1))
            dists.append(levenshtein(s, out))
        cis.append(_mean_ci(np.array(dists, dtype=float), pick))
    for lo, hi in zip(cis, cis[1:]):
        # no significant decrease between neighbouring grid points
        assert hi[1] >= lo[0]
    assert cis[-1][0] > cis[0][1]


# stats -------------------------------------------------------------------------
def test_stats_identical():
    s = "ACNNGT"
    st_ = corruption_stats(s, s)
    assert (st_.edit_distance, st_.n_count, st_.length_delta) == (0, 2, 0)


def test_stats_deletion():
    st_ = corruption_stats("ACGT", "ACG")
    assert st_.edit_distance == 1 and st_.length_delta == -1


@settings(max_examples=80, deadline=None)
@given(st.text(alphabet="ACGTN", max_size=25), st.text(alphabet="ACGTN", max_size=25))
def test_levenshtein_matches_table(a, b):
    assert levenshtein(a, b) == naive.edit_distance(a, b)
