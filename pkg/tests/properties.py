"""Randomised invariants, each run for at least 1000 generated cases.

Collected by the acceptance suite rather than directly, so each criterion is
one pass/fail line there.
"""
import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gaitsync import adgc, icfp
from gaitsync.adgc import AttentionParams, CellParams, GraphStructure, LayerState, ModelDims, SyncModel
from gaitsync.sync import FrameMapping, isotonic_projection

from oracles import closest_farthest

N_CASES = 1000
CASES = settings(max_examples=N_CASES, deadline=None, derandomize=True,
                 suppress_health_check=list(HealthCheck))

COUNTS: dict = {}


def _count(name):
    COUNTS[name] = COUNTS.get(name, 0) + 1


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2**32 - 1)


@CASES
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)), elements=finite),
       st.floats(-1e3, 1e3, allow_nan=False))
def softmax_normalised_and_shift_invariant(logits, shift):
    _count("softmax_normalised_and_shift_invariant")
    p = adgc.class_probs(logits)
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-12)
    assert np.all(p >= 0)
    np.testing.assert_allclose(adgc.class_probs(logits + shift), p, atol=1e-12)


def _random_att(rng, d, a, scale):
    return AttentionParams(rng.normal(size=(d, d)) * scale, rng.normal(size=(d, a)) * scale,
                           rng.normal(size=(d, a)) * scale, rng.normal(size=a) * scale,
                           rng.normal(size=(a, 1)) * scale, rng.normal(size=1) * scale)


@CASES
@given(seeds, st.integers(1, 8), st.integers(1, 6), st.floats(0.01, 3.0))
def attention_in_open_unit_interval(seed, n, d, scale):
    _count("attention_in_open_unit_interval")
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(n, d)) * 3
    a = adgc.attention_scores(H, _random_att(rng, d, 3, scale)).value
    assert a.shape == (n,)
    assert np.all(a > 0) and np.all(a < 1)


def _random_structure(rng, n):
    A = np.triu((rng.uniform(size=(n, n)) < 0.5).astype(float), 1)
    return GraphStructure.from_graph(A + A.T, rng.normal(size=(n, 3)))


@CASES
@given(seeds, st.integers(1, 6), st.integers(1, 4), st.integers(1, 4))
def hidden_state_scaling_identity(seed, n, d_in, d):
    _count("hidden_state_scaling_identity")
    rng = np.random.default_rng(seed)
    s = _random_structure(rng, n)
    cell = CellParams(rng.normal(size=(3, d_in, 4 * d)), rng.normal(size=(3, d, 4 * d)), rng.normal(size=4 * d))
    prev = LayerState(rng.normal(size=(n, d)), rng.normal(size=(n, d)))
    out = adgc.adgc_cell(rng.normal(size=(n, d_in)), prev, cell, _random_att(rng, d, 2, 1.0), s)
    a, Hh, H = out.alpha.value, out.H_hat.value, out.H.value
    assert np.all(a > 0) and np.all(a < 1)
    np.testing.assert_array_equal(H, a[:, None] * Hh + Hh)


@CASES
@given(st.lists(st.integers(-5, 60), min_size=0, max_size=60), st.integers(1, 60))
def frame_mapping_monotone(estimates, n_ref):
    _count("frame_mapping_monotone")
    ref = isotonic_projection(np.asarray(estimates, dtype=float), n_ref)
    assert len(ref) == len(estimates)
    m = FrameMapping(2, ref, n_ref)
    assert np.all(np.diff(m.reference) >= 0)
    assert len(m) == 0 or (m.reference.min() >= 0 and m.reference.max() < n_ref)
    back = FrameMapping.from_dict(m.to_dict())
    np.testing.assert_array_equal(back.reference, m.reference)


_DIMS = ModelDims(n_classes=3, embed_dim=5, hidden_dim=3, attention_dim=2)
_MODEL = SyncModel(_DIMS, seed=11)


@CASES
@given(seeds, st.integers(2, 6), st.integers(1, 3))
def node_permutation_equivariance(seed, n, T):
    _count("node_permutation_equivariance")
    rng = np.random.default_rng(seed)
    s = _random_structure(rng, n)
    coords = rng.normal(size=(1, T, n, 3))
    perm = rng.permutation(n)
    s_p = GraphStructure.from_partitions(s.adjacency[:, perm][:, :, perm])
    a = adgc.forward(_MODEL, coords, s)
    b = adgc.forward(_MODEL, coords[:, :, perm], s_p)
    for la, lb in zip(a.logits_g + a.logits_l, b.logits_g + b.logits_l):
        assert np.abs(la.value - lb.value).max() < 1e-10
    for sa, sb in zip(a.states, b.states):
        assert np.abs(sa.H.value[:, perm] - sb.H.value).max() < 1e-10
    y = np.eye(3)[rng.integers(0, 3, (1, T))]
    la = adgc.composite_loss(a.logits_g, a.logits_l, y, a.alphas).total.value
    lb = adgc.composite_loss(b.logits_g, b.logits_l, y, b.alphas).total.value
    assert abs(la - lb) < 1e-10


candidate = st.tuples(st.integers(0, 30), st.floats(0, 20, allow_nan=False).map(lambda x: round(x, 1)))


@CASES
@given(st.lists(candidate, min_size=1, max_size=12, unique_by=lambda c: c[0]), st.floats(0, 20, allow_nan=False))
def closest_farthest_rule(cands, bound):
    _count("closest_farthest_rule")
    assert icfp.select_correspondence(cands, bound) == closest_farthest(cands, bound)


@CASES
@given(seeds, st.integers(1, 12), st.integers(1, 40), st.floats(0.5, 6.0))
def grouped_selection_matches_rule(seed, n_src, n_tgt, bound):
    _count("grouped_selection_matches_rule")
    rng = np.random.default_rng(seed)
    src = rng.integers(0, n_src, n_tgt)
    dist = np.round(rng.uniform(0, 8, n_tgt), 1)
    s, t, d = icfp._select_grouped(src, dist, bound)
    assert sorted(s.tolist()) == sorted(set(src.tolist()))
    for si, ti in zip(s, t):
        cands = [(int(j), float(dist[j])) for j in np.flatnonzero(src == si)]
        assert (int(ti), float(dist[ti])) == closest_farthest(cands, bound)
