import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgca import tensor as T
from mgca.checks import desk_setup, loss_checks
from mgca.objectives import (LossConfig, combined_loss, mlm_loss, segment_positions, seq_ctl_loss,
                             tok_ctl_loss, token_units)
from mgca.sampler import IGNORE, MONOLINGUAL
from mgca.synonyms import SynonymPair, SynonymPairSet
from mgca.tensor import DegenerateVectorError, Tensor
from mgca.tokenizer import CLS_ID, MASK_ID, SEP_ID

from .oracles import cross_entropy, seq_contrastive, token_contrastive, token_contrastive_batch


def pair_set(*spans):
    return SynonymPairSet(tuple(SynonymPair(a, b) for a, b in spans))


# sequence loss -----------------------------------------------------------------


def test_single_pair_loss_is_exactly_zero():
    rng = np.random.default_rng(0)
    assert seq_ctl_loss(rng.normal(size=(1, 5)), rng.normal(size=(1, 5)), 0.05).item() == 0.0


def test_equal_similarities_give_log3():
    same = np.ones((2, 4))
    assert seq_ctl_loss(same, same, 0.05).item() == pytest.approx(math.log(3), abs=1e-12)
    # regular tetrahedron: every pairwise cosine is -1/3
    tetra = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
    assert seq_ctl_loss(tetra[:2], tetra[2:], 0.3).item() == pytest.approx(math.log(3), abs=1e-12)


def test_hand_set_unit_vectors_match_oracle():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[math.cos(0.3), math.sin(0.3)], [math.cos(2.0), math.sin(2.0)]])
    assert seq_ctl_loss(x, y, 1.0).item() == pytest.approx(seq_contrastive(x, y, 1.0), abs=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(2, 6), st.sampled_from([0.05, 0.1, 1.0]), st.integers(0, 2**31))
def test_seq_loss_matches_oracle(n, d, tau, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    got = seq_ctl_loss(x, y, tau).item()
    assert abs(got - seq_contrastive(x, y, tau)) < 1e-10
    assert got >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_seq_loss_symmetric_and_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    base = seq_ctl_loss(x, y, 0.1).item()
    assert seq_ctl_loss(y, x, 0.1).item() == pytest.approx(base, abs=1e-12)
    perm = rng.permutation(n)
    assert seq_ctl_loss(x[perm], y[perm], 0.1).item() == pytest.approx(base, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_seq_loss_scale_invariant(n, c, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    scaled = x.copy()
    scaled[rng.integers(n)] *= c
    assert seq_ctl_loss(scaled, y, 0.1).item() == pytest.approx(seq_ctl_loss(x, y, 0.1).item(), abs=1e-9)


def test_lower_temperature_lowers_loss_when_positives_dominate():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 8))
    y = x + 0.05 * rng.normal(size=(4, 8))
    losses = [seq_ctl_loss(x, y, tau).item() for tau in (1.0, 0.5, 0.1, 0.05)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_seq_loss_errors():
    with pytest.raises(ValueError):
        seq_ctl_loss(np.ones((2, 3)), np.ones((3, 3)), 0.1)
    with pytest.raises(DegenerateVectorError):
        seq_ctl_loss(np.zeros((2, 3)), np.ones((2, 3)), 0.1)


# token loss ----------------------------------------------------------------------


def test_two_unit_instance_is_exactly_zero():
    h = np.random.default_rng(0).normal(size=(2, 4))
    assert tok_ctl_loss(h, [pair_set(((0, 1), (1, 2)))], 0.05).item() == 0.0


def test_identical_representations_give_log_m_minus_one():
    h = np.ones((7, 3))
    loss = tok_ctl_loss(h, [pair_set(((0, 1), (4, 5)), ((1, 3), (5, 7)))], 0.1).item()
    # units: (0), (4), (1,2), (5,6), (3): m = 5
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_random_six_token_instance_matches_oracle():
    h = np.random.default_rng(5).normal(size=(6, 4))
    pairs = [((0, 1), (3, 4)), ((1, 3), (4, 6))]
    got = tok_ctl_loss(h, [pair_set(*pairs)], 0.1).item()
    assert abs(got - token_contrastive(h.tolist(), pairs, 0.1)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.05, 0.1, 1.0]))
def test_token_loss_matches_oracle_on_batches(seed, tau):
    rng = np.random.default_rng(seed)
    batch, length = int(rng.integers(1, 4)), int(rng.integers(4, 17))
    h = rng.normal(size=(batch, length, 5))
    sets, plain, contents = [], [], []
    for _ in range(batch):
        content = np.sort(rng.choice(length, size=int(rng.integers(2, length + 1)), replace=False))
        free = list(content)
        rng.shuffle(free)
        pairs = []
        while len(free) >= 2 and rng.random() < 0.7:
            a, b = int(free.pop()), int(free.pop())
            pairs.append(((a, a + 1), (b, b + 1)))
        sets.append(pair_set(*pairs))
        plain.append(pairs)
        contents.append(content)
    got = tok_ctl_loss(h, sets, tau, contents).item()
    assert abs(got - token_contrastive_batch(h.tolist(), plain, tau, contents)) < 1e-10
    assert got >= 0.0


def test_instances_without_pairs_excluded_from_average():
    h = np.random.default_rng(1).normal(size=(2, 5, 3))
    sets = [pair_set(((0, 1), (2, 3))), SynonymPairSet()]
    only_first = tok_ctl_loss(h[:1], sets[:1], 0.1).item()
    assert tok_ctl_loss(h, sets, 0.1).item() == pytest.approx(only_first, abs=1e-14)
    assert tok_ctl_loss(h, sets, 0.1, average="all").item() == pytest.approx(only_first / 2, abs=1e-14)
    zero = tok_ctl_loss(h, [SynonymPairSet(), SynonymPairSet()], 0.1)
    assert zero.item() == 0.0 and not zero.requires_grad


def test_token_units_pool_paired_spans():
    units = token_units(8, np.arange(1, 7), pair_set(((1, 3), (5, 6))))
    assert [g.tolist() for g in units.groups] == [[1, 2], [5], [3], [4], [6]]
    assert units.pairs == [(0, 1)]
    with pytest.raises(IndexError):
        token_units(4, np.arange(4), pair_set(((1, 2), (3, 6))))


# MLM ---------------------------------------------------------------------------


def test_uniform_prediction_gives_log_v():
    assert mlm_loss(np.zeros((4, 37)), [1, 2, 3, 4]).item() == pytest.approx(math.log(37), abs=1e-12)


def test_three_masked_positions_mean():
    logits = np.array([[2.0, 1.0, 0.0], [0.5, 0.5, 3.0], [9.0, 9.0, 9.0], [1.0, -1.0, 0.0]])
    labels = [0, IGNORE, 2, 1]
    expected = (cross_entropy(logits[0], 0) + cross_entropy(logits[2], 2) + cross_entropy(logits[3], 1)) / 3
    assert mlm_loss(logits, labels).item() == pytest.approx(expected, abs=1e-14)


def test_no_masked_positions_is_zero():
    assert mlm_loss(np.zeros((2, 5)), [IGNORE, IGNORE]).item() == 0.0


@pytest.mark.parametrize("check", loss_checks(), ids=lambda c: c.name)
def test_loss_gradients(check):
    assert check.ok, f"{check.name}: {check.error:.2e}"


# combined ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    return desk_setup()


def test_monolingual_batch_is_mlm_only(desk):
    model, mono, _ = desk
    b = combined_loss(mono, model, LossConfig())
    assert b.kind == MONOLINGUAL
    assert b.total == b.mlm and b.tlm == b.seq == b.tok == 0.0
    assert b.masked_count == sum(len(i.mask_positions) for i in mono.instances)


def test_bilingual_without_contrast_is_tlm(desk):
    model, _, bi = desk
    b = combined_loss(bi, model, LossConfig(enable_seq_ctl=False, enable_tok_ctl=False))
    assert b.total == b.tlm and b.seq == b.tok == 0.0 and b.mlm == 0.0


def test_bilingual_total_is_exact_sum(desk):
    model, _, bi = desk
    b = combined_loss(bi, model, LossConfig(temperature=0.1))
    assert b.tlm > 0 and b.seq > 0
    assert b.total == b.objective.item()
    assert b.total == pytest.approx(b.tlm + b.seq + b.tok, rel=0, abs=1e-12)
    parts = [combined_loss(bi, model, LossConfig(temperature=0.1, enable_seq_ctl=s, enable_tok_ctl=t))
             for s, t in ((True, False), (False, True))]
    assert parts[0].seq == b.seq and parts[1].tok == b.tok


def test_pair_coverage_counts_instances_with_pairs(desk):
    model, _, bi = desk
    b = combined_loss(bi, model, LossConfig())
    assert 0.0 <= b.pair_coverage <= 1.0
    clean = combined_loss(bi, model, LossConfig(ctl_on_clean_input=True))
    expected = sum(1 for ps in bi.pair_sets if len(ps)) / len(bi)
    assert clean.pair_coverage == pytest.approx(expected)
    assert clean.tlm == b.tlm


def test_seq_term_matches_pooled_oracle(desk):
    model, _, bi = desk
    cfg = LossConfig(temperature=0.1, enable_tok_ctl=False)
    b = combined_loss(bi, model, cfg)
    ids, lengths = bi.padded()
    hidden = model.encode(ids, lengths).data
    xs, ys = [], []
    for row, inst in enumerate(bi.instances):
        f, s = segment_positions(ids[row, : len(inst)], inst.segment_boundary)
        xs.append(hidden[row, f].mean(axis=0))
        ys.append(hidden[row, s].mean(axis=0))
    assert abs(b.seq - seq_contrastive(xs, ys, 0.1)) < 1e-10


def test_segment_positions_fall_back_when_fully_masked():
    ids = np.array([CLS_ID, MASK_ID, MASK_ID, SEP_ID, 9, SEP_ID])
    first, second = segment_positions(ids, 3)
    assert first.tolist() == [1, 2] and second.tolist() == [4]


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
    with pytest.raises(ValueError):
        LossConfig(tok_average="median")
    assert replace(LossConfig(), temperature=0.2).temperature == 0.2
