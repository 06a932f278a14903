import math

import numpy as np
import pytest

from saa import tensor as T
from saa.decoder import BaselineHead, Decoder, DecoderConfig, greedy_incremental
from saa.errors import ContractError
from saa.lm import (FusedHead, Fusion, LMConfig, SANLM, blank_substitute, lm_attention_mask,
                    lm_forward, lm_nll, perplexity)
from saa.san import SANConfig, causal_bias
from saa.tensor import MASK_VALUE, Tensor, grad_check

L, BLANK, SOS = 3, 3, 4


def make_lm(seed=0, prox=False):
    return SANLM(LMConfig(2, SANConfig(8, 2, 16, 0.0, 0.0), prox), L, np.random.default_rng(seed))


def make_decoder(seed=1):
    dec = Decoder(DecoderConfig(2, san=SANConfig(8, 2, 16, 0.0, 0.0)), L, np.random.default_rng(seed))
    for _, p in dec.named_parameters():
        p.data += 0.2 * np.random.default_rng(seed + 7).normal(size=p.shape)
    return dec


def test_blank_substitution():
    s = blank_substitute([0, BLANK, 2, BLANK, BLANK, 1], BLANK, SOS)
    assert s.inputs == [SOS, 0, 0, 2, 2, 2, 1]
    assert s.legal_mask == [True, True, False, True, False, False, True]
    lead = blank_substitute([BLANK, BLANK, 1], BLANK, SOS)
    assert lead.inputs == [SOS, SOS, SOS, 1]


def test_attention_mask():
    m = lm_attention_mask([True, True, False, True])
    assert (m[:, 2] == MASK_VALUE).all()
    assert m[3, 3] == 0.0 and m[1, 3] == MASK_VALUE and m[3, 0] == 0.0


def test_config_guards():
    with pytest.raises(ValueError):
        LMConfig(joint=True, use_proximity_bias=True)


def test_lm_rejects_blank():
    with pytest.raises(ContractError):
        lm_forward([SOS, BLANK], make_lm())


def test_lm_default_has_no_proximity_bias():
    lm = make_lm()
    toks = np.array([[SOS, 0, 2, 1]])
    np.testing.assert_array_equal(lm.states(toks).data, lm.states(toks, causal_bias(4, 4)).data)
    assert not np.allclose(make_lm(prox=True).states(toks).data, lm.states(toks).data)


def test_lm_is_causal():
    lm = make_lm()
    a = lm_forward([SOS, 0, 1, 2], lm).data
    b = lm_forward([SOS, 0, 2, 0], lm).data
    np.testing.assert_array_equal(a[:2], b[:2])
    np.testing.assert_allclose(np.exp(a).sum(-1), 1.0, atol=1e-12)


def test_lm_nll_and_perplexity():
    lm = make_lm()
    sents = [[0, 1], [2, 2, 2]]
    nll, n = lm_nll(lm, sents)
    assert n == 5
    direct = -sum(lm_forward([SOS] + s, lm).data[np.arange(len(s)), s].sum() for s in sents)
    assert abs(nll.item() - direct) < 1e-10
    assert abs(perplexity(sents, lm) - math.exp(direct / 5)) < 1e-9
    emb = lm.embed
    rep = grad_check(lambda _: lm_nll(lm, sents)[0], emb, max_coords=30)
    assert rep.max_rel_error < 1e-4


def test_fused_head_incremental_matches_parallel():
    lm, dec = make_lm(), make_decoder()
    fusion = Fusion(dec.head, 8, np.random.default_rng(2))
    fusion.w_lm.data[:] = np.random.default_rng(3).normal(size=fusion.w_lm.shape)
    head = FusedHead(lm, fusion, BLANK)
    h = Tensor(np.random.default_rng(4).normal(size=(2, 9, 8)))
    lp, z = greedy_incremental(dec, h, head)
    assert (z == BLANK).any() and (z != BLANK).any()
    par = T.log_softmax(head.parallel(dec.states_parallel(h, z), z)).data
    np.testing.assert_allclose(lp.data, par, rtol=0, atol=1e-10)


def test_lm_states_ignore_substituted_positions():
    lm = make_lm()
    head = FusedHead(lm, None, BLANK)
    a = head.lm_states(np.array([[0, BLANK, 1, 2]])).data
    # positions after the blank see the same legal keys regardless of what filled the hole
    stream = blank_substitute([0, BLANK, 1], BLANK, SOS)
    toks = np.array(stream.inputs)
    toks[2] = 2
    b = lm.states(toks[None], lm_attention_mask(stream.legal_mask)[None, None]).data
    np.testing.assert_allclose(a[0, 3], b[0, 3], atol=1e-12)


def test_fusion_starts_at_baseline():
    lm, dec = make_lm(), make_decoder()
    head = FusedHead(lm, Fusion(dec.head, 8, np.random.default_rng(5)), BLANK)
    h = Tensor(np.random.default_rng(6).normal(size=(2, 6, 8)))
    base, zb = greedy_incremental(dec, h, BaselineHead(dec))
    fused, zf = greedy_incremental(dec, h, head)
    np.testing.assert_array_equal(zb, zf)
    np.testing.assert_allclose(fused.data, base.data, atol=1e-12)


def test_fusion_gradients():
    dec = make_decoder()
    fusion = Fusion(dec.head, 8, np.random.default_rng(7))
    fusion.w_lm.data[:] = np.random.default_rng(8).normal(size=fusion.w_lm.shape)
    rng = np.random.default_rng(9)
    pre, lm_state = Tensor(rng.normal(size=(2, 3, 16))), Tensor(rng.normal(size=(2, 3, 8)))
    r = rng.normal(size=(2, 3, L + 1))
    for name, p in fusion.named_parameters():
        rep = grad_check(lambda _: T.sum_(fusion(pre, lm_state) * r), p, max_coords=30)
        assert rep.max_rel_error < 1e-4, (name, rep)
    assert grad_check(lambda t: T.sum_(fusion(pre, t) * r), lm_state).max_rel_error < 1e-4


def test_blank_steps_reuse_previous_lm_state():
    lm = make_lm()
    head = FusedHead(lm, None, BLANK)
    z = np.array([[1, BLANK, BLANK, 2, BLANK, 0]])
    states = head.lm_states(z).data[0]
    # step u reads z_{u-1}; steps 2 and 3 follow blanks and repeat the state of step 1
    np.testing.assert_allclose(states[2], states[1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(states[3], states[1], rtol=0, atol=1e-12)
    np.testing.assert_allclose(states[5], states[4], rtol=0, atol=1e-12)
    assert not np.allclose(states[4], states[1])


def test_masked_keys_get_no_weight():
    scores = np.random.default_rng(0).normal(size=(4, 4)) * 30
    w = T.softmax(Tensor(scores), lm_attention_mask([True, False, True, False])).data
    assert (w[:, [1, 3]] < 1e-300).all()


def test_substitution_is_identity_on_real_labels():
    z = [2, 0, 0, 1]
    s = blank_substitute(z, BLANK, SOS)
    assert s.inputs[1:] == z and all(s.legal_mask)
    assert blank_substitute(s.inputs[1:], BLANK, SOS) == s
