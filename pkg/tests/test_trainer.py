"""Two-phase sequence updates and their finite-difference verification."""

import numpy as np
import pytest

from seqrank import numkit, trainer
from seqrank.dataio import TrainingTriple, sample_triples, synth_corpus, SynthSpec
from seqrank.errors import ConfigError, DivergenceError
from seqrank.model import Hyper, Mask, init_params, zero_state, step_hidden
from seqrank.trainer import (SeqContext, TrainConfig, backward_pass,
                             backward_steps, bpr_objective, forward_grad,
                             forward_updates, grad_check, regularization,
                             sequence_context, sequence_gradients,
                             tiny_fixture, train, triple_loglik)

FULL = Mask(latent=True, visual=True, textual=True)


def full_hyper(**kw):
    kw.setdefault("d", 3)
    kw.setdefault("f_v", 2)
    kw.setdefault("f_t", 2)
    kw.setdefault("mask", FULL)
    return Hyper(**kw)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0, seed=1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, seed=1, clip_norm=0.0)


def make_context(h, seed=6):
    rng = np.random.default_rng(seed)
    corpus, feats, triples = tiny_fixture(h, rng)
    params = init_params(h, corpus.n_items, rng)
    return params, corpus, feats, triples


def test_sequence_context_validates_triples():
    h = full_hyper()
    params, corpus, feats, triples = make_context(h)
    with pytest.raises(ConfigError, match="at least one triple"):
        sequence_context(params, corpus, feats, h, [])
    with pytest.raises(ConfigError, match="cover steps"):
        sequence_context(params, corpus, feats, h, triples[:-1])
    seq = corpus.train_seq["u0"]
    bad = [TrainingTriple("u0", tr.t, seq[0], tr.q) for tr in triples]
    with pytest.raises(ConfigError, match="is not the"):
        sequence_context(params, corpus, feats, h, bad)


def test_context_contents():
    h = full_hyper()
    params, corpus, feats, triples = make_context(h)
    ctx = sequence_context(params, corpus, feats, h, triples)
    m = len(corpus.train_seq["u0"])
    assert ctx.m == m
    assert len(ctx.states) == m + 1
    assert not ctx.states[0].full.any()
    assert sorted(ctx.scores) == list(range(2, m + 1))
    for t, sc in ctx.scores.items():
        assert ctx.c[t] == numkit.sigmoid(-sc.value)
    # states replay the recurrence
    redo = step_hidden(ctx.states[1], ctx.inputs_p[1], params)
    assert np.array_equal(redo.full, ctx.states[2].full)


def test_regularization_hand_value():
    h = full_hyper(d=1, f_v=1, f_t=1, lam_theta=0.5, lam_e=2.0, lam_v=4.0)
    params = init_params(h, 1, np.random.default_rng(0))
    params.X[:] = 2.0      # sum sq 4
    params.E[:] = 1.0      # 1
    params.V[:] = 3.0      # 9
    params.InMat[:] = 0.0
    params.RecMat[:] = 1.0  # 9 entries
    # 0.5 * (0.5*(4 + 0 + 9) + 2*1 + 4*9)
    assert regularization(params, h) == 0.5 * (0.5 * 13 + 2.0 + 36.0)


def test_objective_is_loglik_minus_penalty():
    h = full_hyper()
    params, corpus, feats, triples = make_context(h)
    ll = triple_loglik(params, corpus, feats, h, triples)
    ctx = sequence_context(params, corpus, feats, h, triples)
    manual = sum(float(numkit.log_sigmoid(sc.value))
                 for sc in ctx.scores.values())
    assert ll == pytest.approx(manual, abs=1e-12)
    assert bpr_objective(params, corpus, feats, h, triples) == \
        pytest.approx(ll - regularization(params, h), abs=1e-12)
    with pytest.raises(ConfigError):
        bpr_objective(params, corpus, feats, h, [])


def test_forward_grad_pieces():
    h = full_hyper()
    params, corpus, feats, triples = make_context(h)
    ctx = sequence_context(params, corpus, feats, h, triples)
    tr = triples[0]
    fg = forward_grad(ctx, tr.t, feats, h, tr)
    prev = ctx.states[tr.t - 1]
    assert fg.c == numkit.sigmoid(-ctx.scores[tr.t].value)
    assert np.array_equal(fg.dx_p, prev.h_x)
    assert np.array_equal(fg.dx_q, -prev.h_x)
    assert np.array_equal(
        fg.dE, np.outer(prev.h_f, feats.visual(tr.p) - feats.visual(tr.q)))
    assert fg.dV.shape == (h.d, h.f_t)


def test_forward_updates_touch_only_their_blocks():
    h = full_hyper(alpha=0.2, lam_theta=0.01)
    params, corpus, feats, triples = make_context(h)
    ctx = sequence_context(params, corpus, feats, h, triples)
    tr = triples[0]
    before = params.copy()
    fg = forward_updates(params, ctx, tr, feats, h)
    ip, iq = corpus.item_index[tr.p], corpus.item_index[tr.q]
    a, lam = h.alpha, h.lam_theta
    assert np.array_equal(params.X[ip],
                          before.X[ip] + a * (fg.c * fg.dx_p - lam * before.X[ip]))
    assert np.array_equal(params.X[iq],
                          before.X[iq] + a * (fg.c * fg.dx_q - lam * before.X[iq]))
    untouched = [j for j in range(corpus.n_items) if j not in (ip, iq)]
    assert np.array_equal(params.X[untouched], before.X[untouched])
    assert np.array_equal(params.InMat, before.InMat)
    assert np.array_equal(params.RecMat, before.RecMat)
    assert not np.array_equal(params.E, before.E)
    assert not np.array_equal(params.V, before.V)


def test_backward_last_layer_gate():
    h = full_hyper()
    params, corpus, feats, triples = make_context(h)
    ctx = sequence_context(params, corpus, feats, h, triples)
    steps = backward_steps(ctx, params)
    assert [sg.t for sg in steps] == list(range(ctx.m - 1, 0, -1))
    last = steps[0]  # layer m-1, fed only by the final pair
    t = last.t
    hvec = ctx.states[t].full
    diff = ctx.inputs_p[t].full - ctx.inputs_q[t + 1].full
    gate = diff * hvec * (1.0 - hvec)
    assert np.allclose(last.gate, gate, atol=1e-15)
    assert np.allclose(last.e, ctx.c[t + 1] * gate, atol=1e-15)


def test_backward_pass_short_sequence_noop():
    h = full_hyper()
    params, corpus, feats, _ = make_context(h)
    inp = trainer.item_input(corpus.items[0], params, feats, h)
    ctx = SeqContext("u0", [corpus.items[0]], [inp], {},
                     [zero_state(h), step_hidden(zero_state(h), inp, params)],
                     {}, {}, [])
    before = params.copy()
    backward_pass(params, ctx, feats, h)
    for (_, a), (_, b) in zip(params.blocks(), before.blocks()):
        assert np.array_equal(a, b)


def test_sequence_gradients_keys_follow_mask():
    h = Hyper(d=3, f_v=2, f_t=2, mask=Mask(latent=True))
    params, corpus, feats, triples = make_context(h)
    grads = sequence_gradients(params, corpus, feats, h, triples)
    assert sorted(grads) == ["InMat", "RecMat", "X"]


@pytest.mark.parametrize("mask", [
    Mask(latent=True),
    Mask(latent=True, visual=True),
    Mask(latent=True, textual=True),
    FULL,
])
def test_gradients_match_finite_differences(mask):
    h = Hyper(d=3, f_v=2, f_t=2, mask=mask)
    report = grad_check(h, np.random.default_rng(77))
    assert max(report.values()) < 1e-5, report


def test_grad_check_detects_broken_gradient():
    h = full_hyper()

    def sabotage(grads):
        grads["X"] += 0.05

    report = grad_check(h, np.random.default_rng(77), perturb=sabotage)
    assert report["X"] > 1e-3


SPEC = SynthSpec(users=6, items=24, clusters=3, seq_len=6,
                 f_dim_visual=2, f_dim_textual=2, noise_sigma=0.3, seed=21)


def small_world():
    return synth_corpus(SPEC, np.random.default_rng(21))


def test_train_deterministic():
    corpus, feats = small_world()
    h = full_hyper(d=2)
    cfg = TrainConfig(epochs=3, seed=13)
    pa = train(corpus, feats, h, cfg)
    pb = train(corpus, feats, h, cfg)
    for (_, a), (_, b) in zip(pa.blocks(), pb.blocks()):
        assert np.array_equal(a, b)


def test_train_shuffle_changes_order_not_determinism():
    corpus, feats = small_world()
    h = full_hyper(d=2)
    shuffled = TrainConfig(epochs=3, seed=13, shuffle_users=True)
    pa = train(corpus, feats, h, shuffled)
    pb = train(corpus, feats, h, shuffled)
    assert np.array_equal(pa.X, pb.X)
    plain = train(corpus, feats, h, TrainConfig(epochs=3, seed=13))
    assert not np.array_equal(pa.X, plain.X)


def test_train_log_format():
    corpus, feats = small_world()
    lines = []
    train(corpus, feats, full_hyper(d=2), TrainConfig(epochs=2, seed=1),
          log=lines.append)
    assert len(lines) == 2
    for n, line in enumerate(lines, start=1):
        epoch, mean, norm = line.split("\t")
        assert int(epoch) == n
        assert float(mean) < 0.0   # ln sigma is negative
        assert float(norm) > 0.0


def test_train_divergence_raises():
    corpus, feats = small_world()
    h = full_hyper(d=2, alpha=1e150, lam_theta=0.01)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError,
                                                  match="non-finite"):
        train(corpus, feats, h, TrainConfig(epochs=6, seed=0))


def test_clip_norm_bounds_forward_step():
    h = full_hyper(alpha=1.0, lam_theta=0.0)
    params, corpus, feats, triples = make_context(h)
    ctx = sequence_context(params, corpus, feats, h, triples)
    tr = triples[0]
    before = params.copy()
    clip = 1e-6
    forward_updates(params, ctx, tr, feats, h, clip_norm=clip)
    ip = corpus.item_index[tr.p]
    moved = float(np.linalg.norm(params.X[ip] - before.X[ip]))
    assert moved <= clip * (1.0 + 1e-12)
