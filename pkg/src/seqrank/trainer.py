"""Pairwise-ranking training of the recurrent model.

Per user sequence: one (positive, sampled-negative) pair per step t >= 2,
scored against the previous hidden state. Updates run in two phases from a
context frozen at sequence start. The forward phase applies the direct
score gradients per step (latent rows of the pair plus the embedding
kernels). The backward phase propagates gradients through the recurrence,
accumulates the transition/embedding sums over the whole sequence, and
applies them in one step.

The per-sequence update with zero regularization equals the exact gradient
of sum_t ln sigma(score_t) at the frozen context, which is what grad_check
verifies against central finite differences.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .dataio import Corpus, FeatureStore, TrainingTriple, sample_triples
from .errors import ConfigError, DivergenceError
from .model import (Hyper, ModelParams, init_params, item_input, run_sequence,
                    score_pair, step_hidden, zero_state)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    seed: int
    shuffle_users: bool = False
    clip_norm: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")


@dataclass
class SeqContext:
    """Everything the two update phases read, computed once per sequence at
    the pre-update parameters. The backward phase additionally reads
    InMat/RecMat, which the forward phase never touches, so the context
    stays consistent across both phases."""

    u: str
    seq: list          # positive item ids, t = 1..m
    inputs_p: list     # ItemInput of seq[t-1], index t-1
    inputs_q: dict     # t -> ItemInput of the sampled negative, t = 2..m
    states: list       # HiddenState, index t for t = 0..m (states[0] is zero)
    scores: dict       # t -> PairScore
    c: dict            # t -> sigma(-score), the per-step loss multiplier
    triples: list

    @property
    def m(self) -> int:
        return len(self.seq)


def sequence_context(params: ModelParams, corpus: Corpus, feats: FeatureStore,
                     h: Hyper, triples_for_u: list) -> SeqContext:
    if not triples_for_u:
        raise ConfigError("sequence_context needs at least one triple")
    u = triples_for_u[0].u
    seq = list(corpus.train_seq[u])
    m = len(seq)
    steps = sorted(tr.t for tr in triples_for_u)
    if steps != list(range(2, m + 1)):
        raise ConfigError(f"user {u!r}: triples must cover steps 2..{m}, got {steps}")
    inputs_p = [item_input(it, params, feats, h) for it in seq]
    states = [zero_state(h)]
    for inp in inputs_p:
        states.append(step_hidden(states[-1], inp, params))
    inputs_q, scores, c = {}, {}, {}
    for tr in triples_for_u:
        if tr.p != seq[tr.t - 1]:
            raise ConfigError(
                f"user {u!r} step {tr.t}: triple positive {tr.p!r} is not the "
                f"sequence item {seq[tr.t - 1]!r}")
        q_inp = item_input(tr.q, params, feats, h)
        sc = score_pair(states[tr.t - 1], inputs_p[tr.t - 1], q_inp)
        inputs_q[tr.t] = q_inp
        scores[tr.t] = sc
        c[tr.t] = numkit.sigmoid(-sc.value)
    return SeqContext(u, seq, inputs_p, inputs_q, states, scores, c,
                      list(triples_for_u))


# ---------------------------------------------------------------------------
# objective

def regularization(params: ModelParams, h: Hyper) -> float:
    r = h.lam_theta * (np.sum(params.X ** 2) + np.sum(params.InMat ** 2)
                       + np.sum(params.RecMat ** 2))
    r += h.lam_e * np.sum(params.E ** 2)
    r += h.lam_v * np.sum(params.V ** 2)
    return 0.5 * r


def triple_loglik(params: ModelParams, corpus: Corpus, feats: FeatureStore,
                  h: Hyper, triples: list) -> float:
    """Sum of ln sigma(score) over triples, no penalty term."""
    by_user = {}
    for tr in triples:
        by_user.setdefault(tr.u, []).append(tr)
    total = 0.0
    for u, trs in by_user.items():
        full = [zero_state(h)] + run_sequence(u, params, feats, corpus, h)
        for tr in trs:
            p_inp = item_input(tr.p, params, feats, h)
            q_inp = item_input(tr.q, params, feats, h)
            sc = score_pair(full[tr.t - 1], p_inp, q_inp)
            total += float(numkit.log_sigmoid(sc.value))
    return total


def bpr_objective(params: ModelParams, corpus: Corpus, feats: FeatureStore,
                  h: Hyper, triples: list) -> float:
    """Maximum-posterior objective: log-likelihood minus the L2 penalty."""
    if not triples:
        raise ConfigError("bpr_objective needs a nonempty triple list")
    return triple_loglik(params, corpus, feats, h, triples) - regularization(params, h)


# ---------------------------------------------------------------------------
# forward-direction updates: direct score gradients, applied per step

@dataclass
class ForwardGrad:
    """Raw derivative pieces of one step's score, multiplier kept separate.
    dx_q == -dx_p; the embedding kernels see the feature difference of the
    pair, so swapping p and q negates every piece while c maps to 1 - c."""

    t: int
    c: float
    dx_p: np.ndarray | None
    dx_q: np.ndarray | None
    dE: np.ndarray | None
    dV: np.ndarray | None


def forward_grad(ctx: SeqContext, t: int, feats: FeatureStore, h: Hyper,
                 tr: TrainingTriple) -> ForwardGrad:
    prev = ctx.states[t - 1]
    c = ctx.c[t]
    dx_p = dx_q = dE = dV = None
    if h.mask.latent:
        dx_p = prev.h_x.copy()
        dx_q = -dx_p
    if h.mask.visual:
        dE = numkit.outer(prev.h_f, feats.visual(tr.p) - feats.visual(tr.q))
    if h.mask.textual:
        dV = numkit.outer(prev.h_g, feats.textual(tr.p) - feats.textual(tr.q))
    return ForwardGrad(t, c, dx_p, dx_q, dE, dV)


def _clip(g: np.ndarray, clip_norm: float | None) -> np.ndarray:
    if clip_norm is None:
        return g
    n = float(np.linalg.norm(g))
    return g * (clip_norm / n) if n > clip_norm else g


def forward_updates(params: ModelParams, ctx: SeqContext, tr: TrainingTriple,
                    feats: FeatureStore, h: Hyper,
                    clip_norm: float | None = None) -> ForwardGrad:
    """Ascend the step-t score gradient: theta += alpha*(c*dtheta - lam*theta).
    Only the pair's latent rows and the active embedding kernels move; the
    transition matrices are the backward phase's job."""
    fg = forward_grad(ctx, tr.t, feats, h, tr)
    a = h.alpha
    if h.mask.latent:
        ip, iq = feats.item_index[tr.p], feats.item_index[tr.q]
        params.X[ip] += a * (_clip(fg.c * fg.dx_p, clip_norm) - h.lam_theta * params.X[ip])
        params.X[iq] += a * (_clip(fg.c * fg.dx_q, clip_norm) - h.lam_theta * params.X[iq])
    if h.mask.visual:
        params.E += a * (_clip(fg.c * fg.dE, clip_norm) - h.lam_e * params.E)
    if h.mask.textual:
        params.V += a * (_clip(fg.c * fg.dV, clip_norm) - h.lam_v * params.V)
    return fg


# ---------------------------------------------------------------------------
# backward phase: propagate through the recurrence, accumulate, apply once

@dataclass
class StepGrad:
    """Gradient entering layer t's pre-activation. gate is the new score
    gradient arriving at layer t through step t+1's pair, before its c
    multiplier; e adds the part carried back from later layers."""

    t: int
    c: float
    gate: np.ndarray
    e: np.ndarray


@dataclass
class SeqAccum:
    dInMat: np.ndarray
    dRecMat: np.ndarray
    dE: np.ndarray
    dV: np.ndarray

    @classmethod
    def zeros(cls, h: Hyper) -> "SeqAccum":
        return cls(np.zeros((h.D, h.D)), np.zeros((h.D, h.D)),
                   np.zeros((h.d, h.f_v)), np.zeros((h.d, h.f_t)))


def backward_steps(ctx: SeqContext, params: ModelParams) -> list:
    """e-recursion from layer m-1 down to 1. Layer m never feeds a score
    (the last pair reads h^{m-1}), so it contributes nothing."""
    steps = []
    e_next = None
    for t in range(ctx.m - 1, 0, -1):
        hvec = ctx.states[t].full
        sig_deriv = hvec * (1.0 - hvec)
        diff = ctx.inputs_p[t].full - ctx.inputs_q[t + 1].full
        gate = diff * sig_deriv
        e = ctx.c[t + 1] * gate
        if e_next is not None:
            e = e + (params.RecMat.T @ e_next) * sig_deriv
        steps.append(StepGrad(t, ctx.c[t + 1], gate, e))
        e_next = e
    return steps


def backward_gradients(ctx: SeqContext, params: ModelParams,
                       feats: FeatureStore, h: Hyper):
    """Pure accumulation: (SeqAccum, steps, latent-row gradients). The
    latent rows come back as (t, row index, gradient) because they are
    applied per step while the matrices are applied once."""
    steps = backward_steps(ctx, params)
    acc = SeqAccum.zeros(h)
    x_rows = []
    sl = h.mask.slices(h.d)
    for sg in steps:
        t = sg.t
        p_item = ctx.seq[t - 1]
        acc.dInMat += numkit.outer(sg.e, ctx.inputs_p[t - 1].full)
        acc.dRecMat += numkit.outer(sg.e, ctx.states[t - 1].full)
        back = params.InMat.T @ sg.e
        if h.mask.latent:
            x_rows.append((t, feats.item_index[p_item], back[sl["latent"]]))
        if h.mask.visual:
            acc.dE += numkit.outer(back[sl["visual"]], feats.visual(p_item))
        if h.mask.textual:
            acc.dV += numkit.outer(back[sl["textual"]], feats.textual(p_item))
    return acc, steps, x_rows


def backward_pass(params: ModelParams, ctx: SeqContext, feats: FeatureStore,
                  h: Hyper, clip_norm: float | None = None) -> SeqAccum:
    """Apply the backward-phase updates: latent rows per step, then the
    accumulated transition/embedding sums in one step each. Sequences
    shorter than 2 have no backward signal and are a no-op."""
    if ctx.m < 2:
        return SeqAccum.zeros(h)
    acc, _, x_rows = backward_gradients(ctx, params, feats, h)
    a = h.alpha
    for _, idx, g in x_rows:
        params.X[idx] += a * (_clip(g, clip_norm) - h.lam_theta * params.X[idx])
    params.InMat += a * (_clip(acc.dInMat, clip_norm) - h.lam_theta * params.InMat)
    params.RecMat += a * (_clip(acc.dRecMat, clip_norm) - h.lam_theta * params.RecMat)
    if h.mask.visual:
        params.E += a * (_clip(acc.dE, clip_norm) - h.lam_e * params.E)
    if h.mask.textual:
        params.V += a * (_clip(acc.dV, clip_norm) - h.lam_v * params.V)
    return acc


# ---------------------------------------------------------------------------
# total per-sequence gradient (both phases, no step sizes, no penalty)

def sequence_gradients(params: ModelParams, corpus: Corpus, feats: FeatureStore,
                       h: Hyper, triples_for_u: list) -> dict:
    """Exact gradient of sum_t ln sigma(score_t) for one user's sequence
    with its sampled negatives, as full parameter-shaped arrays. Inactive
    blocks are omitted."""
    ctx = sequence_context(params, corpus, feats, h, triples_for_u)
    grads = {"InMat": np.zeros_like(params.InMat),
             "RecMat": np.zeros_like(params.RecMat)}
    if h.mask.latent:
        grads["X"] = np.zeros_like(params.X)
    if h.mask.visual:
        grads["E"] = np.zeros_like(params.E)
    if h.mask.textual:
        grads["V"] = np.zeros_like(params.V)

    for tr in ctx.triples:
        fg = forward_grad(ctx, tr.t, feats, h, tr)
        if h.mask.latent:
            grads["X"][feats.item_index[tr.p]] += fg.c * fg.dx_p
            grads["X"][feats.item_index[tr.q]] += fg.c * fg.dx_q
        if h.mask.visual:
            grads["E"] += fg.c * fg.dE
        if h.mask.textual:
            grads["V"] += fg.c * fg.dV

    acc, _, x_rows = backward_gradients(ctx, params, feats, h)
    grads["InMat"] += acc.dInMat
    grads["RecMat"] += acc.dRecMat
    if h.mask.latent:
        for _, idx, g in x_rows:
            grads["X"][idx] += g
    if h.mask.visual:
        grads["E"] += acc.dE
    if h.mask.textual:
        grads["V"] += acc.dV
    return grads


# ---------------------------------------------------------------------------
# training loop

def param_norm(params: ModelParams) -> float:
    return float(np.sqrt(sum(np.sum(b ** 2) for _, b in params.blocks())))


def train(corpus: Corpus, feats: FeatureStore, h: Hyper, cfg: TrainConfig,
          log=None) -> ModelParams:
    """SGD ascent over users and epochs. Negatives are resampled fresh each
    epoch. Initialization and sampling use split seed streams so the
    sampling sequence is identical across model kinds under one seed."""
    if not corpus.users:
        raise ConfigError("empty corpus")
    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_train = np.random.default_rng([cfg.seed, 1])
    params = init_params(h, corpus.n_items, rng_init)
    for epoch in range(1, cfg.epochs + 1):
        users = list(corpus.users)
        if cfg.shuffle_users:
            users = [users[i] for i in rng_train.permutation(len(users))]
        lnsig_sum, lnsig_n = 0.0, 0
        for u in users:
            if len(corpus.train_seq[u]) < 2:
                continue
            triples = sample_triples(corpus, u, rng_train)
            ctx = sequence_context(params, corpus, feats, h, triples)
            for t, sc in ctx.scores.items():
                lnsig_sum += float(numkit.log_sigmoid(sc.value))
                lnsig_n += 1
            for tr in ctx.triples:
                forward_updates(params, ctx, tr, feats, h, cfg.clip_norm)
            backward_pass(params, ctx, feats, h, cfg.clip_norm)
            if not params.all_finite():
                raise DivergenceError(
                    f"non-finite parameters at epoch {epoch}, user {u!r}")
        if log is not None:
            mean = lnsig_sum / lnsig_n if lnsig_n else float("nan")
            log(f"{epoch}\t{mean:.6f}\t{param_norm(params):.6f}")
    return params


# ---------------------------------------------------------------------------
# finite-difference verification

def tiny_fixture(h: Hyper, rng: np.random.Generator, n_items: int = 6,
                 seq_len: int = 4):
    """One-user corpus with random features and a full negative ladder,
    small enough to finite-difference every parameter entry."""
    items = tuple(f"i{j}" for j in range(n_items))
    order = rng.permutation(n_items)
    seq = [items[int(j)] for j in order[:seq_len]]
    corpus = Corpus(("u0",), items, {"u0": seq}, {"u0": []})
    f_v, f_t = max(h.f_v, 1), max(h.f_t, 1)
    vmat = rng.uniform(0.0, 0.5, (n_items, f_v))
    tmat = rng.uniform(-0.5, 0.5, (n_items, f_t))
    feats = FeatureStore(f_v, f_t, vmat, tmat, dict(corpus.item_index))
    pool = [it for it in items if it not in set(seq)]
    triples = [TrainingTriple("u0", t, seq[t - 1],
                              pool[int(rng.integers(len(pool)))])
               for t in range(2, seq_len + 1)]
    return corpus, feats, triples


def grad_check(h: Hyper, rng: np.random.Generator, perturb=None,
               fd_step: float = 1e-5) -> dict:
    """Analytic per-sequence gradient vs central finite differences of the
    triple log-likelihood, every entry of every active block. Returns
    {block: max relative error}. `perturb` mutates the analytic gradients
    first (harness hook for verifying the check can fail)."""
    corpus, feats, triples = tiny_fixture(h, rng)
    params = init_params(h, corpus.n_items, rng)
    grads = sequence_gradients(params, corpus, feats, h, triples)
    if perturb is not None:
        perturb(grads)
    report = {}
    for name, g in grads.items():
        block = getattr(params, name)
        numeric = np.zeros_like(g)
        for k in range(block.size):
            saved = block.flat[k]
            block.flat[k] = saved + fd_step
            f_hi = triple_loglik(params, corpus, feats, h, triples)
            block.flat[k] = saved - fd_step
            f_lo = triple_loglik(params, corpus, feats, h, triples)
            block.flat[k] = saved
            numeric.flat[k] = (f_hi - f_lo) / (2.0 * fd_step)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-8)
        report[name] = float(np.max(np.abs(g - numeric) / denom))
    return report
