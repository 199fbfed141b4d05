"""Comparison ranker ladder behind one interface.

Every ranker exposes .kind and .rank(u) -> [(item, score), ...] over the
user's unseen items, sorted descending with ascending-id ties, so the
evaluator treats all of them uniformly. Kinds: random, pop, mf, bpr, vbpr,
tbpr, vtbpr, rnn, vrnn, trnn, vtrnn.
"""

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import model, numkit, trainer
from .dataio import Corpus, FeatureStore, sample_negative, sample_triples
from .errors import ConfigError, DivergenceError
from .model import Hyper, Mask, order_candidates


def user_stream(seed: int, u: str) -> np.random.Generator:
    """Generator keyed by (seed, user id), stable across call order so
    per-user draws do not depend on evaluation scheduling."""
    digest = hashlib.sha256(u.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


class RandomRanker:
    kind = "random"

    def __init__(self, corpus: Corpus, seed: int):
        self.corpus = corpus
        self.seed = seed

    def rank(self, u: str) -> list:
        scores = user_stream(self.seed, u).random(self.corpus.n_items)
        return order_candidates(scores, self.corpus, u)


class PopRanker:
    kind = "pop"

    def __init__(self, corpus: Corpus, counts: np.ndarray | None = None):
        self.corpus = corpus
        if counts is None:
            counts = np.zeros(corpus.n_items)
            for u in corpus.users:
                for it in corpus.train_seq[u]:
                    counts[corpus.item_index[it]] += 1.0
        self.counts = counts

    def rank(self, u: str) -> list:
        return order_candidates(self.counts, self.corpus, u)


# ---------------------------------------------------------------------------
# embedding-dot rankers: BPR family and pointwise MF share the score form
# dot(gamma_u, item representation)

@dataclass
class BprParams:
    """Free per-user vector plus the item-representation blocks. The X/E/V
    attribute names match ModelParams so the representation helpers in
    `model` work on both."""

    gamma: np.ndarray    # (n_users, D)
    X: np.ndarray        # (n_items, d)
    E: np.ndarray        # (d, f_v)
    V: np.ndarray        # (d, f_t)

    def copy(self) -> "BprParams":
        return BprParams(self.gamma.copy(), self.X.copy(),
                         self.E.copy(), self.V.copy())

    def blocks(self) -> list:
        return [("Gamma", self.gamma), ("X", self.X), ("E", self.E),
                ("V", self.V)]

    def all_finite(self) -> bool:
        return all(np.isfinite(b).all() for _, b in self.blocks())


def init_bpr_params(h: Hyper, n_users: int, n_items: int,
                    rng: np.random.Generator) -> BprParams:
    lo, hi = h.init_lo, h.init_hi
    gamma = rng.uniform(lo, hi, (n_users, h.D))
    X = rng.uniform(lo, hi, (n_items, h.d))
    E = (rng.uniform(lo, hi, (h.d, h.f_v)) if h.mask.visual
         else np.zeros((h.d, h.f_v)))
    V = (rng.uniform(lo, hi, (h.d, h.f_t)) if h.mask.textual
         else np.zeros((h.d, h.f_t)))
    return BprParams(gamma, X, E, V)


class EmbedRanker:
    def __init__(self, kind: str, params: BprParams, corpus: Corpus,
                 feats: FeatureStore, h: Hyper):
        self.kind = kind
        self.params = params
        self.corpus = corpus
        self.h = h
        self.user_index = {u: j for j, u in enumerate(corpus.users)}
        self.rep = model.item_rep_matrix(params, feats, h)

    def rank(self, u: str) -> list:
        gamma_u = self.params.gamma[self.user_index[u]]
        return order_candidates(self.rep @ gamma_u, self.corpus, u)


class RecurrentRanker:
    def __init__(self, kind: str, params: model.ModelParams, corpus: Corpus,
                 feats: FeatureStore, h: Hyper):
        self.kind = kind
        self.params = params
        self.corpus = corpus
        self.feats = feats
        self.h = h
        self.rep = model.item_rep_matrix(params, feats, h)

    def rank(self, u: str) -> list:
        return model.rank_candidates(u, self.params, self.feats, self.corpus,
                                     self.h, rep=self.rep)


# ---------------------------------------------------------------------------
# BPR training over the masked item representation

def train_content_bpr(corpus: Corpus, feats: FeatureStore, h: Hyper,
                      cfg: trainer.TrainConfig, log=None) -> BprParams:
    """Pairwise ascent on dot(gamma_u, rep_p - rep_q): gamma moves by the
    representation difference, latent rows by the matching gamma slice, and
    the embedding kernels by rank-1 feature-difference terms."""
    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_train = np.random.default_rng([cfg.seed, 1])
    params = init_bpr_params(h, len(corpus.users), corpus.n_items, rng_init)
    sl = h.mask.slices(h.d)
    user_index = {u: j for j, u in enumerate(corpus.users)}
    a = h.alpha
    for epoch in range(1, cfg.epochs + 1):
        users = list(corpus.users)
        if cfg.shuffle_users:
            users = [users[i] for i in rng_train.permutation(len(users))]
        lnsig_sum, lnsig_n = 0.0, 0
        for u in users:
            if len(corpus.train_seq[u]) < 2:
                continue
            uj = user_index[u]
            for tr in sample_triples(corpus, u, rng_train):
                rep_p = model.item_input(tr.p, params, feats, h).full
                rep_q = model.item_input(tr.q, params, feats, h).full
                gamma_u = params.gamma[uj].copy()
                xhat = numkit.dot(gamma_u, rep_p - rep_q)
                c = numkit.sigmoid(-xhat)
                lnsig_sum += float(numkit.log_sigmoid(xhat))
                lnsig_n += 1
                params.gamma[uj] += a * (c * (rep_p - rep_q) - h.lam_theta * gamma_u)
                if h.mask.latent:
                    ip, iq = corpus.item_index[tr.p], corpus.item_index[tr.q]
                    g_x = gamma_u[sl["latent"]]
                    params.X[ip] += a * (c * g_x - h.lam_theta * params.X[ip])
                    params.X[iq] += a * (-c * g_x - h.lam_theta * params.X[iq])
                if h.mask.visual:
                    dE = numkit.outer(gamma_u[sl["visual"]],
                                      feats.visual(tr.p) - feats.visual(tr.q))
                    params.E += a * (c * dE - h.lam_e * params.E)
                if h.mask.textual:
                    dV = numkit.outer(gamma_u[sl["textual"]],
                                      feats.textual(tr.p) - feats.textual(tr.q))
                    params.V += a * (c * dV - h.lam_v * params.V)
            if not params.all_finite():
                raise DivergenceError(
                    f"non-finite parameters at epoch {epoch}, user {u!r}")
        if log is not None:
            mean = lnsig_sum / lnsig_n if lnsig_n else float("nan")
            log(f"{epoch}\t{mean:.6f}\t{bpr_param_norm(params):.6f}")
    return params


def bpr_param_norm(params: BprParams) -> float:
    return float(np.sqrt(sum(np.sum(b ** 2) for _, b in params.blocks())))


def bpr_triple_loglik(params: BprParams, corpus: Corpus, feats: FeatureStore,
                      h: Hyper, triples: list) -> float:
    user_index = {u: j for j, u in enumerate(corpus.users)}
    total = 0.0
    for tr in triples:
        rep_p = model.item_input(tr.p, params, feats, h).full
        rep_q = model.item_input(tr.q, params, feats, h).full
        xhat = numkit.dot(params.gamma[user_index[tr.u]], rep_p - rep_q)
        total += float(numkit.log_sigmoid(xhat))
    return total


def bpr_gradients(params: BprParams, corpus: Corpus, feats: FeatureStore,
                  h: Hyper, triples: list) -> dict:
    """Exact gradient of the triple log-likelihood, full-shape arrays."""
    user_index = {u: j for j, u in enumerate(corpus.users)}
    sl = h.mask.slices(h.d)
    grads = {"Gamma": np.zeros_like(params.gamma)}
    if h.mask.latent:
        grads["X"] = np.zeros_like(params.X)
    if h.mask.visual:
        grads["E"] = np.zeros_like(params.E)
    if h.mask.textual:
        grads["V"] = np.zeros_like(params.V)
    for tr in triples:
        uj = user_index[tr.u]
        rep_p = model.item_input(tr.p, params, feats, h).full
        rep_q = model.item_input(tr.q, params, feats, h).full
        gamma_u = params.gamma[uj]
        c = numkit.sigmoid(-numkit.dot(gamma_u, rep_p - rep_q))
        grads["Gamma"][uj] += c * (rep_p - rep_q)
        if h.mask.latent:
            grads["X"][corpus.item_index[tr.p]] += c * gamma_u[sl["latent"]]
            grads["X"][corpus.item_index[tr.q]] -= c * gamma_u[sl["latent"]]
        if h.mask.visual:
            grads["E"] += c * numkit.outer(gamma_u[sl["visual"]],
                                           feats.visual(tr.p) - feats.visual(tr.q))
        if h.mask.textual:
            grads["V"] += c * numkit.outer(gamma_u[sl["textual"]],
                                           feats.textual(tr.p) - feats.textual(tr.q))
    return grads


def bpr_grad_check(h: Hyper, rng: np.random.Generator, perturb=None,
                   fd_step: float = 1e-5) -> dict:
    """Finite-difference gate for the static pairwise model, same protocol
    as the recurrent check."""
    corpus, feats, triples = trainer.tiny_fixture(h, rng)
    params = init_bpr_params(h, len(corpus.users), corpus.n_items, rng)
    grads = bpr_gradients(params, corpus, feats, h, triples)
    if perturb is not None:
        perturb(grads)
    attr = {"Gamma": "gamma", "X": "X", "E": "E", "V": "V"}
    report = {}
    for name, g in grads.items():
        block = getattr(params, attr[name])
        numeric = np.zeros_like(g)
        for k in range(block.size):
            saved = block.flat[k]
            block.flat[k] = saved + fd_step
            f_hi = bpr_triple_loglik(params, corpus, feats, h, triples)
            block.flat[k] = saved - fd_step
            f_lo = bpr_triple_loglik(params, corpus, feats, h, triples)
            block.flat[k] = saved
            numeric.flat[k] = (f_hi - f_lo) / (2.0 * fd_step)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-8)
        report[name] = float(np.max(np.abs(g - numeric) / denom))
    return report


# ---------------------------------------------------------------------------
# pointwise matrix factorization

def train_mf(corpus: Corpus, h: Hyper, cfg: trainer.TrainConfig,
             log=None) -> BprParams:
    """Squared-error factorization on implicit data: every training
    interaction is a target-1 observation paired with one sampled
    target-0 negative."""
    if not h.mask.latent or h.mask.visual or h.mask.textual:
        raise ConfigError("mf uses the latent slice only")
    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_train = np.random.default_rng([cfg.seed, 1])
    params = init_bpr_params(h, len(corpus.users), corpus.n_items, rng_init)
    user_index = {u: j for j, u in enumerate(corpus.users)}
    a = h.alpha
    for epoch in range(1, cfg.epochs + 1):
        users = list(corpus.users)
        if cfg.shuffle_users:
            users = [users[i] for i in rng_train.permutation(len(users))]
        sq_sum, sq_n = 0.0, 0
        for u in users:
            uj = user_index[u]
            for it in corpus.train_seq[u]:
                neg = sample_negative(corpus, u, rng_train)
                for item, target in ((it, 1.0), (neg, 0.0)):
                    ij = corpus.item_index[item]
                    gamma_u = params.gamma[uj].copy()
                    err = target - numkit.dot(gamma_u, params.X[ij])
                    sq_sum += err * err
                    sq_n += 1
                    params.gamma[uj] += a * (err * params.X[ij] - h.lam_theta * gamma_u)
                    params.X[ij] += a * (err * gamma_u - h.lam_theta * params.X[ij])
            if not params.all_finite():
                raise DivergenceError(
                    f"non-finite parameters at epoch {epoch}, user {u!r}")
        if log is not None:
            mean = sq_sum / sq_n if sq_n else float("nan")
            log(f"{epoch}\t{mean:.6f}\t{bpr_param_norm(params):.6f}")
    return params


def mf_loss(params: BprParams, observations: list) -> float:
    """Sum of squared-error halves over (user row, item row, target)."""
    total = 0.0
    for uj, ij, target in observations:
        err = target - numkit.dot(params.gamma[uj], params.X[ij])
        total += 0.5 * err * err
    return total


def mf_gradients(params: BprParams, observations: list) -> dict:
    grads = {"Gamma": np.zeros_like(params.gamma), "X": np.zeros_like(params.X)}
    for uj, ij, target in observations:
        err = target - numkit.dot(params.gamma[uj], params.X[ij])
        grads["Gamma"][uj] -= err * params.X[ij]
        grads["X"][ij] -= err * params.gamma[uj]
    return grads


def mf_grad_check(h: Hyper, rng: np.random.Generator,
                  fd_step: float = 1e-5) -> dict:
    observations = [(int(rng.integers(2)), int(rng.integers(4)),
                     float(rng.integers(2))) for _ in range(8)]
    params = init_bpr_params(h, 2, 4, rng)
    grads = mf_gradients(params, observations)
    attr = {"Gamma": "gamma", "X": "X"}
    report = {}
    for name, g in grads.items():
        block = getattr(params, attr[name])
        numeric = np.zeros_like(g)
        for k in range(block.size):
            saved = block.flat[k]
            block.flat[k] = saved + fd_step
            f_hi = mf_loss(params, observations)
            block.flat[k] = saved - fd_step
            f_lo = mf_loss(params, observations)
            block.flat[k] = saved
            numeric.flat[k] = (f_hi - f_lo) / (2.0 * fd_step)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-8)
        report[name] = float(np.max(np.abs(g - numeric) / denom))
    return report


# ---------------------------------------------------------------------------
# factory

def bpr_mf(corpus: Corpus, h: Hyper, cfg: trainer.TrainConfig,
           log=None) -> BprParams:
    """Plain pairwise factorization: the latent-only special case of the
    content model, same code path, so the two are bit-identical."""
    if h.mask.visual or h.mask.textual:
        raise ConfigError("bpr_mf uses the latent slice only")
    empty = FeatureStore(h.f_v, h.f_t,
                         np.zeros((corpus.n_items, h.f_v)),
                         np.zeros((corpus.n_items, h.f_t)),
                         dict(corpus.item_index))
    return train_content_bpr(corpus, empty, h, cfg, log=log)


def build_ranker(kind: str, corpus: Corpus, feats: FeatureStore, h: Hyper,
                 cfg: trainer.TrainConfig, log=None):
    """Train (where applicable) and wrap a ranker of the requested kind.
    Trainable kinds get their slice mask from the kind string."""
    if kind == "random":
        return RandomRanker(corpus, cfg.seed)
    if kind == "pop":
        return PopRanker(corpus)
    if kind not in model.MASK_BY_KIND:
        raise ConfigError(f"unknown ranker kind {kind!r} "
                          f"(expected one of {sorted(model.ALL_KINDS)})")
    h = replace(h, mask=Mask.for_kind(kind))
    if kind == "mf":
        params = train_mf(corpus, h, cfg, log=log)
        return EmbedRanker(kind, params, corpus, feats, h)
    if kind in ("bpr", "vbpr", "tbpr", "vtbpr"):
        params = train_content_bpr(corpus, feats, h, cfg, log=log)
        return EmbedRanker(kind, params, corpus, feats, h)
    params = trainer.train(corpus, feats, h, cfg, log=log)
    return RecurrentRanker(kind, params, corpus, feats, h)
