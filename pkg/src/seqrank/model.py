"""Recurrent sequential ranker forward pass.

Items are represented by concatenating up to three width-d slices: a free
latent vector, an embedded visual feature vector, and an embedded textual
feature vector. A sigmoid recurrence folds the user's training sequence into
a hidden state; preferences are dot products between that state and item
representations.
"""

from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import ConfigError

SLICE_NAMES = ("latent", "visual", "textual")

# config strings for every ranker kind; trainable kinds carry a slice mask
MASK_BY_KIND = {
    "mf": ("latent",),
    "bpr": ("latent",),
    "vbpr": ("latent", "visual"),
    "tbpr": ("latent", "textual"),
    "vtbpr": ("latent", "visual", "textual"),
    "rnn": ("latent",),
    "vrnn": ("latent", "visual"),
    "trnn": ("latent", "textual"),
    "vtrnn": ("latent", "visual", "textual"),
}
ALL_KINDS = ("random", "pop") + tuple(MASK_BY_KIND)
RECURRENT_KINDS = ("rnn", "vrnn", "trnn", "vtrnn")


@dataclass(frozen=True)
class Mask:
    """Which slices participate in the item representation."""

    latent: bool = True
    visual: bool = False
    textual: bool = False

    def __post_init__(self):
        if not (self.latent or self.visual or self.textual):
            raise ConfigError("feature mask selects no slices")

    @classmethod
    def for_kind(cls, kind: str) -> "Mask":
        if kind not in MASK_BY_KIND:
            raise ConfigError(f"kind {kind!r} has no feature mask "
                              f"(expected one of {sorted(MASK_BY_KIND)})")
        names = MASK_BY_KIND[kind]
        return cls(**{n: n in names for n in SLICE_NAMES})

    @property
    def active(self) -> tuple:
        return tuple(n for n in SLICE_NAMES
                     if getattr(self, n))

    @property
    def count(self) -> int:
        return len(self.active)

    def slices(self, d: int) -> dict:
        """Offsets of each active slice inside the concatenated vector."""
        out, off = {}, 0
        for name in self.active:
            out[name] = slice(off, off + d)
            off += d
        return out


@dataclass(frozen=True)
class Hyper:
    d: int
    f_v: int = 0
    f_t: int = 0
    mask: Mask = field(default_factory=Mask)
    alpha: float = 0.1
    lam_theta: float = 0.001
    lam_e: float = 0.001
    lam_v: float = 0.001
    init_lo: float = -0.5
    init_hi: float = 0.5

    def __post_init__(self):
        problems = []
        if self.d < 1:
            problems.append(f"d must be >= 1, got {self.d}")
        if self.f_v < 0 or self.f_t < 0:
            problems.append("feature dims must be >= 0")
        if self.mask.visual and self.f_v < 1:
            problems.append("visual slice active but f_v == 0")
        if self.mask.textual and self.f_t < 1:
            problems.append("textual slice active but f_t == 0")
        # alpha == 0 is allowed: a zero-rate pass is the standard no-op probe
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0, got {self.alpha}")
        if min(self.lam_theta, self.lam_e, self.lam_v) < 0:
            problems.append("regularizers must be >= 0")
        if self.init_lo > self.init_hi:
            problems.append(f"init range [{self.init_lo}, {self.init_hi}] is empty")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def D(self) -> int:
        return self.d * self.mask.count


@dataclass
class ModelParams:
    X: np.ndarray        # (n_items, d) latent item features
    E: np.ndarray        # (d, f_v) visual embedding kernel
    V: np.ndarray        # (d, f_t) textual embedding kernel
    InMat: np.ndarray    # (D, D) input transition
    RecMat: np.ndarray   # (D, D) recurrent transition

    def copy(self) -> "ModelParams":
        return ModelParams(self.X.copy(), self.E.copy(), self.V.copy(),
                           self.InMat.copy(), self.RecMat.copy())

    def blocks(self) -> list:
        return [("X", self.X), ("E", self.E), ("V", self.V),
                ("InMat", self.InMat), ("RecMat", self.RecMat)]

    def all_finite(self) -> bool:
        return all(np.isfinite(b).all() for _, b in self.blocks())


def init_params(h: Hyper, n_items: int, rng: np.random.Generator) -> ModelParams:
    """Uniform [init_lo, init_hi] draws in a fixed block order. Inactive
    embedding blocks stay zero and consume no randomness, so masked variants
    share the X/InMat/RecMat stream."""
    lo, hi = h.init_lo, h.init_hi
    X = rng.uniform(lo, hi, (n_items, h.d))
    E = (rng.uniform(lo, hi, (h.d, h.f_v)) if h.mask.visual
         else np.zeros((h.d, h.f_v)))
    V = (rng.uniform(lo, hi, (h.d, h.f_t)) if h.mask.textual
         else np.zeros((h.d, h.f_t)))
    InMat = rng.uniform(lo, hi, (h.D, h.D))
    RecMat = rng.uniform(lo, hi, (h.D, h.D))
    return ModelParams(X, E, V, InMat, RecMat)


@dataclass
class SlicedVec:
    """Length-D vector with named views onto its active slices."""

    full: np.ndarray
    mask: Mask
    d: int

    def part(self, name: str):
        sl = self.mask.slices(self.d).get(name)
        return None if sl is None else self.full[sl]


class ItemInput(SlicedVec):
    @property
    def x_part(self):
        return self.part("latent")

    @property
    def f_part(self):
        return self.part("visual")

    @property
    def g_part(self):
        return self.part("textual")


class HiddenState(SlicedVec):
    @property
    def h_x(self):
        return self.part("latent")

    @property
    def h_f(self):
        return self.part("visual")

    @property
    def h_g(self):
        return self.part("textual")


@dataclass(frozen=True)
class PairScore:
    value: float
    pos_score: float
    neg_score: float


def zero_state(h: Hyper) -> HiddenState:
    return HiddenState(np.zeros(h.D), h.mask, h.d)


def item_input(p: str, params: ModelParams, feats, h: Hyper) -> ItemInput:
    """i = [x; E f; V g], restricted to the active slices."""
    if p not in feats.item_index:
        raise KeyError(f"unknown item {p!r}")
    idx = feats.item_index[p]
    parts = []
    if h.mask.latent:
        parts.append(params.X[idx])
    if h.mask.visual:
        parts.append(numkit.matvec(params.E, feats.visual_mat[idx]))
    if h.mask.textual:
        parts.append(numkit.matvec(params.V, feats.textual_mat[idx]))
    return ItemInput(np.concatenate(parts), h.mask, h.d)


def step_hidden(prev: HiddenState, inp: ItemInput, params: ModelParams) -> HiddenState:
    pre = numkit.matvec(params.InMat, inp.full) + numkit.matvec(params.RecMat, prev.full)
    return HiddenState(numkit.sigmoid_arr(pre), inp.mask, inp.d)


def run_sequence(u: str, params: ModelParams, feats, corpus, h: Hyper) -> list:
    """Hidden states t = 1..m over the user's training sequence, starting
    from the zero state."""
    if u not in corpus.train_seq:
        raise KeyError(f"unknown user {u!r}")
    states = []
    prev = zero_state(h)
    for it in corpus.train_seq[u]:
        prev = step_hidden(prev, item_input(it, params, feats, h), params)
        states.append(prev)
    return states


def score_pair(prev: HiddenState, p_inp: ItemInput, q_inp: ItemInput) -> PairScore:
    pos = numkit.dot(prev.full, p_inp.full)
    neg = numkit.dot(prev.full, q_inp.full)
    return PairScore(pos - neg, pos, neg)


def item_rep_matrix(params: ModelParams, feats, h: Hyper) -> np.ndarray:
    """All item representations stacked (n_items, D), rows in item-id order."""
    parts = []
    if h.mask.latent:
        parts.append(params.X)
    if h.mask.visual:
        parts.append(feats.visual_mat @ params.E.T)
    if h.mask.textual:
        parts.append(feats.textual_mat @ params.V.T)
    return np.concatenate(parts, axis=1)


def order_candidates(scores: np.ndarray, corpus, u: str) -> list:
    """Turn a full item-score vector into the user's candidate ranking:
    drop trained items, sort descending; equal scores keep ascending
    item-id order."""
    owned = corpus.train_set(u)
    out = [(it, float(scores[j]))
           for j, it in enumerate(corpus.items) if it not in owned]
    out.sort(key=lambda pair: -pair[1])
    return out


def rank_items(state_vec: np.ndarray, rep: np.ndarray, corpus, u: str) -> list:
    return order_candidates(rep @ state_vec, corpus, u)


def rank_candidates(u: str, params: ModelParams, feats, corpus, h: Hyper,
                    rep: np.ndarray | None = None) -> list:
    """Rank unseen items by dot product with the final training state."""
    states = run_sequence(u, params, feats, corpus, h)
    if not states:
        raise ConfigError(f"user {u!r} has an empty training sequence")
    if rep is None:
        rep = item_rep_matrix(params, feats, h)
    return rank_items(states[-1].full, rep, corpus, u)
