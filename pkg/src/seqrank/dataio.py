"""Corpus and feature ingestion: parsing, filtering, splitting, negative
sampling, and the planted-cluster synthetic data generator."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyCorpusError, ParseError, SamplingError

VISUAL_RANGE = (0.0, 0.5)
TEXTUAL_RANGE = (-0.5, 0.5)


@dataclass(frozen=True)
class TrainingTriple:
    """(user, step, positive, negative). `t` is 1-based, 2 <= t <= len(seq)."""

    u: str
    t: int
    p: str
    q: str


@dataclass
class Corpus:
    users: tuple            # user ids, input order
    items: tuple            # item ids, ascending
    train_seq: dict         # user -> list of item ids, chronological
    test_seq: dict          # user -> list of item ids (filtered, deduped)
    item_index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.item_index:
            self.item_index = {it: j for j, it in enumerate(self.items)}
        self._train_sets = {u: frozenset(s) for u, s in self.train_seq.items()}

    @property
    def n_items(self) -> int:
        return len(self.items)

    def train_set(self, u: str) -> frozenset:
        return self._train_sets[u]

    def candidates(self, u: str) -> list:
        """Items the user never interacted with in training, ascending id."""
        owned = self._train_sets[u]
        return [it for it in self.items if it not in owned]

    def eval_users(self) -> list:
        """Users with at least one (filtered) test item."""
        return [u for u in self.users if self.test_seq.get(u)]


def split_sequence(seq: list, split_frac: float) -> tuple:
    """First ceil(split_frac * n) items go to training, the rest to test."""
    n_train = math.ceil(split_frac * len(seq))
    return seq[:n_train], seq[n_train:]


def parse_sequence_file(path) -> dict:
    """Read `user<TAB>item,item,...` lines into an ordered user->sequence map."""
    raw = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"{path}:{lineno}: expected 'user<TAB>item,item,...'")
            items = [tok for tok in parts[1].split(",") if tok]
            if not items:
                raise ParseError(f"{path}:{lineno}: empty item list")
            if parts[0] in raw:
                raise ParseError(f"{path}:{lineno}: duplicate user id {parts[0]!r}")
            raw[parts[0]] = items
    return raw


def build_corpus(raw_seqs: dict, min_len: int, split_frac: float,
                 filter_test: bool = True) -> Corpus:
    """Apply the filtering/split protocol to already-parsed sequences."""
    if not 0.0 < split_frac < 1.0:
        raise ConfigError(f"split_frac must be in (0,1), got {split_frac}")
    if min_len < 2:
        raise ConfigError(f"min_len must be >= 2, got {min_len}")
    users, train_seq, test_seq = [], {}, {}
    item_set = set()
    for u, seq in raw_seqs.items():
        if len(seq) < min_len:
            continue
        tr, te = split_sequence(seq, split_frac)
        users.append(u)
        train_seq[u] = tr
        test_seq[u] = te
        item_set.update(seq)
    if not users:
        raise EmptyCorpusError(f"no user has >= {min_len} interactions")
    corpus = Corpus(tuple(users), tuple(sorted(item_set)), train_seq, test_seq)
    return filter_test_new_items(corpus) if filter_test else corpus


def load_corpus(seq_path, min_len: int = 2, split_frac: float = 0.9,
                filter_test: bool = True) -> Corpus:
    return build_corpus(parse_sequence_file(seq_path), min_len, split_frac,
                        filter_test=filter_test)


def filter_test_new_items(c: Corpus) -> Corpus:
    """Keep only uniquely new test items: drop train items, then de-dup
    preserving first occurrence. Users may end up with an empty test list;
    they stay in the corpus for training but are skipped by evaluation."""
    test_seq = {}
    for u in c.users:
        seen = set(c.train_seq[u])
        kept = []
        for it in c.test_seq.get(u, []):
            if it not in seen:
                kept.append(it)
                seen.add(it)
        test_seq[u] = kept
    return Corpus(c.users, c.items, c.train_seq, test_seq, dict(c.item_index))


# ---------------------------------------------------------------------------
# features

@dataclass
class FeatureTable:
    """One modality: item -> normalized vector of fixed dimension."""

    dim: int
    vectors: dict
    lo: float
    hi: float


def normalize_minmax(matrix: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Per-dimension min-max rescaling onto [lo, hi]; constant dims map to lo."""
    mn = matrix.min(axis=0)
    mx = matrix.max(axis=0)
    span = mx - mn
    safe = np.where(span > 0.0, span, 1.0)
    out = lo + (hi - lo) * (matrix - mn) / safe
    out[:, span == 0.0] = lo
    return out


def load_features(path, expect_dim: int | None, lo: float, hi: float) -> FeatureTable:
    """Parse a `#dims F` header plus `item<TAB>f1 f2 ...` rows, then min-max
    normalize each dimension onto [lo, hi] over all items in the file."""
    ids, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        toks = header.split()
        if len(toks) != 2 or toks[0] != "#dims" or not toks[1].isdigit():
            raise ParseError(f"{path}:1: expected '#dims <F>' header")
        dim = int(toks[1])
        if expect_dim is not None and dim != expect_dim:
            raise ParseError(f"{path}:1: header dims {dim} != expected {expect_dim}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'item<TAB>values'")
            values = parts[1].split()
            if len(values) != dim:
                raise ParseError(
                    f"{path}:{lineno}: {len(values)} values, header says {dim}")
            try:
                row = [float(v) for v in values]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-numeric token ({exc})") from exc
            ids.append(parts[0])
            rows.append(row)
    if not rows:
        raise ParseError(f"{path}: no feature rows")
    matrix = normalize_minmax(np.asarray(rows, dtype=np.float64), lo, hi)
    return FeatureTable(dim, {it: matrix[j] for j, it in enumerate(ids)}, lo, hi)


@dataclass
class FeatureStore:
    """Corpus-aligned feature matrices. Row j holds the vectors of
    corpus.items[j]; items missing from a table get zeros and are listed
    in missing_visual / missing_textual for the load report."""

    f_v: int
    f_t: int
    visual_mat: np.ndarray      # (n_items, f_v)
    textual_mat: np.ndarray     # (n_items, f_t)
    item_index: dict
    missing_visual: list = field(default_factory=list)
    missing_textual: list = field(default_factory=list)

    def visual(self, item: str) -> np.ndarray:
        return self.visual_mat[self.item_index[item]]

    def textual(self, item: str) -> np.ndarray:
        return self.textual_mat[self.item_index[item]]


def _aligned(items, table: FeatureTable):
    mat = np.zeros((len(items), table.dim))
    if table.dim == 0:
        return mat, []
    missing = []
    for j, it in enumerate(items):
        v = table.vectors.get(it)
        if v is None:
            missing.append(it)
        else:
            mat[j] = v
    return mat, missing


def empty_table(lo: float = 0.0, hi: float = 0.0) -> FeatureTable:
    """Zero-width placeholder for runs without that modality."""
    return FeatureTable(0, {}, lo, hi)


def build_feature_store(corpus: Corpus, visual: FeatureTable,
                        textual: FeatureTable) -> FeatureStore:
    vmat, vmiss = _aligned(corpus.items, visual)
    tmat, tmiss = _aligned(corpus.items, textual)
    return FeatureStore(visual.dim, textual.dim, vmat, tmat,
                        dict(corpus.item_index), vmiss, tmiss)


# ---------------------------------------------------------------------------
# negative sampling

def sample_negative(c: Corpus, u: str, rng: np.random.Generator) -> str:
    """Uniform draw from items the user never trained on, by rejection."""
    owned = c.train_set(u)
    if len(owned) >= len(c.items):
        raise SamplingError(f"user {u!r} owns every item; no negatives exist")
    n = len(c.items)
    while True:
        q = c.items[int(rng.integers(n))]
        if q not in owned:
            return q


def sample_triples(c: Corpus, u: str, rng: np.random.Generator) -> list:
    """One (u, t, p, q) per step t = 2..len(train_seq)."""
    seq = c.train_seq[u]
    if len(seq) < 2:
        raise ConfigError(f"user {u!r} has a training sequence shorter than 2")
    return [TrainingTriple(u, t, seq[t - 1], sample_negative(c, u, rng))
            for t in range(2, len(seq) + 1)]


# ---------------------------------------------------------------------------
# synthetic corpus with planted cluster structure

@dataclass
class SynthSpec:
    """Generator config. Items belong to clusters; each user walks a
    cluster-level Markov chain (stay with prob self_prob, otherwise jump
    uniformly). A cold pool per cluster is only drawn in the tail of each
    sequence, planting low-frequency test items with informative features;
    warm tail draws can be concentrated onto the first tail_pool common
    items per cluster so the rest of the test set keeps high frequency."""

    users: int
    items: int
    clusters: int
    seq_len: int
    f_dim_visual: int
    f_dim_textual: int
    noise_sigma: float
    seed: int
    self_prob: float = 0.85
    tail_fraction: float = 0.1
    cold_fraction: float = 0.0
    cold_prob: float = 0.0
    tail_pool: int = 0
    head_boost: float = 0.0
    split_frac: float = 0.9
    min_len: int = 2

    def __post_init__(self):
        problems = []
        if self.users < 1:
            problems.append("users must be >= 1")
        if self.clusters < 1 or self.clusters > self.items:
            problems.append("need 1 <= clusters <= items")
        if self.seq_len < self.min_len:
            problems.append(f"seq_len must be >= min_len ({self.min_len})")
        if self.f_dim_visual < 1 or self.f_dim_textual < 1:
            problems.append("feature dims must be >= 1")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if not 0.0 <= self.self_prob <= 1.0:
            problems.append("self_prob must be in [0,1]")
        if not 0.0 <= self.cold_fraction < 1.0:
            problems.append("cold_fraction must be in [0,1)")
        if not 0.0 <= self.cold_prob <= 1.0:
            problems.append("cold_prob must be in [0,1]")
        if not 0.0 <= self.tail_fraction <= 1.0:
            problems.append("tail_fraction must be in [0,1]")
        if self.tail_pool < 0:
            problems.append("tail_pool must be >= 0")
        if not 0.0 <= self.head_boost <= 1.0:
            problems.append("head_boost must be in [0,1]")
        if not 0.0 < self.split_frac < 1.0:
            problems.append("split_frac must be in (0,1)")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown generator fields: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def item_id(self, j: int) -> str:
        width = max(4, len(str(self.items - 1)))
        return f"i{j:0{width}d}"

    def user_id(self, j: int) -> str:
        width = max(4, len(str(self.users - 1)))
        return f"u{j:0{width}d}"

    def item_cluster(self, j: int) -> int:
        return j % self.clusters

    def cluster_pools(self) -> list:
        """Per cluster, (common item indices, cold item indices)."""
        members = [[] for _ in range(self.clusters)]
        for j in range(self.items):
            members[self.item_cluster(j)].append(j)
        pools = []
        for mem in members:
            n_cold = int(len(mem) * self.cold_fraction)
            if n_cold >= len(mem):
                n_cold = len(mem) - 1
            pools.append((mem[:len(mem) - n_cold], mem[len(mem) - n_cold:]))
        return pools

    def transition_matrix(self) -> np.ndarray:
        k = self.clusters
        if k == 1:
            return np.ones((1, 1))
        off = (1.0 - self.self_prob) / (k - 1)
        m = np.full((k, k), off)
        np.fill_diagonal(m, self.self_prob)
        return m


def synth_raw(spec: SynthSpec, rng: np.random.Generator):
    """Generate raw sequences plus normalized feature tables.

    Returns (raw_seqs, visual_table, textual_table). Draw order is fixed
    (centroids, item noise, then per-user walks) so a seed pins everything.
    """
    k = spec.clusters
    cen_v = rng.normal(0.0, 1.0, (k, spec.f_dim_visual))
    cen_t = rng.normal(0.0, 1.0, (k, spec.f_dim_textual))
    clusters = np.array([spec.item_cluster(j) for j in range(spec.items)])
    feats_v = cen_v[clusters] + spec.noise_sigma * rng.normal(0.0, 1.0, (spec.items, spec.f_dim_visual))
    feats_t = cen_t[clusters] + spec.noise_sigma * rng.normal(0.0, 1.0, (spec.items, spec.f_dim_textual))
    feats_v = normalize_minmax(feats_v, *VISUAL_RANGE)
    feats_t = normalize_minmax(feats_t, *TEXTUAL_RANGE)

    pools = spec.cluster_pools()
    tail_start = math.ceil((1.0 - spec.tail_fraction) * spec.seq_len)
    raw_seqs = {}
    for uj in range(spec.users):
        cluster = int(rng.integers(k))
        seq = []
        for s in range(spec.seq_len):
            if s > 0 and k > 1:
                if rng.random() >= spec.self_prob:
                    hop = int(rng.integers(k - 1))
                    cluster = hop if hop < cluster else hop + 1
            common, cold = pools[cluster]
            pool = common
            if s >= tail_start:
                # tail draws: planted low-frequency items with prob
                # cold_prob, otherwise a concentrated head of the common
                # pool so the remainder of the test set stays warm
                if cold and rng.random() < spec.cold_prob:
                    pool = cold
                elif spec.tail_pool:
                    pool = common[:min(spec.tail_pool, len(common))]
            elif spec.head_boost and spec.tail_pool and rng.random() < spec.head_boost:
                # the warm head also gets extra training mass, so its test
                # items are easy for every model and bin growth isolates
                # the planted cold pool
                pool = common[:min(spec.tail_pool, len(common))]
            seq.append(spec.item_id(pool[int(rng.integers(len(pool)))]))
        raw_seqs[spec.user_id(uj)] = seq

    ids = [spec.item_id(j) for j in range(spec.items)]
    vis = FeatureTable(spec.f_dim_visual,
                       {it: feats_v[j] for j, it in enumerate(ids)}, *VISUAL_RANGE)
    tex = FeatureTable(spec.f_dim_textual,
                       {it: feats_t[j] for j, it in enumerate(ids)}, *TEXTUAL_RANGE)
    return raw_seqs, vis, tex


def synth_corpus(spec: SynthSpec, rng: np.random.Generator):
    """Planted-structure corpus plus aligned features, split and filtered
    with the same protocol load_corpus applies."""
    raw_seqs, vis, tex = synth_raw(spec, rng)
    corpus = build_corpus(raw_seqs, spec.min_len, spec.split_frac)
    return corpus, build_feature_store(corpus, vis, tex)


# ---------------------------------------------------------------------------
# writers (cmd_synth emits files in the formats the loaders read)

def write_sequences(path, raw_seqs: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, seq in raw_seqs.items():
            fh.write(f"{u}\t{','.join(seq)}\n")


def write_features(path, table: FeatureTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dims {table.dim}\n")
        for it in sorted(table.vectors):
            vals = " ".join(repr(float(x)) for x in table.vectors[it])
            fh.write(f"{it}\t{vals}\n")
