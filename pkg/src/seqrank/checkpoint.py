"""Binary checkpoint format shared by every ranker kind.

Layout: 8-byte magic "SEQRANK1", uint32 little-endian header length, JSON
header (kind, dims, slice mask, item table, user table where applicable,
block names and shapes), then the parameter blocks as little-endian float64
in row-major order. Round trips are bit-exact.
"""

import json
import struct

import numpy as np

from . import baselines, model
from .errors import CheckpointError
from .model import Hyper, Mask

MAGIC = b"SEQRANK1"

HYPER_KEYS = ("alpha", "lam_theta", "lam_e", "lam_v", "init_lo", "init_hi")


def _ranker_payload(ranker) -> tuple:
    """(header dict sans blocks, ordered [(name, array), ...])."""
    kind = ranker.kind
    header = {"kind": kind, "items": list(ranker.corpus.items)}
    if kind == "random":
        header["seed"] = ranker.seed
        return header, []
    if kind == "pop":
        return header, [("counts", ranker.counts)]
    h = ranker.h
    header.update({"d": h.d, "f_v": h.f_v, "f_t": h.f_t,
                   "mask": list(h.mask.active),
                   "hyper": {k: getattr(h, k) for k in HYPER_KEYS}})
    p = ranker.params
    if isinstance(ranker, baselines.EmbedRanker):
        header["users"] = list(ranker.corpus.users)
        blocks = [("Gamma", p.gamma), ("X", p.X), ("E", p.E), ("V", p.V)]
    else:
        blocks = [("X", p.X), ("E", p.E), ("V", p.V),
                  ("InMat", p.InMat), ("RecMat", p.RecMat)]
    return header, blocks


def save_ranker(path, ranker) -> None:
    header, blocks = _ranker_payload(ranker)
    header["blocks"] = [{"name": n, "shape": list(a.shape)} for n, a in blocks]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for _, a in blocks:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple:
    """(header dict, {block name: array}). Validates framing only."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (head_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    off = len(MAGIC) + 4
    if off + head_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[off:off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    off += head_len
    blocks = {}
    for spec in header.get("blocks", []):
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 8
        if off + nbytes > len(raw):
            raise CheckpointError(
                f"{path}: block {spec['name']!r} wants {nbytes} bytes, "
                f"{len(raw) - off} left")
        blocks[spec["name"]] = np.frombuffer(
            raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return header, blocks


def _check_tables(path, header, corpus) -> None:
    if list(header["items"]) != list(corpus.items):
        raise CheckpointError(
            f"{path}: item table mismatch, checkpoint has "
            f"{len(header['items'])} items, corpus has {corpus.n_items}")
    if "users" in header and list(header["users"]) != list(corpus.users):
        raise CheckpointError(
            f"{path}: user table mismatch, checkpoint has "
            f"{len(header['users'])} users, corpus has {len(corpus.users)}")


def _hyper_from_header(path, header, feats) -> Hyper:
    mask = Mask(**{n: n in header["mask"] for n in model.SLICE_NAMES})
    f_v, f_t = header["f_v"], header["f_t"]
    if mask.visual and feats.f_v != f_v:
        raise CheckpointError(
            f"{path}: checkpoint visual dim {f_v} != feature file dim {feats.f_v}")
    if mask.textual and feats.f_t != f_t:
        raise CheckpointError(
            f"{path}: checkpoint textual dim {f_t} != feature file dim {feats.f_t}")
    return Hyper(d=header["d"], f_v=f_v, f_t=f_t, mask=mask,
                 **header.get("hyper", {}))


def _expect_blocks(path, blocks, names, shapes) -> None:
    if sorted(blocks) != sorted(names):
        raise CheckpointError(f"{path}: blocks {sorted(blocks)}, "
                              f"expected {sorted(names)}")
    for n in names:
        if blocks[n].shape != shapes[n]:
            raise CheckpointError(f"{path}: block {n} has shape "
                                  f"{blocks[n].shape}, expected {shapes[n]}")


def load_ranker(path, corpus, feats):
    """Rebuild a ready-to-rank object; ranking after a round trip is
    bit-identical to ranking with the in-memory original."""
    header, blocks = read_checkpoint(path)
    kind = header.get("kind")
    if kind not in model.ALL_KINDS:
        raise CheckpointError(f"{path}: unknown kind {kind!r}")
    _check_tables(path, header, corpus)
    if kind == "random":
        return baselines.RandomRanker(corpus, int(header["seed"]))
    if kind == "pop":
        _expect_blocks(path, blocks, ["counts"], {"counts": (corpus.n_items,)})
        return baselines.PopRanker(corpus, counts=blocks["counts"])
    h = _hyper_from_header(path, header, feats)
    n, d = corpus.n_items, h.d
    if kind in model.RECURRENT_KINDS:
        shapes = {"X": (n, d), "E": (d, h.f_v), "V": (d, h.f_t),
                  "InMat": (h.D, h.D), "RecMat": (h.D, h.D)}
        _expect_blocks(path, blocks, list(shapes), shapes)
        params = model.ModelParams(blocks["X"], blocks["E"], blocks["V"],
                                   blocks["InMat"], blocks["RecMat"])
        return baselines.RecurrentRanker(kind, params, corpus, feats, h)
    shapes = {"Gamma": (len(corpus.users), h.D), "X": (n, d),
              "E": (d, h.f_v), "V": (d, h.f_t)}
    _expect_blocks(path, blocks, list(shapes), shapes)
    params = baselines.BprParams(blocks["Gamma"], blocks["X"],
                                 blocks["E"], blocks["V"])
    return baselines.EmbedRanker(kind, params, corpus, feats, h)
