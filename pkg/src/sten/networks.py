"""Trainable encoder, frozen random projector, order-prediction head,
pair distances, and the binary checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import DataError
from .ndkernel import GruParams, ParamDict, gru_forward, init_gru, require_finite
from .seqdata import ShuffledCollection, SubSeq, Window

NORM_FLOOR = 1e-12


@dataclass
class PhiParams:
    """Trainable encoder: shared GRU plus the order-prediction head.

    ``dsn_gru`` holds a separate tower for the distance branch when the
    separate-towers ablation is on; ``ep_W``/``ep_b`` hold the one-step-ahead
    head used by the error-prediction ablation.  ``version`` counts in-place
    parameter updates so stale gradient tapes can be detected.
    """

    gru: GruParams
    order_W: np.ndarray   # (m, d_model)
    order_b: np.ndarray   # (m,)
    dsn_gru: GruParams | None = None
    ep_W: np.ndarray | None = None  # (D, d_model)
    ep_b: np.ndarray | None = None  # (D,)
    version: int = 0

    @property
    def d_model(self) -> int:
        return self.gru.d_model

    @property
    def m(self) -> int:
        return self.order_W.shape[0]

    def dsn_tower(self) -> GruParams:
        return self.dsn_gru if self.dsn_gru is not None else self.gru

    def as_dict(self) -> ParamDict:
        d = self.gru.as_dict("gru.")
        d["order_head.W"] = self.order_W
        d["order_head.b"] = self.order_b
        if self.dsn_gru is not None:
            d.update(self.dsn_gru.as_dict("dsn_gru."))
        if self.ep_W is not None:
            d["ep_head.W"] = self.ep_W
            d["ep_head.b"] = self.ep_b
        return d

    def load_dict(self, d: ParamDict) -> None:
        """Replace all parameter arrays in place and bump the version counter."""
        self.gru = GruParams.from_dict(d, "gru.")
        self.order_W = d["order_head.W"]
        self.order_b = d["order_head.b"]
        if self.dsn_gru is not None:
            self.dsn_gru = GruParams.from_dict(d, "dsn_gru.")
        if self.ep_W is not None:
            self.ep_W = d["ep_head.W"]
            self.ep_b = d["ep_head.b"]
        self.version += 1

    def astype(self, dtype) -> "PhiParams":
        return PhiParams(
            gru=self.gru.astype(dtype),
            order_W=self.order_W.astype(dtype),
            order_b=self.order_b.astype(dtype),
            dsn_gru=self.dsn_gru.astype(dtype) if self.dsn_gru is not None else None,
            ep_W=self.ep_W.astype(dtype) if self.ep_W is not None else None,
            ep_b=self.ep_b.astype(dtype) if self.ep_b is not None else None,
            version=self.version,
        )


@dataclass
class EtaParams:
    """Frozen random projector; never updated after construction."""

    gru: GruParams

    def as_dict(self) -> ParamDict:
        return self.gru.as_dict("gru.")

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in GruParams.NAMES:
            h.update(np.ascontiguousarray(getattr(self.gru, name)).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "EtaParams":
        return EtaParams(gru=self.gru.astype(dtype))


@dataclass
class OrderPrediction:
    """Per-sub-sequence position distributions and their one-hot ground truth."""

    probs: np.ndarray   # (m, m)
    labels: np.ndarray  # (m, m) one-hot rows


def init_phi(d_in: int, d_model: int, m: int, rng: np.random.Generator,
             separate_towers: bool = False, with_ep_head: bool = False) -> PhiParams:
    s = 1.0 / np.sqrt(d_model)
    gru = init_gru(d_in, d_model, rng)
    order_W = rng.uniform(-s, s, size=(m, d_model))
    order_b = rng.uniform(-s, s, size=m)
    dsn_gru = init_gru(d_in, d_model, rng) if separate_towers else None
    ep_W = rng.uniform(-s, s, size=(d_in, d_model)) if with_ep_head else None
    ep_b = rng.uniform(-s, s, size=d_in) if with_ep_head else None
    return PhiParams(gru=gru, order_W=order_W, order_b=order_b,
                     dsn_gru=dsn_gru, ep_W=ep_W, ep_b=ep_b)


def init_eta(d_in: int, d_model: int, rng: np.random.Generator) -> EtaParams:
    return EtaParams(gru=init_gru(d_in, d_model, rng))


# ---------------------------------------------------------------------------
# Encoding and distances
# ---------------------------------------------------------------------------

def encode_subseq(phi: PhiParams, s: SubSeq) -> np.ndarray:
    """Embed one sub-sequence: final GRU hidden state."""
    return gru_forward(np.asarray(s.data, dtype=np.float64)[None], phi.gru)[0]


def order_probs(phi: PhiParams, collection: ShuffledCollection) -> OrderPrediction:
    """Softmax position distributions for every sub-sequence of a window."""
    from .ndkernel import softmax

    X = np.stack([np.asarray(s.data, dtype=np.float64) for s in collection.subseqs])
    H = gru_forward(X, phi.gru)
    logits = H @ np.asarray(phi.order_W, np.float64).T + np.asarray(phi.order_b, np.float64)
    return OrderPrediction(probs=softmax(logits), labels=collection.one_hot_labels())


def embed_sequence(params: PhiParams | EtaParams, w: Window,
                   normalize: bool = False) -> np.ndarray:
    """Embed a full window with the appropriate tower (DSN tower for phi)."""
    gru = params.dsn_tower() if isinstance(params, PhiParams) else params.gru
    e = gru_forward(np.asarray(w.data, dtype=np.float64)[None], gru)[0]
    if normalize:
        e = e / max(float(np.linalg.norm(e)), NORM_FLOOR)
    return e


def embed_windows(params: PhiParams | EtaParams, data: np.ndarray,
                  normalize: bool = False) -> np.ndarray:
    """Batched window embedding: data (B, L, D) -> (B, d_model)."""
    gru = params.dsn_tower() if isinstance(params, PhiParams) else params.gru
    E = gru_forward(np.asarray(data, dtype=np.float64), gru)
    if normalize:
        norms = np.maximum(np.linalg.norm(E, axis=1, keepdims=True), NORM_FLOOR)
        E = E / norms
    return E


def pair_distance(e_i: np.ndarray, e_j: np.ndarray) -> float:
    """Inner-product relation between two sequence embeddings."""
    e_i = np.asarray(e_i, dtype=np.float64)
    e_j = np.asarray(e_j, dtype=np.float64)
    if e_i.shape != e_j.shape:
        raise DataError(f"embedding shapes differ: {e_i.shape} vs {e_j.shape}")
    return float(e_i @ e_j)


def sample_pairs(n_windows: int, rng: np.random.Generator | int,
                 k: int = 1) -> list[tuple[int, int]]:
    """For each window index i, draw k partners j != i uniformly."""
    if n_windows < 2:
        raise DataError("need at least 2 windows to sample reference pairs")
    if k < 1:
        raise DataError("k must be >= 1")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    pairs = []
    for i in range(n_windows):
        for _ in range(k):
            j = int(rng.integers(0, n_windows - 1))
            if j >= i:
                j += 1
            pairs.append((i, j))
    return pairs


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8s    magic "STENCKPT"
#   u32   format version (1)
#   u32   config JSON length, then the JSON bytes
#   u32   number of parameter blocks
#   per block:
#     u16  name length, name bytes (utf-8)
#     u8   ndim, then u32 per dimension
#     f32  row-major data
#   32 bytes sha256 of everything above

CHECKPOINT_MAGIC = b"STENCKPT"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, config: dict, blocks: dict[str, np.ndarray]) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg))
    out += cfg
    out += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f4")
        require_finite(name, arr)
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()
    out += hashlib.sha256(bytes(out)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 + 32:
        raise DataError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"{path}: checkpoint checksum failure (corrupt or truncated file)")
    if body[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals if len(vals) > 1 else vals[0]

    version = take("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
    cfg_len = take("<I")
    config = json.loads(body[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    n_blocks = take("<I")
    blocks: dict[str, np.ndarray] = {}
    for _ in range(n_blocks):
        name_len = take("<H")
        name = body[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = take("<B")
        shape = tuple(take("<I") for _ in range(ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += count * 4
        blocks[name] = arr.astype(np.float32)
    return config, blocks
