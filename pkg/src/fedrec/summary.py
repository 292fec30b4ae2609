"""Differentiable graph summarization: heavy-tailed soft clustering of item
embeddings into a compact cluster-by-dimension summary, the regularized
reverse (pseudo-inverse) reconstruction, and the structural reconstruction
penalty.

The summary matrix is the only structural object allowed to cross the
client boundary; its wire encoding is bit-exact (fixed little-endian
float64 payload with a checksum) so checkpoints replay identically.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Decoder

DEFAULT_CLUSTERS = 32
RIDGE = 1e-6

_WIRE_MAGIC = b"GSUM"
_WIRE_VERSION = 1


class SummaryFormatError(ValueError):
    """Malformed or corrupted summary payload."""


@dataclass
class ClusterMemory:
    """Learnable cluster centers parameterizing the summarization operator."""

    centers: Tensor
    tau: float = 1.0

    def __post_init__(self):
        if self.centers.shape[0] < 1:
            raise ValueError("cluster memory needs at least one center")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def from_embeddings(cls, embeddings: np.ndarray, n_clusters: int,
                        rng: np.random.Generator, tau: float = 1.0) -> "ClusterMemory":
        """Initialize centers by sampling distinct rows of the embeddings."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if n_clusters > embeddings.shape[0]:
            raise ValueError(
                f"cannot draw {n_clusters} centers from {embeddings.shape[0]} rows"
            )
        idx = rng.choice(embeddings.shape[0], size=n_clusters, replace=False)
        return cls(ad.parameter(embeddings[idx].copy(), name="centers"), tau=tau)

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class GraphSummary:
    """Immutable cluster-aggregated embedding message."""

    xi: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.xi, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"summary payload must be 2-D, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "xi", arr)

    @property
    def n_clusters(self) -> int:
        return self.xi.shape[0]

    @property
    def n_components(self) -> int:
        return self.xi.shape[1]


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, GraphSummary):
        return ad.constant(x.xi)
    return ad.constant(np.asarray(x, dtype=np.float64))


def assign(memory: ClusterMemory, embeddings) -> Tensor:
    """Row-stochastic soft assignment of items to cluster centers.

    Kernel (1 + ||z_a - center_b||^2 / tau)^(-(tau+1)/2), normalized over the
    centers; differentiable w.r.t. both the embeddings and the centers.
    """
    z = _lift(embeddings)
    k = memory.centers
    if z.shape[1] != k.shape[1]:
        raise ad.ShapeMismatchError(
            f"assign: embedding dim {z.shape[1]} vs center dim {k.shape[1]}"
        )
    # pairwise squared distances via the expansion ||z||^2 - 2 z.k + ||k||^2
    sq_z = ad.row_sum(ad.square(z))                      # (n, 1)
    sq_k = ad.transpose(ad.row_sum(ad.square(k)))        # (1, c)
    cross = ad.scale(ad.matmul(z, ad.transpose(k)), -2.0)
    d2 = ad.add(ad.add(cross, sq_z), sq_k)
    # guard tiny negative values from cancellation before the fractional power
    base = ad.add(ad.scale(_relu_floor(d2), 1.0 / memory.tau), ad.constant(1.0))
    kernel = ad.powc(base, -(memory.tau + 1.0) / 2.0)
    return ad.div(kernel, ad.row_sum(kernel))


def _relu_floor(t: Tensor) -> Tensor:
    # max(t, 0) with subgradient 1 on the positive part; distances are
    # mathematically >= 0, this only sanitizes float cancellation
    mask = (t.value > 0).astype(np.float64)
    return ad.mul(t, ad.constant(mask))


def summarize_embeddings(memory: ClusterMemory, embeddings) -> Tensor:
    """Differentiable summary C^T Z (clusters x dims)."""
    z = _lift(embeddings)
    c = assign(memory, z)
    return ad.matmul(ad.transpose(c), z)


def summarize(memory: ClusterMemory, embeddings) -> GraphSummary:
    """Detached summary message for communication."""
    return GraphSummary(xi=summarize_embeddings(memory, embeddings).value.copy())


def reconstruct(memory: ClusterMemory, xi, reference, ridge: float = RIDGE) -> Tensor:
    """Approximate item embeddings from a summary.

    Solves the ridge-regularized least squares min ||C^T Zhat - xi||_F^2 +
    ridge * ||Zhat||_F^2 where C is the assignment of ``reference`` to the
    memory centers. The normal-equations solution (C C^T + ridge I)^{-1} C xi
    is computed as C (C^T C + ridge I)^{-1} xi — the push-through identity
    keeps the factorized system at clusters x clusters.
    """
    xi_t = _lift(xi)
    c = assign(memory, _lift(reference))
    if xi_t.shape[0] != memory.n_clusters:
        raise ad.ShapeMismatchError(
            f"reconstruct: summary has {xi_t.shape[0]} rows, memory has "
            f"{memory.n_clusters} centers"
        )
    gram = ad.matmul(ad.transpose(c), c)
    system = ad.add(gram, ad.constant(ridge * np.eye(memory.n_clusters)))
    return ad.matmul(c, ad.solve_psd(system, xi_t))


def structural_penalty(decoder: Decoder, memory: ClusterMemory, xi,
                       adjacency: np.ndarray, reference) -> Tensor:
    """Squared Frobenius gap between the adjacency and its expected
    reconstruction from the summary.

    The expected adjacency has entries sigmoid(t1 <zhat_a, zhat_b> + t2) with
    zhat rows reconstructed from ``xi`` (assignments taken from ``reference``).
    Diagonal cells participate as zeros. Differentiable w.r.t. the decoder,
    the memory centers, ``xi`` and ``reference``.
    """
    adjacency = np.asarray(adjacency, dtype=np.float64)
    zhat = reconstruct(memory, xi, reference)
    if zhat.shape[0] != adjacency.shape[0]:
        raise ad.ShapeMismatchError(
            f"structural_penalty: {zhat.shape[0]} reconstructed rows vs "
            f"{adjacency.shape[0]}x{adjacency.shape[1]} adjacency"
        )
    logits = ad.add(
        ad.mul(decoder.theta1, ad.matmul(zhat, ad.transpose(zhat))),
        decoder.theta2,
    )
    expected = ad.sigmoid(logits)
    return ad.frobenius_sq(ad.sub(ad.constant(adjacency), expected))


# ---------------------------------------------------------------------------
# wire format: magic, version, market id, shape, round, checksummed payload


def encode_summary(summary: GraphSummary, market_id: str, round_index: int) -> bytes:
    mid = market_id.encode("utf-8")
    payload = np.ascontiguousarray(summary.xi, dtype="<f8").tobytes()
    header = struct.pack(
        "<4sBH", _WIRE_MAGIC, _WIRE_VERSION, len(mid)
    ) + mid + struct.pack(
        "<IIIQ", summary.n_clusters, summary.n_components, round_index, len(payload)
    )
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_summary(blob: bytes) -> tuple[GraphSummary, str, int]:
    try:
        magic, version, mid_len = struct.unpack_from("<4sBH", blob, 0)
    except struct.error as exc:
        raise SummaryFormatError(f"truncated summary header: {exc}") from exc
    if magic != _WIRE_MAGIC:
        raise SummaryFormatError(f"bad magic {magic!r}")
    if version != _WIRE_VERSION:
        raise SummaryFormatError(f"unsupported summary version {version}")
    offset = struct.calcsize("<4sBH")
    market_id = blob[offset:offset + mid_len].decode("utf-8")
    offset += mid_len
    try:
        c, k, round_index, payload_len = struct.unpack_from("<IIIQ", blob, offset)
    except struct.error as exc:
        raise SummaryFormatError(f"truncated summary header: {exc}") from exc
    offset += struct.calcsize("<IIIQ")
    if payload_len != 8 * c * k or len(blob) != offset + payload_len + 4:
        raise SummaryFormatError(
            f"payload length mismatch: header says {payload_len} bytes for "
            f"{c}x{k}, blob has {len(blob) - offset - 4}"
        )
    payload = blob[offset:offset + payload_len]
    (crc,) = struct.unpack_from("<I", blob, offset + payload_len)
    if crc != zlib.crc32(payload):
        raise SummaryFormatError("payload checksum mismatch")
    xi = np.frombuffer(payload, dtype="<f8").reshape(c, k).astype(np.float64)
    return GraphSummary(xi=xi), market_id, round_index
