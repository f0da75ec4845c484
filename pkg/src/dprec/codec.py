"""Compressed model-update coding over a shared Gaussian prior.

A client clips its update, reweights K shared-seed prior candidates per
group by the exact closed-form log-likelihood ratio, samples one index per
group with client-private randomness, and transmits (seed, indices). The
server regenerates exactly the selected candidates.

Candidate streams are keyed by the group's start offset, so a permutation
of the partition's listing order permutes message indices and nothing
else. The client-private categorical draw never touches the shared seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    BudgetExceededError,
    InvalidConfigError,
    MalformedMessageError,
    ShapeMismatchError,
)
from .params import GroupPartition, ParamVector
from .rng import StreamKey, gaussian_candidate, standard_normals, uniform01_at

# Candidate work cap: K * dim above this raises instead of grinding.
DEFAULT_WORK_BUDGET = 1 << 33
# Max candidate-block elements materialized at once (memory stays bounded
# regardless of bit-width).
_CHUNK_ELEMS = 1 << 20
# Small blocks are memoized: repeated encodes against one shared seed (the
# common simulation pattern) then skip regeneration.
_CACHE_ELEM_LIMIT = 1 << 16


@dataclass(frozen=True)
class RecConfig:
    """Codec parameters: prior scale, clip multiplier, bit-width, grouping."""

    sigma: float
    clip_mult: float
    bits: int
    partition: GroupPartition

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise InvalidConfigError("sigma must be nonnegative")
        if self.clip_mult <= 0:
            raise InvalidConfigError("clip_mult must be positive")
        if not 0 <= self.bits <= 60:
            raise InvalidConfigError("bits must be in [0, 60]")

    @property
    def clip(self) -> float:
        """Clip threshold: clip_mult times the prior scale."""
        return self.clip_mult * self.sigma

    @property
    def n_candidates(self) -> int:
        return 1 << self.bits


@dataclass(frozen=True)
class RecMessage:
    """One compressed uplink: shared seed plus one index per group."""

    seed: int
    indices: tuple[int, ...]


@dataclass(frozen=True)
class ImportanceWeights:
    """Materialized per-candidate log ratios and their softmax."""

    log_alpha: np.ndarray
    pi: np.ndarray

    @classmethod
    def from_log_alpha(cls, log_alpha: np.ndarray) -> "ImportanceWeights":
        log_alpha = np.asarray(log_alpha, dtype=np.float64)
        shifted = log_alpha - log_alpha.max()
        e = np.exp(shifted)
        return cls(log_alpha, e / e.sum())


def clip(phi: np.ndarray, threshold: float) -> np.ndarray:
    """Scale ``phi`` down to L2 norm ``threshold`` if it exceeds it."""
    phi = np.asarray(phi, dtype=np.float64)
    norm = float(np.linalg.norm(phi))
    if norm <= threshold or norm == 0.0:
        return phi.copy()
    return phi * (threshold / norm)


def log_weight(phi_hat: np.ndarray, candidate: np.ndarray, sigma: float) -> float:
    """Exact log density ratio of N(phi_hat, sigma^2 I) to N(0, sigma^2 I).

    Closed form ``(phi_hat . candidate - |phi_hat|^2 / 2) / sigma^2``; no
    density is ever evaluated.
    """
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if phi_hat.shape != candidate.shape:
        raise ShapeMismatchError("phi_hat and candidate dimensions differ")
    if sigma <= 0:
        raise InvalidConfigError("sigma must be positive")
    return float((phi_hat @ candidate - 0.5 * (phi_hat @ phi_hat)) / (sigma * sigma))


def candidate_stream(seed: int, group_offset: int) -> StreamKey:
    """The shared candidate stream for one message group."""
    return StreamKey(seed, group_offset)


@lru_cache(maxsize=16)
def _cached_block(key: StreamKey, k0: int, k1: int, dim: int) -> np.ndarray:
    flat = standard_normals(key, k0 * dim, (k1 - k0) * dim)
    block = flat.reshape(k1 - k0, dim)
    block.setflags(write=False)
    return block


def _candidate_block(key: StreamKey, k0: int, k1: int, dim: int) -> np.ndarray:
    # Unit-scale candidates; caller applies sigma in the weight computation.
    if (k1 - k0) * dim <= _CACHE_ELEM_LIMIT:
        return _cached_block(key, k0, k1, dim)
    flat = standard_normals(key, k0 * dim, (k1 - k0) * dim)
    return flat.reshape(k1 - k0, dim)


def _group_for(cfg: RecConfig, group: int):
    try:
        return cfg.partition.groups[group]
    except IndexError:
        raise InvalidConfigError(f"group {group} outside partition") from None


def encode_group(
    phi: np.ndarray,
    cfg: RecConfig,
    seed: int,
    group: int,
    private_key: StreamKey,
    work_budget: int = DEFAULT_WORK_BUDGET,
) -> int:
    """Select one candidate index for an already-clipped group slice.

    Two streaming passes over the candidates: the first accumulates the
    log-normalizer online, the second walks the normalized CDF until it
    crosses a single client-private uniform. Memory stays O(chunk), never
    O(K * dim). The private draw for group position ``g`` is variate ``g``
    of ``private_key``, so one private stream serves a whole message.
    """
    g = _group_for(cfg, group)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (g.length,):
        raise ShapeMismatchError(
            f"group {g.name!r} expects dim {g.length}, got {phi.shape}"
        )
    k_total = cfg.n_candidates
    if k_total * g.length > work_budget:
        raise BudgetExceededError(
            f"{k_total} candidates x dim {g.length} exceeds work budget {work_budget}"
        )
    if cfg.bits == 0:
        return 0
    if cfg.sigma <= 0:
        raise InvalidConfigError("encoding requires sigma > 0")

    key = candidate_stream(seed, g.offset)
    # Candidates are sigma * (unit normals), so the log weight is the
    # projection (phi . unit_candidate) / sigma plus a constant that
    # cancels in the softmax; only the projection is accumulated.
    proj = phi / cfg.sigma
    chunk = max(1, _CHUNK_ELEMS // g.length)

    running_max = -math.inf
    running_sum = 0.0
    for k0 in range(0, k_total, chunk):
        k1 = min(k0 + chunk, k_total)
        lw = _candidate_block(key, k0, k1, g.length) @ proj
        m = float(lw.max())
        if m > running_max:
            if running_sum:
                running_sum *= math.exp(running_max - m)
            running_max = m
        running_sum += float(np.exp(lw - running_max).sum())
    log_norm = running_max + math.log(running_sum)

    u = uniform01_at(private_key, group)
    cum = 0.0
    for k0 in range(0, k_total, chunk):
        k1 = min(k0 + chunk, k_total)
        lw = _candidate_block(key, k0, k1, g.length) @ proj
        pi = np.exp(lw - log_norm)
        cdf = cum + np.cumsum(pi)
        j = int(np.searchsorted(cdf, u, side="left"))
        if j < k1 - k0:
            return k0 + j
        cum = float(cdf[-1])
    return k_total - 1  # float round-off pushed the CDF just below u


def importance_weights(
    phi_hat: np.ndarray,
    cfg: RecConfig,
    seed: int,
    group: int,
    work_budget: int = DEFAULT_WORK_BUDGET,
) -> ImportanceWeights:
    """Materialize all K log weights and probabilities for one group."""
    g = _group_for(cfg, group)
    if cfg.n_candidates * g.length > work_budget:
        raise BudgetExceededError("candidate enumeration exceeds work budget")
    if cfg.sigma <= 0:
        raise InvalidConfigError("weights require sigma > 0")
    phi_hat = np.asarray(phi_hat, dtype=np.float64)
    cands = _candidate_block(candidate_stream(seed, g.offset), 0, cfg.n_candidates, g.length)
    log_alpha = (cands @ (phi_hat / cfg.sigma)) - 0.5 * float(phi_hat @ phi_hat) / cfg.sigma**2
    return ImportanceWeights.from_log_alpha(log_alpha)


def encode(
    delta: ParamVector,
    cfg: RecConfig,
    seed: int,
    private_key: StreamKey,
    work_budget: int = DEFAULT_WORK_BUDGET,
) -> RecMessage:
    """Clip the full update once, then encode each group independently."""
    if delta.partition != cfg.partition:
        raise ShapeMismatchError("update partition does not match codec config")
    phi_hat = clip(delta.values, cfg.clip)
    indices = tuple(
        encode_group(phi_hat[g.slice], cfg, seed, i, private_key, work_budget)
        for i, g in enumerate(cfg.partition.groups)
    )
    return RecMessage(seed, indices)


def decode(msg: RecMessage, cfg: RecConfig) -> ParamVector:
    """Regenerate exactly the candidates the encoder selected."""
    if len(msg.indices) != len(cfg.partition):
        raise MalformedMessageError(
            f"message has {len(msg.indices)} indices for {len(cfg.partition)} groups"
        )
    out = np.empty(cfg.partition.total_length, dtype=np.float64)
    for g, k in zip(cfg.partition.groups, msg.indices):
        if not 0 <= k < cfg.n_candidates:
            raise MalformedMessageError(
                f"index {k} out of range for {cfg.bits}-bit group {g.name!r}"
            )
        out[g.slice] = gaussian_candidate(candidate_stream(msg.seed, g.offset), k, g.length, cfg.sigma)
    return ParamVector(out, cfg.partition)


def message_size_bits(msg: RecMessage, cfg: RecConfig) -> int:
    """Logical uplink size: 64 seed bits plus ``bits`` per group."""
    return 64 + len(msg.indices) * cfg.bits


# Wire format: [seed: 8 bytes big-endian][group count: u16 big-endian]
# [indices packed MSB-first, `bits` bits each, zero-padded to a byte].


def pack_message(msg: RecMessage, bits: int) -> bytes:
    if not 0 <= bits <= 60:
        raise InvalidConfigError("bits must be in [0, 60]")
    if len(msg.indices) >= 1 << 16:
        raise InvalidConfigError("too many groups for the wire format")
    out = bytearray(msg.seed.to_bytes(8, "big"))
    out += len(msg.indices).to_bytes(2, "big")
    acc = 0
    nbits = 0
    for k in msg.indices:
        if not 0 <= k < 1 << bits:
            raise MalformedMessageError(f"index {k} does not fit in {bits} bits")
        acc = (acc << bits) | k
        nbits += bits
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return bytes(out)


def unpack_message(data: bytes, bits: int) -> RecMessage:
    """Parse wire bytes; raises with the failing byte offset on truncation."""
    if not 0 <= bits <= 60:
        raise InvalidConfigError("bits must be in [0, 60]")
    if len(data) < 8:
        raise MalformedMessageError("truncated seed field", offset=len(data))
    if len(data) < 10:
        raise MalformedMessageError("truncated group count", offset=len(data))
    seed = int.from_bytes(data[:8], "big")
    n_groups = int.from_bytes(data[8:10], "big")
    body_bytes = (n_groups * bits + 7) // 8
    expected = 10 + body_bytes
    if len(data) < expected:
        raise MalformedMessageError(
            f"truncated index block: need {expected} bytes", offset=len(data)
        )
    if len(data) > expected:
        raise MalformedMessageError("trailing bytes after message", offset=expected)
    indices = []
    acc = 0
    nbits = 0
    pos = 10
    for _ in range(n_groups):
        while nbits < bits:
            acc = (acc << 8) | data[pos]
            pos += 1
            nbits += 8
        nbits -= bits
        indices.append((acc >> nbits) & ((1 << bits) - 1))
        acc &= (1 << nbits) - 1
    if acc != 0:
        raise MalformedMessageError("nonzero padding bits", offset=expected - 1)
    return RecMessage(seed, tuple(indices))
