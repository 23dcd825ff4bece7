"""Analytical execution-time model for chunked-prefill serving instances.

Iteration time is affine in the number of piggybacked prefill tokens and in
the decode batch size. All times are milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable


@dataclass(frozen=True)
class CalibrationProfile:
    base_iter_ms: float = 44.0
    per_prefill_token_ms: float = 0.2
    per_decode_req_ms: float = 0.1
    ref_decode_batch: int = 16
    kv_bytes_per_token: int = 163_840
    link_bandwidth_bytes_per_ms: float = 78_643_200.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"CalibrationProfile.{name} must be > 0, got {value!r}")
        if self.per_prefill_token_ms > self.base_iter_ms:
            raise ValueError(
                "CalibrationProfile.per_prefill_token_ms must not exceed base_iter_ms"
            )

    @property
    def decode_only_token_ms(self) -> float:
        """Per-token time of a reference decode batch with no prefill."""
        return self.base_iter_ms


DEFAULT_PROFILE = CalibrationProfile()


def iteration_time(profile: CalibrationProfile, prefill_tokens: int, decode_reqs: int) -> float:
    if prefill_tokens < 0 or decode_reqs < 0:
        raise ValueError("token and request counts must be non-negative")
    if prefill_tokens == 0 and decode_reqs == 0:
        raise ValueError("empty batch: nothing scheduled")
    raw = (
        profile.base_iter_ms
        + profile.per_prefill_token_ms * prefill_tokens
        + profile.per_decode_req_ms * (decode_reqs - profile.ref_decode_batch)
    )
    # Small batches under profiles with a large per-request term: never
    # cheaper than the marginal cost of the work itself.
    floor = profile.per_decode_req_ms * decode_reqs + profile.per_prefill_token_ms * prefill_tokens
    return max(raw, floor)


def estimate_prefill_execution(
    profile: CalibrationProfile, prompt_len: int, chunk_size: int, assumed_decode_reqs: int
) -> float:
    """Time to prefill one prompt alone, chunk by chunk, next to a fixed decode batch.

    Returns ``inf`` for ``chunk_size == 0`` (an instance that admits no prefill).
    """
    if prompt_len < 1:
        raise ValueError("prompt_len must be >= 1")
    if chunk_size < 0:
        raise ValueError("chunk_size must be >= 0")
    if chunk_size == 0:
        return math.inf
    full, rest = divmod(prompt_len, chunk_size)
    total = full * iteration_time(profile, chunk_size, assumed_decode_reqs) if full else 0.0
    if rest:
        total += iteration_time(profile, rest, assumed_decode_reqs)
    return total


def estimate_queue_time(
    profile: CalibrationProfile,
    queued_prompts: Iterable[int],
    chunk_size: int,
    assumed_decode_reqs: int,
) -> float:
    return sum(
        (estimate_prefill_execution(profile, n, chunk_size, assumed_decode_reqs) for n in queued_prompts),
        0.0,
    )


def transfer_time(profile: CalibrationProfile, context_tokens: int) -> float:
    if context_tokens < 0:
        raise ValueError("context_tokens must be >= 0")
    return context_tokens * profile.kv_bytes_per_token / profile.link_bandwidth_bytes_per_ms


def prefill_capacity(
    profile: CalibrationProfile,
    chunk_sizes: Iterable[int],
    prompt_len: int = 3000,
    decode_batch: int | Iterable[int] = 16,
) -> float:
    """Modeled prefill tokens per second summed over instances.

    ``decode_batch`` is either one batch size for every instance or one per
    instance (pure prefill instances carry 0).
    """
    chunks = list(chunk_sizes)
    if isinstance(decode_batch, int):
        batches = [decode_batch] * len(chunks)
    else:
        batches = list(decode_batch)
        if len(batches) != len(chunks):
            raise ValueError("decode_batch must match chunk_sizes in length")
    total = 0.0
    for chunk, batch in zip(chunks, batches):
        if chunk <= 0:
            continue
        total += prompt_len / estimate_prefill_execution(profile, prompt_len, chunk, batch) * 1000.0
    return total
