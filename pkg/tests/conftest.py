"""Shared test helpers: async runner, random envelope generator, stack builder."""

from __future__ import annotations

import asyncio
import random
import string
from typing import Any

import pytest

from simbridge import envelope as ev


def run_async(coro):
    """Drive a coroutine to completion on a fresh event loop."""
    return asyncio.run(coro)


@pytest.fixture
def anyio_run():
    return run_async


_PAYLOAD_DEPTH = 2


def _random_string(rng: random.Random, max_len: int = 12) -> str:
    alphabet = string.ascii_letters + string.digits + "_-./"
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(1, max_len)))


def _random_scalar(rng: random.Random) -> Any:
    choice = rng.randrange(5)
    if choice == 0:
        return rng.randint(-2**52, 2**52)
    if choice == 1:
        # Non-integral doubles only: keeps canonical text identical across
        # JSON encoders (see docs/protocol.md).
        value = rng.uniform(-1e6, 1e6)
        return value if value != int(value) else value + 0.5
    if choice == 2:
        return _random_string(rng)
    if choice == 3:
        return rng.random() < 0.5
    return None


def random_payload_value(rng: random.Random, depth: int = _PAYLOAD_DEPTH) -> Any:
    if depth <= 0 or rng.random() < 0.6:
        return _random_scalar(rng)
    if rng.random() < 0.5:
        return [random_payload_value(rng, depth - 1) for _ in range(rng.randint(0, 4))]
    return {
        _random_string(rng): random_payload_value(rng, depth - 1)
        for _ in range(rng.randint(0, 4))
    }


def random_payload(rng: random.Random) -> dict[str, Any]:
    return {_random_string(rng): random_payload_value(rng) for _ in range(rng.randint(0, 6))}


def random_envelope(rng: random.Random) -> ev.Envelope:
    """Generator-as-oracle for codec roundtrips: any output is a valid envelope."""
    kind = rng.choice(sorted(ev.KINDS))
    seq = rng.randint(1, 10_000) if kind in ev.SEQ_KINDS else None
    request_id = "" if kind == ev.ADVERTISE and rng.random() < 0.5 \
        else ev.new_request_id(_random_string(rng), rng.randbytes(16), rng.randint(0, 2**40))
    trace_len = rng.randint(0, 4)
    trace = tuple((_random_string(rng), rng.randint(0, 2**40)) for _ in range(trace_len))
    payload = random_payload(rng)
    # Keep request payload/kind agreement: the generator never emits a
    # contradictory mode field.
    if kind == ev.BATCH_REQUEST:
        payload.pop("mode", None)
    if kind == ev.STREAM_REQUEST:
        payload.pop("mode", None)
    header = ev.EnvelopeHeader(
        message_id=_random_string(rng, 16),
        request_id=request_id,
        sim_type=_random_string(rng),
        kind=kind,
        source_id=_random_string(rng),
        dest_id=_random_string(rng) if rng.random() < 0.7 else None,
        seq=seq,
        issued_at=rng.randint(0, 2**41),
        trace=trace,
    )
    return ev.Envelope(header=header, payload=payload)
