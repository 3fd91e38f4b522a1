"""Simulation Protocol envelope: header/payload types, canonical JSON codec,
request-id generation and the length-prefixed frame format.

Wire document (canonical form, lexicographic keys, compact separators):

    {"header":{"dest_id":...,"issued_at":...,"kind":...,"message_id":...,
               "request_id":...,"seq":...,"sim_type":...,"source_id":...,
               "trace":[[hop,ts],...]},
     "payload":{...}}

Framed transport: 4-byte big-endian unsigned length prefix followed by the
UTF-8 document. See docs/protocol.md for the full contract.
"""

from __future__ import annotations

import hashlib
import json
import math
import secrets
import struct
import time
import uuid
from dataclasses import dataclass, replace
from typing import Any, Iterator, Mapping

BATCH_REQUEST = "batch_request"
BATCH_RESPONSE = "batch_response"
STREAM_REQUEST = "stream_request"
STREAM_DATA = "stream_data"
STREAM_END = "stream_end"
PT_CONFIG = "pt_config"
PT_TELEMETRY = "pt_telemetry"
PT_COMMAND = "pt_command"
ADVERTISE = "advertise"
ERROR = "error"

KINDS = frozenset({
    BATCH_REQUEST, BATCH_RESPONSE, STREAM_REQUEST, STREAM_DATA, STREAM_END,
    PT_CONFIG, PT_TELEMETRY, PT_COMMAND, ADVERTISE, ERROR,
})

# Kinds that must carry a sequence number, and those that correlate back to a
# previously seen request on reqresp transports.
SEQ_KINDS = frozenset({STREAM_DATA, STREAM_END})
REQUEST_KINDS = frozenset({BATCH_REQUEST, STREAM_REQUEST, PT_CONFIG, PT_COMMAND})
RESPONSE_KINDS = frozenset({BATCH_RESPONSE, STREAM_DATA, STREAM_END, PT_TELEMETRY, ERROR})

MODE_BATCH = "batch"
MODE_STREAMING = "streaming"

FRAME_PREFIX_BYTES = 4
MAX_FRAME_BYTES = 16 * 1024 * 1024

_HEADER_FIELDS = frozenset({
    "dest_id", "issued_at", "kind", "message_id", "request_id", "seq",
    "sim_type", "source_id", "trace",
})


class ProtocolError(Exception):
    """Base class for Simulation Protocol violations."""


class EncodeError(ProtocolError):
    """Envelope rejected at encode time; the message names the violated rule."""


class DecodeError(ProtocolError):
    """Malformed wire document.

    ``offset`` is the byte offset of the problem when it is known (JSON or
    UTF-8 level failures), otherwise None.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte {offset})")
        self.offset = offset


class UnsupportedKindError(DecodeError):
    """Document carries a kind outside the protocol enum."""

    def __init__(self, kind: str):
        super().__init__(f"unsupported kind: {kind!r}")
        self.kind = kind


class FrameError(ProtocolError):
    """Frame-level failure (oversize or truncated length prefix)."""


def now_ms() -> int:
    """Wall-clock milliseconds since the Unix epoch, UTC."""
    return int(time.time() * 1000)


@dataclass(frozen=True)
class EnvelopeHeader:
    message_id: str
    request_id: str
    sim_type: str
    kind: str
    source_id: str
    dest_id: str | None = None
    seq: int | None = None
    issued_at: int = 0
    trace: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trace", tuple((str(h), int(t)) for h, t in self.trace))


@dataclass(frozen=True)
class Envelope:
    header: EnvelopeHeader
    payload: Mapping[str, Any]


def make_header(
    kind: str,
    source_id: str,
    request_id: str,
    sim_type: str = "",
    dest_id: str | None = None,
    seq: int | None = None,
    message_id: str | None = None,
    issued_at: int | None = None,
    trace: tuple[tuple[str, int], ...] | None = None,
) -> EnvelopeHeader:
    """Build a header with a fresh message id; trace starts at the sender."""
    at = now_ms() if issued_at is None else issued_at
    return EnvelopeHeader(
        message_id=uuid.uuid4().hex if message_id is None else message_id,
        request_id=request_id,
        sim_type=sim_type,
        kind=kind,
        source_id=source_id,
        dest_id=dest_id,
        seq=seq,
        issued_at=at,
        trace=((source_id, at),) if trace is None else trace,
    )


def with_hop(env: Envelope, hop_id: str, at_ms: int | None = None) -> Envelope:
    """Return a copy of ``env`` with one trace hop appended."""
    at = now_ms() if at_ms is None else at_ms
    header = replace(env.header, trace=env.header.trace + ((hop_id, at),))
    return Envelope(header=header, payload=env.payload)


def _invariant_problems(header: EnvelopeHeader, payload: Any) -> list[str]:
    problems = []
    if header.kind not in KINDS:
        problems.append(f"unknown kind {header.kind!r}")
        return problems
    if header.kind in SEQ_KINDS and header.seq is None:
        problems.append(f"seq required for kind {header.kind}")
    if header.kind not in SEQ_KINDS and header.seq is not None:
        problems.append(f"seq forbidden for kind {header.kind}")
    if header.seq is not None and header.seq < 0:
        problems.append("seq must be non-negative")
    if header.kind != ADVERTISE and not header.request_id:
        problems.append(f"request_id required for kind {header.kind}")
    if not header.message_id:
        problems.append("message_id must be non-empty")
    if not header.source_id:
        problems.append("source_id must be non-empty")
    if not isinstance(payload, Mapping):
        problems.append("payload must be an object")
        return problems
    # Payload/kind agreement is checked where it is cheap and unambiguous:
    # a request payload carrying the wrong mode can never be valid.
    mode = payload.get("mode")
    if header.kind == BATCH_REQUEST and mode not in (None, MODE_BATCH):
        problems.append("batch_request payload has non-batch mode")
    if header.kind == STREAM_REQUEST and mode not in (None, MODE_STREAMING):
        problems.append("stream_request payload has non-streaming mode")
    return problems


def _scan_payload_value(value: Any, path: str) -> None:
    if value is None or isinstance(value, (bool, str)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise EncodeError(f"non-finite number at payload{path}")
        return
    if isinstance(value, (list, tuple)):
        if isinstance(value, tuple):
            raise EncodeError(f"tuple not encodable at payload{path} (use a list)")
        for i, item in enumerate(value):
            _scan_payload_value(item, f"{path}[{i}]")
        return
    if isinstance(value, Mapping):
        for key, item in value.items():
            if not isinstance(key, str):
                raise EncodeError(f"non-string key {key!r} at payload{path}")
            _scan_payload_value(item, f"{path}.{key}")
        return
    raise EncodeError(f"unsupported payload value {type(value).__name__} at payload{path}")


def canonical_json(doc: Any) -> bytes:
    """Canonical UTF-8 JSON: lexicographic keys, compact separators, raw unicode."""
    return json.dumps(
        doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def header_to_document(header: EnvelopeHeader) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "dest_id": header.dest_id,
        "issued_at": header.issued_at,
        "kind": header.kind,
        "message_id": header.message_id,
        "request_id": header.request_id,
        "sim_type": header.sim_type,
        "source_id": header.source_id,
        "trace": [[hop, ts] for hop, ts in header.trace],
    }
    if header.seq is not None:
        doc["seq"] = header.seq
    return doc


def encode(env: Envelope) -> bytes:
    """Serialize to the canonical wire document.

    Raises EncodeError naming the violated invariant; output is byte-stable
    for equal envelopes.
    """
    problems = _invariant_problems(env.header, env.payload)
    if problems:
        raise EncodeError("; ".join(problems))
    _scan_payload_value(env.payload, "")
    doc = {"header": header_to_document(env.header), "payload": env.payload}
    try:
        return canonical_json(doc)
    except (TypeError, ValueError) as exc:  # pragma: no cover - guarded by scan
        raise EncodeError(str(exc)) from exc


def _require_str(doc: Mapping, key: str, nullable: bool = False) -> Any:
    value = doc[key]
    if value is None and nullable:
        return None
    if not isinstance(value, str):
        raise DecodeError(f"header.{key} must be a string")
    return value


def _require_int(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DecodeError(f"{what} must be an integer")
    return value


def decode_document(doc: Any) -> Envelope:
    """Validate and build an Envelope from an already-parsed JSON document."""
    if not isinstance(doc, Mapping):
        raise DecodeError("document must be an object")
    extra = set(doc) - {"header", "payload"}
    if extra:
        raise DecodeError(f"unexpected top-level fields: {sorted(extra)}")
    if "header" not in doc or "payload" not in doc:
        raise DecodeError("document requires header and payload")
    raw = doc["header"]
    if not isinstance(raw, Mapping):
        raise DecodeError("header must be an object")
    unknown = set(raw) - _HEADER_FIELDS
    if unknown:
        raise DecodeError(f"unknown header fields: {sorted(unknown)}")
    missing = (_HEADER_FIELDS - {"seq"}) - set(raw)
    if missing:
        raise DecodeError(f"missing header fields: {sorted(missing)}")

    kind = _require_str(raw, "kind")
    if kind not in KINDS:
        raise UnsupportedKindError(kind)

    trace_raw = raw["trace"]
    if not isinstance(trace_raw, list):
        raise DecodeError("header.trace must be a list")
    trace = []
    for i, pair in enumerate(trace_raw):
        if not isinstance(pair, list) or len(pair) != 2 or not isinstance(pair[0], str):
            raise DecodeError(f"header.trace[{i}] must be a [hop, timestamp] pair")
        trace.append((pair[0], _require_int(pair[1], f"header.trace[{i}][1]")))

    header = EnvelopeHeader(
        message_id=_require_str(raw, "message_id"),
        request_id=_require_str(raw, "request_id"),
        sim_type=_require_str(raw, "sim_type"),
        kind=kind,
        source_id=_require_str(raw, "source_id"),
        dest_id=_require_str(raw, "dest_id", nullable=True),
        seq=_require_int(raw["seq"], "header.seq") if "seq" in raw else None,
        issued_at=_require_int(raw["issued_at"], "header.issued_at"),
        trace=tuple(trace),
    )
    payload = doc["payload"]
    problems = _invariant_problems(header, payload)
    if problems:
        raise DecodeError("; ".join(problems))
    return Envelope(header=header, payload=payload)


def decode(data: bytes) -> Envelope:
    """Inverse of encode on its image; rejects malformed or unknown documents."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid UTF-8", offset=exc.start) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DecodeError(f"invalid JSON: {exc.msg}", offset=offset) from exc
    return decode_document(doc)


def new_request_id(source_id: str, nonce: bytes, issued_at: int) -> str:
    """128-bit hex request id hashed over (source_id, nonce, issued_at).

    Deterministic for identical inputs; the nonce must be 16 bytes from a
    cryptographically strong generator.
    """
    if len(nonce) != 16:
        raise ValueError("nonce must be 128 bits (16 bytes)")
    digest = hashlib.blake2b(digest_size=16)
    digest.update(source_id.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(nonce)
    digest.update(struct.pack(">q", issued_at))
    return digest.hexdigest()


def fresh_request_id(source_id: str) -> str:
    return new_request_id(source_id, secrets.token_bytes(16), now_ms())


# --- request/response payload schemas ---------------------------------------

_SCALAR = (str, int, float, bool)


@dataclass
class SimulationRequest:
    """Batch or streaming simulation request payload."""

    model: str
    outputs: list[str]
    mode: str = MODE_BATCH
    model_params: dict[str, Any] = None  # type: ignore[assignment]
    inputs: dict[str, float] = None  # type: ignore[assignment]
    stream_period_ms: int | None = None
    timeout_ms: int | None = None

    def __post_init__(self):
        if self.model_params is None:
            self.model_params = {}
        if self.inputs is None:
            self.inputs = {}
        self.validate()

    def validate(self) -> None:
        if not self.model:
            raise ValueError("model must be non-empty")
        if not self.outputs:
            raise ValueError("outputs must be non-empty")
        if self.mode not in (MODE_BATCH, MODE_STREAMING):
            raise ValueError(f"invalid mode {self.mode!r}")
        if (self.stream_period_ms is not None) != (self.mode == MODE_STREAMING):
            raise ValueError("stream_period_ms present iff mode is streaming")
        if self.stream_period_ms is not None and self.stream_period_ms <= 0:
            raise ValueError("stream_period_ms must be positive")
        if self.timeout_ms is not None and self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        for key, value in self.model_params.items():
            if not isinstance(value, _SCALAR):
                raise ValueError(f"model_params[{key}] must be scalar or string")
        for key, value in self.inputs.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"inputs[{key}] must be numeric")

    def to_payload(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "model": self.model,
            "model_params": dict(self.model_params),
            "inputs": dict(self.inputs),
            "outputs": list(self.outputs),
            "mode": self.mode,
        }
        if self.stream_period_ms is not None:
            doc["stream_period_ms"] = self.stream_period_ms
        if self.timeout_ms is not None:
            doc["timeout_ms"] = self.timeout_ms
        return doc

    @classmethod
    def from_payload(cls, doc: Mapping[str, Any]) -> "SimulationRequest":
        known = {"model", "model_params", "inputs", "outputs", "mode",
                 "stream_period_ms", "timeout_ms"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown request fields: {sorted(unknown)}")
        try:
            return cls(
                model=doc["model"],
                outputs=list(doc["outputs"]),
                mode=doc.get("mode", MODE_BATCH),
                model_params=dict(doc.get("model_params", {})),
                inputs=dict(doc.get("inputs", {})),
                stream_period_ms=doc.get("stream_period_ms"),
                timeout_ms=doc.get("timeout_ms"),
            )
        except KeyError as exc:
            raise ValueError(f"missing request field: {exc.args[0]}") from exc


STATUS_OK = "ok"
STATUS_ERROR = "error"


@dataclass
class SimulationResponse:
    """One simulation result: the single batch answer or one stream sample."""

    request_id: str
    status: str
    values: dict[str, float]
    final: bool
    error_detail: str | None = None

    def __post_init__(self):
        if self.status not in (STATUS_OK, STATUS_ERROR):
            raise ValueError(f"invalid status {self.status!r}")
        if (self.error_detail is not None) != (self.status == STATUS_ERROR):
            raise ValueError("error_detail present iff status is error")

    def to_payload(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "request_id": self.request_id,
            "status": self.status,
            "values": dict(self.values),
            "final": self.final,
        }
        if self.error_detail is not None:
            doc["error_detail"] = self.error_detail
        return doc

    @classmethod
    def from_payload(cls, doc: Mapping[str, Any]) -> "SimulationResponse":
        known = {"request_id", "status", "values", "final", "error_detail"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown response fields: {sorted(unknown)}")
        try:
            return cls(
                request_id=doc["request_id"],
                status=doc["status"],
                values=dict(doc.get("values", {})),
                final=bool(doc["final"]),
                error_detail=doc.get("error_detail"),
            )
        except KeyError as exc:
            raise ValueError(f"missing response field: {exc.args[0]}") from exc


# --- framing -----------------------------------------------------------------


def frame(document: bytes, limit: int = MAX_FRAME_BYTES) -> bytes:
    """Prefix a wire document with its 4-byte big-endian length."""
    if len(document) > limit:
        raise FrameError(f"frame of {len(document)} bytes exceeds {limit} byte limit")
    return struct.pack(">I", len(document)) + document


class FrameDecoder:
    """Incremental decoder for the length-prefixed transport.

    Feed arbitrary byte chunks; complete documents come back in arrival order.
    """

    def __init__(self, limit: int = MAX_FRAME_BYTES):
        self._limit = limit
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < FRAME_PREFIX_BYTES:
                break
            (length,) = struct.unpack(">I", self._buf[:FRAME_PREFIX_BYTES])
            if length > self._limit:
                raise FrameError(f"declared frame length {length} exceeds {self._limit} byte limit")
            if len(self._buf) < FRAME_PREFIX_BYTES + length:
                break
            frames.append(bytes(self._buf[FRAME_PREFIX_BYTES:FRAME_PREFIX_BYTES + length]))
            del self._buf[:FRAME_PREFIX_BYTES + length]
        return frames

    def pending(self) -> int:
        return len(self._buf)


def iter_frames(data: bytes, limit: int = MAX_FRAME_BYTES) -> Iterator[bytes]:
    decoder = FrameDecoder(limit)
    yield from decoder.feed(data)
    if decoder.pending():
        raise FrameError("trailing partial frame")
