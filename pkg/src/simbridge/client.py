"""DT-side client: batch request/response, ordered stream consumption through
a reorder buffer, and PT telemetry/command sessions.

A Connection owns one adapter link plus a dispatch task that correlates
incoming envelopes to pending batch futures, open streams (by request id) and
PT channel subscriptions (by dest_id).
"""

from __future__ import annotations

import asyncio
from dataclasses import dataclass, field
from typing import Any, AsyncIterator, Callable, Iterable, Mapping

from . import envelope as ev
from .adapters import Adapter, AdapterClient, ConnectionClosed, TcpClient
from .slog import component_logger, fmt_event

log = component_logger("client")

DEFAULT_TIMEOUT_MS = 60_000
DEFAULT_REORDER_CAPACITY = 1024

STREAM_ACTIVE = "active"
STREAM_ENDED = "ended"
STREAM_TIMEOUT = "timeout"


class ClientError(Exception):
    pass


class ClientTimeout(ClientError):
    def __init__(self, request_id: str):
        super().__init__(f"timed out waiting for request {request_id}")
        self.request_id = request_id


class RemoteError(ClientError):
    """Bridge- or agent-issued error envelope surfaced to the caller."""

    def __init__(self, code: str, detail: str, request_id: str = ""):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail
        self.request_id = request_id


class ClientValidationError(ClientError):
    pass


class ReorderBuffer:
    """Orders a seq-numbered stream for a single consumer.

    offer() returns the envelopes released in order. Sequences below the next
    expected one (or already held) are duplicates and are dropped; when the
    hold-back exceeds capacity the gap is skipped so a lossy best-effort
    stream can never wedge the consumer.
    """

    def __init__(self, capacity: int = DEFAULT_REORDER_CAPACITY):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.next_expected = 1
        self.held: dict[int, ev.Envelope] = {}
        self.duplicates_dropped = 0
        self.gaps_skipped = 0

    def offer(self, env: ev.Envelope) -> list[ev.Envelope]:
        seq = env.header.seq
        if seq is None:
            raise ValueError("reorder buffer requires seq-numbered envelopes")
        if seq < self.next_expected or seq in self.held:
            self.duplicates_dropped += 1
            return []
        if seq == self.next_expected:
            released = [env]
            self.next_expected += 1
            released.extend(self._drain())
            return released
        self.held[seq] = env
        if len(self.held) > self.capacity:
            self.next_expected = min(self.held)
            self.gaps_skipped += 1
            return self._drain()
        return []

    def _drain(self) -> list[ev.Envelope]:
        released = []
        while self.next_expected in self.held:
            released.append(self.held.pop(self.next_expected))
            self.next_expected += 1
        return released


class StreamHandle:
    """Single-consumer async iterator over one response stream."""

    def __init__(self, request_id: str, timeout_ms: int, ordered: bool = True,
                 capacity: int = DEFAULT_REORDER_CAPACITY):
        self.request_id = request_id
        self.timeout_ms = timeout_ms
        self.ordered = ordered
        self.buffer = ReorderBuffer(capacity)
        self.status = STREAM_ACTIVE
        self.dropped_reported = 0
        self.error_detail: str | None = None
        self._out: asyncio.Queue[Mapping[str, Any] | None] = asyncio.Queue()

    def _intake(self, env: ev.Envelope) -> None:
        kind = env.header.kind
        if kind == ev.ERROR:
            self.error_detail = str(env.payload.get("detail", "stream error"))
            return
        released = self.buffer.offer(env) if self.ordered else [env]
        for item in released:
            if item.header.kind == ev.STREAM_END:
                self.dropped_reported = int(item.payload.get("dropped", 0))
                self.status = STREAM_ENDED
                self._out.put_nowait(None)
            else:
                self._out.put_nowait(item.payload)

    def __aiter__(self) -> AsyncIterator[Mapping[str, Any]]:
        return self

    async def __anext__(self) -> Mapping[str, Any]:
        if self.status == STREAM_TIMEOUT:
            raise StopAsyncIteration
        try:
            item = await asyncio.wait_for(self._out.get(), timeout=self.timeout_ms / 1000.0)
        except asyncio.TimeoutError:
            self.status = STREAM_TIMEOUT
            raise StopAsyncIteration from None
        if item is None:
            raise StopAsyncIteration
        return item


@dataclass
class PtSession:
    """Subscription to PT telemetry channels plus the command publisher."""

    connection: "Connection"
    telemetry_channels: tuple[str, ...]
    command_channels: Mapping[str, str]  # entity_id -> channel
    queue: asyncio.Queue = field(default_factory=asyncio.Queue)

    async def recv(self, timeout_s: float | None = None) -> tuple[str, Mapping[str, Any]]:
        """Next (channel, telemetry payload) pair."""
        if timeout_s is None:
            env = await self.queue.get()
        else:
            env = await asyncio.wait_for(self.queue.get(), timeout=timeout_s)
        return env.header.dest_id or "", env.payload

    def send_command(self, entity_id: str, field_name: str, value: Any) -> None:
        channel = self.command_channels.get(entity_id)
        if channel is None:
            raise ClientValidationError(f"entity {entity_id!r} has no mapped command channel")
        env = ev.Envelope(
            header=ev.make_header(
                kind=ev.PT_COMMAND,
                source_id=self.connection.identity,
                request_id=ev.fresh_request_id(self.connection.identity),
                dest_id=channel,
            ),
            payload={"entity_id": entity_id, "field": field_name, "value": value},
        )
        self.connection.send_raw(env)

    async def close(self) -> None:
        for channel in self.telemetry_channels:
            self.connection._pt_routes.pop(channel, None)
            await self.connection.client.unsubscribe(channel)


class Connection:
    """A DT's connection to one north adapter."""

    def __init__(self, client: AdapterClient, identity: str):
        self.client = client
        self.identity = identity
        self._pending: dict[str, asyncio.Future] = {}
        self._streams: dict[str, StreamHandle] = {}
        self._pt_routes: dict[str, PtSession] = {}
        self.stray_envelopes = 0
        self.delivery_hook: Callable[[ev.Envelope], Iterable[ev.Envelope]] | None = None
        self._task = asyncio.get_running_loop().create_task(
            self._dispatch_loop(), name=f"dt-{identity}")

    @classmethod
    def inproc(cls, adapter: Adapter, identity: str) -> "Connection":
        return cls(adapter.connect_inproc(identity), identity)

    @classmethod
    async def tcp(cls, host: str, port: int, identity: str) -> "Connection":
        return cls(await TcpClient.connect(host, port, identity), identity)

    async def close(self) -> None:
        self._task.cancel()
        try:
            await self._task
        except asyncio.CancelledError:
            pass
        await self.client.close()

    # -- dispatch -------------------------------------------------------------

    async def _dispatch_loop(self) -> None:
        while True:
            try:
                env = await self.client.recv()
            except ConnectionClosed:
                for future in self._pending.values():
                    if not future.done():
                        future.set_exception(ConnectionClosed("connection lost"))
                return
            if self.delivery_hook is not None:
                for item in self.delivery_hook(env):
                    self._route(item)
            else:
                self._route(env)

    def _route(self, env: ev.Envelope) -> None:
        rid = env.header.request_id
        kind = env.header.kind
        handle = self._streams.get(rid)
        if handle is not None and kind in (ev.STREAM_DATA, ev.STREAM_END, ev.ERROR):
            handle._intake(env)
            if handle.status == STREAM_ENDED:
                self._streams.pop(rid, None)
            return
        future = self._pending.get(rid)
        if future is not None and kind in (ev.BATCH_RESPONSE, ev.ERROR):
            if not future.done():
                future.set_result(env)
            return
        if kind == ev.PT_TELEMETRY:
            session = self._pt_routes.get(env.header.dest_id or "")
            if session is not None:
                session.queue.put_nowait(env)
                return
        self.stray_envelopes += 1
        log.debug(fmt_event("stray_envelope", kind=kind, request_id=rid))

    def send_raw(self, env: ev.Envelope) -> None:
        self.client.send(env)

    # -- batch ------------------------------------------------------------------

    async def request_batch(self, sim_type: str, req: ev.SimulationRequest,
                            timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ev.SimulationResponse:
        """Send a batch request and await its correlated response."""
        if req.mode != ev.MODE_BATCH:
            raise ClientValidationError("request_batch requires mode=batch")
        rid = ev.fresh_request_id(self.identity)
        payload = req.to_payload()
        payload.setdefault("timeout_ms", timeout_ms)
        env = ev.Envelope(
            header=ev.make_header(
                kind=ev.BATCH_REQUEST,
                source_id=self.identity,
                request_id=rid,
                sim_type=sim_type,
            ),
            payload=payload,
        )
        response = await self._roundtrip(rid, env, timeout_ms)
        if response.header.kind == ev.ERROR:
            raise RemoteError(str(response.payload.get("error", "error")),
                              str(response.payload.get("detail", "")), rid)
        return ev.SimulationResponse.from_payload(response.payload)

    async def _roundtrip(self, rid: str, env: ev.Envelope, timeout_ms: int) -> ev.Envelope:
        future: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending[rid] = future
        try:
            self.client.send(env)
            return await asyncio.wait_for(future, timeout=timeout_ms / 1000.0)
        except asyncio.TimeoutError:
            raise ClientTimeout(rid) from None
        finally:
            self._pending.pop(rid, None)

    async def fetch_metrics(self, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> Mapping[str, Any]:
        """Query the bridge's CoreMetrics over the sb/metrics control channel."""
        rid = ev.fresh_request_id(self.identity)
        env = ev.Envelope(
            header=ev.make_header(
                kind=ev.BATCH_REQUEST,
                source_id=self.identity,
                request_id=rid,
                dest_id="sb/metrics",
            ),
            payload={"query": "metrics"},
        )
        response = await self._roundtrip(rid, env, timeout_ms)
        return response.payload.get("metrics", {})

    # -- streaming -----------------------------------------------------------------

    def open_stream(self, sim_type: str, req: ev.SimulationRequest,
                    timeout_ms: int = DEFAULT_TIMEOUT_MS, ordered: bool = True,
                    capacity: int = DEFAULT_REORDER_CAPACITY) -> StreamHandle:
        """Start a streaming request; iterate the returned handle for ordered payloads.

        timeout_ms bounds inter-message inactivity; hitting it ends the stream
        with status "timeout".
        """
        if req.mode != ev.MODE_STREAMING:
            raise ClientValidationError("open_stream requires mode=streaming")
        rid = ev.fresh_request_id(self.identity)
        payload = req.to_payload()
        payload.setdefault("timeout_ms", timeout_ms)
        handle = StreamHandle(rid, timeout_ms, ordered=ordered, capacity=capacity)
        self._streams[rid] = handle
        env = ev.Envelope(
            header=ev.make_header(
                kind=ev.STREAM_REQUEST,
                source_id=self.identity,
                request_id=rid,
                sim_type=sim_type,
            ),
            payload=payload,
        )
        self.client.send(env)
        return handle

    # -- physical twin ----------------------------------------------------------------

    async def pt_session(self, telemetry_channels: Iterable[str],
                         command_channels: Mapping[str, str]) -> PtSession:
        """Subscribe to telemetry channels; commands publish to mapped channels."""
        channels = tuple(telemetry_channels)
        session = PtSession(connection=self, telemetry_channels=channels,
                            command_channels=dict(command_channels))
        for channel in channels:
            await self.client.subscribe(channel)
            self._pt_routes[channel] = session
        return session
