"""Protocol adapters: pluggable north/south transport endpoints with three
flavors (pubsub, queue, reqresp) and embedded in-process brokers.

Adapters never call bridge logic; every piece of transport activity becomes an
AdapterEvent pushed into the event sink. Delivery is best-effort everywhere:
sending into a channel nobody consumes succeeds with zero deliveries.

Addressing conventions (docs/protocol.md):
  * peers are auto-subscribed to the channel equal to their identity, so
    directed messages are sends to channel == identity on any flavor;
  * the envelope's dest_id carries the channel for channel-addressed traffic;
  * TCP peers may send control frames ``{"ctl": ...}`` (hello, subscribe,
    unsubscribe) which are transport-level, not protocol envelopes.
"""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from . import envelope as ev
from .config import AdapterSpec, FLAVOR_PUBSUB, FLAVOR_QUEUE, FLAVOR_REQRESP, parse_bind
from .slog import component_logger, fmt_event

log = component_logger("adapter")

NORTH = "north"
SOUTH = "south"

EV_MESSAGE_RECEIVED = "message_received"
EV_MESSAGE_SENT = "message_sent"
EV_PEER_CONNECTED = "peer_connected"
EV_PEER_DISCONNECTED = "peer_disconnected"
EV_TRANSPORT_ERROR = "transport_error"

DELIVERY_BEST_EFFORT = "best-effort"

CONTROL_PREFIX = "sb/"


class AdapterError(Exception):
    pass


class BindError(AdapterError):
    pass


class AdapterStopped(AdapterError):
    pass


class ConnectionClosed(AdapterError):
    pass


@dataclass
class AdapterEvent:
    adapter_name: str
    direction: str
    kind: str
    envelope: ev.Envelope | None
    peer_id: str
    at: int
    undeliverable: bool = False
    detail: str = ""

    def __post_init__(self):
        has_env = self.envelope is not None
        wants_env = self.kind in (EV_MESSAGE_RECEIVED, EV_MESSAGE_SENT)
        if has_env != wants_env:
            raise ValueError(f"envelope present iff kind is message_received/sent, got {self.kind}")


@dataclass
class AdapterHandle:
    name: str
    flavor: str
    delivery: str = DELIVERY_BEST_EFFORT
    adapter: "Adapter" = None  # type: ignore[assignment]


@dataclass
class SendReceipt:
    delivered: int
    undeliverable: bool = False


EventSink = Callable[[AdapterEvent], None]


class AdapterClient:
    """A peer's connection to an adapter (used by DT clients and agents)."""

    def send(self, env: ev.Envelope) -> bool:
        raise NotImplementedError

    async def subscribe(self, channel: str) -> None:
        raise NotImplementedError

    async def unsubscribe(self, channel: str) -> None:
        raise NotImplementedError

    async def recv(self) -> ev.Envelope:
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        raise NotImplementedError


class _PeerSession:
    """Adapter-side state for one connected peer."""

    def __init__(self, peer_id: str, deliver: Callable[[ev.Envelope, bytes | None], bool],
                 close: Callable[[], None]):
        self.peer_id = peer_id
        self.identity: str | None = None
        self.subscriptions: set[str] = set()
        self._deliver = deliver
        self._close = close

    def deliver(self, env: ev.Envelope, framed: bytes | None = None) -> bool:
        return self._deliver(env, framed)

    def close(self) -> None:
        self._close()


class Adapter:
    """One protocol adapter with its embedded broker.

    All broker state is mutated from the owning event loop; peers interact
    through thread-free asyncio primitives only.
    """

    def __init__(self, spec: AdapterSpec, direction: str, sink: EventSink):
        self.spec = spec
        self.name = spec.name
        self.flavor = spec.flavor
        self.direction = direction
        self._sink = sink
        self._started = False
        self._server: asyncio.AbstractServer | None = None
        self._peers: dict[str, _PeerSession] = {}
        self._identities: dict[str, str] = {}  # identity -> peer_id
        self._subscribers: dict[str, list[str]] = {}  # channel -> peer ids (pubsub)
        self._consumers: dict[str, list[str]] = {}  # channel -> peer ids (queue)
        self._rr: dict[str, int] = {}
        self._waiters: dict[str, str] = {}  # request_id -> peer_id (reqresp)
        self._inproc_seq = 0
        self.events_emitted = 0
        self.bound_port: int | None = None

    # -- lifecycle ------------------------------------------------------------

    async def start(self) -> AdapterHandle:
        if self._started:
            raise AdapterError(f"adapter {self.name} already started")
        bind = parse_bind(self.spec.bind)
        if bind is not None:
            host, port = bind
            try:
                self._server = await asyncio.start_server(self._serve_tcp_peer, host, port)
            except OSError as exc:
                raise BindError(f"cannot bind {self.spec.bind}: {exc}") from exc
            self.bound_port = self._server.sockets[0].getsockname()[1]
        self._started = True
        return AdapterHandle(name=self.name, flavor=self.flavor, adapter=self)

    async def stop(self) -> None:
        """Disconnect every peer and stop accepting; idempotent."""
        if not self._started:
            return
        self._started = False
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for peer_id in list(self._peers):
            self._drop_peer(peer_id, reason="adapter stopped")

    @property
    def started(self) -> bool:
        return self._started

    # -- event plumbing ---------------------------------------------------------

    def _emit(self, kind: str, peer_id: str, env: ev.Envelope | None = None,
              undeliverable: bool = False, detail: str = "") -> None:
        self.events_emitted += 1
        self._sink(AdapterEvent(
            adapter_name=self.name,
            direction=self.direction,
            kind=kind,
            envelope=env,
            peer_id=peer_id,
            at=ev.now_ms(),
            undeliverable=undeliverable,
            detail=detail,
        ))

    # -- peer management --------------------------------------------------------

    def _register_peer(self, session: _PeerSession) -> None:
        self._peers[session.peer_id] = session
        self._emit(EV_PEER_CONNECTED, session.peer_id)

    def _drop_peer(self, peer_id: str, reason: str = "") -> None:
        session = self._peers.pop(peer_id, None)
        if session is None:
            return
        for channel in list(session.subscriptions):
            self._unsubscribe(session, channel)
        if session.identity and self._identities.get(session.identity) == peer_id:
            del self._identities[session.identity]
        self._waiters = {rid: p for rid, p in self._waiters.items() if p != peer_id}
        session.close()
        self._emit(EV_PEER_DISCONNECTED, peer_id, detail=reason)

    def _bind_identity(self, session: _PeerSession, identity: str) -> None:
        if not identity or session.identity == identity:
            return
        session.identity = identity
        self._identities[identity] = session.peer_id
        # Identity channel: directed messages work on every flavor without an
        # explicit subscription step.
        self._subscribe(session, identity)

    def _subscribe(self, session: _PeerSession, channel: str) -> None:
        if channel in session.subscriptions:
            return
        session.subscriptions.add(channel)
        table = self._subscribers if self.flavor == FLAVOR_PUBSUB else self._consumers
        table.setdefault(channel, []).append(session.peer_id)

    def _unsubscribe(self, session: _PeerSession, channel: str) -> None:
        session.subscriptions.discard(channel)
        table = self._subscribers if self.flavor == FLAVOR_PUBSUB else self._consumers
        peers = table.get(channel)
        if peers and session.peer_id in peers:
            peers.remove(session.peer_id)
            if not peers:
                table.pop(channel, None)

    # -- inbound ---------------------------------------------------------------

    def _on_peer_envelope(self, session: _PeerSession, env: ev.Envelope) -> None:
        if session.identity is None and env.header.source_id:
            self._bind_identity(session, env.header.source_id)
        if self.flavor == FLAVOR_REQRESP and env.header.kind in ev.REQUEST_KINDS:
            self._waiters[env.header.request_id] = session.peer_id
        self._emit(EV_MESSAGE_RECEIVED, session.peer_id, env=env)

    def _on_peer_control(self, session: _PeerSession, doc: Mapping[str, Any]) -> None:
        op = doc.get("ctl")
        if op == "hello":
            self._bind_identity(session, str(doc.get("peer_id", "")))
        elif op == "subscribe":
            self._subscribe(session, str(doc.get("channel", "")))
        elif op == "unsubscribe":
            self._unsubscribe(session, str(doc.get("channel", "")))
        else:
            self._emit(EV_TRANSPORT_ERROR, session.peer_id, detail=f"unknown control op {op!r}")

    # -- outbound ---------------------------------------------------------------

    def send(self, channel: str, env: ev.Envelope) -> SendReceipt:
        """Deliver per flavor semantics; never raises for missing consumers.

        Encoding happens once here, which both enforces the frame size limit
        and validates the envelope at the adapter boundary.
        """
        if not self._started:
            raise AdapterStopped(f"adapter {self.name} is stopped")
        framed = ev.frame(ev.encode(env))
        if self.flavor == FLAVOR_PUBSUB:
            receipt = self._send_pubsub(channel, env, framed)
        elif self.flavor == FLAVOR_QUEUE:
            receipt = self._send_queue(channel, env, framed)
        else:
            receipt = self._send_reqresp(channel, env, framed)
        self._emit(EV_MESSAGE_SENT, peer_id=channel, env=env,
                   undeliverable=receipt.undeliverable)
        return receipt

    def _send_pubsub(self, channel: str, env: ev.Envelope, framed: bytes) -> SendReceipt:
        delivered = 0
        for peer_id in list(self._subscribers.get(channel, ())):
            session = self._peers.get(peer_id)
            if session is not None and session.deliver(env, framed):
                delivered += 1
        return SendReceipt(delivered=delivered)

    def _send_queue(self, channel: str, env: ev.Envelope, framed: bytes) -> SendReceipt:
        peers = self._consumers.get(channel)
        if not peers:
            return SendReceipt(delivered=0, undeliverable=True)
        start = self._rr.get(channel, 0)
        for i in range(len(peers)):
            peer_id = peers[(start + i) % len(peers)]
            session = self._peers.get(peer_id)
            if session is not None and session.deliver(env, framed):
                self._rr[channel] = (start + i + 1) % len(peers)
                return SendReceipt(delivered=1)
        return SendReceipt(delivered=0, undeliverable=True)

    def _send_reqresp(self, channel: str, env: ev.Envelope, framed: bytes) -> SendReceipt:
        kind = env.header.kind
        if kind in ev.RESPONSE_KINDS:
            peer_id = self._waiters.get(env.header.request_id)
            if peer_id is None:
                return SendReceipt(delivered=0, undeliverable=True)
            # Errors may precede a stream_end, so they deliver without
            # clearing the waiter; stale waiters die with the connection.
            if kind in (ev.BATCH_RESPONSE, ev.STREAM_END):
                self._waiters.pop(env.header.request_id, None)
            session = self._peers.get(peer_id)
            ok = session is not None and session.deliver(env, framed)
            return SendReceipt(delivered=int(ok), undeliverable=not ok)
        # Requests travel directed, addressed by identity.
        peer_id = self._identities.get(channel)
        session = self._peers.get(peer_id) if peer_id else None
        ok = session is not None and session.deliver(env, framed)
        return SendReceipt(delivered=int(ok), undeliverable=not ok)

    # -- inproc transport --------------------------------------------------------

    def connect_inproc(self, identity: str | None = None) -> "InprocClient":
        if not self._started:
            raise AdapterStopped(f"adapter {self.name} is stopped")
        self._inproc_seq += 1
        peer_id = f"inproc:{self.name}:{self._inproc_seq}"
        client = InprocClient(self, peer_id)
        session = _PeerSession(peer_id, client._deliver, client._mark_closed)
        client._session = session
        self._register_peer(session)
        if identity:
            self._bind_identity(session, identity)
        return client

    # -- tcp transport -------------------------------------------------------------

    async def _serve_tcp_peer(self, reader: asyncio.StreamReader,
                              writer: asyncio.StreamWriter) -> None:
        addr = writer.get_extra_info("peername") or ("?", 0)
        peer_id = f"tcp:{addr[0]}:{addr[1]}"

        def deliver(env_out: ev.Envelope, framed: bytes | None) -> bool:
            if writer.is_closing():
                return False
            try:
                writer.write(framed if framed is not None else ev.frame(ev.encode(env_out)))
                return True
            except (ev.ProtocolError, OSError) as exc:
                log.warning(fmt_event("deliver_failed", adapter=self.name,
                                      peer=peer_id, error=exc))
                return False

        def close() -> None:
            if not writer.is_closing():
                writer.close()

        session = _PeerSession(peer_id, deliver, close)
        self._register_peer(session)
        decoder = ev.FrameDecoder()
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                try:
                    frames = decoder.feed(data)
                except ev.FrameError as exc:
                    self._emit(EV_TRANSPORT_ERROR, peer_id, detail=str(exc))
                    break
                for raw in frames:
                    if not self._handle_tcp_frame(session, raw):
                        return
        except (ConnectionResetError, asyncio.IncompleteReadError, OSError):
            pass
        finally:
            self._drop_peer(peer_id, reason="connection closed")

    def _handle_tcp_frame(self, session: _PeerSession, raw: bytes) -> bool:
        """Returns False when the connection must be torn down."""
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            self._emit(EV_TRANSPORT_ERROR, session.peer_id, detail=f"bad frame: {exc}")
            self._drop_peer(session.peer_id, reason="bad frame")
            return False
        if isinstance(doc, Mapping) and "ctl" in doc:
            self._on_peer_control(session, doc)
            return True
        try:
            env = ev.decode_document(doc)
        except ev.DecodeError as exc:
            self._emit(EV_TRANSPORT_ERROR, session.peer_id, detail=str(exc))
            self._drop_peer(session.peer_id, reason="bad envelope")
            return False
        self._on_peer_envelope(session, env)
        return True


class InprocClient(AdapterClient):
    """In-process peer connection carrying decoded envelopes directly."""

    def __init__(self, adapter: Adapter, peer_id: str):
        self._adapter = adapter
        self.peer_id = peer_id
        self._queue: asyncio.Queue[ev.Envelope | None] = asyncio.Queue()
        self._closed = False
        self._session: _PeerSession | None = None

    def _deliver(self, env: ev.Envelope, framed: bytes | None = None) -> bool:
        if self._closed:
            return False
        self._queue.put_nowait(env)
        return True

    def _mark_closed(self) -> None:
        if not self._closed:
            self._closed = True
            self._queue.put_nowait(None)

    def send(self, env: ev.Envelope) -> bool:
        if self._closed:
            raise ConnectionClosed(f"{self.peer_id} is closed")
        if self._session is None:
            raise ConnectionClosed(f"{self.peer_id} has no session")
        self._adapter._on_peer_envelope(self._session, env)
        return True

    async def subscribe(self, channel: str) -> None:
        if self._closed or self._session is None:
            raise ConnectionClosed(f"{self.peer_id} is closed")
        self._adapter._subscribe(self._session, channel)

    async def unsubscribe(self, channel: str) -> None:
        if self._session is not None:
            self._adapter._unsubscribe(self._session, channel)

    async def recv(self) -> ev.Envelope:
        if self._closed and self._queue.empty():
            raise ConnectionClosed(f"{self.peer_id} is closed")
        env = await self._queue.get()
        if env is None:
            raise ConnectionClosed(f"{self.peer_id} is closed")
        return env

    async def close(self) -> None:
        if not self._closed:
            self._adapter._drop_peer(self.peer_id, reason="client closed")

    @property
    def closed(self) -> bool:
        return self._closed


class TcpClient(AdapterClient):
    """Framed TCP connection to an adapter with a reader task."""

    def __init__(self, identity: str):
        self.identity = identity
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._queue: asyncio.Queue[ev.Envelope | None] = asyncio.Queue()
        self._task: asyncio.Task | None = None
        self._closed = False

    @classmethod
    async def connect(cls, host: str, port: int, identity: str) -> "TcpClient":
        client = cls(identity)
        client._reader, client._writer = await asyncio.open_connection(host, port)
        client._send_control({"ctl": "hello", "peer_id": identity})
        client._task = asyncio.get_running_loop().create_task(client._read_loop())
        return client

    def _send_control(self, doc: Mapping[str, Any]) -> None:
        if self._writer is None or self._writer.is_closing():
            raise ConnectionClosed("tcp client is closed")
        self._writer.write(ev.frame(ev.canonical_json(doc)))

    async def _read_loop(self) -> None:
        decoder = ev.FrameDecoder()
        try:
            while True:
                data = await self._reader.read(65536)
                if not data:
                    break
                for raw in decoder.feed(data):
                    self._queue.put_nowait(ev.decode(raw))
        except (ev.ProtocolError, ConnectionResetError, OSError):
            pass
        finally:
            self._closed = True
            self._queue.put_nowait(None)

    def send(self, env: ev.Envelope) -> bool:
        if self._closed or self._writer is None or self._writer.is_closing():
            raise ConnectionClosed("tcp client is closed")
        self._writer.write(ev.frame(ev.encode(env)))
        return True

    async def subscribe(self, channel: str) -> None:
        self._send_control({"ctl": "subscribe", "channel": channel})

    async def unsubscribe(self, channel: str) -> None:
        self._send_control({"ctl": "unsubscribe", "channel": channel})

    async def recv(self) -> ev.Envelope:
        env = await self._queue.get()
        if env is None:
            raise ConnectionClosed("tcp client is closed")
        return env

    async def drain(self) -> None:
        if self._writer is not None:
            await self._writer.drain()

    async def close(self) -> None:
        self._closed = True
        if self._writer is not None and not self._writer.is_closing():
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionResetError, OSError):
                pass
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass

    @property
    def closed(self) -> bool:
        return self._closed


# -- module-level operation surface --------------------------------------------


async def start_adapter(spec: AdapterSpec, direction: str, event_sink: EventSink) -> AdapterHandle:
    adapter = Adapter(spec, direction, event_sink)
    return await adapter.start()


def send(handle: AdapterHandle, channel: str, env: ev.Envelope) -> SendReceipt:
    return handle.adapter.send(channel, env)


async def stop_adapter(handle: AdapterHandle) -> None:
    await handle.adapter.stop()
