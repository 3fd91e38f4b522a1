"""Bridge core: the central control unit.

A single event loop consumes the merged stream of adapter events, enforces
whitelists and per-identity rate limits, maintains the routing table, applies
payload transforms and header replacement, and moves envelopes between DT
clients (north) and simulation agents (south). The routing table and metrics
are owned exclusively by that loop.
"""

from __future__ import annotations

import asyncio
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Mapping

from . import envelope as ev
from .adapters import (
    Adapter, AdapterEvent, EV_MESSAGE_RECEIVED, EV_TRANSPORT_ERROR, NORTH, SOUTH,
)
from .config import (
    BridgeConfig, DIRECTION_TELEMETRY_OUT, FLAVOR_PUBSUB, PtMapping,
)
from .slog import component_logger, fmt_event
from .transform import Regrouper, TransformError, forward_request, reverse_response

log = component_logger("bridge")

BRIDGE_ID = "bridge"
METRICS_CHANNEL = "sb/metrics"
PURGE_INTERVAL_S = 1.0

MODE_FOR_KIND = {ev.BATCH_REQUEST: ev.MODE_BATCH, ev.STREAM_REQUEST: ev.MODE_STREAMING}


class BridgeError(Exception):
    pass


class DuplicateEntryError(BridgeError):
    """Routing key (pa_south, sim_type, request_id) already live."""


@dataclass(frozen=True)
class SimulationTypeDescriptor:
    """An agent's advertised capability (one Simulation Type)."""

    name: str
    modes: frozenset[str]
    models: tuple[str, ...] = ()
    input_schema: Mapping[str, str] = field(default_factory=dict)
    output_schema: Mapping[str, str] = field(default_factory=dict)
    pt_capable: bool = False

    def __post_init__(self):
        if not self.name:
            raise ValueError("sim type name must be non-empty")
        if not self.modes:
            raise ValueError("modes must be non-empty")
        if not self.modes <= {ev.MODE_BATCH, ev.MODE_STREAMING}:
            raise ValueError(f"invalid modes {sorted(self.modes)}")

    def to_payload(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "modes": sorted(self.modes),
            "models": list(self.models),
            "input_schema": dict(self.input_schema),
            "output_schema": dict(self.output_schema),
            "pt_capable": self.pt_capable,
        }

    @classmethod
    def from_payload(cls, doc: Mapping[str, Any]) -> "SimulationTypeDescriptor":
        return cls(
            name=doc["name"],
            modes=frozenset(doc["modes"]),
            models=tuple(doc.get("models", ())),
            input_schema=dict(doc.get("input_schema", {})),
            output_schema=dict(doc.get("output_schema", {})),
            pt_capable=bool(doc.get("pt_capable", False)),
        )


@dataclass
class AgentBinding:
    agent_id: str
    pa_south: str
    sim_types: dict[str, SimulationTypeDescriptor]
    registered_at: int

    def __post_init__(self):
        if not self.sim_types:
            raise ValueError("agent must advertise at least one sim type")


@dataclass
class RoutingEntry:
    """One live row of the routing table (keyed by pa_south, sim_type, request_id)."""

    pa_north: str
    pa_south: str
    dt_id: str
    sim_type: str
    request_id: str
    deadline: float  # monotonic ms
    mode: str
    next_expected_seq: int = 0
    inserted_at: float = 0.0
    agent_id: str = ""
    core_micros: float = 0.0
    regrouper: Regrouper | None = None

    def key(self) -> tuple[str, str, str]:
        return (self.pa_south, self.sim_type, self.request_id)


@dataclass
class CoreMetrics:
    requests_routed: int = 0
    responses_routed: int = 0
    dropped_unauthorized: int = 0
    dropped_expired: int = 0
    dropped_unroutable: int = 0
    rate_limited: int = 0
    overhead_samples: list[float] = field(default_factory=list)  # microseconds

    def to_document(self) -> dict[str, Any]:
        return {
            "requests_routed": self.requests_routed,
            "responses_routed": self.responses_routed,
            "dropped_unauthorized": self.dropped_unauthorized,
            "dropped_expired": self.dropped_expired,
            "dropped_unroutable": self.dropped_unroutable,
            "rate_limited": self.rate_limited,
            "overhead_samples": len(self.overhead_samples),
        }


class TokenBucket:
    """Per-identity flood guard: capacity tokens, steady refill."""

    def __init__(self, capacity: int, refill_per_second: float):
        self.capacity = capacity
        self.refill = refill_per_second
        self.tokens = float(capacity)
        self.last = None  # type: float | None

    def allow(self, now_s: float) -> bool:
        if self.last is not None:
            self.tokens = min(float(self.capacity), self.tokens + (now_s - self.last) * self.refill)
        self.last = now_s
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


@dataclass
class PtSession:
    sim_type: str
    agent_id: str
    pa_south: str
    request_id: str
    dt_id: str


class Bridge:
    """Event-loop owner of routing, security and transformation state."""

    def __init__(self, config: BridgeConfig, clock=None):
        self.config = config
        self._clock = clock or time.monotonic
        self.events: asyncio.Queue[AdapterEvent] = asyncio.Queue()
        self.north: dict[str, Adapter] = {}
        self.south: dict[str, Adapter] = {}
        for spec in config.north_adapters:
            self.north[spec.name] = Adapter(spec, NORTH, self.events.put_nowait)
        for spec in config.south_adapters:
            self.south[spec.name] = Adapter(spec, SOUTH, self.events.put_nowait)
        self.routing: dict[tuple[str, str, str], RoutingEntry] = {}
        self._by_request: dict[str, RoutingEntry] = {}
        self.agents: dict[str, AgentBinding] = {}
        self.providers: dict[str, list[str]] = {}  # sim_type -> agent ids
        self._rr: dict[str, int] = {}
        self._buckets: dict[str, TokenBucket] = {}
        self.metrics = CoreMetrics()
        self._telemetry_routes: dict[str, str] = {}  # entity_id -> channel
        self._command_routes: dict[str, str] = {}  # channel -> entity_id
        self._entity_sessions: dict[str, PtSession] = {}
        self._warned_entities: set[str] = set()
        for mapping in config.pt_mappings:
            self._install_mapping(mapping)
        self._tasks: list[asyncio.Task] = []
        self._running = False

    # -- lifecycle ---------------------------------------------------------------

    async def start(self) -> None:
        for adapter in list(self.north.values()) + list(self.south.values()):
            await adapter.start()
        loop = asyncio.get_running_loop()
        self._running = True
        self._tasks = [
            loop.create_task(self._run(), name="bridge-core"),
            loop.create_task(self._purge_loop(), name="bridge-purge"),
        ]

    async def stop(self) -> None:
        self._running = False
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except asyncio.CancelledError:
                pass
        self._tasks = []
        for adapter in list(self.north.values()) + list(self.south.values()):
            await adapter.stop()

    def now_ms(self) -> float:
        return self._clock() * 1000.0

    # -- event loop ---------------------------------------------------------------

    async def _run(self) -> None:
        while True:
            event = await self.events.get()
            try:
                self._dispatch(event)
            except Exception:  # never let one event kill the core
                log.exception(fmt_event("dispatch_failed", adapter=event.adapter_name,
                                        kind=event.kind))

    async def _purge_loop(self) -> None:
        while True:
            await asyncio.sleep(PURGE_INTERVAL_S)
            self.purge_expired(self.now_ms())

    def _dispatch(self, event: AdapterEvent) -> None:
        if event.kind == EV_TRANSPORT_ERROR:
            log.warning(fmt_event("transport_error", adapter=event.adapter_name,
                                  peer=event.peer_id, detail=event.detail))
            return
        if event.kind != EV_MESSAGE_RECEIVED:
            return
        dequeued_ns = time.perf_counter_ns()
        env = event.envelope
        kind = env.header.kind
        if event.direction == NORTH:
            if env.header.dest_id == METRICS_CHANNEL:
                self._serve_metrics(event)
            elif kind in MODE_FOR_KIND:
                self.handle_north_request(event, dequeued_ns)
            elif kind == ev.PT_CONFIG:
                self.handle_pt_config(event)
            elif kind == ev.PT_COMMAND:
                self.handle_pt_command(event)
            else:
                log.info(fmt_event("ignored_north", kind=kind, source=env.header.source_id))
        else:
            if kind == ev.ADVERTISE:
                self.register_agent(env, pa_south=event.adapter_name)
            elif kind == ev.PT_TELEMETRY:
                self.handle_pt_telemetry(event)
            elif kind in (ev.BATCH_RESPONSE, ev.STREAM_DATA, ev.STREAM_END, ev.ERROR):
                self.handle_south_response(event, dequeued_ns)
            else:
                log.info(fmt_event("ignored_south", kind=kind, source=env.header.source_id))

    # -- security -------------------------------------------------------------------

    def authorize(self, identity: str, cls: str) -> bool:
        """Default-deny whitelist check; cls is "dt" or "agent"."""
        allowed = self.config.whitelist_dts if cls == "dt" else self.config.whitelist_agents
        return identity in allowed

    def rate_limit_check(self, identity: str, now_s: float | None = None) -> bool:
        bucket = self._buckets.get(identity)
        if bucket is None:
            bucket = TokenBucket(self.config.rate_limit.capacity,
                                 float(self.config.rate_limit.refill_per_second))
            self._buckets[identity] = bucket
        return bucket.allow(self._clock() if now_s is None else now_s)

    # -- agent registry ----------------------------------------------------------------

    def register_agent(self, env: ev.Envelope, pa_south: str | None = None) -> None:
        agent_id = env.header.source_id
        if not self.authorize(agent_id, "agent"):
            self.metrics.dropped_unauthorized += 1
            log.warning(fmt_event("unauthorized_agent", agent=agent_id))
            return
        try:
            descriptor = SimulationTypeDescriptor.from_payload(env.payload)
        except (KeyError, TypeError, ValueError) as exc:
            log.warning(fmt_event("bad_advertise", agent=agent_id, error=exc))
            return
        if pa_south is None:
            pa_south = self._adapter_for_agent(env)
        binding = self.agents.get(agent_id)
        if binding is None:
            binding = AgentBinding(agent_id=agent_id, pa_south=pa_south,
                                   sim_types={descriptor.name: descriptor},
                                   registered_at=ev.now_ms())
            self.agents[agent_id] = binding
        else:
            binding.pa_south = pa_south
            binding.sim_types[descriptor.name] = descriptor
        providers = self.providers.setdefault(descriptor.name, [])
        if agent_id not in providers:
            providers.append(agent_id)
        log.info(fmt_event("agent_registered", agent=agent_id, sim_type=descriptor.name,
                           adapter=pa_south))

    def _adapter_for_agent(self, env: ev.Envelope) -> str:
        # The advertise arrived through exactly one south adapter; the event
        # carries it, but register_agent may be driven directly in tests.
        for name, adapter in self.south.items():
            if env.header.source_id in adapter._identities:
                return name
        return next(iter(self.south), "")

    def _select_provider(self, sim_type: str) -> AgentBinding | None:
        providers = self.providers.get(sim_type)
        if not providers:
            return None
        index = self._rr.get(sim_type, 0) % len(providers)
        self._rr[sim_type] = index + 1
        return self.agents[providers[index]]

    # -- north: requests ------------------------------------------------------------------

    def handle_north_request(self, event: AdapterEvent, dequeued_ns: int | None = None) -> None:
        dequeued_ns = dequeued_ns or time.perf_counter_ns()
        env = event.envelope
        dt_id = env.header.source_id
        rid = env.header.request_id
        if not self.authorize(dt_id, "dt"):
            self.metrics.dropped_unauthorized += 1
            log.warning(fmt_event("unauthorized_dt", dt=dt_id, request_id=rid))
            return
        if not self.rate_limit_check(dt_id):
            self.metrics.rate_limited += 1
            log.warning(fmt_event("rate_limited", dt=dt_id, request_id=rid))
            return
        if rid in self._by_request:
            self._send_error(event, "duplicate-request", f"request_id {rid} already live")
            return
        sim_type = env.header.sim_type
        binding = self._select_provider(sim_type)
        if binding is None:
            self._send_error(event, "no-provider", f"no agent provides sim type {sim_type!r}")
            return
        payload = dict(env.payload)
        timeout_ms = payload.get("timeout_ms") or self.config.default_timeout_ms
        rule = self.config.transforms.get(sim_type)
        if rule is not None:
            try:
                payload = forward_request(rule, payload)
            except TransformError as exc:
                self._send_error(event, "transform-error", str(exc))
                return
        now = self.now_ms()
        entry = RoutingEntry(
            pa_north=event.adapter_name,
            pa_south=binding.pa_south,
            dt_id=dt_id,
            sim_type=sim_type,
            request_id=rid,
            deadline=now + float(timeout_ms),
            mode=MODE_FOR_KIND[env.header.kind],
            inserted_at=now,
            agent_id=binding.agent_id,
            regrouper=Regrouper(rule) if rule is not None else None,
        )
        self.insert_entry(entry)
        out = ev.Envelope(
            header=ev.make_header(
                kind=env.header.kind,
                source_id=BRIDGE_ID,
                request_id=rid,
                sim_type=sim_type,
                dest_id=binding.agent_id,
                issued_at=ev.now_ms(),
                trace=env.header.trace,
            ),
            payload=payload,
        )
        out = ev.with_hop(out, BRIDGE_ID)
        south = self.south[binding.pa_south]
        receipt = south.send(binding.agent_id, out)
        self.metrics.requests_routed += 1
        entry.core_micros += (time.perf_counter_ns() - dequeued_ns) / 1000.0
        log.debug(fmt_event("routed_request", dt=dt_id, sim_type=sim_type, request_id=rid,
                            agent=binding.agent_id, delivered=receipt.delivered))

    def insert_entry(self, entry: RoutingEntry) -> None:
        if entry.deadline <= entry.inserted_at:
            raise BridgeError("deadline must be after insertion time")
        key = entry.key()
        if key in self.routing:
            raise DuplicateEntryError(f"routing entry {key} already live")
        self.routing[key] = entry
        self._by_request[entry.request_id] = entry

    def _remove_entry(self, entry: RoutingEntry) -> None:
        self.routing.pop(entry.key(), None)
        live = self._by_request.get(entry.request_id)
        if live is entry:
            del self._by_request[entry.request_id]

    def _send_error(self, event: AdapterEvent, code: str, detail: str) -> None:
        env = event.envelope
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.ERROR,
                source_id=BRIDGE_ID,
                request_id=env.header.request_id or uuid.uuid4().hex,
                sim_type=env.header.sim_type,
                dest_id=env.header.source_id,
                trace=env.header.trace,
            ),
            payload={"error": code, "detail": detail},
        )
        out = ev.with_hop(out, BRIDGE_ID)
        adapter = self.north.get(event.adapter_name) or self.south.get(event.adapter_name)
        if adapter is not None:
            adapter.send(env.header.source_id, out)
        log.info(fmt_event("request_rejected", code=code, dt=env.header.source_id,
                           request_id=env.header.request_id, detail=detail))

    # -- south: responses -------------------------------------------------------------------

    def handle_south_response(self, event: AdapterEvent, dequeued_ns: int | None = None) -> None:
        dequeued_ns = dequeued_ns or time.perf_counter_ns()
        env = event.envelope
        key = (event.adapter_name, env.header.sim_type, env.header.request_id)
        entry = self.routing.get(key)
        if entry is None or entry.deadline < self.now_ms():
            self.metrics.dropped_unroutable += 1
            log.warning(fmt_event("unroutable_response", request_id=env.header.request_id,
                                  sim_type=env.header.sim_type, adapter=event.adapter_name))
            return
        envs = [env]
        if entry.regrouper is not None:
            envs = entry.regrouper.offer(env)
        rule = self.config.transforms.get(entry.sim_type)
        north = self.north[entry.pa_north]
        terminal = False
        for item in envs:
            payload = dict(item.payload)
            if rule is not None:
                try:
                    if "samples" in payload and isinstance(payload["samples"], list):
                        payload["samples"] = [reverse_response(rule, p) for p in payload["samples"]]
                    else:
                        payload = reverse_response(rule, payload)
                except TransformError as exc:
                    self._remove_entry(entry)
                    self._send_error(event, "transform-error", str(exc))
                    return
            out = ev.Envelope(
                header=ev.make_header(
                    kind=item.header.kind,
                    source_id=BRIDGE_ID,
                    request_id=entry.request_id,
                    sim_type=entry.sim_type,
                    dest_id=entry.dt_id,
                    seq=item.header.seq,
                    issued_at=ev.now_ms(),
                    trace=item.header.trace,
                ),
                payload=payload,
            )
            out = ev.with_hop(out, BRIDGE_ID)
            north.send(entry.dt_id, out)
            self.metrics.responses_routed += 1
            if item.header.kind == ev.STREAM_DATA and item.header.seq is not None:
                entry.next_expected_seq = max(entry.next_expected_seq, item.header.seq + 1)
            # A mid-stream error envelope is followed by stream_end (the agent
            # contract), so only batch_response/stream_end retire the entry.
            if item.header.kind in (ev.BATCH_RESPONSE, ev.STREAM_END):
                terminal = True
        entry.core_micros += (time.perf_counter_ns() - dequeued_ns) / 1000.0
        if terminal:
            self._remove_entry(entry)
            self.metrics.overhead_samples.append(entry.core_micros)

    # -- purge ---------------------------------------------------------------------------------

    def purge_expired(self, now_ms: float) -> int:
        """Drop every entry past its deadline; runs on a 1 s cadence."""
        expired = [entry for entry in self.routing.values() if entry.deadline < now_ms]
        for entry in expired:
            self._remove_entry(entry)
            self.metrics.dropped_expired += 1
            log.info(fmt_event("entry_purged", request_id=entry.request_id,
                               sim_type=entry.sim_type, dt=entry.dt_id))
        return len(expired)

    # -- physical twin pattern --------------------------------------------------------------------

    def _install_mapping(self, mapping: PtMapping) -> None:
        if mapping.direction == DIRECTION_TELEMETRY_OUT:
            self._telemetry_routes[mapping.entity_id] = mapping.channel
        else:
            self._command_routes[mapping.channel] = mapping.entity_id

    def handle_pt_config(self, event: AdapterEvent) -> None:
        env = event.envelope
        source = env.header.source_id
        if not self.authorize(source, "dt"):
            self.metrics.dropped_unauthorized += 1
            log.warning(fmt_event("unauthorized_pt_config", source=source))
            return
        sim_type = env.header.sim_type or env.payload.get("sim_type", "")
        binding = self._pt_provider(sim_type)
        if binding is None:
            self._send_error(event, "no-pt-provider",
                             f"no PT-capable agent provides sim type {sim_type!r}")
            return
        mappings = []
        for i, doc in enumerate(env.payload.get("mappings", [])):
            try:
                mapping = PtMapping(
                    entity_id=str(doc["entity_id"]),
                    channel=str(doc["channel"]),
                    direction=str(doc["direction"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                self._send_error(event, "bad-mapping", f"mappings[{i}]: {exc}")
                return
            if mapping.direction == DIRECTION_TELEMETRY_OUT:
                installed = self._telemetry_routes.get(mapping.entity_id)
                conflict = installed is not None and installed != mapping.channel
            else:
                installed = self._command_routes.get(mapping.channel)
                conflict = installed is not None and installed != mapping.entity_id
            if conflict:
                self._send_error(event, "bad-mapping",
                                 f"mappings[{i}]: conflicts with installed mapping")
                return
            mappings.append(mapping)
        session = PtSession(
            sim_type=sim_type,
            agent_id=binding.agent_id,
            pa_south=binding.pa_south,
            request_id=env.header.request_id,
            dt_id=source,
        )
        for mapping in mappings:
            self._install_mapping(mapping)
        for mapping in mappings + list(self.config.pt_mappings):
            self._entity_sessions[mapping.entity_id] = session
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.PT_CONFIG,
                source_id=BRIDGE_ID,
                request_id=env.header.request_id,
                sim_type=sim_type,
                dest_id=binding.agent_id,
                trace=env.header.trace,
            ),
            payload=dict(env.payload),
        )
        out = ev.with_hop(out, BRIDGE_ID)
        self.south[binding.pa_south].send(binding.agent_id, out)
        log.info(fmt_event("pt_session_started", sim_type=sim_type, agent=binding.agent_id,
                           mappings=len(mappings)))

    def _pt_provider(self, sim_type: str) -> AgentBinding | None:
        providers = self.providers.get(sim_type, [])
        for agent_id in providers:
            binding = self.agents[agent_id]
            descriptor = binding.sim_types.get(sim_type)
            if descriptor is not None and descriptor.pt_capable:
                return binding
        return None

    def handle_pt_telemetry(self, event: AdapterEvent) -> None:
        env = event.envelope
        entity = env.payload.get("entity_id")
        # Mappings may name a bare entity or an entity.field path.
        field_name = env.payload.get("field")
        channel = None
        if entity is not None and field_name is not None:
            channel = self._telemetry_routes.get(f"{entity}.{field_name}")
        if channel is None:
            channel = self._telemetry_routes.get(entity)
        if channel is None:
            if entity not in self._warned_entities:  # once per entity, not per event
                self._warned_entities.add(entity)
                log.warning(fmt_event("unmapped_entity", entity=entity))
            return
        north = self._pt_north_adapter()
        if north is None:
            log.warning(fmt_event("no_pt_north_adapter", entity=entity))
            return
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.PT_TELEMETRY,
                source_id=BRIDGE_ID,
                request_id=env.header.request_id,
                sim_type=env.header.sim_type,
                dest_id=channel,
                trace=env.header.trace,
            ),
            payload=dict(env.payload),
        )
        out = ev.with_hop(out, BRIDGE_ID)
        north.send(channel, out)

    def _pt_north_adapter(self) -> Adapter | None:
        # PT telemetry goes to the pubsub-flavored north adapter (the PT-facing
        # side of the deployment); falls back to the first north adapter.
        for adapter in self.north.values():
            if adapter.flavor == FLAVOR_PUBSUB:
                return adapter
        return next(iter(self.north.values()), None)

    def handle_pt_command(self, event: AdapterEvent) -> None:
        env = event.envelope
        source = env.header.source_id
        if not self.authorize(source, "dt"):
            self.metrics.dropped_unauthorized += 1
            log.warning(fmt_event("unauthorized_pt_command", source=source))
            return
        channel = env.header.dest_id or ""
        entity = self._command_routes.get(channel)
        if entity is None:
            log.warning(fmt_event("unmapped_command_channel", channel=channel))
            return
        session = self._entity_sessions.get(entity)
        if session is None:
            log.warning(fmt_event("no_pt_session", entity=entity))
            return
        payload = dict(env.payload)
        payload.setdefault("entity_id", entity)
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.PT_COMMAND,
                source_id=BRIDGE_ID,
                request_id=session.request_id,
                sim_type=session.sim_type,
                dest_id=session.agent_id,
                trace=env.header.trace,
            ),
            payload=payload,
        )
        out = ev.with_hop(out, BRIDGE_ID)
        self.south[session.pa_south].send(session.agent_id, out)

    # -- metrics -----------------------------------------------------------------------------------

    def _serve_metrics(self, event: AdapterEvent) -> None:
        env = event.envelope
        if not self.authorize(env.header.source_id, "dt"):
            self.metrics.dropped_unauthorized += 1
            log.warning(fmt_event("unauthorized_metrics_query", source=env.header.source_id))
            return
        doc = self.metrics.to_document()
        doc["live_entries"] = len(self.routing)
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.BATCH_RESPONSE,
                source_id=BRIDGE_ID,
                request_id=env.header.request_id,
                sim_type=env.header.sim_type,
                dest_id=env.header.source_id,
                trace=env.header.trace,
            ),
            payload={"request_id": env.header.request_id, "status": "ok",
                     "values": {}, "final": True, "metrics": doc},
        )
        out = ev.with_hop(out, BRIDGE_ID)
        adapter = self.north.get(event.adapter_name)
        if adapter is not None:
            adapter.send(env.header.source_id, out)

    def metrics_document(self) -> dict[str, Any]:
        doc = self.metrics.to_document()
        doc["live_entries"] = len(self.routing)
        return doc
