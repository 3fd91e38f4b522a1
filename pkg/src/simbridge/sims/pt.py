"""Physical-twin glue: run the microfactory as a live PT simulation.

The launcher paces simulation time against the wall clock (``pacing`` real ms
per sim ms), streams SimEvents as pt_telemetry envelopes tagged with their
entity, and applies pt_command envelopes at the next event-queue step. If the
transport drops, the simulation pauses and resumes once sending works again.
"""

from __future__ import annotations

import asyncio
import time

from .. import envelope as ev
from ..agent import AgentRuntime
from ..slog import component_logger, fmt_event
from .factory import Factory, FactoryModel, UnknownEntityError

log = component_logger("factory-pt")

RETRY_S = 0.2


async def factory_pt_launcher(runtime: AgentRuntime, env: ev.Envelope) -> None:
    sim_type = env.header.sim_type
    request_id = env.header.request_id
    payload = env.payload
    model = FactoryModel.from_document(payload.get("model", {}))
    pacing = float(payload.get("pacing", 1.0))  # real ms per sim ms
    until_ms = payload.get("until_ms")
    factory = Factory(model)
    inbox = runtime.pt_inboxes[sim_type]
    loop = asyncio.get_running_loop()
    start_wall = loop.time()
    log.info(fmt_event("pt_run_started", sim_type=sim_type, pacing=pacing,
                       until_ms=until_ms))
    while True:
        next_sim = factory.next_time()
        if next_sim is None or (until_ms is not None and next_sim > until_ms):
            break
        target_wall = start_wall + next_sim * pacing / 1000.0
        while True:
            wait_s = target_wall - loop.time()
            if wait_s <= 0:
                # Drain any commands that arrived while catching up.
                while not inbox.empty():
                    _apply_command(factory, inbox.get_nowait())
                break
            try:
                command = await asyncio.wait_for(inbox.get(), timeout=wait_s)
            except asyncio.TimeoutError:
                continue
            _apply_command(factory, command)
        events = factory.advance_until(next_sim)
        for event in events:
            telemetry = {
                "entity_id": event.entity_id,
                "field": event.field,
                "value": event.value,
                "sim_time_ms": event.sim_time_ms,
                "emit_ns": time.perf_counter_ns(),
            }
            while not runtime.send_pt_telemetry(sim_type, request_id, telemetry):
                # Transport down: pause until it comes back.
                await asyncio.sleep(RETRY_S)
                telemetry["emit_ns"] = time.perf_counter_ns()
    log.info(fmt_event("pt_run_finished", sim_type=sim_type, sim_ms=factory.now_ms,
                       created=factory.created, sunk=factory.sunk))


def _apply_command(factory: Factory, env: ev.Envelope) -> None:
    entity = env.payload.get("entity_id")
    fields = {env.payload["field"]: env.payload["value"]} \
        if "field" in env.payload else dict(env.payload.get("command", {}))
    try:
        factory.inject_command(factory.now_ms, entity, fields)
    except UnknownEntityError as exc:
        log.warning(fmt_event("pt_command_rejected", entity=entity, error=exc))
