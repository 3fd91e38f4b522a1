"""Agent SDK: the framework simulation agents are built on.

An AgentRuntime owns one south-adapter connection, advertises its simulation
type descriptors, runs batch models to completion and drives sequence-numbered
streams. The file-based exchange strategy is kept alongside the socket path so
the two can be compared under the benchmark harness.
"""

from __future__ import annotations

import asyncio
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

from . import envelope as ev
from .adapters import AdapterClient, ConnectionClosed
from .bridge import SimulationTypeDescriptor
from .slog import component_logger, fmt_event

log = component_logger("agent")

BACKOFF_BASE_S = 0.2
BACKOFF_CAP_S = 10.0

FILE_POLL_INTERVAL_S = 0.010
FILE_TIMEOUT_S = 30.0
REQUEST_FILE = "request.json"
RESPONSE_FILE = "response.json"

ModelFn = Callable[[Mapping[str, Any], Mapping[str, float]], Mapping[str, float]]
StepperFactory = Callable[[ev.SimulationRequest], Iterator[Mapping[str, float]]]
PtLauncher = Callable[["AgentRuntime", ev.Envelope], Any]


class AgentConfigError(Exception):
    pass


@dataclass
class _StreamState:
    request_id: str
    period_ms: int
    next_seq: int = 1
    cancelled: bool = False
    dropped: int = 0
    task: asyncio.Task | None = None


@dataclass
class AgentRuntime:
    """One simulation agent: identity, capabilities and active work."""

    agent_id: str
    client: AdapterClient
    descriptors: tuple[SimulationTypeDescriptor, ...]
    reconnect: Callable[[], Any] | None = None
    models: dict[str, ModelFn] = field(default_factory=dict)
    steppers: dict[str, StepperFactory] = field(default_factory=dict)
    pt_launchers: dict[str, PtLauncher] = field(default_factory=dict)
    active_streams: dict[str, _StreamState] = field(default_factory=dict)
    overheads: dict[str, list[float]] = field(default_factory=dict)  # microseconds
    pt_inboxes: dict[str, asyncio.Queue] = field(default_factory=dict)
    _serve_task: asyncio.Task | None = None
    _pt_tasks: list[asyncio.Task] = field(default_factory=list)

    def __post_init__(self):
        if not self.descriptors:
            raise AgentConfigError("agent must declare at least one sim type descriptor")

    def register_model(self, name: str, fn: ModelFn) -> None:
        self.models[name] = fn

    def register_stepper(self, name: str, factory: StepperFactory) -> None:
        self.steppers[name] = factory

    def register_pt(self, sim_type: str, launcher: PtLauncher) -> None:
        self.pt_launchers[sim_type] = launcher

    # -- advertisement ---------------------------------------------------------

    def advertise_envelopes(self) -> list[ev.Envelope]:
        return [
            ev.Envelope(
                header=ev.make_header(
                    kind=ev.ADVERTISE,
                    source_id=self.agent_id,
                    request_id="",
                    sim_type=d.name,
                ),
                payload=d.to_payload(),
            )
            for d in self.descriptors
        ]

    async def advertise(self) -> None:
        """Send one advertise envelope per descriptor, retrying with backoff."""
        delay = BACKOFF_BASE_S
        while True:
            try:
                for env in self.advertise_envelopes():
                    self.client.send(env)
                return
            except ConnectionClosed:
                if self.reconnect is None:
                    raise
                log.warning(fmt_event("advertise_retry", agent=self.agent_id, delay=delay))
                await asyncio.sleep(delay)
                delay = min(delay * 2, BACKOFF_CAP_S)
                self.client = await self.reconnect()

    # -- serving -----------------------------------------------------------------

    async def start(self) -> None:
        await self.advertise()
        self._serve_task = asyncio.get_running_loop().create_task(
            self.serve(), name=f"agent-{self.agent_id}")

    async def stop(self) -> None:
        for state in self.active_streams.values():
            state.cancelled = True
        for task in [self._serve_task] + self._pt_tasks:
            if task is not None:
                task.cancel()
                try:
                    await task
                except asyncio.CancelledError:
                    pass
        self._serve_task = None
        self._pt_tasks = []
        await self.client.close()

    async def serve(self) -> None:
        loop = asyncio.get_running_loop()
        while True:
            try:
                env = await self.client.recv()
            except ConnectionClosed:
                if self.reconnect is None:
                    return
                self.client = await self.reconnect()
                await self.advertise()
                continue
            kind = env.header.kind
            if kind == ev.BATCH_REQUEST:
                self._serve_batch(env)
            elif kind == ev.STREAM_REQUEST:
                self._serve_stream(env, loop)
            elif kind == ev.PT_CONFIG:
                self._serve_pt_config(env, loop)
            elif kind == ev.PT_COMMAND:
                inbox = self.pt_inboxes.get(env.header.sim_type)
                if inbox is not None:
                    inbox.put_nowait(env)
                else:
                    log.warning(fmt_event("pt_command_without_session",
                                          sim_type=env.header.sim_type))
            else:
                log.debug(fmt_event("ignored", kind=kind))

    # -- batch ---------------------------------------------------------------------

    def _parse_request(self, env: ev.Envelope) -> ev.SimulationRequest | None:
        try:
            return ev.SimulationRequest.from_payload(env.payload)
        except ValueError as exc:
            self._send_response(env, ev.SimulationResponse(
                request_id=env.header.request_id, status=ev.STATUS_ERROR,
                values={}, final=True, error_detail=f"bad request: {exc}"))
            return None

    def _required_inputs(self, sim_type: str) -> tuple[str, ...] | None:
        for descriptor in self.descriptors:
            if descriptor.name == sim_type:
                return tuple(descriptor.input_schema)
        return None

    def _serve_batch(self, env: ev.Envelope) -> None:
        req = self._parse_request(env)
        if req is None:
            return
        model_fn = self.models.get(req.model)
        if model_fn is None:
            response = ev.SimulationResponse(
                request_id=env.header.request_id, status=ev.STATUS_ERROR,
                values={}, final=True, error_detail=f"unknown model {req.model!r}")
        else:
            response = handle_batch(self, req, model_fn,
                                    required_inputs=self._required_inputs(env.header.sim_type),
                                    request_id=env.header.request_id)
        self._send_response(env, response)

    def _send_response(self, req_env: ev.Envelope, response: ev.SimulationResponse) -> None:
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.BATCH_RESPONSE,
                source_id=self.agent_id,
                request_id=req_env.header.request_id,
                sim_type=req_env.header.sim_type,
            ),
            payload=response.to_payload(),
        )
        try:
            self.client.send(out)
        except ConnectionClosed:
            log.warning(fmt_event("response_lost", request_id=req_env.header.request_id))

    # -- streaming --------------------------------------------------------------------

    def _serve_stream(self, env: ev.Envelope, loop: asyncio.AbstractEventLoop) -> None:
        req = self._parse_request(env)
        if req is None:
            return
        if req.mode != ev.MODE_STREAMING:
            self._send_response(env, ev.SimulationResponse(
                request_id=env.header.request_id, status=ev.STATUS_ERROR,
                values={}, final=True, error_detail="stream_request requires streaming mode"))
            return
        factory = self.steppers.get(req.model)
        if factory is None:
            self._send_response(env, ev.SimulationResponse(
                request_id=env.header.request_id, status=ev.STATUS_ERROR,
                values={}, final=True, error_detail=f"unknown model {req.model!r}"))
            return
        try:
            stepper = factory(req)
        except Exception as exc:
            self._send_response(env, ev.SimulationResponse(
                request_id=env.header.request_id, status=ev.STATUS_ERROR,
                values={}, final=True, error_detail=f"stepper init failed: {exc}"))
            return
        state = _StreamState(request_id=env.header.request_id, period_ms=req.stream_period_ms)
        self.active_streams[env.header.request_id] = state
        state.task = loop.create_task(
            self.run_stream(env, req, stepper, state),
            name=f"stream-{env.header.request_id[:8]}")

    def cancel_stream(self, request_id: str) -> bool:
        state = self.active_streams.get(request_id)
        if state is None:
            return False
        state.cancelled = True
        return True

    async def run_stream(self, req_env: ev.Envelope, req: ev.SimulationRequest,
                         stepper: Iterator[Mapping[str, float]], state: _StreamState) -> None:
        """Emit one sample per period with seq 1..n, then stream_end at n+1.

        A sample the transport will not accept within its period is dropped
        without creating a seq gap; the drop count rides on stream_end.
        """
        rid = req_env.header.request_id
        samples = self.overheads.setdefault(rid, [])
        loop = asyncio.get_running_loop()
        period_s = state.period_ms / 1000.0
        next_at = loop.time()
        error_detail = None
        try:
            while not state.cancelled:
                next_at += period_s
                delay = next_at - loop.time()
                if delay > 0:
                    await asyncio.sleep(delay)
                if state.cancelled:
                    break
                try:
                    values = next(stepper)
                except StopIteration:
                    break
                except Exception as exc:
                    error_detail = str(exc)
                    break
                ready_ns = time.perf_counter_ns()
                try:
                    picked = {name: values[name] for name in req.outputs}
                except KeyError as exc:
                    error_detail = f"missing output: {exc.args[0]}"
                    break
                out = ev.Envelope(
                    header=ev.make_header(
                        kind=ev.STREAM_DATA,
                        source_id=self.agent_id,
                        request_id=rid,
                        sim_type=req_env.header.sim_type,
                        seq=state.next_seq,
                    ),
                    payload=ev.SimulationResponse(
                        request_id=rid, status=ev.STATUS_OK,
                        values=picked, final=False).to_payload(),
                )
                try:
                    accepted = self.client.send(out)
                except ConnectionClosed:
                    accepted = False
                if not accepted:
                    state.dropped += 1
                state.next_seq += 1
                samples.append((time.perf_counter_ns() - ready_ns) / 1000.0)
            if error_detail is not None:
                self._send_stream_error(req_env, rid, error_detail)
            self._send_stream_end(req_env, state)
        finally:
            self.active_streams.pop(rid, None)

    def _send_stream_error(self, req_env: ev.Envelope, rid: str, detail: str) -> None:
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.ERROR,
                source_id=self.agent_id,
                request_id=rid,
                sim_type=req_env.header.sim_type,
            ),
            payload={"error": "stream-failed", "detail": detail},
        )
        try:
            self.client.send(out)
        except ConnectionClosed:
            pass

    def _send_stream_end(self, req_env: ev.Envelope, state: _StreamState) -> None:
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.STREAM_END,
                source_id=self.agent_id,
                request_id=state.request_id,
                sim_type=req_env.header.sim_type,
                seq=state.next_seq,
            ),
            payload={"request_id": state.request_id, "status": "ok",
                     "final": True, "dropped": state.dropped},
        )
        try:
            self.client.send(out)
        except ConnectionClosed:
            log.warning(fmt_event("stream_end_lost", request_id=state.request_id))

    # -- physical twin ------------------------------------------------------------------

    def _serve_pt_config(self, env: ev.Envelope, loop: asyncio.AbstractEventLoop) -> None:
        launcher = self.pt_launchers.get(env.header.sim_type)
        if launcher is None:
            log.warning(fmt_event("no_pt_launcher", sim_type=env.header.sim_type))
            return
        self.pt_inboxes[env.header.sim_type] = asyncio.Queue()
        task = loop.create_task(launcher(self, env), name=f"pt-{env.header.sim_type}")
        self._pt_tasks.append(task)

    def send_pt_telemetry(self, sim_type: str, request_id: str,
                          payload: Mapping[str, Any]) -> bool:
        out = ev.Envelope(
            header=ev.make_header(
                kind=ev.PT_TELEMETRY,
                source_id=self.agent_id,
                request_id=request_id,
                sim_type=sim_type,
            ),
            payload=dict(payload),
        )
        try:
            return self.client.send(out)
        except ConnectionClosed:
            return False


def handle_batch(runtime: AgentRuntime | None, req: ev.SimulationRequest, model_fn: ModelFn,
                 required_inputs: tuple[str, ...] | None = None,
                 request_id: str = "") -> ev.SimulationResponse:
    """Run a batch model to completion; exceptions become error responses."""
    if req.mode != ev.MODE_BATCH:
        return ev.SimulationResponse(request_id=request_id, status=ev.STATUS_ERROR,
                                     values={}, final=True,
                                     error_detail="batch handler requires batch mode")
    if required_inputs:
        for name in required_inputs:
            if name not in req.inputs:
                return ev.SimulationResponse(
                    request_id=request_id, status=ev.STATUS_ERROR, values={},
                    final=True, error_detail=f"missing input: {name}")
    try:
        produced = model_fn(req.model_params, req.inputs)
        values = {name: produced[name] for name in req.outputs}
    except KeyError as exc:
        return ev.SimulationResponse(request_id=request_id, status=ev.STATUS_ERROR,
                                     values={}, final=True,
                                     error_detail=f"missing output: {exc.args[0]}")
    except Exception as exc:
        return ev.SimulationResponse(request_id=request_id, status=ev.STATUS_ERROR,
                                     values={}, final=True, error_detail=str(exc))
    return ev.SimulationResponse(request_id=request_id, status=ev.STATUS_OK,
                                 values=values, final=True)


# -- file-based exchange -------------------------------------------------------


def run_file_worker(input_dir: str | Path, output_dir: str | Path, model_fn: ModelFn,
                    poll_interval_s: float = FILE_POLL_INTERVAL_S,
                    timeout_s: float = FILE_TIMEOUT_S) -> None:
    """Simulator side of the file strategy: wait for a request, write a response.

    The response file lands atomically (tmp + rename) so the polling side
    never observes a partial document.
    """
    in_path = Path(input_dir) / REQUEST_FILE
    deadline = time.monotonic() + timeout_s
    while not in_path.exists():
        if time.monotonic() > deadline:
            return
        time.sleep(poll_interval_s)
    doc = json.loads(in_path.read_text(encoding="utf-8"))
    req = ev.SimulationRequest.from_payload(doc)
    response = handle_batch(None, req, model_fn)
    out_path = Path(output_dir) / RESPONSE_FILE
    fd, tmp = tempfile.mkstemp(dir=str(output_dir), prefix=".resp-")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(response.to_payload()))
    os.replace(tmp, out_path)


def file_exchange_batch(runtime: AgentRuntime | None, input_dir: str | Path,
                        output_dir: str | Path, req: ev.SimulationRequest,
                        model_fn: ModelFn | None = None,
                        timeout_s: float = FILE_TIMEOUT_S) -> ev.SimulationResponse:
    """Batch execution through the file strategy, kept for comparison benchmarks.

    Writes request.json, launches the model worker, then polls for
    response.json every 10 ms until the 30 s default timeout.
    """
    input_dir = Path(input_dir)
    output_dir = Path(output_dir)
    if model_fn is None:
        if runtime is None or req.model not in runtime.models:
            return ev.SimulationResponse(request_id="", status=ev.STATUS_ERROR, values={},
                                         final=True, error_detail=f"unknown model {req.model!r}")
        model_fn = runtime.models[req.model]
    out_path = output_dir / RESPONSE_FILE
    out_path.unlink(missing_ok=True)
    in_path = input_dir / REQUEST_FILE
    in_path.write_text(json.dumps(req.to_payload()), encoding="utf-8")
    worker = threading.Thread(
        target=run_file_worker, args=(input_dir, output_dir, model_fn), daemon=True)
    worker.start()
    deadline = time.monotonic() + timeout_s
    try:
        while time.monotonic() < deadline:
            if out_path.exists():
                try:
                    doc = json.loads(out_path.read_text(encoding="utf-8"))
                    return ev.SimulationResponse.from_payload(doc)
                except (ValueError, json.JSONDecodeError) as exc:
                    return ev.SimulationResponse(
                        request_id="", status=ev.STATUS_ERROR, values={}, final=True,
                        error_detail=f"malformed output file: {exc}")
            time.sleep(FILE_POLL_INTERVAL_S)
        return ev.SimulationResponse(request_id="", status=ev.STATUS_ERROR, values={},
                                     final=True, error_detail="file-exchange timeout")
    finally:
        worker.join(timeout=1.0)
        in_path.unlink(missing_ok=True)
        out_path.unlink(missing_ok=True)
