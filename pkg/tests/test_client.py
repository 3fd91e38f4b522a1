"""DT client tests: reorder buffer semantics, end-to-end batch/stream flows,
shuffle-shim ordering, timeouts and PT sessions."""

from __future__ import annotations

import asyncio
import random

import pytest

from simbridge import envelope as ev
from simbridge.client import (
    ClientTimeout, ClientValidationError, RemoteError, ReorderBuffer,
)
from simbridge.harness import make_config, start_stack
from simbridge.sims import ode as ode_sim
from conftest import run_async


def data_env(seq, kind=ev.STREAM_DATA, rid="r1"):
    return ev.Envelope(
        header=ev.make_header(kind=kind, source_id="bridge", request_id=rid,
                              sim_type="st", seq=seq),
        payload={"seq": seq},
    )


class TestReorderBuffer:
    def test_arrivals_2_1_3(self):
        buf = ReorderBuffer()
        assert buf.offer(data_env(2)) == []
        released = buf.offer(data_env(1))
        assert [e.header.seq for e in released] == [1, 2]
        assert [e.header.seq for e in buf.offer(data_env(3))] == [3]

    def test_arrivals_1_3_then_2(self):
        buf = ReorderBuffer()
        assert [e.header.seq for e in buf.offer(data_env(1))] == [1]
        assert buf.offer(data_env(3)) == []
        assert [e.header.seq for e in buf.offer(data_env(2))] == [2, 3]

    def test_duplicate_after_release_dropped(self):
        buf = ReorderBuffer()
        buf.offer(data_env(1))
        buf.offer(data_env(2))
        assert buf.offer(data_env(2)) == []
        assert buf.duplicates_dropped == 1

    def test_duplicate_while_held_dropped(self):
        buf = ReorderBuffer()
        buf.offer(data_env(5))
        assert buf.offer(data_env(5)) == []
        assert buf.duplicates_dropped == 1

    def test_gap_skip_on_overflow(self):
        buf = ReorderBuffer(capacity=4)
        for seq in (10, 11, 12, 13):
            assert buf.offer(data_env(seq)) == []
        released = buf.offer(data_env(14))
        assert [e.header.seq for e in released] == [10, 11, 12, 13, 14]
        assert buf.gaps_skipped == 1
        assert buf.next_expected == 15

    def test_released_strictly_increasing_property(self):
        rng = random.Random(5)
        for _ in range(100):
            buf = ReorderBuffer(capacity=64)
            seqs = list(range(1, 101))
            rng.shuffle(seqs)
            out = []
            for seq in seqs:
                out.extend(e.header.seq for e in buf.offer(data_env(seq)))
            assert out == sorted(out)
            assert len(out) + len(buf.held) + buf.duplicates_dropped == 100

    def test_bounded_displacement_full_recovery(self):
        # Any permutation with displacement <= capacity yields exactly 1..n.
        rng = random.Random(9)
        for window in (3, 10, 50):
            buf = ReorderBuffer(capacity=64)
            seqs = []
            for start in range(1, 201, window):
                chunk = list(range(start, min(start + window, 201)))
                rng.shuffle(chunk)
                seqs.extend(chunk)
            out = []
            for seq in seqs:
                out.extend(e.header.seq for e in buf.offer(data_env(seq)))
            assert out == list(range(1, 201))
            assert buf.gaps_skipped == 0

    def test_capacity_positive(self):
        with pytest.raises(ValueError):
            ReorderBuffer(capacity=0)


async def ode_stack():
    stack = await start_stack(make_config())
    await stack.add_ode_agent()
    await asyncio.sleep(0.02)
    return stack


def ode_batch_req(t=1.0, k=1.0):
    return ev.SimulationRequest(model=ode_sim.MODEL_NAME, outputs=["x"],
                                model_params={"k": k}, inputs={"x0": 1.0, "t": t})


def ode_stream_req(period_ms=2, dt=0.1, horizon=1.0):
    return ev.SimulationRequest(model=ode_sim.MODEL_NAME, outputs=["t", "x"],
                                mode="streaming", stream_period_ms=period_ms,
                                model_params={"k": 1.0, "dt": dt, "horizon": horizon},
                                inputs={"x0": 1.0})


class TestBatch:
    def test_full_stack_analytic_result(self):
        async def main():
            stack = await ode_stack()
            try:
                connection = stack.connect_dt("DT_1")
                response = await connection.request_batch("ode-decay", ode_batch_req(),
                                                          timeout_ms=5000)
                assert response.status == "ok"
                assert response.values["x"] == 0.36787944117144233
            finally:
                await stack.stop()
        run_async(main())

    def test_no_provider_remote_error(self):
        async def main():
            stack = await start_stack(make_config())
            try:
                connection = stack.connect_dt("DT_1")
                with pytest.raises(RemoteError, match="no-provider"):
                    await connection.request_batch("Chess", ode_batch_req(),
                                                   timeout_ms=2000)
            finally:
                await stack.stop()
        run_async(main())

    def test_client_timeout_when_agent_down(self):
        async def main():
            stack = await start_stack(make_config())
            agent = await stack.add_ode_agent()
            await asyncio.sleep(0.02)
            # Wedge the agent: requests are routed to it but never answered.
            agent._serve_task.cancel()
            try:
                connection = stack.connect_dt("DT_1")
                loop = asyncio.get_running_loop()
                start = loop.time()
                with pytest.raises(ClientTimeout):
                    await connection.request_batch("ode-decay", ode_batch_req(),
                                                   timeout_ms=100)
                elapsed = loop.time() - start
                assert 0.08 < elapsed < 1.0
            finally:
                await stack.stop()
        run_async(main())

    def test_mode_validation(self):
        async def main():
            stack = await ode_stack()
            try:
                connection = stack.connect_dt("DT_1")
                with pytest.raises(ClientValidationError):
                    await connection.request_batch("ode-decay", ode_stream_req())
            finally:
                await stack.stop()
        run_async(main())


class ShuffleShim:
    """Delivery-hook shim permuting stream_data within fixed windows and
    optionally duplicating a fraction of messages."""

    def __init__(self, window: int, seed: int = 0, duplicate_rate: float = 0.0):
        self.window = window
        self.rng = random.Random(seed)
        self.duplicate_rate = duplicate_rate
        self.pending: list[ev.Envelope] = []
        self.duplicates_injected = 0

    def __call__(self, env: ev.Envelope):
        if env.header.kind != ev.STREAM_DATA:
            out = self._flush()
            out.append(env)
            return out
        self.pending.append(env)
        if self.duplicate_rate and self.rng.random() < self.duplicate_rate:
            self.pending.append(env)
            self.duplicates_injected += 1
        if len(self.pending) >= self.window:
            return self._flush()
        return []

    def _flush(self):
        batch = self.pending
        self.pending = []
        self.rng.shuffle(batch)
        return batch


class TestStream:
    def test_ordered_stream_end_to_end(self):
        async def main():
            stack = await ode_stack()
            try:
                connection = stack.connect_dt("DT_1")
                handle = connection.open_stream("ode-decay", ode_stream_req(),
                                                timeout_ms=5000)
                payloads = [p async for p in handle]
                assert len(payloads) == 10
                assert handle.status == "ended"
                times = [p["values"]["t"] for p in payloads]
                assert times == sorted(times)
            finally:
                await stack.stop()
        run_async(main())

    def test_shuffled_delivery_still_ordered(self):
        async def main():
            stack = await ode_stack()
            try:
                for window in (3, 10):
                    connection = stack.connect_dt("DT_1")
                    connection.delivery_hook = ShuffleShim(window, seed=window)
                    handle = connection.open_stream(
                        "ode-decay", ode_stream_req(period_ms=1, dt=0.02, horizon=1.0),
                        timeout_ms=5000)
                    seqs = []
                    count = 0
                    async for _payload in handle:
                        count += 1
                    assert count == 50
                    assert handle.status == "ended"
                    assert handle.buffer.next_expected == 52  # 50 data + end
            finally:
                await stack.stop()
        run_async(main())

    def test_duplicates_all_dropped(self):
        async def main():
            stack = await ode_stack()
            try:
                connection = stack.connect_dt("DT_1")
                shim = ShuffleShim(window=5, seed=3, duplicate_rate=0.3)
                connection.delivery_hook = shim
                handle = connection.open_stream(
                    "ode-decay", ode_stream_req(period_ms=1, dt=0.02, horizon=1.0),
                    timeout_ms=5000)
                count = 0
                async for _payload in handle:
                    count += 1
                assert count == 50
                assert handle.buffer.duplicates_dropped == shim.duplicates_injected
                assert shim.duplicates_injected > 0
            finally:
                await stack.stop()
        run_async(main())

    def test_mid_stream_error_still_ends_cleanly(self):
        async def main():
            stack = await start_stack(make_config())
            agent = await stack.add_ode_agent()

            def faulty(req):
                def gen():
                    yield {"t": 1.0, "x": 1.0}
                    yield {"t": 2.0, "x": 0.5}
                    raise RuntimeError("sensor glitch")
                return gen()

            agent.register_stepper("faulty", faulty)
            await asyncio.sleep(0.02)
            try:
                connection = stack.connect_dt("DT_1")
                request = ev.SimulationRequest(
                    model="faulty", outputs=["t", "x"], mode="streaming",
                    stream_period_ms=5, inputs={"x0": 1.0})
                handle = connection.open_stream("ode-decay", request, timeout_ms=2000)
                received = [p async for p in handle]
                # The error envelope precedes a clean stream_end: the client
                # observes both samples, a recorded error, and a normal end.
                assert len(received) == 2
                assert handle.status == "ended"
                assert "sensor glitch" in handle.error_detail
                assert not stack.bridge.routing
                assert stack.bridge.metrics.dropped_unroutable == 0
            finally:
                await stack.stop()
        run_async(main())

    def test_stalled_stream_times_out(self):
        async def main():
            stack = await start_stack(make_config())
            agent = await stack.add_ode_agent()
            await asyncio.sleep(0.02)
            try:
                connection = stack.connect_dt("DT_1")
                handle = connection.open_stream(
                    "ode-decay", ode_stream_req(period_ms=5, dt=0.001, horizon=1.0),
                    timeout_ms=300)
                received = []
                async for payload in handle:
                    received.append(payload)
                    if len(received) == 1:
                        # Kill the producer without a stream_end: the stream
                        # goes silent and the inactivity timeout must fire.
                        agent.active_streams[handle.request_id].task.cancel()
                assert handle.status == "timeout"
                assert len(received) >= 1
            finally:
                await stack.stop()
        run_async(main())


class TestPtSession:
    def test_send_command_to_unmapped_entity_fails_locally(self):
        async def main():
            stack = await start_stack(make_config())
            try:
                connection = stack.connect_dt("DT_1")
                session = await connection.pt_session(
                    ["factory/photocell/1/passage"], {"hold": "factory/hold/cmd"})
                with pytest.raises(ClientValidationError, match="ghost"):
                    session.send_command("ghost", "x", 1)
            finally:
                await stack.stop()
        run_async(main())
