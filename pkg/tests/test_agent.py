"""Agent SDK tests: batch handling, streaming seq discipline, cancellation,
overhead accounting and the file-exchange strategy."""

from __future__ import annotations

import asyncio
import math

import pytest

from simbridge import envelope as ev
from simbridge.agent import (
    AgentConfigError, AgentRuntime, file_exchange_batch, handle_batch,
)
from simbridge.harness import make_config, ode_descriptor, start_stack
from simbridge.sims import ode as ode_sim
from conftest import run_async


def batch_req(**kwargs):
    defaults = dict(model="exp-decay", outputs=["x"],
                    model_params={"k": 1.0}, inputs={"x0": 1.0, "t": 1.0})
    defaults.update(kwargs)
    return ev.SimulationRequest(**defaults)


class CollectingClient:
    """Stand-in adapter client that records sent envelopes."""

    def __init__(self):
        self.sent: list[ev.Envelope] = []
        self.refuse_next = 0

    def send(self, env: ev.Envelope) -> bool:
        if self.refuse_next > 0:
            self.refuse_next -= 1
            return False
        self.sent.append(env)
        return True

    async def recv(self) -> ev.Envelope:
        await asyncio.sleep(3600)

    async def subscribe(self, channel):
        pass

    async def unsubscribe(self, channel):
        pass

    async def close(self):
        pass

    @property
    def closed(self):
        return False


def make_runtime(client=None):
    return AgentRuntime(agent_id="Agent-A", client=client or CollectingClient(),
                        descriptors=(ode_descriptor(),))


class TestDescriptors:
    def test_empty_descriptor_set_rejected(self):
        with pytest.raises(AgentConfigError):
            AgentRuntime(agent_id="A", client=CollectingClient(), descriptors=())

    def test_advertise_one_envelope_per_descriptor(self):
        async def main():
            client = CollectingClient()
            runtime = make_runtime(client)
            await runtime.advertise()
            assert len(client.sent) == 1
            env = client.sent[0]
            assert env.header.kind == ev.ADVERTISE
            assert env.header.request_id == ""
            assert env.payload["name"] == "ode-decay"
        run_async(main())


class TestHandleBatch:
    def test_analytic_decay(self):
        response = handle_batch(None, batch_req(), ode_sim.batch_model)
        assert response.status == "ok"
        assert response.values == {"x": 0.36787944117144233}
        assert response.final is True

    def test_exactly_requested_outputs(self):
        def chatty(params, inputs):
            return {"x": 1.0, "extra": 2.0, "noise": 3.0}
        response = handle_batch(None, batch_req(), chatty)
        assert set(response.values) == {"x"}

    def test_missing_output_is_error(self):
        def silent(params, inputs):
            return {}
        response = handle_batch(None, batch_req(), silent)
        assert response.status == "error"
        assert "missing output: x" in response.error_detail

    def test_missing_input_named(self):
        response = handle_batch(None, batch_req(inputs={"x0": 1.0}),
                                ode_sim.batch_model, required_inputs=("x0", "t"))
        assert response.status == "error"
        assert "missing input: t" in response.error_detail

    def test_model_exception_becomes_error(self):
        def boom(params, inputs):
            raise RuntimeError("solver diverged")
        response = handle_batch(None, batch_req(), boom)
        assert response.status == "error"
        assert "solver diverged" in response.error_detail

    def test_non_batch_mode_rejected(self):
        req = batch_req(mode="streaming", stream_period_ms=10)
        response = handle_batch(None, req, ode_sim.batch_model)
        assert response.status == "error"


class TestServeBatch:
    def test_unknown_model_and_agent_survives(self):
        async def main():
            stack = await start_stack(make_config())
            await stack.add_ode_agent()
            await asyncio.sleep(0.02)
            try:
                connection = stack.connect_dt("DT_1")
                response = await connection.request_batch(
                    "ode-decay", batch_req(model="warp"), timeout_ms=2000)
                assert response.status == "error"
                assert "unknown model" in response.error_detail
                good = await connection.request_batch("ode-decay", batch_req(),
                                                      timeout_ms=2000)
                assert good.status == "ok"
            finally:
                await stack.stop()
        run_async(main())

    def test_raising_model_keeps_agent_alive(self):
        async def main():
            stack = await start_stack(make_config())
            agent = await stack.add_ode_agent()

            def explode(params, inputs):
                raise ValueError("bad k")

            agent.register_model("explode", explode)
            await asyncio.sleep(0.02)
            try:
                connection = stack.connect_dt("DT_1")
                bad = await connection.request_batch(
                    "ode-decay", batch_req(model="explode", inputs={"x0": 1.0, "t": 1.0}),
                    timeout_ms=2000)
                assert bad.status == "error" and "bad k" in bad.error_detail
                good = await connection.request_batch("ode-decay", batch_req(),
                                                      timeout_ms=2000)
                assert good.status == "ok"
            finally:
                await stack.stop()
        run_async(main())


class TestRunStream:
    async def _stream(self, steps=10, period_ms=5, cancel_after=None, refuse_after=None,
                      explode_at=None):
        client = CollectingClient()
        runtime = make_runtime(client)

        def stepper():
            for i in range(1, steps + 1):
                if explode_at is not None and i == explode_at:
                    raise RuntimeError("stepper broke")
                yield {"t": float(i), "x": 1.0 / i}

        req = ev.SimulationRequest(model="exp-decay", outputs=["t", "x"],
                                   mode="streaming", stream_period_ms=period_ms)
        req_env = ev.Envelope(
            header=ev.make_header(kind=ev.STREAM_REQUEST, source_id="bridge",
                                  request_id="r1", sim_type="ode-decay"),
            payload=req.to_payload(),
        )
        from simbridge.agent import _StreamState
        state = _StreamState(request_id="r1", period_ms=period_ms)
        runtime.active_streams["r1"] = state

        async def maybe_interfere():
            if cancel_after is not None:
                while state.next_seq <= cancel_after:
                    await asyncio.sleep(0.001)
                runtime.cancel_stream("r1")
            if refuse_after is not None:
                while state.next_seq <= refuse_after:
                    await asyncio.sleep(0.001)
                client.refuse_next = 2  # transient transport backpressure

        interference = asyncio.get_running_loop().create_task(maybe_interfere())
        await runtime.run_stream(req_env, req, stepper(), state)
        interference.cancel()
        return client, runtime, state

    def test_seq_one_to_n_then_end(self):
        async def main():
            client, runtime, _ = await self._stream(steps=10)
            kinds = [e.header.kind for e in client.sent]
            assert kinds == [ev.STREAM_DATA] * 10 + [ev.STREAM_END]
            assert [e.header.seq for e in client.sent] == list(range(1, 12))
            assert client.sent[-1].payload["dropped"] == 0
            assert runtime.overheads["r1"] and len(runtime.overheads["r1"]) == 10
        run_async(main())

    def test_cancel_mid_stream(self):
        async def main():
            client, _, _ = await self._stream(steps=1000, cancel_after=3)
            end = client.sent[-1]
            assert end.header.kind == ev.STREAM_END
            data_seqs = [e.header.seq for e in client.sent if e.header.kind == ev.STREAM_DATA]
            assert len(data_seqs) < 1000
            assert end.header.seq == data_seqs[-1] + 1
        run_async(main())

    def test_stepper_exception_sends_error_then_end(self):
        async def main():
            client, _, _ = await self._stream(steps=10, explode_at=4)
            kinds = [e.header.kind for e in client.sent]
            assert kinds == [ev.STREAM_DATA] * 3 + [ev.ERROR, ev.STREAM_END]
            assert "stepper broke" in client.sent[3].payload["detail"]
        run_async(main())

    def test_backpressure_drops_counted_without_gaps(self):
        async def main():
            client, _, state = await self._stream(steps=8, refuse_after=4)
            end = client.sent[-1]
            assert end.header.kind == ev.STREAM_END
            assert end.payload["dropped"] == 2
            # seq still advanced past the drops: no renumbering.
            assert end.header.seq == 9
        run_async(main())

    def test_overhead_samples_match_emissions(self):
        async def main():
            client, runtime, _ = await self._stream(steps=7)
            emitted = sum(1 for e in client.sent if e.header.kind == ev.STREAM_DATA)
            assert len(runtime.overheads["r1"]) == emitted
        run_async(main())


class TestFileExchange:
    def test_well_formed_response(self, tmp_path):
        in_dir = tmp_path / "in"
        out_dir = tmp_path / "out"
        in_dir.mkdir()
        out_dir.mkdir()
        response = file_exchange_batch(None, in_dir, out_dir, batch_req(),
                                       model_fn=ode_sim.batch_model)
        assert response.status == "ok"
        assert response.values["x"] == pytest.approx(math.exp(-1.0))

    def test_timeout_when_no_file(self, tmp_path):
        in_dir = tmp_path / "in"
        out_dir = tmp_path / "out"
        in_dir.mkdir()
        out_dir.mkdir()

        def never(params, inputs):
            import time
            time.sleep(2)  # still computing when the poll gives up
            return {}

        response = file_exchange_batch(None, in_dir, out_dir, batch_req(),
                                       model_fn=never, timeout_s=0.3)
        assert response.status == "error"
        assert "timeout" in response.error_detail

    def test_malformed_output_file(self, tmp_path):
        import threading
        import time
        in_dir = tmp_path / "in"
        out_dir = tmp_path / "out"
        in_dir.mkdir()
        out_dir.mkdir()

        def stuck(params, inputs):
            time.sleep(5)
            return {}

        def broken_simulator():
            time.sleep(0.05)
            (out_dir / "response.json").write_text("{not json", encoding="utf-8")

        threading.Thread(target=broken_simulator, daemon=True).start()
        response = file_exchange_batch(None, in_dir, out_dir, batch_req(),
                                       model_fn=stuck, timeout_s=2.0)
        assert response.status == "error"
        assert "malformed" in response.error_detail

    def test_file_strategy_slower_than_direct(self, tmp_path):
        import time
        in_dir = tmp_path / "in"
        out_dir = tmp_path / "out"
        in_dir.mkdir()
        out_dir.mkdir()
        start = time.perf_counter()
        for _ in range(3):
            handle_batch(None, batch_req(), ode_sim.batch_model)
        direct = time.perf_counter() - start
        start = time.perf_counter()
        for _ in range(3):
            file_exchange_batch(None, in_dir, out_dir, batch_req(),
                                model_fn=ode_sim.batch_model)
        via_files = time.perf_counter() - start
        assert via_files > direct
