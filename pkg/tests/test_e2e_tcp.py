"""End-to-end flows over real TCP adapters: the DT client connecting through
a TCP north adapter, and agent reconnect with re-advertisement after the
bridge restarts."""

from __future__ import annotations

import asyncio

from simbridge import envelope as ev
from simbridge.adapters import TcpClient
from simbridge.agent import AgentRuntime
from simbridge.bridge import Bridge
from simbridge.client import Connection
from simbridge.config import AdapterSpec, BridgeConfig, RateLimit
from simbridge.harness import make_config, ode_descriptor, start_stack
from simbridge.sims import ode as ode_sim
from conftest import run_async


def ode_request(t=1.0):
    return ev.SimulationRequest(model=ode_sim.MODEL_NAME, outputs=["x"],
                                model_params={"k": 1.0}, inputs={"x0": 1.0, "t": t})


class TestTcpNorth:
    def test_batch_and_stream_through_tcp_north(self):
        async def main():
            stack = await start_stack(make_config(north_bind="127.0.0.1:0"))
            await stack.add_ode_agent()
            await asyncio.sleep(0.05)
            try:
                port = stack.north.bound_port
                connection = await Connection.tcp("127.0.0.1", port, "DT_1")
                response = await connection.request_batch("ode-decay", ode_request(),
                                                          timeout_ms=5000)
                assert response.values["x"] == 0.36787944117144233

                stream_req = ev.SimulationRequest(
                    model=ode_sim.MODEL_NAME, outputs=["t", "x"], mode="streaming",
                    stream_period_ms=5,
                    model_params={"k": 1.0, "dt": 0.25, "horizon": 1.0},
                    inputs={"x0": 1.0})
                handle = connection.open_stream("ode-decay", stream_req,
                                                timeout_ms=5000)
                samples = [p async for p in handle]
                assert len(samples) == 4
                assert handle.status == "ended"
                await connection.close()
            finally:
                await stack.stop()
        run_async(main())


def tcp_south_config(port: int = 0) -> BridgeConfig:
    return BridgeConfig(
        north_adapters=(AdapterSpec(name="north-main", flavor="pubsub", bind="inproc"),),
        south_adapters=(AdapterSpec(name="south-main", flavor="queue",
                                    bind=f"127.0.0.1:{port}"),),
        whitelist_dts=frozenset({"DT_1"}),
        whitelist_agents=frozenset({"Agent-A"}),
        rate_limit=RateLimit(capacity=100_000, refill_per_second=100_000),
    )


class TestAgentReconnect:
    def test_reconnect_and_readvertise_after_bridge_restart(self):
        async def main():
            bridge = Bridge(tcp_south_config())
            await bridge.start()
            port = bridge.south["south-main"].bound_port

            async def connect() -> TcpClient:
                while True:
                    try:
                        return await TcpClient.connect("127.0.0.1", port, "Agent-A")
                    except OSError:
                        await asyncio.sleep(0.05)

            runtime = AgentRuntime(
                agent_id="Agent-A",
                client=await connect(),
                descriptors=(ode_descriptor(),),
                reconnect=connect,
            )
            runtime.register_model(ode_sim.MODEL_NAME, ode_sim.batch_model)
            await runtime.start()
            try:
                await asyncio.sleep(0.1)
                assert bridge.providers.get("ode-decay") == ["Agent-A"]
                dt = Connection.inproc(bridge.north["north-main"], "DT_1")
                first = await dt.request_batch("ode-decay", ode_request(),
                                               timeout_ms=5000)
                assert first.status == "ok"
                await dt.close()

                # Bridge restart on the same port drops the agent's socket;
                # the runtime must reconnect and advertise again by itself.
                await bridge.stop()
                bridge = Bridge(tcp_south_config(port))
                await bridge.start()
                deadline = asyncio.get_running_loop().time() + 10.0
                while asyncio.get_running_loop().time() < deadline:
                    if bridge.providers.get("ode-decay"):
                        break
                    await asyncio.sleep(0.05)
                assert bridge.providers.get("ode-decay") == ["Agent-A"]

                dt = Connection.inproc(bridge.north["north-main"], "DT_1")
                second = await dt.request_batch("ode-decay", ode_request(t=2.0),
                                                timeout_ms=5000)
                assert second.status == "ok"
                assert second.values["x"] == 0.1353352832366127
                await dt.close()
            finally:
                await runtime.stop()
                await bridge.stop()
        run_async(main())
