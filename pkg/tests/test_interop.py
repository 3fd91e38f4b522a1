"""Cross-language interop: the out-of-process TypeScript agent serves the same
logistic-map model as a native agent through one bridge, and the two codecs
agree byte-for-byte on a shared envelope corpus.

Requires node (20+); the external agent is built on first use.
"""

from __future__ import annotations

import asyncio
import random
import shutil
import subprocess
from pathlib import Path

import pytest

from simbridge import envelope as ev
from simbridge.adapters import Adapter
from simbridge.agent import AgentRuntime
from simbridge.bridge import Bridge, SimulationTypeDescriptor
from simbridge.config import AdapterSpec, BridgeConfig, RateLimit
from simbridge.client import Connection
from conftest import random_envelope, run_async

AGENT_DIR = Path(__file__).resolve().parents[1] / "external-agent"
AGENT_JS = AGENT_DIR / "dist" / "agent.js"
CORPUS_JS = AGENT_DIR / "dist" / "corpus.js"

TS_ST = "logistic-map"
PY_ST = "logistic-map-py"
MODEL = "logistic-map"

node_missing = shutil.which("node") is None
pytestmark = pytest.mark.skipif(node_missing, reason="node runtime not available")


def ensure_built() -> None:
    if AGENT_JS.exists() and CORPUS_JS.exists():
        return
    if not (AGENT_DIR / "node_modules").exists():
        subprocess.run(["npm", "install", "--no-audit", "--no-fund"],
                       cwd=AGENT_DIR, check=True, capture_output=True)
    subprocess.run(["npm", "run", "build"], cwd=AGENT_DIR, check=True,
                   capture_output=True)


def logistic_batch(params, inputs):
    r = float(params.get("r", 3.7))
    n = int(params.get("n", 1))
    x = float(inputs["x0"])
    for _ in range(n):
        x = r * x * (1 - x)
    return {"x": x}


def logistic_stream_factory(req: ev.SimulationRequest):
    r = float(req.model_params.get("r", 3.7))
    n = int(req.model_params.get("n", 10))

    def gen():
        x = float(req.inputs["x0"])
        for i in range(1, n + 1):
            x = r * x * (1 - x)
            yield {"x": x, "n": float(i)}

    return gen()


def interop_config() -> BridgeConfig:
    return BridgeConfig(
        north_adapters=(AdapterSpec(name="north-main", flavor="pubsub", bind="inproc"),),
        south_adapters=(
            AdapterSpec(name="south-main", flavor="queue", bind="inproc"),
            AdapterSpec(name="south-tcp", flavor="queue", bind="127.0.0.1:0"),
        ),
        whitelist_dts=frozenset({"DT_1"}),
        whitelist_agents=frozenset({"Agent-PY", "Agent-TS"}),
        rate_limit=RateLimit(capacity=1_000_000, refill_per_second=1_000_000),
    )


async def wait_for_provider(bridge: Bridge, sim_type: str, timeout_s: float = 20.0) -> None:
    deadline = asyncio.get_running_loop().time() + timeout_s
    while asyncio.get_running_loop().time() < deadline:
        if bridge.providers.get(sim_type):
            return
        await asyncio.sleep(0.05)
    raise AssertionError(f"no provider for {sim_type} within {timeout_s}s")


class TestCrossLanguageInterop:
    def test_secondary_interop_criterion(self):
        ensure_built()

        async def main():
            bridge = Bridge(interop_config())
            await bridge.start()
            process = None
            runtime = None
            connection = None
            try:
                south_tcp: Adapter = bridge.south["south-tcp"]
                port = south_tcp.bound_port
                process = subprocess.Popen(
                    ["node", str(AGENT_JS), "--bridge", f"127.0.0.1:{port}",
                     "--agent-id", "Agent-TS"],
                    stdout=subprocess.PIPE, stderr=subprocess.PIPE)

                descriptor = SimulationTypeDescriptor(
                    name=PY_ST, modes=frozenset({"batch", "streaming"}),
                    models=(MODEL,), input_schema={"x0": "value"},
                    output_schema={"x": "value"})
                runtime = AgentRuntime(
                    agent_id="Agent-PY",
                    client=bridge.south["south-main"].connect_inproc("Agent-PY"),
                    descriptors=(descriptor,))
                runtime.register_model(MODEL, logistic_batch)
                runtime.register_stepper(MODEL, logistic_stream_factory)
                await runtime.start()

                await wait_for_provider(bridge, TS_ST)
                await wait_for_provider(bridge, PY_ST)

                connection = Connection.inproc(bridge.north["north-main"], "DT_1")

                # 100 batch requests: black-box value equality, bit for bit.
                rng = random.Random(20260809)
                for i in range(100):
                    r = rng.uniform(0.5, 3.99)
                    x0 = rng.uniform(0.01, 0.99)
                    n = rng.randint(1, 50)
                    request = ev.SimulationRequest(
                        model=MODEL, outputs=["x"], model_params={"r": r, "n": n},
                        inputs={"x0": x0})
                    ts = await connection.request_batch(TS_ST, request, timeout_ms=15_000)
                    py = await connection.request_batch(PY_ST, request, timeout_ms=15_000)
                    assert ts.status == "ok" and py.status == "ok"
                    assert ts.values["x"] == py.values["x"], \
                        f"case {i}: ts={ts.values['x']!r} py={py.values['x']!r}"

                # Known analytic anchors through the external agent.
                fixed = await connection.request_batch(TS_ST, ev.SimulationRequest(
                    model=MODEL, outputs=["x"], model_params={"r": 2.0, "n": 37},
                    inputs={"x0": 0.5}), timeout_ms=15_000)
                assert fixed.values["x"] == 0.5
                one = await connection.request_batch(TS_ST, ev.SimulationRequest(
                    model=MODEL, outputs=["x"], model_params={"r": 2.5, "n": 1},
                    inputs={"x0": 0.2}), timeout_ms=15_000)
                assert one.values["x"] == 0.4

                # 10 streaming requests, sequences compared value-exact.
                for i in range(10):
                    r = rng.uniform(0.5, 3.99)
                    x0 = rng.uniform(0.01, 0.99)
                    request = ev.SimulationRequest(
                        model=MODEL, outputs=["x"], mode="streaming",
                        stream_period_ms=5, model_params={"r": r, "n": 10},
                        inputs={"x0": x0}, timeout_ms=60_000)
                    ts_handle = connection.open_stream(TS_ST, request, timeout_ms=15_000)
                    ts_values = [p["values"]["x"] async for p in ts_handle]
                    py_handle = connection.open_stream(PY_ST, request, timeout_ms=15_000)
                    py_values = [p["values"]["x"] async for p in py_handle]
                    assert ts_handle.status == "ended"
                    assert py_handle.status == "ended"
                    assert len(ts_values) == 10
                    assert ts_values == py_values, f"stream case {i} diverged"
                return True
            finally:
                if connection is not None:
                    await connection.close()
                if runtime is not None:
                    await runtime.stop()
                if process is not None:
                    process.terminate()
                    process.wait(timeout=5)
                await bridge.stop()

        assert run_async(main())
        print("\nACCEPTANCE [cross-language-interop: 100 batch + 10 streaming value-exact"
              " vs native agent] PASS")

    def test_shared_corpus_decodes_identically(self):
        ensure_built()
        # Python -> node: node must re-encode our canonical bytes unchanged.
        rng = random.Random(424242)
        py_lines = [ev.encode(random_envelope(rng)) for _ in range(200)]
        result = subprocess.run(
            ["node", str(CORPUS_JS), "roundtrip"],
            input=b"\n".join(py_lines) + b"\n",
            capture_output=True, check=True)
        node_lines = result.stdout.splitlines()
        assert len(node_lines) == len(py_lines)
        for i, (ours, theirs) in enumerate(zip(py_lines, node_lines)):
            assert ours == theirs, f"line {i}: {ours!r} != {theirs!r}"

        # node -> Python: their generator's output must decode and re-encode
        # to the identical bytes here.
        result = subprocess.run(
            ["node", str(CORPUS_JS), "generate", "200", "7"],
            capture_output=True, check=True)
        ts_lines = result.stdout.splitlines()
        assert len(ts_lines) == 200
        for i, line in enumerate(ts_lines):
            env = ev.decode(line)
            assert ev.encode(env) == line, f"line {i} re-encodes differently"
        print("\nACCEPTANCE [cross-language-interop: shared corpus of 400 envelopes "
              "decodes identically in both codecs] PASS")
