"""Reference agent process: serves the exponential-decay models (batch and
streaming) and the microfactory PT simulation over a TCP south adapter.

    python -m simbridge.demo_agent --bridge 127.0.0.1:7401 --agent-id Agent-A
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from typing import Sequence

from .adapters import TcpClient
from .agent import AgentRuntime
from .harness import factory_descriptor, ode_descriptor
from .sims import factory as factory_sim
from .sims import ode as ode_sim
from .sims.pt import factory_pt_launcher
from .slog import component_logger, configure_logging, fmt_event

log = component_logger("demo-agent")


async def run(host: str, port: int, agent_id: str) -> None:
    async def connect() -> TcpClient:
        while True:
            try:
                return await TcpClient.connect(host, port, agent_id)
            except OSError as exc:
                log.warning(fmt_event("connect_failed", error=exc))
                await asyncio.sleep(1.0)

    runtime = AgentRuntime(
        agent_id=agent_id,
        client=await connect(),
        descriptors=(ode_descriptor(), factory_descriptor()),
        reconnect=connect,
    )
    runtime.register_model(ode_sim.MODEL_NAME, ode_sim.batch_model)
    runtime.register_stepper(ode_sim.MODEL_NAME, ode_sim.stream_factory)
    runtime.register_pt(factory_sim.SIM_TYPE, factory_pt_launcher)
    await runtime.start()
    log.info(fmt_event("agent_up", agent=agent_id, bridge=f"{host}:{port}"))
    try:
        await asyncio.Event().wait()
    finally:
        await runtime.stop()


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--bridge", default="127.0.0.1:7401",
                        help="south adapter host:port")
    parser.add_argument("--agent-id", default="Agent-A")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    host, _, port = args.bridge.rpartition(":")
    try:
        asyncio.run(run(host, int(port), args.agent_id))
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
