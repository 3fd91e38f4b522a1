"""In-process deployment harness: builds a bridge with inproc adapters, native
agents and DT connections in one event loop. Used by the benchmark CLI, the
demo CLIs and the test suite; TCP adapters can be mixed in for out-of-process
peers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import envelope as ev
from .adapters import Adapter
from .agent import AgentRuntime
from .bridge import Bridge, SimulationTypeDescriptor
from .client import Connection
from .config import AdapterSpec, BridgeConfig, RateLimit
from .sims import factory as factory_sim
from .sims import ode as ode_sim
from .sims.pt import factory_pt_launcher
from .transform import TransformRule

NORTH_NAME = "north-main"
SOUTH_NAME = "south-main"

ECHO_SIM_TYPE = "echo"
ECHO_MODEL = "echo"


def make_config(
    north_flavor: str = "pubsub",
    south_flavor: str = "queue",
    north_bind: str = "inproc",
    south_bind: str = "inproc",
    dts: Iterable[str] = ("DT_1",),
    agents: Iterable[str] = ("Agent-A",),
    default_timeout_ms: int = 60_000,
    rate_capacity: int = 1_000_000,
    rate_refill: int = 1_000_000,
    transforms: Mapping[str, TransformRule] | None = None,
    pt_mappings=(),
) -> BridgeConfig:
    """A one-north/one-south config with a wide-open rate limit for harness use."""
    config = BridgeConfig(
        north_adapters=(AdapterSpec(name=NORTH_NAME, flavor=north_flavor, bind=north_bind),),
        south_adapters=(AdapterSpec(name=SOUTH_NAME, flavor=south_flavor, bind=south_bind),),
        whitelist_dts=frozenset(dts),
        whitelist_agents=frozenset(agents),
        default_timeout_ms=default_timeout_ms,
        rate_limit=RateLimit(capacity=rate_capacity, refill_per_second=rate_refill),
        pt_mappings=tuple(pt_mappings),
        transforms=dict(transforms or {}),
    )
    config.validate()
    return config


def ode_descriptor() -> SimulationTypeDescriptor:
    return SimulationTypeDescriptor(
        name=ode_sim.SIM_TYPE,
        modes=frozenset({ev.MODE_BATCH, ev.MODE_STREAMING}),
        models=(ode_sim.MODEL_NAME,),
        input_schema={"x0": "value", "t": "s"},
        output_schema={"x": "value"},
    )


def echo_descriptor() -> SimulationTypeDescriptor:
    return SimulationTypeDescriptor(
        name=ECHO_SIM_TYPE,
        modes=frozenset({ev.MODE_BATCH}),
        models=(ECHO_MODEL,),
    )


def factory_descriptor() -> SimulationTypeDescriptor:
    return SimulationTypeDescriptor(
        name=factory_sim.SIM_TYPE,
        modes=frozenset({ev.MODE_STREAMING}),
        models=(factory_sim.SIM_TYPE,),
        pt_capable=True,
    )


def echo_model(params: Mapping[str, float], inputs: Mapping[str, float]) -> dict[str, float]:
    return dict(inputs)


@dataclass
class Stack:
    """One bridge plus its attached agents and DT connections."""

    bridge: Bridge
    agents: list[AgentRuntime] = field(default_factory=list)
    connections: list[Connection] = field(default_factory=list)

    @property
    def north(self) -> Adapter:
        return next(iter(self.bridge.north.values()))

    @property
    def south(self) -> Adapter:
        return next(iter(self.bridge.south.values()))

    async def start(self) -> None:
        await self.bridge.start()

    async def stop(self) -> None:
        for connection in self.connections:
            await connection.close()
        for agent in self.agents:
            await agent.stop()
        await self.bridge.stop()

    def connect_dt(self, identity: str = "DT_1") -> Connection:
        connection = Connection.inproc(self.north, identity)
        self.connections.append(connection)
        return connection

    async def add_agent(self, agent_id: str,
                        descriptors: Iterable[SimulationTypeDescriptor]) -> AgentRuntime:
        runtime = AgentRuntime(
            agent_id=agent_id,
            client=self.south.connect_inproc(agent_id),
            descriptors=tuple(descriptors),
        )
        self.agents.append(runtime)
        await runtime.start()
        return runtime

    async def add_ode_agent(self, agent_id: str = "Agent-A") -> AgentRuntime:
        runtime = await self.add_agent(agent_id, [ode_descriptor()])
        runtime.register_model(ode_sim.MODEL_NAME, ode_sim.batch_model)
        runtime.register_stepper(ode_sim.MODEL_NAME, ode_sim.stream_factory)
        return runtime

    async def add_echo_agent(self, agent_id: str = "Agent-A") -> AgentRuntime:
        runtime = await self.add_agent(agent_id, [echo_descriptor()])
        runtime.register_model(ECHO_MODEL, echo_model)
        return runtime

    async def add_factory_agent(self, agent_id: str = "Agent-A") -> AgentRuntime:
        runtime = await self.add_agent(agent_id, [factory_descriptor()])
        runtime.register_pt(factory_sim.SIM_TYPE, factory_pt_launcher)
        return runtime


async def start_stack(config: BridgeConfig | None = None, **config_kwargs) -> Stack:
    stack = Stack(bridge=Bridge(config or make_config(**config_kwargs)))
    await stack.start()
    return stack
