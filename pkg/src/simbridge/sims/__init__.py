"""Reference simulators: analytic exponential decay and a deterministic
discrete-event microfactory."""

from .ode import OdeModel, ode_solve, ode_step_stream
from .factory import FactoryModel, SimEvent, Factory, factory_run

__all__ = [
    "OdeModel", "ode_solve", "ode_step_stream",
    "FactoryModel", "SimEvent", "Factory", "factory_run",
]
