"""Exponential-decay simulator: x(t) = x0 * exp(-k * t), solved in closed form.

Serves batch requests (model "exp-decay") and streaming requests (one sample
per step) through the agent SDK; the closed form doubles as its own oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

from .. import envelope as ev

SIM_TYPE = "ode-decay"
MODEL_NAME = "exp-decay"

# Guards ceil() against float fuzz in horizon/dt (e.g. 1.0 / (1/3)).
_CEIL_EPS = 1e-9


class OdeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class OdeModel:
    k: float
    x0: float
    dt: float
    horizon: float

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("decay rate k must be >= 0")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.dt > self.horizon:
            raise ValueError("dt must not exceed horizon")


def ode_solve(model: OdeModel, t: float) -> float:
    """Closed-form value at time t, valid on [0, horizon]."""
    if not 0 <= t <= model.horizon:
        raise OdeRangeError(f"t={t} outside [0, {model.horizon}]")
    return model.x0 * math.exp(-model.k * t)


def sample_count(model: OdeModel) -> int:
    return math.ceil(model.horizon / model.dt - _CEIL_EPS)


def ode_step_stream(model: OdeModel) -> Iterator[tuple[float, float]]:
    """Yield (t_i, x_i) at t_i = i*dt for i = 1..ceil(horizon/dt).

    Each value comes from the same closed form as ode_solve, so agreement is
    exact up to the t_i = i*dt representation.
    """
    for i in range(1, sample_count(model) + 1):
        t = i * model.dt
        yield t, model.x0 * math.exp(-model.k * t)


# -- agent SDK glue ------------------------------------------------------------


def batch_model(params: Mapping[str, float], inputs: Mapping[str, float]) -> dict[str, float]:
    k = float(params.get("k", 1.0))
    if k < 0:
        raise ValueError("decay rate k must be >= 0")
    t = float(inputs["t"])
    if t < 0:
        raise ValueError("t must be >= 0")
    return {"x": float(inputs["x0"]) * math.exp(-k * t)}


def stream_factory(req: ev.SimulationRequest) -> Iterator[dict[str, float]]:
    model = OdeModel(
        k=float(req.model_params.get("k", 1.0)),
        x0=float(req.inputs["x0"]),
        dt=float(req.model_params.get("dt", 0.1)),
        horizon=float(req.model_params.get("horizon", 1.0)),
    )

    def run() -> Iterator[dict[str, float]]:
        for t, x in ode_step_stream(model):
            yield {"t": t, "x": x}

    return run()
