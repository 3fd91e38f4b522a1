"""Deterministic discrete-event microfactory.

An indexed line: a part source gated by a hold block feeds a robot that places
parts on a conveyor; photocells fire as parts cross them, transfer stations
divert parts to workstations when switched, everything else reaches the sink.

Sim time is integer milliseconds and the event queue breaks ties by
(sim_time, entity_id, insertion order), so a run is a pure function of
(model, until_ms, command_feed, seed).
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

SIM_TYPE = "microfactory"

ENTITY_SOURCE = "source"
ENTITY_HOLD = "hold"
ENTITY_ROBOT = "robot"
ENTITY_CONVEYOR = "conveyor-1"
ENTITY_SINK = "sink"

STATUS_BUSY = "busy"
STATUS_IDLE = "idle"
STATUS_MOVING = "moving"


class UnknownEntityError(Exception):
    pass


@dataclass(frozen=True)
class SimEvent:
    sim_time_ms: int
    entity_id: str
    field: str
    value: Any

    def to_document(self) -> dict[str, Any]:
        return {"sim_time_ms": self.sim_time_ms, "entity_id": self.entity_id,
                "field": self.field, "value": self.value}

    def to_json_line(self) -> str:
        return json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class FactoryModel:
    source_interarrival_ms: int = 500
    hold_engaged: bool = False
    conveyor_length_m: float = 2.0
    conveyor_speed_mps: float = 1.0
    photocell_positions_m: tuple[float, ...] = (0.5, 1.0, 1.5)
    transfer_stations: tuple[tuple[float, bool], ...] = ()  # (position, switched)
    workstation_service_ms: tuple[int, ...] = ()
    robot_move_ms: int = 200
    rng_seed: int = 1

    def __post_init__(self):
        if self.source_interarrival_ms <= 0 or self.robot_move_ms <= 0:
            raise ValueError("all times must be positive")
        if self.conveyor_length_m <= 0 or self.conveyor_speed_mps <= 0:
            raise ValueError("conveyor geometry must be positive")
        for pos in self.photocell_positions_m:
            if not 0 <= pos <= self.conveyor_length_m:
                raise ValueError(f"photocell at {pos} outside [0, {self.conveyor_length_m}]")
        for pos, _ in self.transfer_stations:
            if not 0 <= pos <= self.conveyor_length_m:
                raise ValueError(f"transfer station at {pos} outside conveyor")
        for service in self.workstation_service_ms:
            if service <= 0:
                raise ValueError("workstation service times must be positive")
        if any(t[1] for t in self.transfer_stations) and not self.workstation_service_ms:
            raise ValueError("switched transfer stations require a workstation")

    def to_document(self) -> dict[str, Any]:
        return {
            "source_interarrival_ms": self.source_interarrival_ms,
            "hold_engaged": self.hold_engaged,
            "conveyor_length_m": self.conveyor_length_m,
            "conveyor_speed_mps": self.conveyor_speed_mps,
            "photocell_positions_m": list(self.photocell_positions_m),
            "transfer_stations": [list(t) for t in self.transfer_stations],
            "workstation_service_ms": list(self.workstation_service_ms),
            "robot_move_ms": self.robot_move_ms,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "FactoryModel":
        kwargs = dict(doc)
        if "photocell_positions_m" in kwargs:
            kwargs["photocell_positions_m"] = tuple(kwargs["photocell_positions_m"])
        if "transfer_stations" in kwargs:
            kwargs["transfer_stations"] = tuple(
                (float(p), bool(s)) for p, s in kwargs["transfer_stations"])
        if "workstation_service_ms" in kwargs:
            kwargs["workstation_service_ms"] = tuple(kwargs["workstation_service_ms"])
        return cls(**kwargs)


def travel_ms(position_m: float, speed_mps: float) -> int:
    """Integer-ms travel time to a conveyor position."""
    return round(position_m / speed_mps * 1000)


@dataclass
class _Part:
    part_id: int
    on_belt: bool = False
    diverted_at_m: float | None = None
    belt_entry_ms: int | None = None


class Factory:
    """Single-owner DES engine; commands arrive via inject_command between events."""

    def __init__(self, model: FactoryModel):
        self.model = model
        self._rng = random.Random(model.rng_seed)
        self._heap: list[tuple[int, str, int, Callable[[int], None]]] = []
        self._counter = 0
        self.now_ms = 0
        self.hold_engaged = model.hold_engaged
        self._hold_queue: list[_Part] = []
        self._robot_queue: list[_Part] = []
        self._robot_busy = False
        self._belt: set[int] = set()
        self._parts: dict[int, _Part] = {}
        self._switches: list[bool] = [s for _, s in model.transfer_stations]
        self._ws_busy: list[bool] = [False] * len(model.workstation_service_ms)
        self._ws_queue: list[list[_Part]] = [[] for _ in model.workstation_service_ms]
        self.created = 0
        self.sunk = 0
        self._events_out: list[SimEvent] = []
        self._schedule(self._draw_interarrival(), ENTITY_SOURCE, self._arrive)

    # -- scheduling ------------------------------------------------------------

    def _schedule(self, at_ms: int, entity_id: str, action: Callable[[int], None]) -> None:
        self._counter += 1
        heapq.heappush(self._heap, (at_ms, entity_id, self._counter, action))

    def _draw_interarrival(self) -> int:
        draw = self._rng.expovariate(1.0 / self.model.source_interarrival_ms)
        return self.now_ms + max(1, round(draw))

    def next_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def _emit(self, entity_id: str, field_name: str, value: Any) -> None:
        self._events_out.append(SimEvent(self.now_ms, entity_id, field_name, value))

    # -- commands ---------------------------------------------------------------

    def known_entities(self) -> set[str]:
        names = {ENTITY_SOURCE, ENTITY_HOLD, ENTITY_ROBOT, ENTITY_CONVEYOR, ENTITY_SINK}
        names.update(f"photocell-{i + 1}" for i in range(len(self.model.photocell_positions_m)))
        names.update(f"transfer-{i + 1}" for i in range(len(self.model.transfer_stations)))
        names.update(f"workstation-{i + 1}" for i in range(len(self.model.workstation_service_ms)))
        return names

    def inject_command(self, at_ms: int, entity_id: str, command: Mapping[str, Any]) -> None:
        """Schedule a state change; unknown entities abort the run."""
        if entity_id not in self.known_entities():
            raise UnknownEntityError(f"unknown entity {entity_id!r}")
        at_ms = max(at_ms, self.now_ms)

        def apply(_now: int) -> None:
            self._apply_command(entity_id, command)

        self._schedule(at_ms, entity_id, apply)

    def _apply_command(self, entity_id: str, command: Mapping[str, Any]) -> None:
        if entity_id == ENTITY_HOLD and "engaged" in command:
            engaged = bool(command["engaged"])
            if engaged != self.hold_engaged:
                self.hold_engaged = engaged
                self._emit(ENTITY_HOLD, "engaged", engaged)
                if not engaged:
                    released, self._hold_queue = self._hold_queue, []
                    for part in released:
                        self._to_robot(part)
        elif entity_id.startswith("transfer-") and "switched" in command:
            index = int(entity_id.split("-")[1]) - 1
            if 0 <= index < len(self._switches):
                self._switches[index] = bool(command["switched"])
                self._emit(entity_id, "switch", self._switches[index])
        else:
            self._emit(entity_id, "command_ignored", json.dumps(dict(command), sort_keys=True))

    # -- process blocks ------------------------------------------------------------

    def _arrive(self, _now: int) -> None:
        self.created += 1
        part = _Part(part_id=self.created)
        self._parts[part.part_id] = part
        self._emit(ENTITY_SOURCE, "emitted", part.part_id)
        if self.hold_engaged:
            self._hold_queue.append(part)
        else:
            self._to_robot(part)
        self._schedule(self._draw_interarrival(), ENTITY_SOURCE, self._arrive)

    def _to_robot(self, part: _Part) -> None:
        self._robot_queue.append(part)
        self._robot_start()

    def _robot_start(self) -> None:
        if self._robot_busy or not self._robot_queue:
            return
        part = self._robot_queue.pop(0)
        self._robot_busy = True
        self._emit(ENTITY_ROBOT, "status", STATUS_BUSY)

        def place(_now: int) -> None:
            self._robot_busy = False
            self._emit(ENTITY_ROBOT, "status", STATUS_IDLE)
            self._belt_entry(part)
            self._robot_start()

        self._schedule(self.now_ms + self.model.robot_move_ms, ENTITY_ROBOT, place)

    def _belt_entry(self, part: _Part) -> None:
        part.on_belt = True
        part.belt_entry_ms = self.now_ms
        if not self._belt:
            self._emit(ENTITY_CONVEYOR, "status", STATUS_MOVING)
        self._belt.add(part.part_id)
        speed = self.model.conveyor_speed_mps
        for i, pos in enumerate(self.model.photocell_positions_m):
            at = self.now_ms + travel_ms(pos, speed)
            self._schedule(at, f"photocell-{i + 1}",
                           self._photocell_action(part, i, pos))
        for i, (pos, _) in enumerate(self.model.transfer_stations):
            at = self.now_ms + travel_ms(pos, speed)
            self._schedule(at, f"transfer-{i + 1}",
                           self._transfer_action(part, i, pos))
        exit_at = self.now_ms + travel_ms(self.model.conveyor_length_m, speed)
        self._schedule(exit_at, ENTITY_CONVEYOR, self._exit_action(part))

    def _still_on_belt_at(self, part: _Part, position_m: float) -> bool:
        return part.on_belt and (part.diverted_at_m is None or position_m <= part.diverted_at_m)

    def _photocell_action(self, part: _Part, index: int, pos: float) -> Callable[[int], None]:
        def fire(_now: int) -> None:
            if self._still_on_belt_at(part, pos):
                self._emit(f"photocell-{index + 1}", "passage", part.part_id)
        return fire

    def _transfer_action(self, part: _Part, index: int, pos: float) -> Callable[[int], None]:
        def fire(_now: int) -> None:
            if not self._still_on_belt_at(part, pos) or part.diverted_at_m is not None:
                return
            if self._switches[index] and self._ws_queue:
                part.diverted_at_m = pos
                part.on_belt = False
                self._belt.discard(part.part_id)
                if not self._belt:
                    self._emit(ENTITY_CONVEYOR, "status", STATUS_IDLE)
                self._emit(f"transfer-{index + 1}", "diverted", part.part_id)
                self._to_workstation(part, index % max(1, len(self._ws_busy)))
        return fire

    def _exit_action(self, part: _Part) -> Callable[[int], None]:
        def fire(_now: int) -> None:
            if part.on_belt and part.diverted_at_m is None:
                part.on_belt = False
                self._belt.discard(part.part_id)
                if not self._belt:
                    self._emit(ENTITY_CONVEYOR, "status", STATUS_IDLE)
                self._sink(part)
        return fire

    def _to_workstation(self, part: _Part, index: int) -> None:
        self._ws_queue[index].append(part)
        self._ws_start(index)

    def _ws_start(self, index: int) -> None:
        if self._ws_busy[index] or not self._ws_queue[index]:
            return
        part = self._ws_queue[index].pop(0)
        self._ws_busy[index] = True
        entity = f"workstation-{index + 1}"
        self._emit(entity, "status", STATUS_BUSY)

        def finish(_now: int) -> None:
            self._ws_busy[index] = False
            self._emit(entity, "status", STATUS_IDLE)
            self._sink(part)
            self._ws_start(index)

        self._schedule(self.now_ms + self.model.workstation_service_ms[index], entity, finish)

    def _sink(self, part: _Part) -> None:
        self.sunk += 1
        self._parts.pop(part.part_id, None)
        self._emit(ENTITY_SINK, "count", self.sunk)

    # -- execution ---------------------------------------------------------------

    def in_flight(self) -> int:
        return self.created - self.sunk

    def _check_conservation(self) -> None:
        queued = (len(self._hold_queue) + len(self._robot_queue)
                  + int(self._robot_busy) + len(self._belt)
                  + sum(len(q) for q in self._ws_queue) + sum(self._ws_busy))
        if queued != self.in_flight():
            raise AssertionError(
                f"part conservation broken at t={self.now_ms}: "
                f"created={self.created} sunk={self.sunk} tracked={queued}")

    def advance_until(self, until_ms: int) -> list[SimEvent]:
        """Process every event with time <= until_ms, returning emissions."""
        while self._heap and self._heap[0][0] <= until_ms:
            at_ms, _entity, _n, action = heapq.heappop(self._heap)
            self.now_ms = at_ms
            action(at_ms)
            self._check_conservation()
        self.now_ms = max(self.now_ms, until_ms)
        out, self._events_out = self._events_out, []
        return out


def factory_run(model: FactoryModel, until_ms: int,
                command_feed: Iterable[tuple[int, str, Mapping[str, Any]]] = ()) -> list[SimEvent]:
    """Run to until_ms with a pre-scheduled command feed.

    Identical (model, until_ms, command_feed) always produce the identical
    event sequence.
    """
    factory = Factory(model)
    last = None
    for at_ms, entity_id, command in command_feed:
        if last is not None and at_ms < last:
            raise ValueError("command times must be non-decreasing")
        last = at_ms
        factory.inject_command(at_ms, entity_id, command)
    return factory.advance_until(until_ms)


def trace_to_json_lines(events: Iterable[SimEvent]) -> str:
    return "\n".join(event.to_json_line() for event in events) + "\n"
