"""Bridge configuration: YAML loading with total validation.

Every problem in a config file is reported, each with a config-path locator
such as ``north_adapters[0].flavor``. See docs/config.md for the schema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .transform import TransformRule, rule_from_document, rule_to_document

FLAVOR_PUBSUB = "pubsub"
FLAVOR_QUEUE = "queue"
FLAVOR_REQRESP = "reqresp"
FLAVORS = (FLAVOR_PUBSUB, FLAVOR_QUEUE, FLAVOR_REQRESP)

DIRECTION_TELEMETRY_OUT = "telemetry_out"
DIRECTION_COMMAND_IN = "command_in"

LOG_LEVELS = ("debug", "info", "warning", "error", "critical")

DEFAULT_TIMEOUT_MS = 60_000
DEFAULT_RATE_CAPACITY = 1_000
DEFAULT_RATE_REFILL = 1_000

_TOP_LEVEL_KEYS = {
    "north_adapters", "south_adapters", "whitelist_dts", "whitelist_agents",
    "default_timeout_ms", "rate_limit", "pt_mappings", "transforms", "log_level",
}


class ConfigError(Exception):
    """One or more validation problems; each line is ``locator: message``."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = problems
        super().__init__("\n".join(f"{path}: {msg}" for path, msg in problems))


def parse_bind(bind: str) -> tuple[str, int] | None:
    """Return (host, port) for a TCP bind, or None for "inproc"."""
    if bind == "inproc":
        return None
    host, sep, port_text = bind.rpartition(":")
    if not sep or not host:
        raise ValueError("bind must be 'inproc' or host:port")
    try:
        port = int(port_text)
    except ValueError:
        raise ValueError(f"invalid port {port_text!r}") from None
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    return host, port


@dataclass(frozen=True)
class AdapterSpec:
    name: str
    flavor: str
    bind: str = "inproc"
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.name:
            raise ValueError("adapter name must be non-empty")
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        parse_bind(self.bind)


@dataclass(frozen=True)
class PtMapping:
    entity_id: str
    channel: str
    direction: str

    def __post_init__(self):
        if not self.entity_id or not self.channel:
            raise ValueError("entity_id and channel must be non-empty")
        if self.direction not in (DIRECTION_TELEMETRY_OUT, DIRECTION_COMMAND_IN):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class RateLimit:
    capacity: int = DEFAULT_RATE_CAPACITY
    refill_per_second: int = DEFAULT_RATE_REFILL

    def __post_init__(self):
        if self.capacity <= 0 or self.refill_per_second <= 0:
            raise ValueError("rate limit values must be positive")


@dataclass(frozen=True)
class BridgeConfig:
    north_adapters: tuple[AdapterSpec, ...]
    south_adapters: tuple[AdapterSpec, ...]
    whitelist_dts: frozenset[str] = frozenset()
    whitelist_agents: frozenset[str] = frozenset()
    default_timeout_ms: int = DEFAULT_TIMEOUT_MS
    rate_limit: RateLimit = RateLimit()
    pt_mappings: tuple[PtMapping, ...] = ()
    transforms: Mapping[str, TransformRule] = field(default_factory=dict)
    log_level: str = "info"

    def validate(self) -> None:
        problems = []
        names = [s.name for s in self.north_adapters + self.south_adapters]
        seen: set[str] = set()
        for name in names:
            if name in seen:
                problems.append(("adapters", f"duplicate adapter name {name!r}"))
            seen.add(name)
        if self.default_timeout_ms <= 0:
            problems.append(("default_timeout_ms", "must be positive"))
        if self.log_level not in LOG_LEVELS:
            problems.append(("log_level", f"unknown level {self.log_level!r}"))
        pairs = set()
        for i, m in enumerate(self.pt_mappings):
            key = (m.entity_id, m.direction)
            if key in pairs:
                problems.append((f"pt_mappings[{i}]", f"duplicate (entity_id, direction) {key}"))
            pairs.add(key)
        if problems:
            raise ConfigError(problems)


class _Collector:
    def __init__(self):
        self.problems: list[tuple[str, str]] = []

    def add(self, path: str, message: str) -> None:
        self.problems.append((path, message))

    def raise_if_any(self) -> None:
        if self.problems:
            raise ConfigError(self.problems)


def _parse_adapters(items: Any, path: str, errors: _Collector) -> list[AdapterSpec]:
    if items is None:
        return []
    if not isinstance(items, list):
        errors.add(path, "must be a list")
        return []
    specs = []
    for i, item in enumerate(items):
        loc = f"{path}[{i}]"
        if not isinstance(item, Mapping):
            errors.add(loc, "must be a mapping")
            continue
        unknown = set(item) - {"name", "flavor", "bind", "options"}
        if unknown:
            errors.add(loc, f"unknown fields: {sorted(unknown)}")
            continue
        name = item.get("name")
        flavor = item.get("flavor")
        if not isinstance(name, str) or not name:
            errors.add(f"{loc}.name", "must be a non-empty string")
            continue
        if flavor not in FLAVORS:
            errors.add(f"{loc}.flavor", f"unknown flavor {flavor!r}")
            continue
        bind = item.get("bind", "inproc")
        try:
            parse_bind(str(bind))
        except ValueError as exc:
            errors.add(f"{loc}.bind", str(exc))
            continue
        options = item.get("options", {})
        if not isinstance(options, Mapping):
            errors.add(f"{loc}.options", "must be a mapping")
            continue
        specs.append(AdapterSpec(name=name, flavor=flavor, bind=str(bind), options=dict(options)))
    return specs


def _parse_whitelist(items: Any, path: str, errors: _Collector) -> frozenset[str]:
    if items is None:
        return frozenset()
    if not isinstance(items, list):
        errors.add(path, "must be a list")
        return frozenset()
    seen: set[str] = set()
    for i, item in enumerate(items):
        if not isinstance(item, str) or not item:
            errors.add(f"{path}[{i}]", "must be a non-empty string")
            continue
        if item in seen:
            errors.add(f"{path}[{i}]", f"duplicate identity {item!r}")
            continue
        seen.add(item)
    return frozenset(seen)


def parse_config(doc: Any, source: str = "<config>") -> BridgeConfig:
    """Validate a parsed YAML document into a BridgeConfig.

    Collects every problem before raising so operators see the full picture.
    """
    errors = _Collector()
    if not isinstance(doc, Mapping):
        errors.add(source, "top level must be a mapping")
        errors.raise_if_any()
    unknown = set(doc) - _TOP_LEVEL_KEYS
    for key in sorted(unknown):
        errors.add(str(key), "unknown top-level key")

    north = _parse_adapters(doc.get("north_adapters"), "north_adapters", errors)
    south = _parse_adapters(doc.get("south_adapters"), "south_adapters", errors)

    names: set[str] = set()
    for group, path in ((north, "north_adapters"), (south, "south_adapters")):
        for i, spec in enumerate(group):
            if spec.name in names:
                errors.add(f"{path}[{i}].name", f"duplicate adapter name {spec.name!r}")
            names.add(spec.name)

    dts = _parse_whitelist(doc.get("whitelist_dts"), "whitelist_dts", errors)
    agents = _parse_whitelist(doc.get("whitelist_agents"), "whitelist_agents", errors)

    timeout = doc.get("default_timeout_ms", DEFAULT_TIMEOUT_MS)
    if not isinstance(timeout, int) or isinstance(timeout, bool) or timeout <= 0:
        errors.add("default_timeout_ms", "must be a positive integer")
        timeout = DEFAULT_TIMEOUT_MS

    rate = RateLimit()
    rate_doc = doc.get("rate_limit")
    if rate_doc is not None:
        if not isinstance(rate_doc, Mapping) or set(rate_doc) - {"capacity", "refill_per_second"}:
            errors.add("rate_limit", "must be a mapping of capacity/refill_per_second")
        else:
            try:
                rate = RateLimit(
                    capacity=int(rate_doc.get("capacity", DEFAULT_RATE_CAPACITY)),
                    refill_per_second=int(rate_doc.get("refill_per_second", DEFAULT_RATE_REFILL)),
                )
            except (TypeError, ValueError) as exc:
                errors.add("rate_limit", str(exc))

    mappings = []
    raw_mappings = doc.get("pt_mappings")
    if raw_mappings is not None:
        if not isinstance(raw_mappings, list):
            errors.add("pt_mappings", "must be a list")
        else:
            pairs: set[tuple[str, str]] = set()
            for i, item in enumerate(raw_mappings):
                loc = f"pt_mappings[{i}]"
                if not isinstance(item, Mapping) or set(item) - {"entity_id", "channel", "direction"}:
                    errors.add(loc, "must be a mapping of entity_id/channel/direction")
                    continue
                try:
                    mapping = PtMapping(
                        entity_id=str(item.get("entity_id", "")),
                        channel=str(item.get("channel", "")),
                        direction=str(item.get("direction", "")),
                    )
                except ValueError as exc:
                    errors.add(loc, str(exc))
                    continue
                key = (mapping.entity_id, mapping.direction)
                if key in pairs:
                    errors.add(loc, f"duplicate (entity_id, direction) {key}")
                    continue
                pairs.add(key)
                mappings.append(mapping)

    transforms: dict[str, TransformRule] = {}
    raw_transforms = doc.get("transforms")
    if raw_transforms is not None:
        if not isinstance(raw_transforms, Mapping):
            errors.add("transforms", "must be a mapping keyed by sim_type")
        else:
            for st, rule_doc in raw_transforms.items():
                loc = f"transforms.{st}"
                if not isinstance(rule_doc, Mapping):
                    errors.add(loc, "must be a mapping")
                    continue
                try:
                    transforms[str(st)] = rule_from_document(str(st), rule_doc)
                except ValueError as exc:
                    errors.add(loc, str(exc))

    level = doc.get("log_level", "info")
    if level not in LOG_LEVELS:
        errors.add("log_level", f"unknown level {level!r}")
        level = "info"

    errors.raise_if_any()
    config = BridgeConfig(
        north_adapters=tuple(north),
        south_adapters=tuple(south),
        whitelist_dts=dts,
        whitelist_agents=agents,
        default_timeout_ms=timeout,
        rate_limit=rate,
        pt_mappings=tuple(mappings),
        transforms=transforms,
        log_level=str(level),
    )
    config.validate()
    return config


def load_config(path: str) -> BridgeConfig:
    """Load and fully validate a YAML config file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError([(str(path), f"cannot read config: {exc}")]) from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown position"
        raise ConfigError([(str(path), f"syntax error at {where}: {exc}")]) from exc
    return parse_config(doc, source=str(path))


def config_to_document(config: BridgeConfig) -> dict[str, Any]:
    """Serializable form; load(parse(dump)) is the identity."""
    return {
        "north_adapters": [
            {"name": s.name, "flavor": s.flavor, "bind": s.bind, "options": dict(s.options)}
            for s in config.north_adapters
        ],
        "south_adapters": [
            {"name": s.name, "flavor": s.flavor, "bind": s.bind, "options": dict(s.options)}
            for s in config.south_adapters
        ],
        "whitelist_dts": sorted(config.whitelist_dts),
        "whitelist_agents": sorted(config.whitelist_agents),
        "default_timeout_ms": config.default_timeout_ms,
        "rate_limit": {
            "capacity": config.rate_limit.capacity,
            "refill_per_second": config.rate_limit.refill_per_second,
        },
        "pt_mappings": [
            {"entity_id": m.entity_id, "channel": m.channel, "direction": m.direction}
            for m in config.pt_mappings
        ],
        "transforms": {st: rule_to_document(rule) for st, rule in sorted(config.transforms.items())},
        "log_level": config.log_level,
    }


def dump_config(config: BridgeConfig) -> str:
    return yaml.safe_dump(config_to_document(config), sort_keys=False)
