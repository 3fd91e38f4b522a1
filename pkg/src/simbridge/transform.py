"""Bidirectional payload transformation between DT-facing and agent-facing
representations: field renames, unit scaling and stream regrouping.

Rules are declarative so the reverse direction is always well defined:
``reverse(rule, forward(rule, doc)) == doc``. Scale factors are keyed by the
DT-side field name; forward scales then renames, reverse un-renames then
un-scales.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .envelope import Envelope, STREAM_DATA, STREAM_END

GRANULARITY_ATOMIC = "atomic"
GRANULARITY_COMPOSITE = "composite"


class TransformError(Exception):
    """Raised when a rule cannot be applied; names the offending field."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{message}: {field_name!r}")
        self.field_name = field_name


@dataclass(frozen=True)
class TransformRule:
    sim_type: str
    renames: tuple[tuple[str, str], ...] = ()
    scales: tuple[tuple[str, float], ...] = ()
    granularity: str = GRANULARITY_ATOMIC
    composite_size: int | None = None

    def __post_init__(self):
        dt_names = [d for d, _ in self.renames]
        agent_names = [a for _, a in self.renames]
        if len(set(dt_names)) != len(dt_names) or len(set(agent_names)) != len(agent_names):
            raise ValueError("renames must form a bijection on their domain")
        for name, factor in self.scales:
            if factor == 0:
                raise ValueError(f"scale factor for {name!r} must be non-zero")
        if len({n for n, _ in self.scales}) != len(self.scales):
            raise ValueError("duplicate scale field")
        if self.granularity not in (GRANULARITY_ATOMIC, GRANULARITY_COMPOSITE):
            raise ValueError(f"invalid granularity {self.granularity!r}")
        if (self.composite_size is not None) != (self.granularity == GRANULARITY_COMPOSITE):
            raise ValueError("composite_size present iff granularity is composite")
        if self.composite_size is not None and self.composite_size <= 0:
            raise ValueError("composite_size must be positive")

    def rename_map(self) -> dict[str, str]:
        return dict(self.renames)

    def inverse_rename_map(self) -> dict[str, str]:
        return {agent: dt for dt, agent in self.renames}


def identity_rule(sim_type: str = "") -> TransformRule:
    return TransformRule(sim_type=sim_type)


def _numeric(value: Any, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TransformError(name, "scale target is not numeric")
    return value


def _apply_renames(doc: dict[str, Any], mapping: Mapping[str, str]) -> dict[str, Any]:
    # Simultaneous application so swap renames (a->b, b->a) behave.
    moved = {}
    for src, dst in mapping.items():
        if src in doc:
            moved[dst] = doc.pop(src)
    for dst, value in moved.items():
        if dst in doc:
            raise TransformError(dst, "rename target collides with existing field")
        doc[dst] = value
    return doc


def forward(rule: TransformRule, payload: Mapping[str, Any]) -> dict[str, Any]:
    """DT representation -> agent representation.

    Fields absent from the payload are skipped; untouched fields pass through.
    """
    out = dict(payload)
    for name, factor in rule.scales:
        if name in out:
            out[name] = _numeric(out[name], name) * factor
    return _apply_renames(out, rule.rename_map())


def reverse(rule: TransformRule, payload: Mapping[str, Any]) -> dict[str, Any]:
    """Exact inverse of forward on forward's image."""
    out = _apply_renames(dict(payload), rule.inverse_rename_map())
    for name, factor in rule.scales:
        if name in out:
            out[name] = _numeric(out[name], name) / factor
    return out


def forward_request(rule: TransformRule, payload: Mapping[str, Any]) -> dict[str, Any]:
    """Apply a rule to a simulation request payload.

    The data plane of a request is its ``inputs`` map plus the requested
    output names; structural fields (model, mode, ...) pass through.
    """
    out = dict(payload)
    if isinstance(out.get("inputs"), Mapping):
        out["inputs"] = forward(rule, out["inputs"])
    if isinstance(out.get("outputs"), list):
        renames = rule.rename_map()
        out["outputs"] = [renames.get(name, name) for name in out["outputs"]]
    return out


def reverse_response(rule: TransformRule, payload: Mapping[str, Any]) -> dict[str, Any]:
    """Apply the reverse rule to a response payload's ``values`` map."""
    out = dict(payload)
    if isinstance(out.get("values"), Mapping):
        out["values"] = reverse(rule, out["values"])
    return out


class Regrouper:
    """Stateful composite regrouping for one response stream.

    With granularity=composite, each run of ``composite_size`` consecutive
    stream_data payloads is merged into one envelope whose header (and seq)
    is the last constituent's; stream_end flushes any partial group first.
    """

    def __init__(self, rule: TransformRule):
        self._rule = rule
        self._pending: list[Envelope] = []

    def offer(self, env: Envelope) -> list[Envelope]:
        if self._rule.granularity == GRANULARITY_ATOMIC:
            return [env]
        kind = env.header.kind
        if kind == STREAM_DATA:
            self._pending.append(env)
            if len(self._pending) >= self._rule.composite_size:
                return [self._flush()]
            return []
        if kind == STREAM_END:
            out = []
            if self._pending:
                out.append(self._flush())
            out.append(env)
            return out
        return [env]

    def _flush(self) -> Envelope:
        group = self._pending
        self._pending = []
        last = group[-1]
        return Envelope(
            header=last.header,
            payload={"samples": [dict(e.payload) for e in group]},
        )


def regroup(rule: TransformRule, stream: Iterable[Envelope]) -> list[Envelope]:
    """Regroup a whole stream; input seqs must be strictly increasing."""
    grouper = Regrouper(rule)
    out: list[Envelope] = []
    last_seq = None
    for env in stream:
        seq = env.header.seq
        if seq is not None:
            if last_seq is not None and seq <= last_seq:
                raise ValueError("input seqs must be strictly increasing")
            last_seq = seq
        out.extend(grouper.offer(env))
    return out


def rule_from_document(sim_type: str, doc: Mapping[str, Any]) -> TransformRule:
    """Build a rule from its config-file form (see docs/config.md)."""
    known = {"renames", "scales", "granularity", "composite_size"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown transform fields: {sorted(unknown)}")
    renames = []
    for item in doc.get("renames", []):
        if not isinstance(item, Mapping) or set(item) != {"dt", "agent"}:
            raise ValueError("renames entries must be {dt: ..., agent: ...}")
        renames.append((str(item["dt"]), str(item["agent"])))
    scales = []
    for item in doc.get("scales", []):
        if not isinstance(item, Mapping) or set(item) != {"field", "factor"}:
            raise ValueError("scales entries must be {field: ..., factor: ...}")
        scales.append((str(item["field"]), float(item["factor"])))
    return TransformRule(
        sim_type=sim_type,
        renames=tuple(renames),
        scales=tuple(scales),
        granularity=doc.get("granularity", GRANULARITY_ATOMIC),
        composite_size=doc.get("composite_size"),
    )


def rule_to_document(rule: TransformRule) -> dict[str, Any]:
    doc: dict[str, Any] = {}
    if rule.renames:
        doc["renames"] = [{"dt": d, "agent": a} for d, a in rule.renames]
    if rule.scales:
        doc["scales"] = [{"field": f, "factor": c} for f, c in rule.scales]
    if rule.granularity != GRANULARITY_ATOMIC:
        doc["granularity"] = rule.granularity
        doc["composite_size"] = rule.composite_size
    return doc
