"""Ontology graph model: a three-level domain/slot/value hierarchy plus
flat sets of user intents and system actions.

The graph mirrors the relational layout the construction pipeline builds:
tables become domains, columns become slots, distinct cell values become
value nodes.  Tables whose name mentions "intent" or "action" are reserved
and feed the corresponding flat set instead of the hierarchy.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .sandbox import DbSnapshot

_WS_RE = re.compile(r"\s+")

INTENT_MARKER = "intent"
ACTION_MARKER = "action"

DOC_KEYS = ("domains", "slots", "values", "user_intents", "system_actions")


class OntologyFormatError(ValueError):
    """Raised when an ontology document does not match the expected schema."""


def normalize_label(raw: str) -> str:
    """Lowercase, trim, and collapse internal whitespace runs.

    Idempotent; underscores are preserved (gold labels mix "price range"
    and "price_range" styles).  Raises ValueError when nothing is left.
    """
    label = _WS_RE.sub(" ", str(raw).strip().lower())
    if not label:
        raise ValueError(f"label is empty after normalization: {raw!r}")
    return label


@dataclass
class OntologyGraph:
    """Five node categories with the induced domain->slot->value edges.

    Invariants: every slot key's domain exists in ``domains``; every value
    key's (domain, slot) pair exists in ``slots``; all labels are normalized
    and non-empty.
    """

    domains: set[str] = field(default_factory=set)
    slots: dict[str, set[str]] = field(default_factory=dict)
    values: dict[tuple[str, str], set[str]] = field(default_factory=dict)
    user_intents: set[str] = field(default_factory=set)
    system_actions: set[str] = field(default_factory=set)

    def validate(self) -> None:
        for domain in self.slots:
            if domain not in self.domains:
                raise ValueError(f"slots reference unknown domain {domain!r}")
        for (domain, slot) in self.values:
            if slot not in self.slots.get(domain, ()):
                raise ValueError(
                    f"values reference unknown slot {domain!r}.{slot!r}"
                )
        for label in self.iter_labels():
            if normalize_label(label) != label:
                raise ValueError(f"label not normalized: {label!r}")

    def iter_labels(self):
        yield from self.domains
        for slots in self.slots.values():
            yield from slots
        for values in self.values.values():
            yield from values
        yield from self.user_intents
        yield from self.system_actions

    def is_empty(self) -> bool:
        return not (self.domains or self.user_intents or self.system_actions)

    def slot_values(self, domain: str, slot: str) -> set[str]:
        return self.values.get((domain, slot), set())

    def add_slot(self, domain: str, slot: str) -> None:
        self.domains.add(domain)
        self.slots.setdefault(domain, set()).add(slot)

    def add_value(self, domain: str, slot: str, value: str) -> None:
        self.add_slot(domain, slot)
        self.values.setdefault((domain, slot), set()).add(value)


def extract_ontology(snapshot: DbSnapshot) -> OntologyGraph:
    """Read an ontology off a database snapshot.

    Non-reserved tables map to domains, their columns to slots, and their
    distinct cell values to value nodes.  Reserved tables (name contains
    "intent" or "action") pour all their cell values into the user-intent
    or system-action set and contribute no domain node.
    """
    graph = OntologyGraph()
    for table in snapshot.tables:
        try:
            table_label = normalize_label(table.name)
        except ValueError:
            continue
        is_intent = INTENT_MARKER in table_label
        is_action = ACTION_MARKER in table_label
        cell_values = table.values or {}
        if is_intent or is_action:
            for col_values in cell_values.values():
                for raw in col_values:
                    try:
                        label = normalize_label(raw)
                    except ValueError:
                        continue
                    if is_intent:
                        graph.user_intents.add(label)
                    if is_action:
                        graph.system_actions.add(label)
            continue
        graph.domains.add(table_label)
        graph.slots.setdefault(table_label, set())
        for column in table.columns:
            try:
                slot_label = normalize_label(column.name)
            except ValueError:
                continue
            graph.add_slot(table_label, slot_label)
            for raw in cell_values.get(column.name, ()):
                try:
                    value_label = normalize_label(raw)
                except ValueError:
                    continue
                graph.add_value(table_label, slot_label, value_label)
    return graph


def merge(a: OntologyGraph, b: OntologyGraph) -> OntologyGraph:
    """Componentwise set union; commutative, associative, idempotent."""
    out = OntologyGraph(
        domains=a.domains | b.domains,
        slots={d: set(s) for d, s in a.slots.items()},
        values={k: set(v) for k, v in a.values.items()},
        user_intents=a.user_intents | b.user_intents,
        system_actions=a.system_actions | b.system_actions,
    )
    for domain, slots in b.slots.items():
        out.slots.setdefault(domain, set()).update(slots)
    for key, values in b.values.items():
        out.values.setdefault(key, set()).update(values)
    return out


def to_document(graph: OntologyGraph) -> dict:
    """Plain-dict form of the graph (sorted, JSON-ready)."""
    slots = {d: sorted(s) for d, s in graph.slots.items()}
    values: dict[str, dict[str, list[str]]] = {}
    for (domain, slot), vals in graph.values.items():
        values.setdefault(domain, {})[slot] = sorted(vals)
    return {
        "domains": sorted(graph.domains),
        "slots": {d: slots[d] for d in sorted(slots)},
        "values": {d: dict(sorted(values[d].items())) for d in sorted(values)},
        "user_intents": sorted(graph.user_intents),
        "system_actions": sorted(graph.system_actions),
    }


def serialize(graph: OntologyGraph) -> bytes:
    """Canonical JSON bytes; equal graphs serialize to identical bytes."""
    graph.validate()
    text = json.dumps(to_document(graph), sort_keys=True, indent=2)
    return (text + "\n").encode("utf-8")


def from_document(doc: dict) -> OntologyGraph:
    if not isinstance(doc, dict):
        raise OntologyFormatError("ontology document must be a JSON object")
    for key in DOC_KEYS:
        if key not in doc:
            raise OntologyFormatError(f"ontology document missing key {key!r}")
    graph = OntologyGraph()
    try:
        graph.domains = {normalize_label(d) for d in _as_list(doc, "domains")}
        graph.user_intents = {
            normalize_label(x) for x in _as_list(doc, "user_intents")
        }
        graph.system_actions = {
            normalize_label(x) for x in _as_list(doc, "system_actions")
        }
        for domain, slots in _as_dict(doc, "slots").items():
            d = normalize_label(domain)
            if not isinstance(slots, list):
                raise OntologyFormatError(
                    f"slots for domain {domain!r} must be a list"
                )
            graph.slots[d] = {normalize_label(s) for s in slots}
        for domain, per_slot in _as_dict(doc, "values").items():
            d = normalize_label(domain)
            if not isinstance(per_slot, dict):
                raise OntologyFormatError(
                    f"values for domain {domain!r} must be an object"
                )
            for slot, vals in per_slot.items():
                s = normalize_label(slot)
                if not isinstance(vals, list):
                    raise OntologyFormatError(
                        f"values for {domain!r}.{slot!r} must be a list"
                    )
                graph.values[(d, s)] = {normalize_label(v) for v in vals}
    except ValueError as exc:
        if isinstance(exc, OntologyFormatError):
            raise
        raise OntologyFormatError(str(exc)) from exc
    try:
        graph.validate()
    except ValueError as exc:
        raise OntologyFormatError(str(exc)) from exc
    return graph


def deserialize(data: bytes | str) -> OntologyGraph:
    """Parse an ontology document; rejects malformed input with a
    descriptive error."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise OntologyFormatError(f"invalid JSON: {exc}") from exc
    return from_document(doc)


def _as_list(doc: dict, key: str) -> list:
    value = doc[key]
    if not isinstance(value, list):
        raise OntologyFormatError(f"{key!r} must be a list")
    return value


def _as_dict(doc: dict, key: str) -> dict:
    value = doc[key]
    if not isinstance(value, dict):
        raise OntologyFormatError(f"{key!r} must be an object")
    return value
