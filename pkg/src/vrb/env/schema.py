"""Domain schema, entity database, dialog acts and the act vocabularies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..errors import ConfigurationError, ProtocolError


@dataclass(frozen=True)
class Slot:
    name: str
    values: tuple[str, ...]


@dataclass(frozen=True)
class Domain:
    name: str
    informable: tuple[Slot, ...]
    requestable: tuple[Slot, ...]
    requires_booking: bool = True

    def informable_slot(self, name: str) -> Slot:
        for s in self.informable:
            if s.name == name:
                return s
        raise ProtocolError(f"domain {self.name!r} has no informable slot {name!r}")

    def requestable_slot(self, name: str) -> Slot:
        for s in self.requestable:
            if s.name == name:
                return s
        raise ProtocolError(f"domain {self.name!r} has no requestable slot {name!r}")


class Act(NamedTuple):
    """One atomic dialog act.

    ``kind`` is one of ``inform``, ``request``, ``book``, ``bye`` (system) or
    ``inform_constraint``, ``request``, ``bye`` (user). ``value`` holds a value
    index for informs and an entity id for bookings.
    """

    kind: str
    domain: str = ""
    slot: str = ""
    value: int | str | None = None

    def to_json(self) -> list:
        return [self.kind, self.domain, self.slot, self.value]

    @classmethod
    def from_json(cls, item) -> "Act":
        kind, domain, slot, value = item
        return cls(kind, domain, slot, value)


SYS_KINDS = ("inform", "request", "book", "bye")
USER_KINDS = ("inform_constraint", "request", "bye")

BYE = Act("bye")


def action(acts) -> tuple[Act, ...]:
    """Canonical (sorted, de-duplicated) form of a set of acts."""
    return tuple(sorted(set(acts), key=lambda a: (a.kind, a.domain, a.slot, str(a.value))))


@dataclass(frozen=True)
class DomainSchema:
    domains: tuple[Domain, ...]

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if not names:
            raise ConfigurationError("schema defines no domains")
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate domain names in {names}")
        for d in self.domains:
            slots = [s.name for s in d.informable] + [s.name for s in d.requestable]
            if len(set(slots)) != len(slots):
                raise ConfigurationError(f"duplicate slot names in domain {d.name!r}")
            if not d.informable:
                raise ConfigurationError(f"domain {d.name!r} has no informable slots")
            for s in d.informable + d.requestable:
                if not s.values:
                    raise ConfigurationError(f"slot {d.name}.{s.name} has an empty value set")
                if len(set(s.values)) != len(s.values):
                    raise ConfigurationError(f"duplicate values in slot {d.name}.{s.name}")

    def domain(self, name: str) -> Domain:
        for d in self.domains:
            if d.name == name:
                return d
        raise ProtocolError(f"unknown domain {name!r}")

    @cached_property
    def vocab(self) -> "ActVocabulary":
        return ActVocabulary(self)

    def to_dict(self) -> dict:
        return {
            "domains": [
                {
                    "name": d.name,
                    "requires_booking": d.requires_booking,
                    "informable": {s.name: list(s.values) for s in d.informable},
                    "requestable": {s.name: list(s.values) for s in d.requestable},
                }
                for d in self.domains
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSchema":
        try:
            return cls(tuple(
                Domain(
                    name=d["name"],
                    informable=tuple(Slot(k, tuple(v)) for k, v in d["informable"].items()),
                    requestable=tuple(Slot(k, tuple(v)) for k, v in d.get("requestable", {}).items()),
                    requires_booking=bool(d.get("requires_booking", True)),
                )
                for d in data["domains"]
            ))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigurationError(f"malformed schema: {exc}") from exc


class ActVocabulary:
    """Delexicalized act inventories that index the multi-hot encodings.

    The system vocabulary holds ``request(d, informable slot)``,
    ``inform(d, requestable slot)``, ``book(d)`` and ``bye``; concrete values
    and entity ids are filled in by the environment. The user vocabulary holds
    ``inform_constraint(d, informable slot)``, ``request(d, requestable slot)``
    and ``bye``.
    """

    def __init__(self, schema: DomainSchema):
        sys_keys, user_keys = [], []
        for d in schema.domains:
            sys_keys += [("request", d.name, s.name) for s in d.informable]
            sys_keys += [("inform", d.name, s.name) for s in d.requestable]
            sys_keys.append(("book", d.name, ""))
            user_keys += [("inform_constraint", d.name, s.name) for s in d.informable]
            user_keys += [("request", d.name, s.name) for s in d.requestable]
        sys_keys.append(("bye", "", ""))
        user_keys.append(("bye", "", ""))
        self.sys_keys = tuple(sys_keys)
        self.user_keys = tuple(user_keys)
        self._sys_index = {k: i for i, k in enumerate(sys_keys)}
        self._user_index = {k: i for i, k in enumerate(user_keys)}

    @property
    def n_sys(self) -> int:
        return len(self.sys_keys)

    @property
    def n_user(self) -> int:
        return len(self.user_keys)

    @staticmethod
    def key(act: Act) -> tuple[str, str, str]:
        if act.kind == "book":
            return ("book", act.domain, "")
        if act.kind == "bye":
            return ("bye", "", "")
        return (act.kind, act.domain, act.slot)

    def sys_index(self, act: Act) -> int:
        try:
            return self._sys_index[self.key(act)]
        except KeyError:
            raise ProtocolError(f"system act {act} is not in the vocabulary") from None

    def user_index(self, act: Act) -> int:
        try:
            return self._user_index[self.key(act)]
        except KeyError:
            raise ProtocolError(f"user act {act} is not in the vocabulary") from None

    def sys_multi_hot(self, acts) -> np.ndarray:
        v = np.zeros(self.n_sys)
        for a in acts:
            v[self.sys_index(a)] = 1.0
        return v

    def user_multi_hot(self, acts) -> np.ndarray:
        v = np.zeros(self.n_user)
        for a in acts:
            v[self.user_index(a)] = 1.0
        return v


@dataclass(frozen=True)
class Entity:
    id: str
    domain: str
    informable: dict
    requestable: dict


@dataclass(frozen=True)
class Database:
    entities: tuple[Entity, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entities]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("entity ids are not unique")

    def in_domain(self, domain: str) -> list[Entity]:
        return [e for e in self.entities if e.domain == domain]

    def get(self, entity_id: str) -> Entity:
        for e in self.entities:
            if e.id == entity_id:
                return e
        raise ProtocolError(f"unknown entity id {entity_id!r}")

    def matches(self, domain: str, constraints: dict) -> list[Entity]:
        return [
            e for e in self.entities
            if e.domain == domain and all(e.informable[s] == v for s, v in constraints.items())
        ]


@dataclass(frozen=True)
class World:
    """A schema together with the database it is queried against."""

    schema: DomainSchema
    db: Database

    def __post_init__(self):
        for e in self.db.entities:
            d = self.schema.domain(e.domain)
            for s in d.informable:
                v = e.informable.get(s.name)
                if not isinstance(v, int) or not 0 <= v < len(s.values):
                    raise ConfigurationError(f"entity {e.id} has no valid value for {d.name}.{s.name}")
            for s in d.requestable:
                v = e.requestable.get(s.name)
                if not isinstance(v, int) or not 0 <= v < len(s.values):
                    raise ConfigurationError(f"entity {e.id} has no valid value for {d.name}.{s.name}")
        for d in self.schema.domains:
            if not self.db.in_domain(d.name):
                raise ConfigurationError(f"database has no entities for domain {d.name!r}")

    def to_dict(self) -> dict:
        data = self.schema.to_dict()
        data["entities"] = [
            {"id": e.id, "domain": e.domain, "informable": dict(e.informable), "requestable": dict(e.requestable)}
            for e in self.db.entities
        ]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "World":
        schema = DomainSchema.from_dict(data)
        try:
            entities = tuple(
                Entity(e["id"], e["domain"], dict(e["informable"]), dict(e.get("requestable", {})))
                for e in data["entities"]
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed entity list: {exc}") from exc
        return cls(schema, Database(entities))

    @cached_property
    def schema_hash(self) -> str:
        """Hash of schema and database; corpora and checkpoints carry it."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "World":
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"schema file not found: {p}")
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: {exc}") from exc
        return cls.from_dict(data)


TOY_DOMAINS = {
    "hotel": {
        "informable": {
            "area": ["centre", "north", "south", "east"],
            "price": ["cheap", "moderate", "expensive", "luxury"],
            "stars": ["1", "2", "3", "4"],
        },
        "requestable": ["phone", "address"],
    },
    "restaurant": {
        "informable": {
            "area": ["centre", "north", "south", "east"],
            "food": ["italian", "chinese", "indian", "british"],
            "price": ["cheap", "moderate", "expensive", "luxury"],
        },
        "requestable": ["phone", "postcode"],
    },
}


def toy_world(n_entities: int = 20, seed: int = 0) -> World:
    """Two booking domains, 3x4 informable values, 2 requestable slots each."""
    rng = np.random.default_rng(seed)
    domains = []
    entities = []
    for name, spec in TOY_DOMAINS.items():
        requestable = tuple(
            Slot(r, tuple(f"{name}-{r}-{i:02d}" for i in range(n_entities))) for r in spec["requestable"]
        )
        informable = tuple(Slot(k, tuple(v)) for k, v in spec["informable"].items())
        domains.append(Domain(name, informable, requestable, requires_booking=True))
        for i in range(n_entities):
            entities.append(Entity(
                id=f"{name}-{i:02d}",
                domain=name,
                informable={s.name: int(rng.integers(len(s.values))) for s in informable},
                requestable={s.name: i for s in requestable},
            ))
    return World(DomainSchema(tuple(domains)), Database(tuple(entities)))
