"""Domain schema: entity types, interaction types with named roles, and the
dimensionalities that fix the layout of every vector in the engine."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Literal

Task = Literal["classification", "regression"]
TASKS = ("classification", "regression")


class SchemaError(ValueError):
    """Invalid schema document or reference to an undeclared type."""


@dataclass(frozen=True)
class EntityTypeSpec:
    id: str
    intrinsic_dim: int
    belief_dim: int
    latent_intrinsic_dim: int
    task: Task = "classification"


@dataclass(frozen=True)
class RoleSpec:
    role_id: str
    entity_type: str
    takeaway_dim: int


@dataclass(frozen=True)
class InteractionTypeSpec:
    id: str
    roles: tuple[RoleSpec, ...]
    tau_dim: int
    latent_extrinsic_dims: dict[str, int] = field(default_factory=dict)

    @property
    def role_ids(self) -> tuple[str, ...]:
        return tuple(r.role_id for r in self.roles)

    def role(self, role_id: str) -> RoleSpec:
        for r in self.roles:
            if r.role_id == role_id:
                return r
        raise SchemaError(f"interaction type {self.id!r} has no role {role_id!r}")

    def takeaway_dim_for(self, entity_type: str) -> int:
        for r in self.roles:
            if r.entity_type == entity_type:
                return r.takeaway_dim
        raise SchemaError(f"{entity_type!r} does not take part in {self.id!r}")

    def __hash__(self):
        return hash((self.id, self.roles, self.tau_dim, tuple(sorted(self.latent_extrinsic_dims.items()))))


@dataclass(frozen=True)
class Layout:
    """Block layout of an entity type's data vector."""

    belief_dim: int
    latent_intrinsic_dim: int
    extrinsic: tuple[tuple[str, int], ...]

    @property
    def total(self) -> int:
        return self.belief_dim + self.latent_intrinsic_dim + sum(d for _, d in self.extrinsic)

    @property
    def latent_total(self) -> int:
        return self.total - self.belief_dim


@dataclass(frozen=True)
class OntologySchema:
    entity_types: tuple[EntityTypeSpec, ...]
    interaction_types: tuple[InteractionTypeSpec, ...] = ()

    def __post_init__(self):
        _validate(self)

    @property
    def E(self) -> int:
        return len(self.entity_types)

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.interaction_types)

    def entity(self, j: str) -> EntityTypeSpec:
        for e in self.entity_types:
            if e.id == j:
                return e
        raise SchemaError(f"unknown entity type {j!r}")

    def interaction(self, i: str) -> InteractionTypeSpec:
        for it in self.interaction_types:
            if it.id == i:
                return it
        raise SchemaError(f"unknown interaction type {i!r}")

    def participations(self, j: str) -> tuple[str, ...]:
        """Sorted ids of interaction types in which entity type ``j`` can take part."""
        self.entity(j)
        return tuple(sorted(
            it.id for it in self.interaction_types if any(r.entity_type == j for r in it.roles)
        ))

    def layout(self, j: str) -> Layout:
        return data_vector_layout(self, j)

    def to_dict(self) -> dict:
        return {
            "entity_types": [
                {"id": e.id, "intrinsic_dim": e.intrinsic_dim, "belief_dim": e.belief_dim,
                 "latent_intrinsic_dim": e.latent_intrinsic_dim, "task": e.task}
                for e in self.entity_types
            ],
            "interaction_types": [
                {"id": it.id,
                 "roles": [{"role_id": r.role_id, "entity_type": r.entity_type,
                            "takeaway_dim": r.takeaway_dim} for r in it.roles],
                 "tau_dim": it.tau_dim,
                 "latent_extrinsic_dims": dict(sorted(it.latent_extrinsic_dims.items()))}
                for it in self.interaction_types
            ],
        }

    def dumps(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _check_dim(where: str, name: str, value, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        kind = "positive" if minimum == 1 else "nonnegative"
        raise SchemaError(f"{where}: {name} must be a {kind} integer, got {value!r}")
    return value


def _validate(schema: OntologySchema):
    seen = set()
    for e in schema.entity_types:
        if e.id in seen:
            raise SchemaError(f"duplicate entity type id {e.id!r}")
        seen.add(e.id)
        for name in ("intrinsic_dim", "belief_dim", "latent_intrinsic_dim"):
            _check_dim(f"entity type {e.id!r}", name, getattr(e, name))
        if e.task not in TASKS:
            raise SchemaError(f"entity type {e.id!r}: task must be one of {TASKS}, got {e.task!r}")
    seen_i = set()
    for it in schema.interaction_types:
        where = f"interaction type {it.id!r}"
        if it.id in seen_i:
            raise SchemaError(f"duplicate interaction type id {it.id!r}")
        seen_i.add(it.id)
        if not it.roles:
            raise SchemaError(f"{where}: needs at least one role")
        _check_dim(where, "tau_dim", it.tau_dim, minimum=0)
        role_ids = set()
        takeaway = {}
        for r in it.roles:
            if r.role_id in role_ids:
                raise SchemaError(f"{where}: duplicate role id {r.role_id!r}")
            role_ids.add(r.role_id)
            if r.entity_type not in seen:
                raise SchemaError(f"{where}: role {r.role_id!r} names undeclared entity type {r.entity_type!r}")
            _check_dim(f"{where} role {r.role_id!r}", "takeaway_dim", r.takeaway_dim)
            # one extrinsic history per (entity type, interaction type) needs one width
            if takeaway.setdefault(r.entity_type, r.takeaway_dim) != r.takeaway_dim:
                raise SchemaError(f"{where}: roles held by {r.entity_type!r} disagree on takeaway_dim")
        for j in takeaway:
            if j not in it.latent_extrinsic_dims:
                raise SchemaError(f"{where}: missing latent_extrinsic_dims entry for {j!r}")
            _check_dim(where, f"latent_extrinsic_dims[{j!r}]", it.latent_extrinsic_dims[j])
        extra = set(it.latent_extrinsic_dims) - set(takeaway)
        if extra:
            raise SchemaError(f"{where}: latent_extrinsic_dims names non-participants {sorted(extra)}")


def data_vector_layout(schema: OntologySchema, j: str) -> Layout:
    """Belief block, intrinsic latent block, then one extrinsic block per
    interaction type ``j`` can take part in, sorted by interaction type id."""
    e = schema.entity(j)
    blocks = tuple((i, schema.interaction(i).latent_extrinsic_dims[j]) for i in schema.participations(j))
    return Layout(e.belief_dim, e.latent_intrinsic_dim, blocks)


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise SchemaError(f"{where}: missing key {key!r}")
    return obj[key]


def _token(value, where: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{where}: id must be a non-empty string, got {value!r}")
    return value


def schema_from_dict(doc: dict) -> OntologySchema:
    if not isinstance(doc, dict):
        raise SchemaError("schema document must be a JSON object")
    ents = []
    for n, e in enumerate(_require(doc, "entity_types", "schema")):
        where = f"entity_types[{n}]"
        intrinsic_dim = _require(e, "intrinsic_dim", where)
        ents.append(EntityTypeSpec(
            id=_token(_require(e, "id", where), where),
            intrinsic_dim=intrinsic_dim,
            belief_dim=_require(e, "belief_dim", where),
            # latent widths default to the raw widths they summarise
            latent_intrinsic_dim=e.get("latent_intrinsic_dim", intrinsic_dim),
            task=e.get("task", "classification"),
        ))
    its = []
    for n, it in enumerate(doc.get("interaction_types", [])):
        where = f"interaction_types[{n}]"
        roles_doc = _require(it, "roles", where)
        if not isinstance(roles_doc, list):
            raise SchemaError(f"{where}: roles must be an array")
        roles = []
        for m, r in enumerate(roles_doc):
            rw = f"{where}.roles[{m}]"
            roles.append(RoleSpec(_token(_require(r, "role_id", rw), rw),
                                  _token(_require(r, "entity_type", rw), rw),
                                  _require(r, "takeaway_dim", rw)))
        led = it.get("latent_extrinsic_dims", {})
        if not isinstance(led, dict):
            raise SchemaError(f"{where}: latent_extrinsic_dims must be an object")
        led = dict(led)
        for r in roles:
            led.setdefault(r.entity_type, r.takeaway_dim)
        its.append(InteractionTypeSpec(
            id=_token(_require(it, "id", where), where),
            roles=tuple(roles),
            tau_dim=it.get("tau_dim", 0),
            latent_extrinsic_dims=dict(led),
        ))
    return OntologySchema(tuple(ents), tuple(its))


def parse_schema(text: str) -> OntologySchema:
    """Parse and validate a JSON schema document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return schema_from_dict(doc)


def load_schema(path) -> OntologySchema:
    with open(path, encoding="utf-8") as fh:
        return parse_schema(fh.read())
