"""Environment state: entity registry, partitioned state vectors, batching.

The world state is split into three vectors, mirroring how the engine
advances them:

* ``x`` -- kinematic proxy (containment pointers, device attachment,
  integer counters).  No geometry: just who sits on / inside what.
* ``s`` -- continuous semantic state (temperatures, molalities, solvent
  masses, knob angles), a flat float64 vector with per-slot unit metadata.
* ``l`` -- logical state (contact gates, heaterOn, tipLoaded, ...), a flat
  boolean vector.

Every slot is owned by exactly one registered entity (or the ambient
pseudo-entity), so the three vectors partition the world.  A batch stacks
the ``s``/``l`` vectors of n independent environments into (n, p) arrays;
each member environment keeps a row view, which is what makes vectorized
stepping and per-environment access see the same memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple

import numpy as np

from .errors import (
    DuplicateId,
    LengthMismatch,
    RegistrationAfterStart,
    UnitError,
    UnknownEntity,
    UnknownSlot,
    ZeroCount,
)

ENTITY_KINDS = (
    "container",
    "heater",
    "liquid-handler",
    "scale",
    "faucet",
    "robot-proxy",
    "ambient",
)

# Discrete commands each kind accepts; continuous channels are matched by
# prefix ("pour:<dst>" on containers).  Validated once per step.
KIND_COMMANDS: dict[str, frozenset[str]] = {
    "container": frozenset({"place", "pick"}),
    "heater": frozenset({"set", "place", "pick"}),
    "liquid-handler": frozenset({"command"}),
    "faucet": frozenset({"set_knob"}),
    "scale": frozenset(),
    "robot-proxy": frozenset(),
    "ambient": frozenset(),
}

KNOWN_UNITS = frozenset(
    {"", "K", "kg", "s", "mol/kg", "rad", "W/K", "bool", "id", "count", "uL"}
)

AMBIENT_ID = "ambient"


class SlotValue(NamedTuple):
    """A slot reading: raw value plus its registered unit."""

    value: Any
    unit: str


@dataclass(frozen=True)
class SlotSpec:
    """Declaration of one state slot on an entity."""

    name: str
    domain: str  # "x" | "s" | "l"
    unit: str = ""
    initial: Any = None


@dataclass(frozen=True)
class EntitySpec:
    """Immutable description of one entity.

    ``params`` are kind-specific constants (tare mass, heat-source gain,
    tip capacity, ...).  ``slots`` adds custom slots beyond the kind's
    defaults; ``initial`` overrides default initial values of kind slots.
    """

    id: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    slots: tuple[SlotSpec, ...] = ()
    initial: Mapping[str, Any] = field(default_factory=dict)


@dataclass
class ActionVector:
    """Per-step input: continuous channels and discrete commands.

    ``continuous`` maps (entity, channel) -> value, e.g. an in-flight pour
    emits ("beaker1", "pour:beaker0") -> mass transferred this step.
    ``discrete`` maps (entity, command) -> payload dict.
    """

    continuous: dict[tuple[str, str], float] = field(default_factory=dict)
    discrete: dict[tuple[str, str], Any] = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.continuous and not self.discrete

    def merged_with(self, other: "ActionVector") -> "ActionVector":
        out = ActionVector(dict(self.continuous), dict(self.discrete))
        out.continuous.update(other.continuous)
        out.discrete.update(other.discrete)
        return out


class Registry:
    """Process/event/device registry shared by all clones of an environment."""

    def __init__(self):
        self.processes: list = []
        self.events: list = []
        self.readouts: list = []  # post-event device refresh hooks
        self.clamp_cols: list[tuple[int, str]] = []  # s columns clamped >= 0
        self.contact_gates: dict[tuple[str, str], list[int]] = {}
        self.has_state_events = False  # any event that must run without actions
        self.thermal = None  # ThermalNetwork, attached lazily
        self.reactions = None  # ReactionNetwork, attached lazily
        self.version = 0
        self.disable_epoch = 0
        self.frozen = False  # set when a batch is cloned off

    def bump(self):
        self.version += 1

    def check_mutable(self, what: str):
        if self.frozen:
            raise RegistrationAfterStart(
                f"cannot register {what}: registry is shared with a batch"
            )


class EnvironmentState:
    """One simulated world: registry plus (x, s, l) state and the clock."""

    def __init__(self, dt: float = 0.01, ambient_K: float = 298.15, rng_seed: int = 0):
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.dt = float(dt)
        self.time = 0.0
        self.step_count = 0
        self.rng_seed = int(rng_seed)  # reserved; core dynamics are deterministic
        self.entities: dict[str, EntitySpec] = {}
        self.species: dict[str, Any] = {}  # name -> Species (kinetics module)

        self._s = np.zeros(0, dtype=np.float64)
        self._l = np.zeros(0, dtype=bool)
        self._s_meta: list[tuple[str, str, str]] = []  # (entity, slot, unit)
        self._l_meta: list[tuple[str, str, str]] = []
        self._s_index: dict[tuple[str, str], int] = {}
        self._l_index: dict[tuple[str, str], int] = {}
        self._x: dict[tuple[str, str], Any] = {}
        self._x_meta: list[tuple[str, str, str]] = []

        self.registry = Registry()
        self.semantics_enabled = True
        self.integrator = "euler"  # or "rk4"; Euler is the golden-trace contract

        self.precondition_log: list[tuple[float, str, str]] = []
        self._pending = ActionVector()
        self._disabled_processes: set[str] = set()
        self._layout_version = 0
        self._stepper = None  # cached by the engine

        # Ambient pseudo-entity owns the shared air temperature slot.
        self._register(EntitySpec(AMBIENT_ID, "ambient"), ambient=True)
        self._add_s_slot(AMBIENT_ID, "T", "K", float(ambient_K))

    # -- registration ----------------------------------------------------

    def _check_not_started(self):
        if self.step_count > 0 or self.time > 0.0:
            raise RegistrationAfterStart("environment already started")
        self.registry.check_mutable("entity/slot")

    def _register(self, spec: EntitySpec, ambient: bool = False):
        if spec.id in self.entities:
            raise DuplicateId(f"entity {spec.id!r} already registered")
        if spec.kind not in ENTITY_KINDS:
            raise ValueError(f"unknown entity kind {spec.kind!r}")
        if spec.kind == "ambient" and not ambient:
            raise ValueError("the ambient entity is built in")
        self.entities[spec.id] = spec

    def _add_s_slot(self, entity: str, name: str, unit: str, initial: float) -> int:
        self._check_unit(unit)
        key = (entity, name)
        if key in self._s_index or key in self._l_index or key in self._x:
            raise DuplicateId(f"slot {entity}.{name} already exists")
        col = self._s.size
        self._s = np.append(self._s, float(initial))
        self._s_meta.append((entity, name, unit))
        self._s_index[key] = col
        self._layout_version += 1
        return col

    def _add_l_slot(self, entity: str, name: str, initial: bool) -> int:
        key = (entity, name)
        if key in self._s_index or key in self._l_index or key in self._x:
            raise DuplicateId(f"slot {entity}.{name} already exists")
        col = self._l.size
        self._l = np.append(self._l, bool(initial))
        self._l_meta.append((entity, name, "bool"))
        self._l_index[key] = col
        self._layout_version += 1
        return col

    def _add_x_slot(self, entity: str, name: str, unit: str, initial: Any):
        self._check_unit(unit)
        key = (entity, name)
        if key in self._s_index or key in self._l_index or key in self._x:
            raise DuplicateId(f"slot {entity}.{name} already exists")
        self._x[key] = initial
        self._x_meta.append((entity, name, unit))
        self._layout_version += 1

    @staticmethod
    def _check_unit(unit: str):
        if unit not in KNOWN_UNITS:
            raise UnitError(f"unknown unit {unit!r}")

    # -- slot access -----------------------------------------------------

    def s_col(self, entity: str, slot: str) -> int:
        try:
            return self._s_index[(entity, slot)]
        except KeyError:
            self._require_entity(entity)
            raise UnknownSlot(f"{entity}.{slot} is not a continuous slot") from None

    def l_col(self, entity: str, slot: str) -> int:
        try:
            return self._l_index[(entity, slot)]
        except KeyError:
            self._require_entity(entity)
            raise UnknownSlot(f"{entity}.{slot} is not a logical slot") from None

    def has_slot(self, entity: str, slot: str) -> bool:
        key = (entity, slot)
        return key in self._s_index or key in self._l_index or key in self._x

    def get_s(self, entity: str, slot: str) -> float:
        return float(self._s[self.s_col(entity, slot)])

    def get_l(self, entity: str, slot: str) -> bool:
        return bool(self._l[self.l_col(entity, slot)])

    def get_x(self, entity: str, slot: str) -> Any:
        try:
            return self._x[(entity, slot)]
        except KeyError:
            self._require_entity(entity)
            raise UnknownSlot(f"{entity}.{slot} is not a kinematic slot") from None

    def set_s(self, entity: str, slot: str, value: float):
        self._s[self.s_col(entity, slot)] = float(value)

    def set_l(self, entity: str, slot: str, value: bool):
        self._l[self.l_col(entity, slot)] = bool(value)

    def set_x(self, entity: str, slot: str, value: Any):
        self.get_x(entity, slot)  # existence check
        self._x[(entity, slot)] = value

    def slot_unit(self, entity: str, slot: str) -> str:
        key = (entity, slot)
        if key in self._s_index:
            return self._s_meta[self._s_index[key]][2]
        if key in self._l_index:
            return "bool"
        for ent, name, unit in self._x_meta:
            if (ent, name) == key:
                return unit
        raise UnknownSlot(f"{entity}.{slot}")

    def _require_entity(self, entity: str):
        if entity not in self.entities:
            raise UnknownEntity(f"entity {entity!r} is not registered")

    def slot_partition(self) -> dict[str, int]:
        """Slot counts per owner; the sum equals |x| + |s| + |l|."""
        counts: dict[str, int] = {}
        for meta in (self._s_meta, self._l_meta, self._x_meta):
            for entity, _, _ in meta:
                counts[entity] = counts.get(entity, 0) + 1
        return counts

    @property
    def ambient_K(self) -> float:
        return self.get_s(AMBIENT_ID, "T")

    # -- per-kind default slots -------------------------------------------

    def _declare_kind_slots(self, spec: EntitySpec):
        init = spec.initial
        kind = spec.kind
        if kind == "container":
            self._add_s_slot(spec.id, "solvent_kg", "kg", init.get("solvent_kg", 0.0))
            self._add_s_slot(spec.id, "T", "K", init.get("T", self.ambient_K))
            self._add_x_slot(spec.id, "location", "id", init.get("location"))
            self.registry.clamp_cols.append(
                (self._s_index[(spec.id, "solvent_kg")], f"{spec.id}.solvent_kg")
            )
            for name in self.species:
                self._add_species_slot(spec.id, name)
        elif kind == "heater":
            self._add_l_slot(spec.id, "heaterOn", init.get("heaterOn", False))
            self._add_s_slot(spec.id, "T_target", "K", init.get("T_target", self.ambient_K))
            self._add_x_slot(spec.id, "location", "id", init.get("location"))
        elif kind == "liquid-handler":
            self._add_l_slot(spec.id, "tipLoaded", False)
            self._add_l_slot(spec.id, "tipInSolution", False)
            self._add_s_slot(spec.id, "tip_solvent_kg", "kg", 0.0)
            self._add_x_slot(spec.id, "target", "id", None)
            self._add_x_slot(spec.id, "disposal_count", "count", 0)
            self._add_x_slot(
                spec.id, "tips_left", "count", int(spec.params.get("tips", 96))
            )
            for name in self.species:
                self._add_species_slot(spec.id, name)
        elif kind == "scale":
            self._add_s_slot(spec.id, "reading", "kg", 0.0)
        elif kind == "faucet":
            self._add_s_slot(spec.id, "knob_angle", "rad", init.get("knob_angle", 0.0))
        elif kind == "robot-proxy":
            self._add_x_slot(spec.id, "location", "id", init.get("location"))

    def _add_species_slot(self, entity: str, species: str):
        kind = self.entities[entity].kind
        prefix = "tip_m_" if kind == "liquid-handler" else "m_"
        col = self._add_s_slot(entity, prefix + species, "mol/kg", 0.0)
        self.registry.clamp_cols.append((col, f"{entity}.{prefix}{species}"))

    def mixture_slots(self, entity: str) -> tuple[int, list[tuple[str, int]]]:
        """(solvent column, [(species, molality column), ...]) for a holder."""
        spec = self.entities.get(entity)
        if spec is None:
            raise UnknownEntity(f"entity {entity!r} is not registered")
        if spec.kind == "container":
            solvent, prefix = "solvent_kg", "m_"
        elif spec.kind == "liquid-handler":
            solvent, prefix = "tip_solvent_kg", "tip_m_"
        else:
            raise UnknownSlot(f"{entity} ({spec.kind}) holds no mixture")
        cols = [(sp, self._s_index[(entity, prefix + sp)]) for sp in self.species]
        return self._s_index[(entity, solvent)], cols


def register_entity(env: EnvironmentState, spec: EntitySpec) -> str:
    """Register an entity and append its declared slots with defaults.

    Default values are 0.0 for continuous slots and False for logical
    slots unless the spec provides initial values.  Only legal before the
    first step.
    """
    env._check_not_started()
    env._register(spec)
    env._declare_kind_slots(spec)
    for slot in spec.slots:
        initial = spec.initial.get(slot.name, slot.initial)
        if slot.domain == "s":
            env._add_s_slot(spec.id, slot.name, slot.unit, 0.0 if initial is None else initial)
        elif slot.domain == "l":
            env._add_l_slot(spec.id, slot.name, bool(initial))
        elif slot.domain == "x":
            env._add_x_slot(spec.id, slot.name, slot.unit, initial)
        else:
            raise ValueError(f"slot domain must be x/s/l, got {slot.domain!r}")
    # Device kinds answer commands through an auto-registered event.
    from .devices import command_event_for  # deferred: devices imports core

    event = command_event_for(env, spec)
    if event is not None:
        env.registry.events.append(event)
        env.registry.bump()
    from .devices import readout_for

    readout = readout_for(env, spec)
    if readout is not None:
        env.registry.readouts.append(readout)
    return spec.id


def read_slot(env: EnvironmentState, entity: str, slot: str) -> SlotValue:
    """Current value of a slot, with its unit, without mutation."""
    key = (entity, slot)
    if key in env._s_index:
        col = env._s_index[key]
        return SlotValue(float(env._s[col]), env._s_meta[col][2])
    if key in env._l_index:
        return SlotValue(bool(env._l[env._l_index[key]]), "bool")
    if key in env._x:
        return SlotValue(env._x[key], env.slot_unit(entity, slot))
    env._require_entity(entity)
    raise UnknownSlot(f"{entity}.{slot} does not exist")


class EnvironmentBatch:
    """n independent environments sharing one process/event registry.

    The batch owns stacked state arrays S (n, p) and L (n, m); member
    environments hold row views, so per-environment reads/writes and
    vectorized stepping address the same memory.
    """

    def __init__(self, envs: list[EnvironmentState], S: np.ndarray, L: np.ndarray):
        self.envs = envs
        self.S = S
        self.L = L
        self.n_envs = len(envs)
        self.semantics_enabled = True
        self._stepper = None

    def __len__(self) -> int:
        return self.n_envs

    def __getitem__(self, i: int) -> EnvironmentState:
        return self.envs[i]


def clone_batch(env: EnvironmentState, n: int) -> EnvironmentBatch:
    """Deep, independent copies of ``env`` stacked into a batch.

    Mutating one member never affects another; the process/event registry
    is shared and frozen against further registration.
    """
    if n < 1:
        raise ZeroCount(f"batch size must be >= 1, got {n}")
    env.registry.frozen = True
    S = np.tile(env._s, (n, 1))
    L = np.tile(env._l, (n, 1))
    clones = []
    for i in range(n):
        c = object.__new__(EnvironmentState)
        c.dt = env.dt
        c.time = env.time
        c.step_count = env.step_count
        c.rng_seed = env.rng_seed
        c.entities = env.entities  # immutable specs, shared
        c.species = env.species
        c._s = S[i]
        c._l = L[i]
        c._s_meta = env._s_meta
        c._l_meta = env._l_meta
        c._s_index = env._s_index
        c._l_index = env._l_index
        c._x = dict(env._x)
        c._x_meta = env._x_meta
        c.registry = env.registry
        c.semantics_enabled = env.semantics_enabled
        c.integrator = env.integrator
        c.precondition_log = list(env.precondition_log)
        c._pending = ActionVector(dict(env._pending.continuous), dict(env._pending.discrete))
        c._disabled_processes = set(env._disabled_processes)
        c._layout_version = env._layout_version
        c._stepper = None
        clones.append(c)
    return EnvironmentBatch(clones, S, L)


def check_batch_actions(batch: EnvironmentBatch, actions: list) -> None:
    if len(actions) != batch.n_envs:
        raise LengthMismatch(
            f"got {len(actions)} action vectors for {batch.n_envs} environments"
        )


def celsius(T_K: float) -> float:
    return T_K - 273.15


def kelvin_from_celsius(T_C: float) -> float:
    return T_C + 273.15


def ceil_steps(duration_s: float, dt: float) -> int:
    """Number of fixed steps covering ``duration_s`` (⌈duration/dt⌉)."""
    if duration_s <= 0:
        return 0
    n = math.ceil(duration_s / dt - 1e-9)
    return max(n, 1)
