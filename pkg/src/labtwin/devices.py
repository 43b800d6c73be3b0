"""Semantic device models: heater, liquid handler, scale, faucet.

Device commands are discrete actions consumed in the event phase of the
step; the per-device command event is installed automatically when the
entity is registered.  The public ``*_command`` helpers validate against
the current state (one queued command per device per step) and enqueue
the action for the next step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ActionVector, EntitySpec, EnvironmentState
from .engine import Event, Process
from .errors import (
    CapacityExceeded,
    CommandPending,
    Overdraw,
    PreconditionFailed,
    UnknownEntity,
)

DEFAULT_DENSITY_G_PER_ML = 1.0
DEFAULT_TIP_CAPACITY_UL = 1000.0


def _require_kind(env: EnvironmentState, entity: str, kind: str) -> EntitySpec:
    spec = env.entities.get(entity)
    if spec is None or spec.kind != kind:
        raise UnknownEntity(f"{entity!r} is not a registered {kind}")
    return spec


def _enqueue(env: EnvironmentState, key: tuple[str, str], payload) -> None:
    if key in env._pending.discrete:
        raise CommandPending(f"{key[0]} already has a {key[1]!r} command queued")
    env._pending.discrete[key] = payload


# -- heater --------------------------------------------------------------------


class HeaterCommandEvent(Event):
    """Applies {on, T_target}; the generation link is gated on heaterOn."""

    action_only = True

    def __init__(self, entity: str):
        super().__init__(f"{entity}.set")
        self.entity = entity

    def trigger(self, env, actions):
        return (self.entity, "set") in actions.discrete

    def apply(self, env, actions):
        payload = actions.discrete[(self.entity, "set")]
        env.set_l(self.entity, "heaterOn", bool(payload["on"]))
        target = payload.get("T_target")
        if target is not None:
            env.set_s(self.entity, "T_target", float(target))


def heater_command(env: EnvironmentState, entity: str, on: bool, T_target: float | None = None) -> None:
    """Queue a heater on/off + setpoint command for the next step."""
    _require_kind(env, entity, "heater")
    _enqueue(env, (entity, "set"), {"on": bool(on), "T_target": T_target})


# -- liquid handler --------------------------------------------------------------


@dataclass(frozen=True)
class LoadTip:
    pass


@dataclass(frozen=True)
class RemoveTip:
    pass


@dataclass(frozen=True)
class MoveToWell:
    target: str


@dataclass(frozen=True)
class Aspirate:
    volume_uL: float


@dataclass(frozen=True)
class Dispense:
    volume_uL: float


LiquidHandlerCmdType = LoadTip | RemoveTip | MoveToWell | Aspirate | Dispense


def _tip_volume_uL(env: EnvironmentState, entity: str, density: float) -> float:
    return env.get_s(entity, "tip_solvent_kg") * 1e6 / density


def _check_lh_command(env: EnvironmentState, entity: str, cmd) -> None:
    """Validate a liquid-handler command against the current state."""
    spec = env.entities[entity]
    density = float(spec.params.get("density_g_per_mL", DEFAULT_DENSITY_G_PER_ML))
    capacity = float(spec.params.get("capacity_uL", DEFAULT_TIP_CAPACITY_UL))
    if isinstance(cmd, LoadTip):
        if env.get_l(entity, "tipLoaded"):
            raise PreconditionFailed("tipFree", "a tip is already loaded")
        if env.get_x(entity, "tips_left") < 1:
            raise PreconditionFailed("tipAvailable", "tip rack is empty")
    elif isinstance(cmd, RemoveTip):
        if not env.get_l(entity, "tipLoaded"):
            raise PreconditionFailed("tipLoaded")
    elif isinstance(cmd, MoveToWell):
        if cmd.target not in env.entities or env.entities[cmd.target].kind != "container":
            raise UnknownEntity(f"well {cmd.target!r} is not a container")
    elif isinstance(cmd, Aspirate):
        if not env.get_l(entity, "tipLoaded"):
            raise PreconditionFailed("tipLoaded")
        if not env.get_l(entity, "tipInSolution"):
            raise PreconditionFailed("tipInSolution")
        target = env.get_x(entity, "target")
        mass = cmd.volume_uL * 1e-6 * density
        if mass > env.get_s(target, "solvent_kg") * (1 + 1e-12):
            raise Overdraw(f"aspirate {cmd.volume_uL} uL from {target}")
        if _tip_volume_uL(env, entity, density) + cmd.volume_uL > capacity * (1 + 1e-9):
            raise CapacityExceeded(f"tip capacity {capacity} uL")
    elif isinstance(cmd, Dispense):
        if not env.get_l(entity, "tipLoaded"):
            raise PreconditionFailed("tipLoaded")
        if env.get_x(entity, "target") is None:
            raise PreconditionFailed("targetSelected")
        if cmd.volume_uL > _tip_volume_uL(env, entity, density) * (1 + 1e-9):
            raise Overdraw(f"dispense {cmd.volume_uL} uL exceeds tip contents")
    else:
        raise TypeError(f"unknown liquid-handler command {cmd!r}")


class LiquidHandlerCommandEvent(Event):
    action_only = True

    def __init__(self, entity: str):
        super().__init__(f"{entity}.command")
        self.entity = entity

    def trigger(self, env, actions):
        return (self.entity, "command") in actions.discrete

    def apply(self, env, actions):
        from .kinetics import transfer_between

        entity = self.entity
        cmd = actions.discrete[(entity, "command")]
        _check_lh_command(env, entity, cmd)
        spec = env.entities[entity]
        density = float(spec.params.get("density_g_per_mL", DEFAULT_DENSITY_G_PER_ML))
        if isinstance(cmd, LoadTip):
            if not env.get_l(entity, "tipLoaded"):  # idempotent within a step
                env.set_l(entity, "tipLoaded", True)
                env.set_x(entity, "tips_left", env.get_x(entity, "tips_left") - 1)
        elif isinstance(cmd, RemoveTip):
            if env.get_l(entity, "tipLoaded"):
                env.set_l(entity, "tipLoaded", False)
                env.set_x(entity, "disposal_count", env.get_x(entity, "disposal_count") + 1)
        elif isinstance(cmd, MoveToWell):
            env.set_x(entity, "target", cmd.target)
            env.set_l(
                entity, "tipInSolution", env.get_s(cmd.target, "solvent_kg") > 0.0
            )
        elif isinstance(cmd, Aspirate):
            mass = cmd.volume_uL * 1e-6 * density
            transfer_between(env, env.get_x(entity, "target"), entity, mass)
        elif isinstance(cmd, Dispense):
            mass = cmd.volume_uL * 1e-6 * density
            transfer_between(env, entity, env.get_x(entity, "target"), mass)


def liquid_handler_command(env: EnvironmentState, entity: str, cmd: LiquidHandlerCmdType) -> None:
    """Validate a command against the current state and queue it.

    Commands execute in the event phase of the next step; queue at most
    one command per device between steps.
    """
    _require_kind(env, entity, "liquid-handler")
    _check_lh_command(env, entity, cmd)
    _enqueue(env, (entity, "command"), cmd)


# -- scale ---------------------------------------------------------------------


def _rests_on(env: EnvironmentState, entity: str, base: str) -> bool:
    """True if ``entity`` is (transitively) located on/inside ``base``."""
    seen = set()
    node = entity
    while node is not None and node not in seen:
        seen.add(node)
        node = env._x.get((node, "location"))
        if node == base:
            return True
    return False


def scale_read(env: EnvironmentState, entity: str) -> float:
    """Total mass (kg) on the platform: tares plus mixture masses; pure."""
    _require_kind(env, entity, "scale")
    total = 0.0
    for other, spec in env.entities.items():
        if other == entity or not env.has_slot(other, "location"):
            continue
        if not _rests_on(env, other, entity):
            continue
        total += float(spec.params.get("tare_kg", 0.0))
        if spec.kind in ("container", "liquid-handler"):
            solvent_col, species_cols = env.mixture_slots(other)
            total += float(env._s[solvent_col])
            for name, col in species_cols:
                molar = env.species[name].molar_mass
                if molar is not None:
                    total += float(env._s[col]) * float(env._s[solvent_col]) * molar * 1e-3
    return total


def make_scale_readout(entity: str):
    """Per-step refresh keeping the scale's reading slot current."""

    def readout(env: EnvironmentState) -> None:
        env._s[env.s_col(entity, "reading")] = scale_read(env, entity)

    return readout


# -- faucet ---------------------------------------------------------------------


class FaucetKnobEvent(Event):
    action_only = True

    def __init__(self, entity: str):
        super().__init__(f"{entity}.set_knob")
        self.entity = entity

    def trigger(self, env, actions):
        return (self.entity, "set_knob") in actions.discrete

    def apply(self, env, actions):
        payload = actions.discrete[(self.entity, "set_knob")]
        theta_max = float(env.entities[self.entity].params.get("theta_max_rad", np.pi))
        angle = min(max(float(payload["angle"]), 0.0), theta_max)
        env.set_s(self.entity, "knob_angle", angle)


def set_knob(env: EnvironmentState, entity: str, angle: float) -> None:
    """Queue a knob rotation; the angle is clamped to [0, theta_max]."""
    _require_kind(env, entity, "faucet")
    _enqueue(env, (entity, "set_knob"), {"angle": float(angle)})


class FaucetProcess(Process):
    """Pure-solvent inflow d(solvent)/dt = c * angle, diluting solutes.

    The dilution term d[X]/dt = -[X] * flow / solvent keeps molality
    consistent with the growing solvent mass to first order in dt.
    """

    def __init__(self, entity: str, target: str, flow_coeff: float):
        super().__init__(f"{entity}.flow", owner=entity)
        self.entity = entity
        self.target = target
        self.flow_coeff = flow_coeff  # kg/(s rad)

    def validate(self, env):
        _require_kind(env, self.entity, "faucet")
        if self.target not in env.entities:
            raise UnknownEntity(f"faucet target {self.target!r} is not registered")

    def bind(self, env):
        self.angle_col = env.s_col(self.entity, "knob_angle")
        self.solvent_col, cols = env.mixture_slots(self.target)
        self.species_cols = np.array([c for _, c in cols], dtype=np.intp)

    def contribute(self, ctx, DS, enabled):
        S = ctx.S
        angle = S[:, self.angle_col]
        flow = self.flow_coeff * angle
        active = angle > 0.0
        if enabled is not None:
            flow = flow * enabled
            active &= enabled
        DS[:, self.solvent_col] += flow
        solvent = S[:, self.solvent_col]
        safe = solvent > 0.0
        ratio = np.where(safe, flow / np.where(safe, solvent, 1.0), 0.0)
        for col in self.species_cols:
            DS[:, col] -= S[:, col] * ratio
        return active


def faucet_process(env: EnvironmentState, entity: str) -> dict[str, float]:
    """Pure per-slot derivative contribution of one faucet, for inspection."""
    _require_kind(env, entity, "faucet")
    for proc in env.registry.processes:
        if isinstance(proc, FaucetProcess) and proc.entity == entity:
            proc.bind(env)

            class _Ctx:
                S = env._s.reshape(1, -1)
                L = env._l.reshape(1, -1)
                envs = [env]
                actions = [None]
                n = 1

            DS = np.zeros_like(_Ctx.S)
            proc.contribute(_Ctx, DS, None)
            out = {}
            for col in np.nonzero(DS[0])[0]:
                ent, slot, _ = env._s_meta[col]
                out[f"{ent}.{slot}"] = float(DS[0, col])
            return out
    raise UnknownEntity(f"faucet {entity!r} has no registered flow process")


# -- registration hooks (called by core.register_entity) -------------------------


def command_event_for(env: EnvironmentState, spec: EntitySpec) -> Event | None:
    if spec.kind == "heater":
        return HeaterCommandEvent(spec.id)
    if spec.kind == "liquid-handler":
        return LiquidHandlerCommandEvent(spec.id)
    if spec.kind == "faucet":
        return FaucetKnobEvent(spec.id)
    return None


def readout_for(env: EnvironmentState, spec: EntitySpec):
    if spec.kind == "scale":
        return make_scale_readout(spec.id)
    return None
