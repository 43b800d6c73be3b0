"""Mixtures, mass balance, and temperature-dependent reaction kinetics.

Concentrations are molalities (mol per kg of *solvent*); transfers move
solvent mass with solutes in proportion (well-mixed assumption), so total
solvent mass and per-species moles are conserved exactly.

Reaction templates are explicit species-level stoichiometry with
user-supplied rate orders.  The rate constant is either fixed or follows
the Arrhenius law

    k(T) = A exp(-Ea / (R T)),    R = 8.314462618 J/(mol K),

with T clamped to a physically relevant range for numerical stability.
A reaction contributes only while every reactant is present and the
solution temperature lies inside the template's T window; outside it the
contribution is exactly zero.  Reactions are forward-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import EnvironmentState
from .engine import Process, register_process
from .errors import (
    NegativeMass,
    NegativeMoles,
    NonPositiveA,
    NonPositiveParameter,
    NonPositiveSolvent,
    Overdraw,
    ValidationError,
)

R_GAS = 8.314462618  # J/(mol K)
ARRHENIUS_CLAMP_K = (273.15, 473.15)  # default; scenario-overridable

# Relative slack for "pour everything" sequences whose parts were split
# into per-step floating-point increments.
_POUR_EPS = 1e-12


@dataclass(frozen=True)
class Species:
    name: str
    molar_mass: Optional[float] = None  # g/mol, for mass bookkeeping only


@dataclass(frozen=True)
class Mixture:
    """Solvent mass plus per-species molality; a value object.

    Total moles of a species = molality * solvent_mass.
    """

    solvent_mass: float  # kg
    molality: dict[str, float] = field(default_factory=dict)  # mol/kg solvent
    color: Optional[str] = None

    def moles(self, species: str) -> float:
        return self.molality.get(species, 0.0) * self.solvent_mass

    def total_mass(self, registry: dict[str, Species] | None = None) -> float:
        """Solvent plus solute mass (kg); species without molar mass weigh 0."""
        total = self.solvent_mass
        if registry:
            for name, m in self.molality.items():
                sp = registry.get(name)
                if sp is not None and sp.molar_mass is not None:
                    total += m * self.solvent_mass * sp.molar_mass * 1e-3
        return total


def make_mixture(solvent_mass: float, solutes: Sequence[tuple[str, float]] = (),
                 color: str | None = None) -> Mixture:
    """Mixture from solvent mass (kg) and absolute solute amounts (mol)."""
    if solvent_mass <= 0:
        raise NonPositiveSolvent(f"solvent mass must be > 0, got {solvent_mass}")
    molality = {}
    for name, moles in solutes:
        if moles < 0:
            raise NegativeMoles(f"{name}: {moles} mol")
        molality[name] = moles / solvent_mass
    return Mixture(float(solvent_mass), molality, color)


def pour(src: Mixture, dst: Mixture, mass: float) -> tuple[Mixture, Mixture]:
    """Move ``mass`` kg of solvent from src to dst, solutes in proportion."""
    if mass < 0:
        raise NegativeMass(f"pour mass {mass} < 0")
    if mass > src.solvent_mass * (1.0 + _POUR_EPS):
        raise Overdraw(f"pour {mass} kg from {src.solvent_mass} kg")
    if mass == 0.0:
        return src, dst
    mass = min(mass, src.solvent_mass)
    remaining = src.solvent_mass - mass
    new_dst_solvent = dst.solvent_mass + mass
    dst_molality = {}
    for name in dict(dst.molality, **src.molality):
        moved = src.molality.get(name, 0.0) * mass
        dst_molality[name] = (
            dst.molality.get(name, 0.0) * dst.solvent_mass + moved
        ) / new_dst_solvent
    if remaining <= 0.0:
        src_out = Mixture(0.0, {name: 0.0 for name in src.molality}, src.color)
    else:
        src_out = Mixture(remaining, dict(src.molality), src.color)
    return src_out, Mixture(new_dst_solvent, dst_molality, dst.color)


# -- environment-backed mixtures ----------------------------------------------


def declare_species(env: EnvironmentState, name: str, molar_mass: float | None = None) -> Species:
    """Register a species; every mixture holder gains a molality slot for it."""
    env._check_not_started()
    if name in env.species:
        raise ValidationError(f"species {name!r} already declared")
    sp = Species(name, molar_mass)
    env.species[name] = sp
    for entity, spec in env.entities.items():
        if spec.kind in ("container", "liquid-handler"):
            env._add_species_slot(entity, name)
    return sp


def set_mixture(env: EnvironmentState, container: str, mixture: Mixture) -> None:
    """Load a mixture into a container's state slots (setup-time)."""
    for name in mixture.molality:
        if name not in env.species:
            raise ValidationError(f"mixture references undeclared species {name!r}")
    solvent_col, species_cols = env.mixture_slots(container)
    env._s[solvent_col] = mixture.solvent_mass
    for name, col in species_cols:
        env._s[col] = mixture.molality.get(name, 0.0)


def mixture_of(env: EnvironmentState, container: str) -> Mixture:
    """Snapshot of a container's current mixture."""
    solvent_col, species_cols = env.mixture_slots(container)
    return Mixture(
        float(env._s[solvent_col]),
        {name: float(env._s[col]) for name, col in species_cols},
    )


def transfer_between(env: EnvironmentState, src: str, dst: str, mass: float) -> None:
    """Exact solvent-basis transfer between two mixture holders.

    Shared by pours (kinematic phase) and liquid-handler aspirate/dispense;
    conserves solvent mass and per-species moles to rounding.
    """
    if mass < 0:
        raise NegativeMass(f"transfer mass {mass} < 0")
    if mass == 0.0 or src == dst:
        return
    s = env._s
    src_solv, src_cols = env.mixture_slots(src)
    dst_solv, dst_cols = env.mixture_slots(dst)
    available = s[src_solv]
    if mass > available * (1.0 + _POUR_EPS):
        raise Overdraw(f"transfer {mass} kg from {src}: only {available} kg available")
    mass = min(mass, available)
    new_src = available - mass
    new_dst = s[dst_solv] + mass
    for (_, src_col), (_, dst_col) in zip(src_cols, dst_cols):
        moved = s[src_col] * mass
        s[dst_col] = (s[dst_col] * s[dst_solv] + moved) / new_dst
        if new_src <= 0.0:
            s[src_col] = 0.0
    s[src_solv] = max(new_src, 0.0)
    s[dst_solv] = new_dst


# -- rate laws -----------------------------------------------------------------


@dataclass(frozen=True)
class ConstantRate:
    k: float

    def rate_constant(self, T):
        return self.k if np.isscalar(T) else np.full_like(T, self.k)


@dataclass(frozen=True)
class ArrheniusRate:
    A: float           # pre-exponential, units match the overall order
    Ea: float          # activation energy, J/mol
    clamp: tuple[float, float] = ARRHENIUS_CLAMP_K

    def rate_constant(self, T):
        return arrhenius_k(self.A, self.Ea, T, self.clamp)


def arrhenius_k(A: float, Ea: float, T, clamp: tuple[float, float] = ARRHENIUS_CLAMP_K):
    """k = A exp(-Ea/(R T)) with T clamped to ``clamp`` (K) for stability."""
    if A <= 0:
        raise NonPositiveA(f"pre-exponential factor must be > 0, got {A}")
    if Ea < 0:
        raise NonPositiveParameter(f"activation energy must be >= 0, got {Ea}")
    Tc = np.clip(T, clamp[0], clamp[1])
    return A * np.exp(-Ea / (R_GAS * Tc))


@dataclass(frozen=True)
class Reactant:
    species: str
    nu: int           # stoichiometric coefficient, >= 1
    order: float      # rate order, >= 0


@dataclass(frozen=True)
class ProductTerm:
    species: str
    nu: int


@dataclass(frozen=True)
class ReactionTemplate:
    """Forward-only reaction with explicit orders and kinetics parameters."""

    name: str
    reactants: tuple[Reactant, ...]
    products: tuple[ProductTerm, ...]
    kinetics: ConstantRate | ArrheniusRate
    T_range: tuple[float, float] = (0.0, np.inf)  # K
    containers: Optional[tuple[str, ...]] = None  # None = all containers

    def __post_init__(self):
        for r in self.reactants:
            if r.order < 0:
                raise ValidationError(f"{self.name}: order of {r.species} < 0")
            if r.nu < 1 or int(r.nu) != r.nu:
                raise ValidationError(f"{self.name}: coefficient of {r.species} must be an integer >= 1")
        for p in self.products:
            if p.nu < 1 or int(p.nu) != p.nu:
                raise ValidationError(f"{self.name}: coefficient of {p.species} must be an integer >= 1")


def reaction_rate(tpl: ReactionTemplate, mix: Mixture, T: float) -> float:
    """Gated rate k(T) * prod [reactant]^order in mol/(kg s); 0 when gated off."""
    if not (tpl.T_range[0] <= T <= tpl.T_range[1]):
        return 0.0
    rate = float(np.asarray(tpl.kinetics.rate_constant(T)))
    for r in tpl.reactants:
        c = mix.molality.get(r.species, 0.0)
        if c <= 0.0:
            return 0.0
        rate *= c**r.order
    return rate


def species_rates(tpl: ReactionTemplate, mix: Mixture, T: float) -> dict[str, float]:
    """Per-species d[X]/dt: -nu*rate for reactants, +nu*rate for products."""
    rate = reaction_rate(tpl, mix, T)
    out: dict[str, float] = {}
    for r in tpl.reactants:
        out[r.species] = out.get(r.species, 0.0) - r.nu * rate
    for p in tpl.products:
        out[p.species] = out.get(p.species, 0.0) + p.nu * rate
    return out


# -- engine process --------------------------------------------------------------


class ReactionNetwork:
    def __init__(self):
        self.templates: list[ReactionTemplate] = []
        self.process = KineticsProcess(self)


def add_reaction(env: EnvironmentState, tpl: ReactionTemplate) -> None:
    """Register a reaction template; first call installs the kinetics process."""
    env._check_not_started()
    for term in (*tpl.reactants, *tpl.products):
        if term.species not in env.species:
            raise ValidationError(f"{tpl.name}: species {term.species!r} not declared")
    if tpl.containers is not None:
        for c in tpl.containers:
            spec = env.entities.get(c)
            if spec is None or spec.kind != "container":
                raise ValidationError(f"{tpl.name}: {c!r} is not a container")
    net = env.registry.reactions
    if net is None:
        net = ReactionNetwork()
        env.registry.reactions = net
        register_process(env, net.process)
    if any(t.name == tpl.name for t in net.templates):
        raise ValidationError(f"reaction {tpl.name!r} already registered")
    net.templates.append(tpl)
    env.registry.bump()


@dataclass
class _Site:
    T_col: int
    t_lo: float
    t_hi: float
    kin: ConstantRate | ArrheniusRate
    consume: list[tuple[int, float, float]]  # (col, nu, order)
    produce: list[tuple[int, float]]


class KineticsProcess(Process):
    """One engine process applying every template in every scoped container.

    The per-site contribution is evaluated from start-of-step molalities
    and temperature; the engine clamps molalities at zero after the Euler
    step, so depletion ends a reaction without going negative.
    """

    def __init__(self, net: ReactionNetwork):
        super().__init__("kinetics")
        self.net = net

    def bind(self, env: EnvironmentState):
        sites: list[_Site] = []
        containers_all = [
            e for e, spec in env.entities.items() if spec.kind == "container"
        ]
        for tpl in self.net.templates:
            scope = tpl.containers if tpl.containers is not None else containers_all
            for container in scope:
                consume = []
                for r in tpl.reactants:
                    col = env.s_col(container, f"m_{r.species}")
                    consume.append((col, float(r.nu), float(r.order)))
                produce = [
                    (env.s_col(container, f"m_{p.species}"), float(p.nu))
                    for p in tpl.products
                ]
                sites.append(
                    _Site(
                        T_col=env.s_col(container, "T"),
                        t_lo=tpl.T_range[0],
                        t_hi=tpl.T_range[1],
                        kin=tpl.kinetics,
                        consume=consume,
                        produce=produce,
                    )
                )
        self.sites = sites

    def contribute(self, ctx, DS, enabled):
        S, n = ctx.S, ctx.n
        active = np.zeros(n, dtype=bool)
        for site in self.sites:
            T = S[:, site.T_col]
            k = site.kin.rate_constant(T)
            gate = (T >= site.t_lo) & (T <= site.t_hi)
            rate = np.array(k, dtype=float, copy=True)
            for col, _nu, order in site.consume:
                c = S[:, col]
                gate &= c > 0.0
                if order == 1.0:
                    rate = rate * c
                elif order != 0.0:
                    rate = rate * np.power(c, order)
            rate *= gate
            if enabled is not None:
                rate *= enabled
                gate &= enabled
            active |= gate
            for col, nu, _order in site.consume:
                DS[:, col] -= nu * rate
            for col, nu in site.produce:
                DS[:, col] += nu * rate
        return active


def kinetics_process(env: EnvironmentState) -> dict[tuple[str, str], float]:
    """Pure evaluation of per-slot d(molality)/dt from the current state."""
    net = env.registry.reactions
    if net is None:
        return {}
    proc = net.process
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
        entity, slot, _ = env._s_meta[col]
        out[(entity, slot)] = float(DS[0, col])
    return out
