"""Lumped-capacitance thermal network.

Each body is a single node with uniform temperature T (valid for small
Biot number).  Links contribute heat flow rates:

    conduction   Qdot = (k A / d) (T_a - T_b)     [W], antisymmetric
    convection   Qdot = h A (T_air - T)           [W], loss to ambient
    generation   Qdot = K_gen (T_target - T)      [W], proportional control

and each node integrates the first-law energy balance

    m C dT/dt = sum Qdot.

Links may be gated by a logical slot (a contact flag set by place/pick,
or heaterOn); a gated link with gate false contributes exactly zero.
Biot and Rayleigh numbers are advisory diagnostics only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import AMBIENT_ID, EnvironmentState
from .engine import Process, register_process
from .errors import (
    DuplicateId,
    NonPositiveParameter,
    UnknownEntity,
    UnknownNode,
    UnknownSlot,
)

BIOT_LUMPED_LIMIT = 0.1


@dataclass(frozen=True)
class ThermalNode:
    """One lumped body: entity, mass (kg), specific heat (J/(kg K))."""

    entity: str
    m: float
    C: float
    T0: float  # K
    is_ambient: bool = False


@dataclass(frozen=True)
class ThermalLink:
    """One heat-flow coupling; parameters depend on ``kind``.

    conduction: a<->b with k (W/(m K)), A (m^2), d (m)
    convection: node<->ambient with h (W/(m^2 K)), A (m^2)
    generation: into ``node`` with K_gen (W/K) toward the target slot
                (defaults to the node's own T_target)

    ``gate``: None, ("slot", entity, slot) for an existing logical slot,
    or ("contact", obj, surface) which auto-declares a contact flag kept
    in sync by place/pick actions.
    """

    kind: str
    a: str
    b: Optional[str] = None
    k: float = 0.0
    A: float = 0.0
    d: float = 0.0
    h: float = 0.0
    K_gen: float = 0.0
    target: Optional[tuple[str, str]] = None
    gate: Optional[tuple] = None


def conduction(a: str, b: str, k: float, A: float, d: float, gate=None) -> ThermalLink:
    return ThermalLink("conduction", a, b, k=k, A=A, d=d, gate=gate)


def convection(node: str, h: float, A: float, gate=None) -> ThermalLink:
    return ThermalLink("convection", node, AMBIENT_ID, h=h, A=A, gate=gate)


def generation(node: str, K_gen: float, target: tuple[str, str] | None = None, gate=None) -> ThermalLink:
    return ThermalLink("generation", node, None, K_gen=K_gen, target=target, gate=gate)


@dataclass
class _BoundGroup:
    src: np.ndarray = field(default_factory=lambda: np.zeros(0, np.intp))
    dst: np.ndarray = field(default_factory=lambda: np.zeros(0, np.intp))
    coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gates: np.ndarray = field(default_factory=lambda: np.zeros(0, np.intp))


class ThermalNetwork:
    """Node/link container plus the engine process integrating it."""

    def __init__(self):
        self.nodes: dict[str, ThermalNode] = {}
        self.links: list[ThermalLink] = []
        self.process = ThermalProcess(self)

    def node_order(self) -> list[str]:
        return list(self.nodes)

    def stable_dt_limit(self, env: EnvironmentState) -> float:
        """Explicit-Euler stability bound: dt < 2 min(mC / sum of couplings)."""
        totals = {e: 0.0 for e in self.nodes}
        for link in self.links:
            if link.kind == "conduction":
                c = link.k * link.A / link.d
                totals[link.a] += c
                totals[link.b] += c
            elif link.kind == "convection":
                totals[link.a] += link.h * link.A
            else:
                totals[link.a] += link.K_gen
        limit = np.inf
        for entity, total in totals.items():
            node = self.nodes[entity]
            if node.is_ambient or total == 0.0:
                continue
            limit = min(limit, 2.0 * node.m * node.C / total)
        return float(limit)


def _network(env: EnvironmentState) -> ThermalNetwork:
    net = env.registry.thermal
    if net is None:
        net = ThermalNetwork()
        env.registry.thermal = net
        net.nodes[AMBIENT_ID] = ThermalNode(AMBIENT_ID, 0.0, 0.0, env.ambient_K, True)
        register_process(env, net.process)
    return net


def add_thermal_node(env: EnvironmentState, entity: str, m: float, C: float, T0: float) -> None:
    """Attach a lumped body to ``entity``; creates/sets its T slot (K)."""
    env._check_not_started()
    if entity not in env.entities:
        raise UnknownEntity(f"entity {entity!r} is not registered")
    if m <= 0 or C <= 0:
        raise NonPositiveParameter("thermal node requires m > 0 and C > 0")
    net = _network(env)
    if entity in net.nodes:
        raise DuplicateId(f"entity {entity!r} already has a thermal node")
    if not env.has_slot(entity, "T"):
        env._add_s_slot(entity, "T", "K", float(T0))
    else:
        env.set_s(entity, "T", float(T0))
    net.nodes[entity] = ThermalNode(entity, float(m), float(C), float(T0))
    env.registry.bump()


def _resolve_gate(env: EnvironmentState, gate) -> int:
    """Logical column for a link gate, declaring contact flags on demand."""
    tag = gate[0]
    if tag == "slot":
        return env.l_col(gate[1], gate[2])
    if tag == "contact":
        obj, surface = gate[1], gate[2]
        for entity in (obj, surface):
            if entity not in env.entities:
                raise UnknownEntity(f"contact gate references {entity!r}")
        name = f"contact_{surface}"
        if not env.has_slot(obj, name):
            touching = env._x.get((obj, "location")) == surface
            col = env._add_l_slot(obj, name, touching)
        else:
            col = env.l_col(obj, name)
        cols = env.registry.contact_gates.setdefault((obj, surface), [])
        if col not in cols:
            cols.append(col)
        return col
    raise UnknownSlot(f"unknown gate spec {gate!r}")


def add_link(env: EnvironmentState, link: ThermalLink) -> None:
    """Register a heat-flow link between existing thermal nodes."""
    env._check_not_started()
    net = _network(env)
    if link.a not in net.nodes:
        raise UnknownNode(f"{link.a!r} has no thermal node")
    if link.kind == "conduction":
        if link.b not in net.nodes:
            raise UnknownNode(f"{link.b!r} has no thermal node")
        if link.k <= 0 or link.A <= 0 or link.d <= 0:
            raise NonPositiveParameter("conduction requires k, A, d > 0")
    elif link.kind == "convection":
        if link.h <= 0 or link.A <= 0:
            raise NonPositiveParameter("convection requires h, A > 0")
    elif link.kind == "generation":
        if link.K_gen <= 0:
            raise NonPositiveParameter("generation requires K_gen > 0")
        target = link.target or (link.a, "T_target")
        env.s_col(*target)  # must exist
        link = ThermalLink(
            "generation", link.a, None, K_gen=link.K_gen, target=target, gate=link.gate
        )
    else:
        raise ValueError(f"unknown link kind {link.kind!r}")
    if link.gate is not None:
        _resolve_gate(env, link.gate)
    net.links.append(link)
    env.registry.bump()


class ThermalProcess(Process):
    """Engine process summing link heat flows into dT/dt = sum Q / (m C).

    All temperatures are gathered from the start-of-step state, so
    conduction flows are exactly antisymmetric and a closed conduction
    network conserves sum(m C T) to rounding.
    """

    def __init__(self, net: ThermalNetwork):
        super().__init__("thermal")
        self.net = net
        self._n = -1

    def bind(self, env: EnvironmentState):
        net = self.net
        order = [e for e in net.nodes if not net.nodes[e].is_ambient]
        pos = {e: i for i, e in enumerate(order)}
        self.k = len(order)
        self.node_cols = np.array([env.s_col(e, "T") for e in order], dtype=np.intp)
        self.inv_mC = np.array(
            [1.0 / (net.nodes[e].m * net.nodes[e].C) for e in order]
        )
        self.ambient_col = env.s_col(AMBIENT_ID, "T")

        def gate_col(link):
            return _resolve_gate(env, link.gate) if link.gate is not None else None

        groups = {}
        for key in ("cond", "cond_g", "conv", "conv_g", "gen", "gen_g"):
            groups[key] = {"src": [], "dst": [], "coef": [], "gates": []}
        for link in net.links:
            g = gate_col(link)
            if link.kind == "conduction":
                grp = groups["cond_g" if g is not None else "cond"]
                grp["src"].append(pos[link.a])
                grp["dst"].append(pos[link.b])
                grp["coef"].append(link.k * link.A / link.d)
            elif link.kind == "convection":
                grp = groups["conv_g" if g is not None else "conv"]
                grp["src"].append(pos[link.a])
                grp["coef"].append(link.h * link.A)
            else:
                grp = groups["gen_g" if g is not None else "gen"]
                grp["src"].append(pos[link.a])
                grp["dst"].append(env.s_col(*link.target))
                grp["coef"].append(link.K_gen)
            if g is not None:
                grp["gates"].append(g)
        self.groups = {
            key: _BoundGroup(
                src=np.array(g["src"], dtype=np.intp),
                dst=np.array(g["dst"], dtype=np.intp),
                coef=np.array(g["coef"], dtype=float),
                gates=np.array(g["gates"], dtype=np.intp),
            )
            for key, g in groups.items()
        }
        self._n = -1

    def _offsets(self, n: int):
        if self._n != n:
            self._off = (np.arange(n, dtype=np.intp) * self.k)[:, None]
            self._n = n
        return self._off

    def _scatter(self, Q, cols, vals, off):
        idx = (off + cols[None, :]).reshape(-1)
        np.add.at(Q.reshape(-1), idx, vals.reshape(-1))

    def contribute(self, ctx, DS, enabled):
        if self.k == 0:
            return enabled
        S, L, n = ctx.S, ctx.L, ctx.n
        T = S[:, self.node_cols]
        Q = np.zeros_like(T)
        off = self._offsets(n)
        g = self.groups

        grp = g["cond"]
        if grp.src.size:
            q = (T[:, grp.src] - T[:, grp.dst]) * grp.coef
            self._scatter(Q, grp.src, -q, off)
            self._scatter(Q, grp.dst, q, off)
        grp = g["cond_g"]
        if grp.src.size:
            q = (T[:, grp.src] - T[:, grp.dst]) * grp.coef
            q *= L[:, grp.gates]
            self._scatter(Q, grp.src, -q, off)
            self._scatter(Q, grp.dst, q, off)

        Ta = S[:, self.ambient_col][:, None]
        grp = g["conv"]
        if grp.src.size:
            q = (Ta - T[:, grp.src]) * grp.coef
            self._scatter(Q, grp.src, q, off)
        grp = g["conv_g"]
        if grp.src.size:
            q = (Ta - T[:, grp.src]) * grp.coef
            q *= L[:, grp.gates]
            self._scatter(Q, grp.src, q, off)

        grp = g["gen"]
        if grp.src.size:
            q = (S[:, grp.dst] - T[:, grp.src]) * grp.coef
            self._scatter(Q, grp.src, q, off)
        grp = g["gen_g"]
        if grp.src.size:
            q = (S[:, grp.dst] - T[:, grp.src]) * grp.coef
            q *= L[:, grp.gates]
            self._scatter(Q, grp.src, q, off)

        dTdt = Q
        dTdt *= self.inv_mC
        if enabled is not None:
            dTdt *= enabled[:, None]
        DS[:, self.node_cols] += dTdt
        return enabled


def thermal_process(env: EnvironmentState) -> dict[str, float]:
    """Pure evaluation of per-node dT/dt from the current state."""
    net = env.registry.thermal
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
    order = [e for e in net.nodes if not net.nodes[e].is_ambient]
    return {e: float(DS[0, env.s_col(e, "T")]) for e in order}


def biot_number(h: float, k: float, volume: float, area: float) -> float:
    """Bi = h L_c / k with L_c = V / A; warns above the lumped-model limit."""
    if h <= 0 or k <= 0 or volume <= 0 or area <= 0:
        raise NonPositiveParameter("biot_number requires all inputs > 0")
    bi = h * (volume / area) / k
    if bi > BIOT_LUMPED_LIMIT:
        warnings.warn(
            f"Bi = {bi:.3g} > {BIOT_LUMPED_LIMIT}: uniform-temperature lumping "
            "is a coarse approximation for this body",
            stacklevel=2,
        )
    return bi


def rayleigh_number(g: float, beta: float, dT: float, L: float, nu: float, alpha: float) -> float:
    """Ra = Gr Pr with Gr = g beta dT L^3 / nu^2 and Pr = nu / alpha."""
    if nu <= 0 or alpha <= 0 or L <= 0:
        raise NonPositiveParameter("rayleigh_number requires nu, alpha, L > 0")
    grashof = g * beta * dT * L**3 / nu**2
    prandtl = nu / alpha
    return grashof * prandtl


def rayleigh_regime(Ra: float) -> str:
    """Classify buoyancy-driven mixing: conduction / transition / convection."""
    if Ra < 1e3:
        return "conduction-dominated"
    if Ra <= 1e5:
        return "transition"
    return "convection-dominated"
