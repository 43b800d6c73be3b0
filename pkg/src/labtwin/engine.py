"""Integrated step loop: kinematic proxy, processes, events.

One step advances the extended state in three phases:

1. kinematic proxy -- discrete action side effects on containment and
   contact, plus in-flight timed transfers (pour increments);
2. process phase -- all active processes contribute additive derivatives
   evaluated against the start-of-step continuous state, one explicit
   Euler step of size dt (RK4 optional), then clamps;
3. event phase -- triggers evaluated in registration order, effects
   mutate logical state and may swap behaviour.

Batches are stepped on stacked (n, p) arrays with the same elementwise
operations as a single environment, so batch results are bit-identical
to sequential runs.  The environment variable ``LABTWIN_THREADS`` caps
optional chunk-parallel batch stepping (default 1 = single thread).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import ActionVector, EnvironmentBatch, EnvironmentState, check_batch_actions
from .errors import (
    CapacityExceeded,
    DuplicateId,
    NegativeMass,
    NonFiniteState,
    Overdraw,
    PreconditionFailed,
    UnknownChannel,
    UnknownEntity,
    UnknownSlot,
)

_EMPTY = ActionVector()


@dataclass(frozen=True)
class StepReport:
    """Pure observation of one step: what fired, ran, and got clamped."""

    fired_events: tuple[str, ...] = ()
    active_processes: tuple[str, ...] = ()
    clamps: tuple[tuple[str, str], ...] = ()


class Process:
    """A continuous behaviour contributing additive derivatives on s-slots.

    Subclasses either override the vectorized ``contribute`` (built-in
    thermal/kinetics/faucet models do) or use :class:`CallbackProcess`.
    Contributions are evaluated against the start-of-step state only; an
    inactive process contributes exactly zero.
    """

    def __init__(self, id: str, owner: str | None = None):
        self.id = id
        self.owner = owner

    def validate(self, env: EnvironmentState) -> None:
        """Raise UnknownSlot/UnknownEntity if references do not resolve."""

    def bind(self, env: EnvironmentState) -> None:
        """Resolve slot indices against the environment layout."""

    def contribute(self, ctx: "_StepContext", DS: np.ndarray, enabled) -> np.ndarray | None:
        """Add derivative contributions into DS for enabled rows.

        Returns a per-environment activity mask, or None meaning "active
        everywhere enabled".
        """
        raise NotImplementedError


class CallbackProcess(Process):
    """Process defined by plain Python callables (the extension surface).

    ``derivative(env, actions)`` returns a mapping (entity, slot) -> ds/dt;
    ``precondition(env, actions)`` gates it.  ``slots`` lists every slot the
    callbacks reference so registration can validate them.
    """

    def __init__(self, id, slots, derivative, precondition=None, owner=None):
        super().__init__(id, owner)
        self.slots = list(slots)
        self.derivative = derivative
        self.precondition = precondition
        self._cols: dict[tuple[str, str], int] = {}

    def validate(self, env):
        for entity, slot in self.slots:
            if entity not in env.entities:
                raise UnknownEntity(f"process {self.id!r} references {entity!r}")
            if not env.has_slot(entity, slot):
                raise UnknownSlot(f"process {self.id!r} references {entity}.{slot}")

    def bind(self, env):
        self._cols = dict(env._s_index)

    def contribute(self, ctx, DS, enabled):
        n = ctx.n
        mask = np.zeros(n, dtype=bool)
        for i in range(n):
            if enabled is not None and not enabled[i]:
                continue
            env = ctx.envs[i]
            actions = ctx.actions[i] or _EMPTY
            if self.precondition is not None and not self.precondition(env, actions):
                continue
            mask[i] = True
            for key, value in self.derivative(env, actions).items():
                try:
                    DS[i, self._cols[key]] += value
                except KeyError:
                    raise UnknownSlot(f"process {self.id!r} wrote to unknown slot {key}")
        return mask


class Event:
    """A discrete trigger mutating logical state / swapping behaviour.

    Events fire in registration order; effects must be idempotent within
    a step.  ``action_only`` events are skipped on steps without discrete
    actions (device command handlers), which keeps action-free stepping
    cheap.
    """

    action_only = False

    def __init__(self, id: str):
        self.id = id

    def validate(self, env: EnvironmentState) -> None:
        pass

    def bind(self, env: EnvironmentState) -> None:
        pass

    def trigger(self, env: EnvironmentState, actions: ActionVector) -> bool:
        raise NotImplementedError

    def apply(self, env: EnvironmentState, actions: ActionVector) -> None:
        raise NotImplementedError


class CallbackEvent(Event):
    """Event defined by plain callables, validated against declared slots."""

    def __init__(self, id, slots, trigger, effect, action_only=False):
        super().__init__(id)
        self.slots = list(slots)
        self._trigger = trigger
        self._effect = effect
        self.action_only = action_only

    def validate(self, env):
        for entity, slot in self.slots:
            if entity not in env.entities:
                raise UnknownEntity(f"event {self.id!r} references {entity!r}")
            if not env.has_slot(entity, slot):
                raise UnknownSlot(f"event {self.id!r} references {entity}.{slot}")

    def trigger(self, env, actions):
        return bool(self._trigger(env, actions))

    def apply(self, env, actions):
        self._effect(env, actions)


def register_process(env: EnvironmentState, process: Process) -> None:
    env.registry.check_mutable("process")
    if any(p.id == process.id for p in env.registry.processes):
        raise DuplicateId(f"process {process.id!r} already registered")
    process.validate(env)
    env.registry.processes.append(process)
    env.registry.bump()


def register_event(env: EnvironmentState, event: Event) -> None:
    env.registry.check_mutable("event")
    if any(e.id == event.id for e in env.registry.events):
        raise DuplicateId(f"event {event.id!r} already registered")
    event.validate(env)
    env.registry.events.append(event)
    if not event.action_only:
        env.registry.has_state_events = True
    env.registry.bump()


def disable_process(env: EnvironmentState, process_id: str) -> None:
    env._disabled_processes.add(process_id)
    env.registry.disable_epoch += 1


def enable_process(env: EnvironmentState, process_id: str) -> None:
    env._disabled_processes.discard(process_id)
    env.registry.disable_epoch += 1


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


class _StepContext:
    __slots__ = ("envs", "S", "L", "actions", "n")

    def __init__(self, envs, S, L):
        self.envs = envs
        self.S = S
        self.L = L
        self.actions = None
        self.n = len(envs)


def _validate_actions(env: EnvironmentState, a: ActionVector) -> None:
    from .core import KIND_COMMANDS

    for entity, command in a.discrete:
        spec = env.entities.get(entity)
        if spec is None:
            raise UnknownEntity(f"action addresses unknown entity {entity!r}")
        if command not in KIND_COMMANDS[spec.kind]:
            raise UnknownChannel(f"{spec.kind} {entity!r} declares no command {command!r}")
    for entity, channel in a.continuous:
        spec = env.entities.get(entity)
        if spec is None:
            raise UnknownEntity(f"action addresses unknown entity {entity!r}")
        if spec.kind == "container" and channel.startswith("pour:"):
            dst = channel[5:]
            if dst not in env.entities:
                raise UnknownEntity(f"pour target {dst!r} is not registered")
        else:
            raise UnknownChannel(f"{spec.kind} {entity!r} declares no channel {channel!r}")


def _apply_kinematic(env: EnvironmentState, a: ActionVector) -> None:
    """Phase 1: containment/contact side effects and timed transfers."""
    from .kinetics import transfer_between

    for (entity, command), payload in a.discrete.items():
        if command == "place":
            surface = payload["surface"]
            if surface not in env.entities:
                raise UnknownEntity(f"place target {surface!r} is not registered")
            env._x[(entity, "location")] = surface
            for col in env.registry.contact_gates.get((entity, surface), ()):
                env._l[col] = True
        elif command == "pick":
            surface = payload.get("surface")
            if env._x.get((entity, "location")) != surface:
                env.precondition_log.append((env.time, f"{entity}.pick", "on-surface"))
                continue
            env._x[(entity, "location")] = None
            for col in env.registry.contact_gates.get((entity, surface), ()):
                env._l[col] = False
        # device commands are handled in the event phase
    for (entity, channel), mass in a.continuous.items():
        if channel.startswith("pour:"):
            transfer_between(env, entity, channel[5:], float(mass))


class _Stepper:
    """Bound step executor over stacked (n, p)/(n, m) state arrays."""

    def __init__(self, envs, S, L):
        self.envs = envs
        self.S = S
        self.L = L
        self.n, self.p = S.shape
        env0 = envs[0]
        self.dt = env0.dt
        self.registry = env0.registry
        self.integrator = env0.integrator
        for proc in self.registry.processes:
            proc.bind(env0)
        for ev in self.registry.events:
            ev.bind(env0)
        self.ctx = _StepContext(envs, S, L)
        self.DS = np.zeros_like(S)
        self.S_next = np.empty_like(S)
        self._h = np.empty_like(S)
        if self.integrator == "rk4":
            self._k = [np.zeros_like(S) for _ in range(3)]
        cc = sorted(set(self.registry.clamp_cols))
        self.clamp_cols = np.array([c for c, _ in cc], dtype=np.intp)
        self.clamp_names = [name for _, name in cc]
        self.registry_version = self.registry.version
        self.layout_version = env0._layout_version
        self._disable_epoch = -1
        self._any_disabled = False
        self._report_cache: dict[int, StepReport] = {}
        self._proc_ids = [p.id for p in self.registry.processes]

    # -- derivative evaluation -------------------------------------------

    def _eval(self, S_view, actions, DS, collect_masks):
        ctx = self.ctx
        ctx.S = S_view
        ctx.actions = actions
        DS[:] = 0.0
        masks = [] if collect_masks else None
        any_dis = self._any_disabled
        for proc in self.registry.processes:
            enabled = None
            if any_dis:
                enabled = np.fromiter(
                    (proc.id not in e._disabled_processes for e in self.envs),
                    dtype=bool,
                    count=self.n,
                )
            mask = proc.contribute(ctx, DS, enabled)
            if collect_masks:
                if mask is None:
                    mask = enabled  # None means "everywhere enabled"
                masks.append(mask)
        return masks

    def run_step(self, actions, semantics: bool):
        envs = self.envs
        n = self.n
        if self.registry.disable_epoch != self._disable_epoch:
            self._disable_epoch = self.registry.disable_epoch
            self._any_disabled = any(e._disabled_processes for e in envs)

        # merge per-environment pending device commands
        eff: list[ActionVector | None] = [None] * n
        for i, env in enumerate(envs):
            a = actions[i]
            if not env._pending.is_empty():
                a = env._pending if a is None else env._pending.merged_with(a)
                env._pending = ActionVector()
            eff[i] = a

        # phase 1 -- kinematic proxy (validate everything before mutating)
        snapshot = None
        for i, a in enumerate(eff):
            if a is not None and not a.is_empty():
                _validate_actions(envs[i], a)
        for i, a in enumerate(eff):
            if a is None or a.is_empty():
                continue
            if snapshot is None:
                snapshot = (self.S.copy(), self.L.copy(), {})
            snapshot[2].setdefault(i, dict(envs[i]._x))
            try:
                _apply_kinematic(envs[i], a)
            except (Overdraw, NegativeMass, UnknownEntity):
                self._restore(snapshot)
                raise

        masks = None
        clamp_rows = None
        if semantics:
            # phase 2 -- processes, one integration step from start-of-step s
            dt = self.dt
            if self.integrator == "rk4":
                # DS holds k1; stage buffers hold k2..k4.  Process masks for
                # the report come from the k1 evaluation at start-of-step s.
                k2, k3, k4 = self._k
                masks = self._eval(self.S, eff, self.DS, True)
                np.multiply(self.DS, dt / 2.0, out=self._h)
                np.add(self.S, self._h, out=self.S_next)
                self._eval(self.S_next, eff, k2, False)
                np.multiply(k2, dt / 2.0, out=self._h)
                np.add(self.S, self._h, out=self.S_next)
                self._eval(self.S_next, eff, k3, False)
                np.multiply(k3, dt, out=self._h)
                np.add(self.S, self._h, out=self.S_next)
                self._eval(self.S_next, eff, k4, False)
                # s + dt/6 (k1 + 2 k2 + 2 k3 + k4)
                self._h[:] = self.DS
                self._h += k2
                self._h += k2
                self._h += k3
                self._h += k3
                self._h += k4
                self._h *= dt / 6.0
                np.add(self.S, self._h, out=self.S_next)
            else:
                masks = self._eval(self.S, eff, self.DS, True)
                np.multiply(self.DS, dt, out=self._h)
                np.add(self.S, self._h, out=self.S_next)

            cc = self.clamp_cols
            if cc.size:
                sub = self.S_next[:, cc]
                neg = sub < 0.0
                if neg.any():
                    np.maximum(sub, 0.0, out=sub)
                    self.S_next[:, cc] = sub
                    clamp_rows = neg

            if not np.isfinite(self.S_next).all():
                self._restore(snapshot)
                bad = ~np.isfinite(self.S_next).all(axis=1)
                idx = int(np.nonzero(bad)[0][0])
                raise NonFiniteState(
                    f"non-finite state after integration (environment {idx}); "
                    "step rolled back"
                )
            self.S[:] = self.S_next

        # phase 3 -- events, then device readouts
        registry = self.registry
        reports = []
        run_events = semantics and bool(registry.events)
        readouts = registry.readouts if semantics else ()
        for i, env in enumerate(envs):
            a = eff[i]
            has_discrete = a is not None and bool(a.discrete)
            fired: tuple[str, ...] = ()
            if run_events and (has_discrete or registry.has_state_events):
                act = a or _EMPTY
                for ev in registry.events:
                    if ev.action_only and not has_discrete:
                        continue
                    if ev.trigger(env, act):
                        try:
                            ev.apply(env, act)
                            fired += (ev.id,)
                        except PreconditionFailed as exc:
                            env.precondition_log.append((env.time, ev.id, exc.name))
                        except (Overdraw, CapacityExceeded) as exc:
                            env.precondition_log.append(
                                (env.time, ev.id, type(exc).__name__)
                            )
            for readout in readouts:
                readout(env)
            env.time += self.dt
            env.step_count += 1
            reports.append(self._report(i, fired, masks, clamp_rows))
        return reports

    def _restore(self, snapshot):
        if snapshot is None:
            return
        S0, L0, xs = snapshot
        self.S[:] = S0
        self.L[:] = L0
        for i, x in xs.items():
            self.envs[i]._x = x

    def _report(self, i, fired, masks, clamp_rows) -> StepReport:
        clamps: tuple[tuple[str, str], ...] = ()
        if clamp_rows is not None:
            row = clamp_rows[i]
            if row.any():
                clamps = tuple(
                    (self.clamp_names[j], "clamped to 0")
                    for j in np.nonzero(row)[0]
                )
        key = 0
        if masks is not None:
            for j, mask in enumerate(masks):
                if mask is None or mask[i]:
                    key |= 1 << j
        if not fired and not clamps:
            cached = self._report_cache.get(key)
            if cached is not None:
                return cached
        active = tuple(
            pid
            for j, pid in enumerate(self._proc_ids)
            if masks is not None and (masks[j] is None or masks[j][i])
        )
        report = StepReport(fired_events=fired, active_processes=active, clamps=clamps)
        if not fired and not clamps:
            self._report_cache[key] = report
        return report


def _stepper_for_env(env: EnvironmentState) -> _Stepper:
    st = env._stepper
    if (
        st is None
        or st.registry_version != env.registry.version
        or st.layout_version != env._layout_version
        or st.integrator != env.integrator
    ):
        st = _Stepper([env], env._s.reshape(1, -1), env._l.reshape(1, -1))
        env._stepper = st
    return st


def _stepper_for_batch(batch: EnvironmentBatch) -> _Stepper:
    env0 = batch.envs[0]
    st = batch._stepper
    if (
        st is None
        or st.registry_version != env0.registry.version
        or st.layout_version != env0._layout_version
        or st.integrator != env0.integrator
    ):
        st = _Stepper(batch.envs, batch.S, batch.L)
        batch._stepper = st
    return st


def step(env: EnvironmentState, actions: ActionVector | None = None) -> StepReport:
    """Advance one environment by exactly dt and report what happened."""
    stepper = _stepper_for_env(env)
    return stepper.run_step([actions], env.semantics_enabled)[0]


def _chunk_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    size = (n + workers - 1) // workers
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def step_batch(batch: EnvironmentBatch, actions: list) -> list[StepReport]:
    """Step every environment independently; equals sequential stepping.

    With LABTWIN_THREADS > 1 the batch is split into contiguous chunks
    stepped in parallel threads; per-environment results are unchanged.
    """
    check_batch_actions(batch, actions)
    workers = int(os.environ.get("LABTWIN_THREADS", "1") or "1")
    if workers > 1 and batch.n_envs >= 2 * workers:
        chunks = getattr(batch, "_chunks", None)
        bounds = _chunk_bounds(batch.n_envs, workers)
        if chunks is None or [c[0] for c in chunks] != bounds:
            chunks = [
                (
                    (lo, hi),
                    _Stepper(batch.envs[lo:hi], batch.S[lo:hi], batch.L[lo:hi]),
                )
                for lo, hi in bounds
            ]
            batch._chunks = chunks
        reports: list[StepReport | None] = [None] * batch.n_envs
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [
                pool.submit(st.run_step, actions[lo:hi], batch.semantics_enabled)
                for (lo, hi), st in chunks
            ]
            for ((lo, hi), _), fut in zip(chunks, futures):
                reports[lo:hi] = fut.result()
        return reports  # type: ignore[return-value]
    stepper = _stepper_for_batch(batch)
    return stepper.run_step(actions, batch.semantics_enabled)
