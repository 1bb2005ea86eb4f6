"""
Round-based message-passing execution of the FB, FBF and FBHF iterations.

Each agent keeps only its own data (∇f_i, prox_{g_i}, A_i, b_i, steps) and state
(x_i, z_i, λ_i and their tilde copies). Neighbour values reach it only through
payloads delivered to its inbox for the current round and phase. Rounds are
barrier-synchronous: every agent sends from the state it held when the phase opened,
the network delivers, then every agent updates its own state.

Interference payloads x_j travel on their own logical channel straight from j to
every agent whose cost depends on x_j, whether or not the two are adjacent in the
dual graph.
"""

import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from gne.errors import AuditFailure, ContractViolationError, DivergenceError
from gne.model import kkt_residual, pseudo_gradient, sample_points
from gne.solvers import (
    ROUNDS_PER_ITERATION,
    STATUS_MAX_ITERS,
    RunTrace,
    SolverKind,
    StopRule,
    default_initial_iterate,
    prepare,
    relative_distance,
)
from gne.splitting import Iterate, StepConfig
from utils.io_utils import atomic_write_frame
from utils.log_utils import get_logger

logger = get_logger(__name__)

INTERFERENCE = "J"
DUAL = "lambda"
AUDIT_STEP = 1e-3


@dataclass(frozen=True)
class Phase:
    """Fields an agent broadcasts when the phase opens, with the channel each uses."""
    name: str
    sends: tuple


@dataclass(frozen=True)
class RoundSchedule:
    kind: SolverKind
    phases: tuple

    @classmethod
    def for_kind(cls, kind):
        kind = SolverKind.parse(kind)
        if kind is SolverKind.FB:
            phases = (
                Phase("forward", (("x", INTERFERENCE), ("lam", DUAL))),
                Phase("dual", (("z_ref", DUAL),)),
            )
        elif kind is SolverKind.FBF:
            phases = (
                Phase("forward", (("x", INTERFERENCE), ("z", DUAL), ("lam", DUAL))),
                Phase("correction", (("x_t", INTERFERENCE), ("z_t", DUAL), ("lam_t", DUAL))),
            )
        else:
            phases = (
                Phase("forward", (("x", INTERFERENCE), ("z", DUAL), ("lam", DUAL))),
                Phase("correction", (("z_t", DUAL), ("lam_t", DUAL))),
            )
        return cls(kind, phases)


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    round: int
    phase: int
    field: str
    values: np.ndarray


class Inbox:
    """
    Payloads delivered to one agent. Reads are checked against the senders the
    network wired to this agent, independently of what the agent believes.
    """

    def __init__(self, owner, allowed):
        self.owner = owner
        self._allowed = {name: frozenset(senders) for name, senders in allowed.items()}
        self._payloads = {}
        self.reads = set()

    def deliver(self, message):
        self._payloads[(message.round, message.phase, message.field, message.sender)] = message.values

    def read(self, rnd, phase, name, sender):
        if sender not in self._allowed.get(name, ()):
            raise AuditFailure(self.owner, f"{name}[{sender}]")
        try:
            values = self._payloads[(rnd, phase, name, sender)]
        except KeyError:
            raise AuditFailure(self.owner, f"{name}[{sender}] (not delivered in round {rnd}, phase {phase})")
        self.reads.add((name, sender))
        return values

    def discard_before(self, rnd):
        self._payloads = {key: v for key, v in self._payloads.items() if key[0] >= rnd}


@dataclass
class AgentState:
    """Local data and state of one agent."""
    index: int
    n: int
    block: slice
    A: np.ndarray
    b: np.ndarray
    grad_f: object
    prox_g: object
    rho: float
    sigma: float
    tau: float
    interference: tuple
    dual_weights: dict
    interference_blocks: dict
    x: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    x_t: np.ndarray = None
    z_t: np.ndarray = None
    lam_t: np.ndarray = None
    z_ref: np.ndarray = None
    inbox: Inbox = None
    grad_calls: int = 0
    cache: dict = field(default_factory=dict)

    def own_fields(self):
        return ("A", "b", "grad_f", "prox_g", "rho", "sigma", "tau", "x", "z", "lam")

    def payload(self, name):
        return np.array(getattr(self, name), dtype=float)

    def view(self, rnd, phase, name, own):
        """Full-length vector holding own and delivered interference blocks; NaN elsewhere."""
        v = np.full(self.n, np.nan)
        v[self.block] = own
        for j in self.interference:
            v[self.interference_blocks[j]] = self.inbox.read(rnd, phase, name, j)
        return v

    def gradient(self, rnd, phase, name, own):
        self.grad_calls += 1
        grad = np.asarray(self.grad_f(self.view(rnd, phase, name, own)), dtype=float)
        if not np.all(np.isfinite(grad)) and np.all(np.isfinite(own)):
            raise AuditFailure(self.index, "x_j outside interference neighbours")
        return grad

    def laplacian(self, rnd, phase, name, own):
        """(L v)_i = Σ_j w_ij (v_i − v_j) over delivered dual-neighbour payloads."""
        out = np.zeros_like(own)
        for j, w in self.dual_weights.items():
            out += w * (own - self.inbox.read(rnd, phase, name, j))
        return out

    def prox(self, v):
        return np.asarray(self.prox_g(v, self.rho), dtype=float)

    # FB

    def fb_forward(self, rnd):
        grad = self.gradient(rnd, 0, "x", self.x)
        L_lam = self.laplacian(rnd, 0, "lam", self.lam)
        self.x_t = self.prox(self.x - self.rho * (grad + self.A.T @ self.lam))
        self.z_t = self.z - self.sigma * L_lam
        self.z_ref = 2.0 * self.z_t - self.z
        self.cache["L_lam"] = L_lam

    def fb_dual(self, rnd):
        L_ref = self.laplacian(rnd, 1, "z_ref", self.z_ref)
        self.lam_t = np.maximum(
            self.lam + self.tau * (self.A @ (2.0 * self.x_t - self.x) - self.b
                                   + L_ref - self.cache["L_lam"]),
            0.0,
        )
        self.x, self.z, self.lam = self.x_t, self.z_t, self.lam_t

    # FBF

    def fbf_forward(self, rnd):
        grad = self.gradient(rnd, 0, "x", self.x)
        L_lam = self.laplacian(rnd, 0, "lam", self.lam)
        L_z = self.laplacian(rnd, 0, "z", self.z)
        Dx = grad + self.A.T @ self.lam
        Dz = L_lam
        Dl = L_lam + self.b - self.A @ self.x - L_z
        self.x_t = self.prox(self.x - self.rho * Dx)
        self.z_t = self.z - self.sigma * Dz
        self.lam_t = np.maximum(self.lam - self.tau * Dl, 0.0)
        self.cache["D"] = (Dx, Dz, Dl)

    def fbf_correction(self, rnd):
        Dx, Dz, Dl = self.cache["D"]
        grad = self.gradient(rnd, 1, "x_t", self.x_t)
        L_lam = self.laplacian(rnd, 1, "lam_t", self.lam_t)
        L_z = self.laplacian(rnd, 1, "z_t", self.z_t)
        Ux = grad + self.A.T @ self.lam_t
        Uz = L_lam
        Ul = L_lam + self.b - self.A @ self.x_t - L_z
        self.x = self.x_t + self.rho * (Dx - Ux)
        self.z = self.z_t + self.sigma * (Dz - Uz)
        self.lam = self.lam_t + self.tau * (Dl - Ul)

    # FBHF

    def fbhf_forward(self, rnd):
        grad = self.gradient(rnd, 0, "x", self.x)
        L_lam = self.laplacian(rnd, 0, "lam", self.lam)
        L_z = self.laplacian(rnd, 0, "z", self.z)
        Bx = self.A.T @ self.lam
        Bz = L_lam
        Bl = -(self.A @ self.x) - L_z
        self.x_t = self.prox(self.x - self.rho * (grad + Bx))
        self.z_t = self.z - self.sigma * Bz
        self.lam_t = np.maximum(self.lam - self.tau * ((L_lam + self.b) + Bl), 0.0)
        self.cache["B"] = (Bx, Bz, Bl)

    def fbhf_correction(self, rnd):
        Bx, Bz, Bl = self.cache["B"]
        L_lam = self.laplacian(rnd, 1, "lam_t", self.lam_t)
        L_z = self.laplacian(rnd, 1, "z_t", self.z_t)
        self.x = self.x_t + self.rho * (Bx - self.A.T @ self.lam_t)
        self.z = self.z_t + self.sigma * (Bz - L_lam)
        self.lam = self.lam_t + self.tau * (Bl - (-(self.A @ self.x_t) - L_z))

    def update(self, kind, phase, rnd):
        handler = _HANDLERS[kind][phase]
        getattr(self, handler)(rnd)


_HANDLERS = {
    SolverKind.FB: ("fb_forward", "fb_dual"),
    SolverKind.FBF: ("fbf_forward", "fbf_correction"),
    SolverKind.FBHF: ("fbhf_forward", "fbhf_correction"),
}


class MessageStats:
    """Message and scalar counts per (iteration, phase)."""

    COLUMNS = ("iter", "phase", "messages", "scalars_sent")

    def __init__(self):
        self.rows = []

    def record(self, iteration, phase, messages, scalars):
        self.rows.append((iteration, phase, messages, scalars))

    @property
    def rounds(self):
        return len(self.rows)

    @property
    def total_messages(self):
        return sum(row[2] for row in self.rows)

    @property
    def total_scalars(self):
        return sum(row[3] for row in self.rows)

    def per_phase(self, iteration):
        return [row[2] for row in self.rows if row[0] == iteration]

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=list(self.COLUMNS))

    def to_csv(self, path):
        return atomic_write_frame(path, self.to_frame())


def _split(game, v, size):
    v = np.asarray(v, dtype=float)
    if v.shape != (size * game.n_agents,):
        raise ContractViolationError("distributed split", size * game.n_agents, v.size)
    return [v[i * size:(i + 1) * size].copy() for i in range(game.n_agents)]


def build_agents(game, graph, steps, u0):
    """One AgentState per agent, loaded with its share of u0."""
    if graph.n_agents != game.n_agents:
        raise ContractViolationError("run_distributed graph", game.n_agents, graph.n_agents)
    xs = game.split(u0.x)
    zs = _split(game, u0.z, game.m)
    lams = _split(game, u0.lam, game.m)
    agents = []
    for i, spec in enumerate(game.agents):
        neighbours = tuple(sorted(spec.interference_neighbors))
        agents.append(AgentState(
            index=i,
            n=game.n,
            block=game.block(i),
            A=np.asarray(spec.coupling_block, dtype=float),
            b=np.asarray(spec.coupling_offset, dtype=float),
            grad_f=spec.grad_f,
            prox_g=spec.prox_g,
            rho=float(steps.rho[i]),
            sigma=float(steps.sigma[i]),
            tau=float(steps.tau[i]),
            interference=neighbours,
            dual_weights={j: float(graph.weights[i, j]) for j in graph.neighbor_lists[i]},
            interference_blocks={j: game.block(j) for j in neighbours},
            x=xs[i].copy(),
            z=zs[i],
            lam=lams[i],
        ))
    return agents


class Network:
    """Barrier-synchronous delivery between agents over the two logical channels."""

    def __init__(self, game, graph, schedule):
        n_agents = game.n_agents
        self.schedule = schedule
        self.dual_receivers = [tuple(graph.neighbor_lists[i]) for i in range(n_agents)]
        # i's x_i goes to every agent whose cost depends on it
        readers = defaultdict(set)
        for j, spec in enumerate(game.agents):
            for i in spec.interference_neighbors:
                readers[i].add(j)
        self.interference_receivers = [tuple(sorted(readers[i])) for i in range(n_agents)]
        self.inboxes = []
        for i, spec in enumerate(game.agents):
            allowed = {}
            for phase in schedule.phases:
                for name, channel in phase.sends:
                    senders = (spec.interference_neighbors if channel == INTERFERENCE
                               else graph.neighbor_lists[i])
                    allowed[name] = frozenset(senders)
            self.inboxes.append(Inbox(i, allowed))

    def attach(self, agents):
        for agent, inbox in zip(agents, self.inboxes):
            agent.inbox = inbox

    def exchange(self, agents, rnd, phase):
        """Every agent sends the phase's fields from its current state; returns (messages, scalars)."""
        outgoing = defaultdict(list)
        for agent in agents:
            for name, channel in self.schedule.phases[phase].sends:
                receivers = (self.interference_receivers if channel == INTERFERENCE
                             else self.dual_receivers)[agent.index]
                values = agent.payload(name)
                for j in receivers:
                    outgoing[j].append(Message(agent.index, j, rnd, phase, name, values))
        messages = scalars = 0
        for j in sorted(outgoing):
            for message in outgoing[j]:
                self.inboxes[j].deliver(message)
                messages += 1
                scalars += message.values.size
        return messages, scalars


def reassemble(agents, attr=("x", "z", "lam")):
    ordered = sorted(agents, key=lambda a: a.index)
    return Iterate(*(np.concatenate([getattr(a, name) for a in ordered]) for name in attr))


def _run_phase(agents, kind, phase, rnd, order, pool):
    ordered = [agents[i] for i in order]
    if pool is None:
        for agent in ordered:
            agent.update(kind, phase, rnd)
    else:
        list(pool.map(lambda a: a.update(kind, phase, rnd), ordered))


def run_distributed(game, graph, kind, stop, u0=None, reference=None, steps=None, constants=None,
                    force=False, order=None, workers=1, agents=None, callback=None):
    """
    Run one solver as a message-passing simulation.

    The stop rule and trace are evaluated by an outside observer on the reassembled
    iterate; agents never see them.

    Args:
        game, graph, kind, stop, u0, reference, steps, constants, force: as in solvers.solve
        order (list[int] | None): Agent execution order within each phase
        workers (int): Thread pool size for agent updates within a phase
        agents (list[AgentState] | None): Pre-built agents (defaults to build_agents)
        callback (callable | None): Called as callback(k, u_next, u_half)

    Returns:
        tuple[Iterate, RunTrace, MessageStats]

    Raises:
        AuditFailure: If an agent reads a payload it was not sent
        DivergenceError: If an iterate becomes non-finite
    """
    kind = SolverKind.parse(kind)
    constants, steps = prepare(game, graph, kind, steps, constants, force=force)
    u = default_initial_iterate(game) if u0 is None else u0.copy()
    if agents is None:
        agents = build_agents(game, graph, steps, u)
    order = list(range(game.n_agents)) if order is None else list(order)
    if sorted(order) != list(range(game.n_agents)):
        raise ContractViolationError("execution order", f"permutation of {game.n_agents}", order)

    schedule = RoundSchedule.for_kind(kind)
    network = Network(game, graph, schedule)
    network.attach(agents)
    trace = RunTrace()
    stats = MessageStats()
    ref = None if reference is None else np.asarray(reference, dtype=float)
    cpu = 0.0
    status = STATUS_MAX_ITERS

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in stop.iterations():
            start = time.process_time()
            for phase in range(len(schedule.phases)):
                rnd = k
                messages, scalars = network.exchange(agents, rnd, phase)
                stats.record(k, phase + 1, messages, scalars)
                _run_phase(agents, kind, phase, rnd, order, pool)
            for inbox in network.inboxes:
                inbox.discard_before(k + 1)
            cpu += time.process_time() - start

            u_next = reassemble(agents)
            u_half = reassemble(agents, ("x_t", "z_t", "lam_t"))
            if not (u_next.is_finite() and u_half.is_finite()):
                raise DivergenceError(k, u)
            fp_res = (u_next - u).norm() / max(1.0, u.norm())
            kkt = kkt_residual(game, u_half.x, u_half.lam, graph)
            grad_evals = max(a.grad_calls for a in agents)
            trace.record(k, fp_res, kkt, relative_distance(u_next.x, ref), cpu,
                         ROUNDS_PER_ITERATION * k, grad_evals)
            if callback is not None:
                callback(k, u_next, u_half)
            u = u_next
            reached = stop.status(fp_res, kkt.max())
            if reached is not None:
                status = reached
                break
    finally:
        if pool is not None:
            pool.shutdown()

    logger.info(
        f"{kind.name} (distributed): {status} after {len(trace)} iterations, "
        f"{stats.total_messages} messages"
    )
    return u, trace, stats


@dataclass(frozen=True)
class LocalityReport:
    kind: str
    touched: dict
    passed: bool = True

    def received_from(self, agent, name):
        return sorted(j for field_name, j in self.touched[agent]["received"] if field_name == name)


def locality_audit(game, graph, kind, steps=None, agents=None, seed=0):
    """
    Check that every agent update touches only its own data and delivered payloads.

    The pseudo-gradient oracles are probed with NaN outside each agent's interference
    neighbourhood, then one simulated iteration runs with every inbox read recorded and
    checked against the wiring of the game and graph.

    Returns:
        LocalityReport: Per agent, its own fields and the (field, sender) pairs it read

    Raises:
        AuditFailure: Naming the agent and the non-local field
    """
    kind = SolverKind.parse(kind)
    rng = np.random.default_rng(seed)
    probe = sample_points(game, 1, rng)[0]
    pseudo_gradient(game, probe, strict=True)

    steps = steps or StepConfig.uniform(AUDIT_STEP, game.n_agents)
    u0 = default_initial_iterate(game)
    u0 = Iterate(probe, rng.standard_normal(u0.z.size), np.abs(rng.standard_normal(u0.lam.size)))
    if agents is None:
        agents = build_agents(game, graph, steps, u0)
    run_distributed(game, graph, kind, StopRule(fp_tol=None, max_iters=1), u0=u0,
                    steps=steps, force=True, agents=agents)

    touched = {
        agent.index: {
            "own": list(agent.own_fields()),
            "received": sorted(agent.inbox.reads),
        }
        for agent in agents
    }
    logger.info(f"Locality audit passed for {kind.name} on {game.n_agents} agents")
    return LocalityReport(kind.value, touched)
