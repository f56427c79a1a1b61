"""Filtering model for the pursuit world.

Movement rules are written down exactly as the simulator applies them;
the only unknowns are the chase policy (an MLP over normalised
coordinates, so it transfers across grid sizes) and the probability
that an adjacent claw attack lands (one shared logit).  Each enemy is
its own cluster; damage dice are rolled unconditionally in separate
single-variable clusters so the health update can consume them from a
post rule without coupling anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Tape, Var
from ..errors import ContractError, DegenerateFilterError
from ..inference import (ParticleBelief, exact_forward_model, init_belief,
                         query_expectation, rbpf_step)
from ..neural import MlpSpec, ParamStore, forward, glorot_init
from ..stochastics import (BernoulliDist, CategoricalDist, Deterministic,
                           RngKey, split)
from ..symbolic import (ChoicePoint, ClusterModel, ObsFactor, Rule,
                        SymbolicSchema, SymbolicState, VarDecl, register)
from .world import Trajectory, agent_path, chebyshev, enemy_move

POLICY_SPEC = MlpSpec((6, 64, 32, 8), head="log_softmax")
THETA_NAME = "theta_logit"
DEAD = 0  # absorbing hit-point sentinel


def interior_cells(n: int) -> tuple:
    """All cells inside the walls, x-fastest (index = (x-1) + (y-1)*n)."""
    return tuple((i % n + 1, i // n + 1) for i in range(n * n))


def cell_index(pos, n: int) -> int:
    return (pos[0] - 1) + (pos[1] - 1) * n


def policy_features(enemy_prev, agent_new, n: int) -> np.ndarray:
    ex, ey = enemy_prev
    ax, ay = agent_new
    return np.array([ex, ey, ax, ay, ax - ex, ay - ey], dtype=np.float64) / n


class ModelContext:
    """Per-tape handle the cluster callbacks use to reach parameters."""

    def __init__(self, tape: Tape, store: ParamStore,
                 policy: MlpSpec = POLICY_SPEC):
        self.tape = tape
        self.store = store
        self.policy = policy
        self._die_logits = None

    def policy_logits(self, feats: np.ndarray) -> Var:
        return forward(self.store, self.policy, feats, self.tape)

    def theta(self) -> Var:
        return self.tape.param(THETA_NAME, self.store[THETA_NAME])

    def die_logits(self) -> Var:
        if self._die_logits is None:
            self._die_logits = self.tape.constant(np.zeros(4))
        return self._die_logits


def _enemy_cluster(j: int, n: int, hp_var: str) -> ClusterModel:
    act, pos, hit = f"act{j}", f"e{j}", f"hit{j}"

    def pick_action(prev, exo, current, ctx):
        if prev[hp_var] == DEAD:
            return Deterministic(0)
        feats = policy_features(prev[pos], exo["agent"], n)
        return CategoricalDist(ctx.policy_logits(feats), tuple(range(8)))

    def move(prev, exo, current, ctx):
        if prev[hp_var] == DEAD:
            return {pos: prev[pos]}
        return {pos: enemy_move(prev[pos], current[act], n, exo["agent"])}

    def claw(prev, exo, current, ctx):
        if prev[hp_var] != DEAD and chebyshev(current[pos], exo["agent"]) == 1:
            return BernoulliDist(ctx.theta())
        return Deterministic(False)

    return ClusterModel(
        cluster_id=f"enemy{j}",
        steps=[ChoicePoint(act, pick_action),
               Rule(writes=(pos,), reads=(act,), fn=move),
               ChoicePoint(hit, claw)])


def build_model_clusters(n: int, e: int) -> tuple:
    """Schema plus registered cluster models for an ``n`` x ``n`` room."""
    if e not in (1, 2):
        raise ContractError(f"the filtering model needs 1 or 2 enemies, got {e}")
    cells = interior_cells(n)
    variables = [VarDecl("hp", tuple(range(13))),
                 VarDecl("agent", cells)]
    clusters = {}
    hit_names = []
    for j in range(e):
        variables += [VarDecl(f"act{j}", tuple(range(8))),
                      VarDecl(f"e{j}", cells),
                      VarDecl(f"hit{j}", (False, True)),
                      VarDecl(f"dmg{j}", (1, 2, 3, 4))]
        clusters[f"enemy{j}"] = (f"act{j}", f"e{j}", f"hit{j}")
        hit_names.append(f"hit{j}")
    for j in range(e):
        clusters[f"dice{j}"] = (f"dmg{j}",)
    clusters["health"] = ("hp",)
    schema = SymbolicSchema(
        variables=variables,
        clusters=clusters,
        exogenous=("agent",),
        state_vars=tuple(f"e{j}" for j in range(e)) + ("hp",),
        observation=VarDecl("z", (False, True)))

    models = [_enemy_cluster(j, n, "hp") for j in range(e)]

    def observed_or(view, z, prev, exo, ctx, _names=tuple(hit_names)):
        return 1.0 if any(view[h] for h in _names) == bool(z) else 0.0

    models[0].factors.append(ObsFactor(reads=tuple(hit_names), fn=observed_or))

    for j in range(e):
        def roll(prev, exo, current, ctx):
            return CategoricalDist(ctx.die_logits(), (1, 2, 3, 4))
        models.append(ClusterModel(cluster_id=f"dice{j}",
                                   steps=[ChoicePoint(f"dmg{j}", roll)]))

    def update_hp(prev, exo, current, ctx, _e=e):
        hp = prev["hp"]
        if hp == DEAD:
            return {"hp": DEAD}
        dealt = sum(current[f"dmg{j}"] for j in range(_e) if current[f"hit{j}"])
        return {"hp": max(hp - dealt, DEAD)}

    health = ClusterModel(
        cluster_id="health",
        post_rules=[Rule(writes=("hp",),
                         reads=tuple(f"{k}{j}" for j in range(e)
                                     for k in ("hit", "dmg")),
                         fn=update_hp)])
    models.append(health)
    register(schema, models)
    return schema, models


@dataclass
class EnemyRoomModel:
    """Schema, cluster models and learnable parameters for one room size."""

    n: int
    e: int
    policy: MlpSpec
    store: ParamStore
    schema: SymbolicSchema
    models: list

    def context(self, tape: Tape) -> ModelContext:
        return ModelContext(tape, self.store, self.policy)


def new_model(n: int, e: int, key: RngKey,
              policy: MlpSpec = POLICY_SPEC) -> EnemyRoomModel:
    store = ParamStore()
    for name, value in glorot_init(policy, split(key, "policy")).items():
        store.add(name, value)
    store.add(THETA_NAME, 0.0)
    schema, models = build_model_clusters(n, e)
    return EnemyRoomModel(n, e, policy, store, schema, models)


def with_grid(model: EnemyRoomModel, n: int, e: int | None = None) -> EnemyRoomModel:
    """Rebind the same parameters to another room size (relational reuse)."""
    e = model.e if e is None else e
    schema, models = build_model_clusters(n, e)
    return EnemyRoomModel(n, e, model.policy, model.store, schema, models)


# ---------------------------------------------------------------------------
# filtering


def uniform_prior(model: EnemyRoomModel) -> list:
    """Exact initial distribution: enemies uniform over the room, hp full."""
    cells = interior_cells(model.n)
    p = 1.0 / len(cells) ** model.e
    out = []
    def expand(j, assign):
        if j == model.e:
            out.append((SymbolicState.of({**assign, "hp": 12}), p))
            return
        for c in cells:
            expand(j + 1, {**assign, f"e{j}": c})
    expand(0, {})
    return out


def init_particles(model: EnemyRoomModel, n_particles: int, key: RngKey,
                   tape: Tape, keep_history: bool = False) -> ParticleBelief:
    """Sample the uniform prior; draw j-th enemy from the particle's key."""
    cells = interior_cells(model.n)
    particles = []
    for i in range(n_particles):
        pkey = split(key, i)
        assign = {"hp": 12}
        for j in range(model.e):
            assign[f"e{j}"] = cells[int(pkey.uniform(j) * len(cells))]
        particles.append(SymbolicState.of(assign, t=0))
    return init_belief(particles, tape, keep_history=keep_history)


@dataclass
class PredictResult:
    probability: float
    ess: list
    n_frozen: int
    degenerate: bool
    belief: ParticleBelief
    mixtures: list | None = None


def _dead(history) -> float:
    # the sentinel is absorbing, so the final state answers "ever dead"
    return 1.0 if history[-1]["hp"] == DEAD else 0.0


def predict_death(model: EnemyRoomModel, traj: Trajectory, n_particles: int,
                  key: RngKey, tape: Tape | None = None,
                  marginal_keys=None) -> PredictResult:
    """Filter the trajectory and report the posterior death frequency.

    The death query only needs the final state because the sentinel is
    absorbing.  A fully frozen population cannot be normalised, so the
    probability falls back to one half with the degeneracy flag set.
    """
    if traj.n != model.n or traj.e != model.e:
        raise ContractError(
            f"trajectory is a ({traj.n},{traj.e}) room, model is "
            f"({model.n},{model.e})")
    tape = tape if tape is not None else Tape(record=False)
    ctx = model.context(tape)
    belief = init_particles(model, n_particles, split(key, "init"), tape,
                            keep_history=True)
    positions = agent_path(traj.agent_start, traj.actions, model.n)
    ess, mixtures = [], [] if marginal_keys is not None else None
    n_frozen = 0
    for t, (pos, z) in enumerate(zip(positions, traj.hit_obs)):
        belief, info = rbpf_step(belief, model.schema, model.models,
                                 {"agent": pos}, z, ctx, tape,
                                 split(key, ("step", t)),
                                 marginal_keys=marginal_keys)
        ess.append(info.ess)
        n_frozen = info.n_frozen
        if mixtures is not None:
            mixtures.append(info.mixture)
    try:
        prob = query_expectation(belief, _dead)
    except DegenerateFilterError:
        return PredictResult(0.5, ess, n_frozen, True, belief, mixtures)
    return PredictResult(float(prob), ess, n_frozen, False, belief, mixtures)


def exact_death_probability(model: EnemyRoomModel, traj: Trajectory,
                            cap: int = 1_000_000) -> tuple:
    """Enumerated forward oracle; returns (p_dead, marginals, log_evidence)."""
    tape = Tape(record=False)
    ctx = model.context(tape)
    positions = agent_path(traj.agent_start, traj.actions, model.n)
    exo_seq = [{"agent": pos} for pos in positions]
    marginals, log_evidence = exact_forward_model(
        model.schema, model.models, uniform_prior(model), exo_seq,
        list(traj.hit_obs), ctx, tape, cap=cap)
    hp_slot = model.schema.state_vars.index("hp")
    p_dead = sum(p for sk, p in marginals[-1].items() if sk[hp_slot] == DEAD)
    return float(p_dead), marginals, log_evidence
