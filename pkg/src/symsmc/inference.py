"""Filtering: Rao-Blackwellised particle filter, bootstrap baseline, oracles.

The central step, :func:`rbpf_step`, advances every particle by sampling
from its *exact* per-group conditional ``p(next | prev, z)`` computed by
the symbolic engine.  Because the proposal already conditions on the
observation there is no resampling - particle count and order never
change, which keeps the sampled trajectory probabilities differentiable
(the accumulated ``log_scores`` are tape Vars).  The importance weights
``log_weights`` accumulate per-particle log-evidence ``log p(z | prev)``
and are deliberately *not* differentiated.

:func:`bootstrap_pf_step` is the classical alternative: propose from the
prior transition, reweight by the observation likelihood, resample when
the effective sample size drops.  It is non-differentiable by design
and exists as a baseline and a contrast.

:func:`exact_forward` enumerates small models exactly and is the oracle
the filters are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Tape, Var, gather, scale
from .errors import (ContractError, DegenerateFilterError,
                     ImpossibleEvidenceError)
from .stochastics import RngKey, split
from .symbolic import (ChoicePoint, ClusterModel, CategoricalDist, ObsFactor,
                       PosteriorTable, SymbolicSchema, SymbolicState, VarDecl,
                       enumerate_joint, exact_conditional, merge_groups,
                       run_post_rules)


@dataclass
class HmmSpec:
    """Explicit finite-HMM tables; rows must sum to one within 1e-12."""

    initial: np.ndarray
    transition: np.ndarray
    observation: np.ndarray  # (n_states, n_symbols)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.observation = np.asarray(self.observation, dtype=np.float64)
        k = self.initial.shape[0]
        if self.transition.shape != (k, k) or self.observation.shape[0] != k:
            raise ContractError("HmmSpec: inconsistent table shapes")
        for name, table in (("initial", self.initial[None, :]),
                            ("transition", self.transition),
                            ("observation", self.observation)):
            if np.any(table < 0.0):
                raise ContractError(f"HmmSpec: negative entries in {name}")
            if np.max(np.abs(table.sum(axis=1) - 1.0)) > 1e-12:
                raise ContractError(f"HmmSpec: rows of {name} must sum to 1")

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]


@dataclass
class ParticleBelief:
    """Weighted particle population at one time index.

    ``log_weights`` is bookkeeping (never differentiated); ``log_scores``
    holds one scalar Var per particle with the accumulated
    log-probability of everything that particle sampled so far.  The
    bootstrap filter sets ``log_scores`` to None - resampling severs the
    gradient path, so pretending otherwise would be dishonest.
    """

    particles: list
    log_weights: np.ndarray
    log_scores: list | None
    t: int = 0
    histories: list | None = None
    resample_events: int = 0

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if len(self.particles) < 2:
            raise ContractError("a particle belief needs at least 2 particles")
        if self.log_weights.shape != (len(self.particles),):
            raise ContractError("log_weights must have one entry per particle")
        if self.log_scores is not None and len(self.log_scores) != len(self.particles):
            raise ContractError("log_scores must have one entry per particle")

    @property
    def n(self) -> int:
        return len(self.particles)


def init_belief(particles, tape: Tape, log_weights=None, log_scores=None,
                keep_history: bool = True) -> ParticleBelief:
    n = len(particles)
    if log_weights is None:
        log_weights = np.zeros(n)
    if log_scores is None:
        zero = tape.constant(0.0)
        log_scores = [zero] * n
    histories = [(p,) for p in particles] if keep_history else None
    return ParticleBelief(list(particles), log_weights, list(log_scores),
                          t=0, histories=histories)


def effective_sample_size(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` on normalised weights.

    Raises :class:`DegenerateFilterError` when every weight is zero;
    callers that tolerate a fully frozen population (the RBPF step
    diagnostics) handle that case themselves.
    """
    lw = np.asarray(log_weights, dtype=np.float64)
    finite = lw[np.isfinite(lw)]
    if finite.size == 0:
        raise DegenerateFilterError("all particle weights are zero")
    m = np.max(finite)
    w = np.exp(lw - m, where=np.isfinite(lw), out=np.zeros_like(lw))
    s = np.sum(w)
    return float(s * s / np.sum(w * w))


@dataclass
class StepInfo:
    ess: float
    n_frozen: int
    mixture: dict | None = None


_IMPOSSIBLE = object()


def rbpf_step(belief: ParticleBelief, schema: SymbolicSchema, models: list,
              exo, z, ctx, tape: Tape, key: RngKey,
              marginal_keys=None) -> tuple:
    """Advance every particle by exact per-group conditional sampling.

    No resampling ever happens here: the particle count and order are
    invariants and ``resample_events`` stays untouched.  Particles whose
    evidence is impossible are frozen with weight ``-inf`` but remain in
    the population.  Per-particle work is independent; results are
    merged in particle index order, so any parallel execution must
    preserve that order.

    When ``marginal_keys`` (a projection ``assignment -> hashable``) is
    given, the returned :class:`StepInfo` carries the Rao-Blackwellised
    filtered marginal: the weighted mixture of per-particle exact
    conditionals, far lower variance than a histogram of samples.
    """
    groups = merge_groups(schema, models)
    table_cache: dict = {}
    joint_cache: dict = {}
    n = belief.n
    new_particles = list(belief.particles)
    new_weights = belief.log_weights.copy()
    new_scores = list(belief.log_scores) if belief.log_scores is not None else None
    new_histories = [None] * n if belief.histories is not None else None
    mixture: dict | None = {} if marginal_keys is not None else None
    mixture_mass = 0.0
    n_frozen = 0

    for i in range(n):
        if not np.isfinite(belief.log_weights[i]):
            n_frozen += 1
            if new_histories is not None:
                new_histories[i] = belief.histories[i] + (belief.particles[i],)
            continue
        prev = belief.particles[i]
        pkey = split(key, i)
        state_key = tuple(prev[v] for v in schema.state_vars)
        current: dict = {}
        evidence = 0.0
        score_terms = []
        impossible = False
        for g_idx, group in enumerate(groups):
            cache_id = (g_idx, state_key)
            table = table_cache.get(cache_id)
            if table is None:
                try:
                    table = exact_conditional(schema, group, prev, exo, z,
                                              ctx, tape)
                except ImpossibleEvidenceError:
                    table = _IMPOSSIBLE
                table_cache[cache_id] = table
            if table is _IMPOSSIBLE:
                impossible = True
                break
            idx = table.sample_index(split(pkey, g_idx))
            current.update(table.assignments[idx])
            evidence += float(table.log_evidence.value)
            score_terms.append(gather(table.log_posterior, idx))
        if impossible:
            new_weights[i] = -np.inf
            n_frozen += 1
            if new_histories is not None:
                new_histories[i] = belief.histories[i] + (prev,)
            continue
        full = run_post_rules(schema, models, prev, exo, current, ctx)
        state = SymbolicState.of({v: full[v] for v in schema.state_vars},
                                 t=belief.t + 1)
        new_particles[i] = state
        new_weights[i] = belief.log_weights[i] + evidence
        if new_scores is not None:
            total = new_scores[i]
            for term in score_terms:
                total = total + term
            new_scores[i] = total
        if new_histories is not None:
            new_histories[i] = belief.histories[i] + (state,)
        if mixture is not None:
            jt = joint_cache.get(state_key)
            if jt is None:
                jt = enumerate_joint(schema, models, prev, exo, z, ctx, tape,
                                     method="product")
                joint_cache[state_key] = jt
            w = np.exp(belief.log_weights[i] + jt.log_evidence)
            mixture_mass += w
            for assign, p in zip(jt.assignments, jt.probs):
                mk = marginal_keys(assign)
                mixture[mk] = mixture.get(mk, 0.0) + w * float(p)

    if mixture is not None and mixture_mass > 0.0:
        mixture = {k: v / mixture_mass for k, v in mixture.items()}
    new_belief = ParticleBelief(new_particles, new_weights, new_scores,
                                t=belief.t + 1, histories=new_histories,
                                resample_events=belief.resample_events)
    any_alive = bool(np.any(np.isfinite(new_weights)))
    info = StepInfo(ess=effective_sample_size(new_weights) if any_alive else 0.0,
                    n_frozen=n_frozen, mixture=mixture)
    return new_belief, info


# ---------------------------------------------------------------------------
# bootstrap baseline


def bootstrap_pf_step(belief: ParticleBelief, transition_sample, obs_loglik,
                      z, key: RngKey, ess_threshold: float = 0.5,
                      resampling: str = "systematic") -> tuple:
    """Prior proposal + likelihood reweighting + threshold resampling.

    ``transition_sample(state, key) -> state`` and
    ``obs_loglik(state, z) -> float`` define the model.  When the ESS
    falls below ``ess_threshold * n`` the population is resampled
    (multinomial or systematic) and weights reset to uniform.  All
    weights at ``-inf`` raises :class:`DegenerateFilterError`.
    """
    if resampling not in ("multinomial", "systematic"):
        raise ContractError("resampling must be multinomial or systematic")
    n = belief.n
    particles = [transition_sample(belief.particles[i], split(key, i))
                 for i in range(n)]
    log_weights = belief.log_weights.copy()
    for i in range(n):
        log_weights[i] += float(obs_loglik(particles[i], z))
    if not np.any(np.isfinite(log_weights)):
        raise DegenerateFilterError(
            f"all {n} particle weights are zero at t={belief.t + 1}")
    ess = effective_sample_size(log_weights)
    events = belief.resample_events
    if ess < ess_threshold * n:
        probs = _normalised(log_weights)
        rkey = split(key, -1)
        if resampling == "multinomial":
            cum = np.cumsum(probs)
            idx = [int(np.searchsorted(cum, rkey.uniform(i), side="right"))
                   for i in range(n)]
            idx = [min(j, n - 1) for j in idx]
        else:
            u0 = rkey.uniform(0)
            positions = (u0 + np.arange(n)) / n
            cum = np.cumsum(probs)
            idx = np.minimum(np.searchsorted(cum, positions, side="right"),
                             n - 1).tolist()
        particles = [particles[j] for j in idx]
        log_weights = np.full(n, -np.log(n))
        events += 1
    info = StepInfo(ess=ess, n_frozen=0)
    new_belief = ParticleBelief(particles, log_weights, None,
                                t=belief.t + 1, histories=None,
                                resample_events=events)
    return new_belief, info


def _normalised(log_weights: np.ndarray) -> np.ndarray:
    m = np.max(log_weights[np.isfinite(log_weights)])
    w = np.where(np.isfinite(log_weights), np.exp(log_weights - m), 0.0)
    return w / np.sum(w)


# ---------------------------------------------------------------------------
# exact oracles


def exact_forward(spec: HmmSpec, observations) -> tuple:
    """Filtered state marginals and total log-evidence for a table HMM.

    The recursion is update(prior, z0) then predict-update per later
    observation; each step normalises and accumulates log-evidence.
    """
    alphas = []
    log_evidence = 0.0
    alpha = None
    for t, z in enumerate(observations):
        pred = spec.initial if t == 0 else alpha @ spec.transition
        unnorm = pred * spec.observation[:, z]
        norm = float(np.sum(unnorm))
        if norm <= 0.0:
            raise ImpossibleEvidenceError(
                f"HMM evidence impossible at t={t}", observed=z)
        alpha = unnorm / norm
        log_evidence += np.log(norm)
        alphas.append(alpha)
    return alphas, log_evidence


def exact_forward_model(schema: SymbolicSchema, models: list, init_dist,
                        exo_seq, z_seq, ctx, tape: Tape,
                        cap: int = 1_000_000) -> tuple:
    """Exact filtering for a cluster model over enumerated joint states.

    ``init_dist`` is ``[(SymbolicState, prob)]``; the recursion folds
    the full joint per step onto the schema's state variables, so the
    state space never grows with transient choice variables.  Returns
    (list of dict marginals per step, total log-evidence).
    """
    dist = {tuple(s[v] for v in schema.state_vars): float(p)
            for s, p in init_dist}
    marginals = []
    log_evidence = 0.0
    for t, (exo, z) in enumerate(zip(exo_seq, z_seq)):
        table_cache: dict = {}
        new_dist: dict = {}
        total = 0.0
        for state_key, p in dist.items():
            if p == 0.0:
                continue
            prev = SymbolicState.of(dict(zip(schema.state_vars, state_key)), t=t)
            jt = table_cache.get(state_key)
            if jt is None:
                try:
                    jt = enumerate_joint(schema, models, prev, exo, z, ctx,
                                         tape, method="product", cap=cap)
                except ImpossibleEvidenceError:
                    jt = _IMPOSSIBLE
                table_cache[state_key] = jt
            if jt is _IMPOSSIBLE:
                continue
            mass = p * np.exp(jt.log_evidence)
            total += mass
            for assign, q in zip(jt.assignments, jt.probs):
                nk = tuple(assign[v] for v in schema.state_vars)
                new_dist[nk] = new_dist.get(nk, 0.0) + mass * float(q)
        if total <= 0.0:
            raise ImpossibleEvidenceError(
                f"evidence impossible for every state at t={t}", observed=z)
        dist = {k: v / total for k, v in new_dist.items()}
        log_evidence += np.log(total)
        marginals.append(dict(dist))
    return marginals, log_evidence


def query_expectation(belief: ParticleBelief, f):
    """Self-normalised weighted expectation of ``f`` over trajectories.

    ``f`` maps a particle history to a float (returning a float) or a
    Var (returning a Var; weights enter as detached constants and
    gradients flow only through what ``f`` returns).  Numerator and
    denominator are accumulated in the same particle order, so the
    constant function 1 yields exactly 1.0.
    """
    if belief.histories is None:
        raise ContractError("query_expectation needs particle histories")
    lw = belief.log_weights
    finite = np.isfinite(lw)
    if not np.any(finite):
        raise DegenerateFilterError("all particle weights are zero")
    m = np.max(lw[finite])
    w = np.where(finite, np.exp(lw - m), 0.0)
    values = [f(belief.histories[i]) if w[i] > 0.0 else None
              for i in range(belief.n)]
    tape = next((v.tape for v in values if isinstance(v, Var)), None)
    denom = 0.0
    if tape is None:
        num = 0.0
        for i, v in enumerate(values):
            if v is None:
                continue
            num += w[i] * float(v)
            denom += w[i]
        return num / denom
    num = None
    for i, v in enumerate(values):
        if v is None:
            continue
        if not isinstance(v, Var):
            v = tape.constant(float(v))
        term = scale(v, float(w[i]))
        num = term if num is None else num + term
        denom += w[i]
    return scale(num, 1.0 / denom)


# ---------------------------------------------------------------------------
# table-HMM as a one-cluster symbolic model (adapter for shared tests)


def hmm_schema(spec: HmmSpec) -> tuple:
    """Wrap an :class:`HmmSpec` as a single-cluster symbolic model."""
    if np.any(spec.transition <= 0.0) or np.any(spec.initial <= 0.0):
        raise ContractError("hmm_schema needs strictly positive tables")
    states = tuple(range(spec.n_states))
    symbols = tuple(range(spec.observation.shape[1]))
    schema = SymbolicSchema(
        variables=[VarDecl("x", states)],
        clusters={"chain": ("x",)},
        state_vars=("x",),
        observation=VarDecl("z", symbols),
    )

    log_t = np.log(spec.transition)

    def build(prev, exo, current, ctx):
        row = log_t[prev["x"]]
        return CategoricalDist(ctx.constant(row), states)

    def lik(view, z, prev, exo, ctx):
        return float(spec.observation[view["x"], z])

    model = ClusterModel("chain",
                         steps=[ChoicePoint("x", build)],
                         factors=[ObsFactor(("x",), lik)])
    return schema, [model]


def hmm_init_table(spec: HmmSpec, z0: int, tape: Tape) -> PosteriorTable:
    """Exact initial conditional ``p(x0 | z0)`` as a posterior table."""
    unnorm = spec.initial * spec.observation[:, z0]
    total = float(np.sum(unnorm))
    if total <= 0.0:
        raise ImpossibleEvidenceError("initial evidence impossible", observed=z0)
    log_post = tape.constant(np.log(unnorm / total))
    return PosteriorTable(
        assignments=[{"x": k} for k in range(spec.n_states)],
        log_posterior=log_post,
        log_evidence=tape.constant(np.log(total)),
    )
