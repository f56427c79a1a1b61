"""Declarative symbolic transition models with exact conditioning.

A model is a set of *clusters*, each owning a disjoint set of discrete
variables.  Within a cluster, an ordered list of steps interleaves
choice points (a distribution built from the previous state, exogenous
inputs and earlier values of the same cluster) with deterministic
rules.  Observation factors assign a likelihood in ``[0, 1]`` to the
observed value given current-step variables.

Conditioning is exact: the engine enumerates a cluster's assignments,
multiplies prior probabilities by factor likelihoods, and normalises.
When one observed value reads variables from several clusters, those
clusters are merged for that conditional, which keeps the product of
per-group posteriors equal to the joint posterior.  Deterministic
*post rules* (e.g. a resource total that pools contributions from many
clusters) run after every group has its assignment; they never carry
probability mass of their own.

Everything here works on finite domains only.  Infinite-domain
declarations are accepted at the type level but any attempt to
enumerate them raises :class:`~symsmc.errors.UnsupportedDomainError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .diffcore import Tape, Var, concat, gather, log as vlog, logsumexp
from .errors import (ContractError, EnumerationCapError,
                     ImpossibleEvidenceError, UnsupportedDomainError)
from .stochastics import (BernoulliDist, CategoricalDist, Deterministic,
                          RngKey, log_prob, split)


@dataclass(frozen=True)
class VarDecl:
    """One named variable with a finite domain (or an 'infinite' stub)."""

    name: str
    domain: tuple = ()
    kind: str = "finite"

    def __post_init__(self):
        if self.kind not in ("finite", "infinite"):
            raise ContractError(f"VarDecl {self.name}: kind must be finite|infinite")
        if self.kind == "finite" and len(self.domain) == 0:
            raise ContractError(f"VarDecl {self.name}: finite domain must be non-empty")
        object.__setattr__(self, "domain", tuple(self.domain))


@dataclass(frozen=True)
class SymbolicState:
    """Immutable assignment of state variables at one time index."""

    assignment: tuple
    t: int = 0

    @staticmethod
    def of(mapping: Mapping, t: int = 0) -> "SymbolicState":
        return SymbolicState(tuple(sorted(mapping.items())), t)

    def as_dict(self) -> dict:
        return dict(self.assignment)

    def __getitem__(self, name):
        for k, v in self.assignment:
            if k == name:
                return v
        raise KeyError(name)


class _View(Mapping):
    """Read-restricted mapping; undeclared reads raise loudly."""

    __slots__ = ("_backing", "_allowed", "_what")

    def __init__(self, backing: Mapping, allowed, what: str):
        self._backing = backing
        self._allowed = frozenset(allowed)
        self._what = what

    def __getitem__(self, key):
        if key not in self._allowed:
            raise ContractError(
                f"{self._what}: read of {key!r} not declared (allowed: "
                f"{sorted(self._allowed)})")
        return self._backing[key]

    def __iter__(self):
        return iter(k for k in self._backing if k in self._allowed)

    def __len__(self):
        return sum(1 for _ in self)


@dataclass
class ChoicePoint:
    """A latent variable with a constructor returning its distribution."""

    var: str
    build: Callable  # (prev, exo, current, ctx) -> distribution


@dataclass
class Rule:
    """Deterministic guarded update; reads/writes declared up front."""

    writes: tuple
    reads: tuple
    fn: Callable  # (prev, exo, current, ctx) -> dict of writes

    def __post_init__(self):
        self.writes = tuple(self.writes)
        self.reads = tuple(self.reads)


@dataclass
class ObsFactor:
    """Likelihood of the observed value given current-step variables.

    ``reads`` may span clusters; the engine then merges those clusters
    for the step's conditional so the factor is evaluated exactly.
    """

    reads: tuple
    fn: Callable  # (current_view, z, prev, exo, ctx) -> float | Var

    def __post_init__(self):
        self.reads = tuple(self.reads)


@dataclass
class ClusterModel:
    cluster_id: str
    steps: list = field(default_factory=list)       # ChoicePoint | Rule
    factors: list = field(default_factory=list)     # ObsFactor
    post_rules: list = field(default_factory=list)  # Rule, may read across clusters


class SymbolicSchema:
    """Variable declarations plus an exact cluster partition."""

    def __init__(self, variables, clusters: Mapping, exogenous=(),
                 state_vars=(), observation: VarDecl | None = None):
        self.variables: dict[str, VarDecl] = {v.name: v for v in variables}
        self.clusters: dict[str, tuple] = {cid: tuple(names)
                                           for cid, names in clusters.items()}
        self.exogenous = tuple(exogenous)
        self.state_vars = tuple(state_vars)
        self.observation = observation
        self._validate()

    def _validate(self):
        owned = [n for names in self.clusters.values() for n in names]
        if len(owned) != len(set(owned)):
            raise ContractError("clusters overlap: a variable appears twice")
        undeclared = [n for n in owned if n not in self.variables]
        if undeclared:
            raise ContractError(f"cluster variables not declared: {undeclared}")
        non_exo = set(self.variables) - set(self.exogenous)
        missing = non_exo - set(owned)
        if missing:
            raise ContractError(f"variables outside every cluster: {sorted(missing)}")
        for name in self.exogenous:
            if name not in self.variables:
                raise ContractError(f"exogenous input {name!r} not declared")
        for name in self.state_vars:
            if name not in self.variables:
                raise ContractError(f"state variable {name!r} not declared")

    def owner(self, var: str) -> str:
        for cid, names in self.clusters.items():
            if var in names:
                return cid
        raise ContractError(f"variable {var!r} is in no cluster")

    def check_finite(self, names) -> None:
        for n in names:
            decl = self.variables.get(n)
            if decl is not None and decl.kind == "infinite":
                raise UnsupportedDomainError(
                    f"variable {n!r} has an infinite domain; the exact engine "
                    "only enumerates finite supports")


def register(schema: SymbolicSchema, models: list) -> list:
    """Check cluster models against the schema; returns them unchanged.

    Registration enforces the declarative contract: writes stay inside
    the owning cluster, declared reads exist, factors read only
    current-step choice or rule outputs.
    """
    by_id = {}
    for model in models:
        if model.cluster_id not in schema.clusters:
            raise ContractError(f"unknown cluster {model.cluster_id!r}")
        if model.cluster_id in by_id:
            raise ContractError(f"duplicate model for cluster {model.cluster_id!r}")
        by_id[model.cluster_id] = model
        own = set(schema.clusters[model.cluster_id])
        produced = set()
        for step in model.steps:
            if isinstance(step, ChoicePoint):
                if step.var not in own:
                    raise ContractError(
                        f"choice {step.var!r} not owned by {model.cluster_id!r}")
                produced.add(step.var)
            elif isinstance(step, Rule):
                bad = set(step.writes) - own
                if bad:
                    raise ContractError(
                        f"rule writes {sorted(bad)} outside {model.cluster_id!r}")
                # reads name current-step variables; previous state and
                # exogenous inputs arrive as separate views
                _check_reads(schema, step.reads, produced)
                produced |= set(step.writes)
            else:
                raise ContractError(f"unknown step type {type(step)}")
        all_current = {n for names in schema.clusters.values() for n in names}
        for rule in model.post_rules:
            bad = set(rule.writes) - own
            if bad:
                raise ContractError(
                    f"post rule writes {sorted(bad)} outside {model.cluster_id!r}")
            _check_reads(schema, rule.reads, all_current)
        for factor in model.factors:
            bad = set(factor.reads) - all_current
            if bad:
                raise ContractError(f"factor reads undeclared variables {sorted(bad)}")
    missing = set(schema.clusters) - set(by_id)
    if missing:
        raise ContractError(f"clusters without models: {sorted(missing)}")
    return models


def _check_reads(schema, reads, allowed):
    unknown = [r for r in reads if r not in schema.variables]
    if unknown:
        raise ContractError(f"declared reads of unknown variables: {unknown}")
    bad = [r for r in reads if r not in allowed]
    if bad:
        raise ContractError(f"reads {bad} not available at this point")


def merge_groups(schema: SymbolicSchema, models: list, merged: bool = True) -> list:
    """Partition cluster models into conditioning groups.

    Groups are the connected components induced by observation factors
    whose reads span clusters.  With ``merged=False`` the declared
    clusters are kept as-is (used by the validator to demonstrate what
    goes wrong when coupled clusters are split).
    """
    order = [m.cluster_id for m in models]
    if not merged:
        return [[m] for m in models]
    parent = {cid: cid for cid in order}

    def find(c):
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    for model in models:
        for factor in model.factors:
            for var in factor.reads:
                union(model.cluster_id, schema.owner(var))
    groups: dict[str, list] = {}
    for model in models:
        groups.setdefault(find(model.cluster_id), []).append(model)
    # deterministic order: by first cluster declaration
    return [groups[root] for root in dict.fromkeys(find(c) for c in order)]


@dataclass
class PosteriorTable:
    """Exact conditional over one group's assignment given (prev, z)."""

    assignments: list                # list of dicts over the group's variables
    log_posterior: Var               # normalised log-probability vector
    log_evidence: Var                # scalar log p(z-contribution | prev)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_posterior.value)

    def sample_index(self, key: RngKey, index: int = 0) -> int:
        u = key.uniform(index)
        cum = 0.0
        p = self.probs
        for k in range(p.size - 1):
            cum += p[k]
            if u < cum:
                return k
        return p.size - 1


def exact_conditional(schema: SymbolicSchema, group: list, prev: SymbolicState,
                      exo: Mapping, z, ctx, tape: Tape,
                      extra_factors=(), skip_spanning: bool = False) -> PosteriorTable:
    """Enumerate one group and condition it on the observed value.

    Raises :class:`ImpossibleEvidenceError` when every assignment has
    zero likelihood; filtering callers catch this and assign the
    particle weight zero instead.
    """
    entries = _enumerate_group(schema, group, prev, exo, z, ctx, tape,
                               extra_factors, skip_spanning=skip_spanning)
    if not entries:
        raise ImpossibleEvidenceError(
            f"evidence {z!r} impossible for group "
            f"{[m.cluster_id for m in group]}", prev_state=prev, observed=z)
    assignments = [a for a, _ in entries]
    logw = concat(*[w for _, w in entries])
    log_evidence = logsumexp(logw)
    return PosteriorTable(assignments, logw - log_evidence, log_evidence)


def _enumerate_group(schema, group, prev, exo, z, ctx, tape, extra_factors,
                     skip_spanning: bool = False):
    """DFS over the group's choice points in declared order.

    Returns ``[(assignment, log-weight Var)]`` with zero-likelihood
    assignments already dropped.  Factors contribute constants as plain
    floats folded into the weight and Var likelihoods via ``log``.
    """
    prev_view = _View(prev.as_dict() if prev is not None else {},
                      schema.state_vars, "previous state")
    exo_view = _View(dict(exo) if exo is not None else {},
                     schema.exogenous, "exogenous inputs")
    group_vars = [n for m in group for n in schema.clusters[m.cluster_id]]
    schema.check_finite(group_vars)
    group_set = set(group_vars)
    factors = []
    for m in group:
        for f in m.factors:
            outside = [v for v in f.reads if v not in group_set]
            if not outside:
                factors.append(f)
            elif not skip_spanning:
                raise ContractError(
                    f"factor in {m.cluster_id} reads {outside} outside its "
                    "group; merge the coupled clusters or supply a stand-in")
    factors += list(extra_factors)
    steps = []
    for model in group:
        own = set(schema.clusters[model.cluster_id])
        steps.extend((model.cluster_id, own, s) for s in model.steps)

    out = []

    def run(idx, current, log_terms):
        if idx == len(steps):
            weight_const = 1.0
            log_vars = list(log_terms)
            for factor in factors:
                view = _View(current, factor.reads, "observation factor")
                val = factor.fn(view, z, prev_view, exo_view, ctx)
                if isinstance(val, Var):
                    fval = float(val.value)
                    if not (0.0 <= fval <= 1.0):
                        raise ContractError(f"factor value {fval} outside [0, 1]")
                    if fval == 0.0:
                        return
                    log_vars.append(vlog(val))
                else:
                    fval = float(val)
                    if not (0.0 <= fval <= 1.0):
                        raise ContractError(f"factor value {fval} outside [0, 1]")
                    weight_const *= fval
            if weight_const == 0.0:
                return
            if weight_const != 1.0:
                log_vars.append(tape.constant(np.log(weight_const)))
            if log_vars:
                total = log_vars[0]
                for term in log_vars[1:]:
                    total = total + term
            else:
                total = tape.constant(0.0)
            out.append((dict(current), total))
            return
        cid, own, step = steps[idx]
        if isinstance(step, Rule):
            view = _View(current, step.reads, f"rule in {cid}")
            writes = step.fn(prev_view, exo_view, view, ctx)
            if set(writes) != set(step.writes):
                raise ContractError(
                    f"rule in {cid} wrote {sorted(writes)} but declared "
                    f"{sorted(step.writes)}")
            run(idx + 1, {**current, **writes}, log_terms)
            return
        own_current = _View(current, own, f"choice {step.var} in {cid}")
        dist = step.build(prev_view, exo_view, own_current, ctx)
        if isinstance(dist, Deterministic):
            run(idx + 1, {**current, step.var: dist.value}, log_terms)
            return
        if not isinstance(dist, (CategoricalDist, BernoulliDist)):
            raise ContractError(f"choice {step.var}: unsupported distribution")
        for label in dist.labels:
            lp = log_prob(dist, label)
            run(idx + 1, {**current, step.var: label}, log_terms + [lp])

    run(0, {}, [])
    return out


def run_post_rules(schema: SymbolicSchema, models: list, prev: SymbolicState,
                   exo: Mapping, current: dict, ctx) -> dict:
    """Apply every cluster's post rules to a fully sampled assignment."""
    prev_view = _View(prev.as_dict() if prev is not None else {},
                      schema.state_vars, "previous state")
    exo_view = _View(dict(exo) if exo is not None else {},
                     schema.exogenous, "exogenous inputs")
    updated = dict(current)
    for model in models:
        for rule in model.post_rules:
            view = _View(updated, rule.reads, f"post rule in {model.cluster_id}")
            writes = rule.fn(prev_view, exo_view, view, ctx)
            if set(writes) != set(rule.writes):
                raise ContractError(
                    f"post rule in {model.cluster_id} wrote {sorted(writes)} "
                    f"but declared {sorted(rule.writes)}")
            updated.update(writes)
    return updated


@dataclass
class JointTable:
    """Posterior over complete assignments (post rules applied)."""

    assignments: list
    probs: np.ndarray
    log_evidence: float


def enumerate_joint(schema: SymbolicSchema, models: list, prev: SymbolicState,
                    exo: Mapping, z, ctx, tape: Tape, method: str = "product",
                    cap: int = 1_000_000, merged: bool = True) -> JointTable:
    """Exact posterior over the full next assignment given (prev, z).

    ``method='product'`` composes per-group conditionals (the filter's
    factorised route); ``method='direct'`` enumerates all clusters as
    one block with every factor applied jointly.  Both apply post rules
    at the end.  Exceeding ``cap`` assignments raises.
    """
    if method not in ("product", "direct"):
        raise ContractError("method must be 'product' or 'direct'")
    if method == "direct":
        groups = [list(models)]
    else:
        groups = merge_groups(schema, models, merged=merged)

    tables = []
    split_mode = method == "product" and not merged
    for group in groups:
        extra = ()
        if split_mode:
            extra = _marginalised_spanning_factors(schema, models, group,
                                                   prev, exo, ctx, tape)
        table = exact_conditional(schema, group, prev, exo, z, ctx, tape,
                                  extra_factors=extra,
                                  skip_spanning=split_mode)
        tables.append(table)

    assignments = [{}]
    probs = np.ones(1)
    log_evidence = 0.0
    for table in tables:
        log_evidence += float(table.log_evidence.value)
        size = len(assignments) * len(table.assignments)
        if size > cap:
            raise EnumerationCapError(
                f"joint support exceeds cap ({size} > {cap})")
        merged_assignments = []
        merged_probs = np.empty(size)
        k = 0
        tp = table.probs
        for a, pa in zip(assignments, probs):
            for b, pb in zip(table.assignments, tp):
                merged_assignments.append({**a, **b})
                merged_probs[k] = pa * pb
                k += 1
        assignments = merged_assignments
        probs = merged_probs
    assignments = [run_post_rules(schema, models, prev, exo, a, ctx)
                   for a in assignments]
    return JointTable(assignments, probs, log_evidence)


def _marginalised_spanning_factors(schema, models, group, prev, exo, ctx, tape):
    """Expected-likelihood stand-ins for factors that span split groups.

    When the caller insists on keeping coupled clusters apart, a factor
    reading other clusters' variables cannot be evaluated exactly; the
    defined (and deliberately approximate) semantics averages it over
    the other clusters' prior.  The validator uses the gap this opens.
    """
    own_ids = {m.cluster_id for m in group}
    own_vars = {n for m in group for n in schema.clusters[m.cluster_id]}
    out = []
    for model in models:
        if model.cluster_id not in own_ids:
            continue
        for factor in model.factors:
            outside = [schema.owner(v) for v in factor.reads
                       if v not in own_vars]
            if not outside:
                continue
            # prior-only copies: averaging must not recurse through the
            # other clusters' own factors
            others = [ClusterModel(m.cluster_id, m.steps, [], [])
                      for m in models if m.cluster_id in set(outside)]

            def expected(view, z, prev_view, exo_view, ctx,
                         _factor=factor, _others=others):
                total, weight = 0.0, 0.0
                other_entries = _enumerate_group(schema, _others, prev, exo,
                                                 None, ctx, tape, ())
                for other_assign, logw in other_entries:
                    p = float(np.exp(logw.value))
                    combined = {**other_assign, **dict(view.items())}
                    val = _factor.fn(_View(combined, _factor.reads, "factor"),
                                     z, prev_view, exo_view, ctx)
                    v = float(val.value) if isinstance(val, Var) else float(val)
                    total += p * v
                    weight += p
                return total / weight if weight > 0 else 0.0

            out.append(ObsFactor(reads=tuple(v for v in factor.reads
                                             if v in own_vars), fn=expected))
    return out


@dataclass
class ValidationReport:
    trials: int
    max_tv: float
    worst_instance: tuple | None
    skipped_impossible: int

    @property
    def ok(self) -> bool:
        return self.max_tv < 1e-9


def validate_clusters(schema: SymbolicSchema, models: list, trials: int,
                      key: RngKey, ctx_factory, merged: bool = True,
                      cap: int = 1_000_000) -> ValidationReport:
    """Compare product-of-groups posteriors to the direct joint.

    For each trial a random previous state, exogenous assignment and
    observation are drawn uniformly from the declared domains.  The
    report's ``max_tv`` is the largest total-variation gap seen; with
    correctly declared (merged) clusters it is numerical noise only.
    """
    max_tv, worst, skipped = 0.0, None, 0
    for trial in range(trials):
        kt = split(key, trial)
        draw = 0
        prev_assign = {}
        for name in schema.state_vars:
            decl = schema.variables[name]
            schema.check_finite([name])
            u = kt.uniform(draw); draw += 1
            prev_assign[name] = decl.domain[int(u * len(decl.domain))]
        exo = {}
        for name in schema.exogenous:
            decl = schema.variables[name]
            u = kt.uniform(draw); draw += 1
            exo[name] = decl.domain[int(u * len(decl.domain))]
        if schema.observation is None:
            raise ContractError("validate_clusters needs a declared observation")
        u = kt.uniform(draw); draw += 1
        z = schema.observation.domain[int(u * len(schema.observation.domain))]
        prev = SymbolicState.of(prev_assign)
        tape = Tape(record=False)
        ctx = ctx_factory(tape)
        try:
            direct = enumerate_joint(schema, models, prev, exo, z, ctx, tape,
                                     method="direct", cap=cap)
            product = enumerate_joint(schema, models, prev, exo, z, ctx, tape,
                                      method="product", cap=cap, merged=merged)
        except ImpossibleEvidenceError:
            skipped += 1
            continue
        tv = _assignment_tv(direct, product)
        if tv > max_tv:
            max_tv, worst = tv, (prev_assign, exo, z)
    return ValidationReport(trials, max_tv, worst, skipped)


def _assignment_tv(a: JointTable, b: JointTable) -> float:
    def keyed(table):
        out = {}
        for assign, p in zip(table.assignments, table.probs):
            out_key = tuple(sorted(assign.items()))
            out[out_key] = out.get(out_key, 0.0) + float(p)
        return out

    pa, pb = keyed(a), keyed(b)
    keys = set(pa) | set(pb)
    return 0.5 * sum(abs(pa.get(k, 0.0) - pb.get(k, 0.0)) for k in keys)
