"""Array-shaped twin of the generic filter for room trajectories.

The generic engine builds one conditional table per distinct
(previous state, observation) pair through Python callbacks; at
training scale (thousands of trajectories times a thousand particles)
that is far too slow.  This module rebuilds the same tables as numpy
arrays indexed by (agent cell, enemy cell) and advances all particles
of a trajectory batch at once.  Keys are folded with the exact integer
labels the generic path uses, so a single-enemy run consumes the same
uniform draws and reproduces the generic sampler's integer paths, with
weights agreeing to roundoff.

All per-trajectory floats (feature rows, network forwards, tables) are
computed per trajectory, never across the batch, so results do not
depend on how a dataset is chunked across worker threads.

Gradients are assembled analytically rather than on a tape: each
surviving particle adds its surrogate coefficient to the logit row and
direction it sampled, and one batched VJP per trajectory pushes the
accumulated cotangents through the policy network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from ..neural import MlpSpec, ParamStore, forward_batch, vjp_batch
from ..stochastics import _label_to_int, fold_array, uniform_array
from .model import THETA_NAME, EnemyRoomModel
from .world import DIRS8, agent_path

_INIT_LBL = _label_to_int("init")

# the damage die table exactly as the generic enumeration produces it:
# uniform logits, log-prob gathered then exponentiated entry by entry
_DIE_LP = 0.0 - np.log(np.sum(np.exp(np.zeros(4))))
_DIE_CUM = np.cumsum(np.exp(np.full(4, _DIE_LP)))

_DX = np.array([d[0] for d in DIRS8])
_DY = np.array([d[1] for d in DIRS8])


def _cell_ids(pos, n: int) -> np.ndarray:
    arr = np.asarray(pos, dtype=np.int64)
    return (arr[..., 0] - 1) + (arr[..., 1] - 1) * n


@dataclass
class StepTables:
    """Concatenated per-(agent cell, enemy cell) conditional tables.

    Row ``slot * n**2 + c`` holds the table for an enemy on cell ``c``
    while the agent stands on the cell behind ``slot``; ``slots`` maps
    (trajectory, step) to its agent slot.  ``cum_f``/``cum_t`` are the
    sampling CDFs for a miss/hit observation, ``ev_f``/``ev_t`` the
    matching log evidence, ``dest``/``adj`` the bump-resolved move
    targets and their adjacency to the agent.
    """

    n: int
    slots: np.ndarray
    dest: np.ndarray
    adj: np.ndarray
    cum_f: np.ndarray
    cum_t: np.ndarray
    ev_f: np.ndarray
    ev_t: np.ndarray
    last_t: np.ndarray
    caches: list
    row_slices: list

    def rows(self, t: int, cell: np.ndarray) -> np.ndarray:
        return self.slots[:, t][:, None] * self.n ** 2 + cell


def _single_tables(store: ParamStore, policy: MlpSpec, n: int,
                   agents: np.ndarray, log_theta: float, log_miss: float):
    cells = np.arange(n * n, dtype=np.int64)
    ax, ay = agents % n + 1, agents // n + 1
    cx, cy = cells % n + 1, cells // n + 1

    feats = np.empty((agents.size, cells.size, 6))
    feats[:, :, 0] = cx[None, :]
    feats[:, :, 1] = cy[None, :]
    feats[:, :, 2] = ax[:, None]
    feats[:, :, 3] = ay[:, None]
    feats[:, :, 4] = ax[:, None] - cx[None, :]
    feats[:, :, 5] = ay[:, None] - cy[None, :]
    feats /= n
    ls, cache = forward_batch(store, policy, feats.reshape(-1, 6))

    tx = cx[None, :, None] + _DX[None, None, :]
    ty = cy[None, :, None] + _DY[None, None, :]
    blocked = ((tx < 1) | (tx > n) | (ty < 1) | (ty > n)
               | ((tx == ax[:, None, None]) & (ty == ay[:, None, None])))
    tx = np.where(blocked, cx[None, :, None], tx)
    ty = np.where(blocked, cy[None, :, None], ty)
    dest = ((tx - 1) + (ty - 1) * n).reshape(-1, 8)
    adj = (np.maximum(np.abs(tx - ax[:, None, None]),
                      np.abs(ty - ay[:, None, None])) == 1).reshape(-1, 8)

    # the categorical draw renormalises the log-softmax head; repeat it
    m = ls.max(axis=1, keepdims=True)
    ls = ls - (m + np.log(np.sum(np.exp(ls - m), axis=1, keepdims=True)))
    pi = np.exp(ls)

    p_f = pi * np.where(adj, np.exp(log_miss), 1.0)
    p_t = pi * np.where(adj, np.exp(log_theta), 0.0)
    sum_f, sum_t = p_f.sum(axis=1), p_t.sum(axis=1)
    with np.errstate(divide="ignore"):
        ev_f, ev_t = np.log(sum_f), np.log(sum_t)
    safe_t = np.where(sum_t > 0.0, sum_t, 1.0)
    cum_f = np.cumsum(p_f / sum_f[:, None], axis=1)
    cum_t = np.cumsum(p_t / safe_t[:, None], axis=1)
    last_t = np.where(adj.any(axis=1),
                      7 - adj[:, ::-1].argmax(axis=1), 0).astype(np.int64)
    return dest, adj, cum_f, cum_t, ev_f, ev_t, last_t, cache


def build_tables(model: EnemyRoomModel, agent_cells: np.ndarray) -> StepTables:
    """One table block per trajectory, rows deduplicated per agent cell."""
    n = model.n
    theta_logit = float(model.store[THETA_NAME])
    m = max(theta_logit, 0.0)
    lse = m + np.log(np.exp(theta_logit - m) + np.exp(0.0 - m))
    log_theta, log_miss = theta_logit - lse, 0.0 - lse

    slots = np.empty_like(agent_cells)
    parts, caches, row_slices = [], [], []
    offset = 0
    for i in range(agent_cells.shape[0]):
        agents = np.unique(agent_cells[i])
        slots[i] = offset // n ** 2 + np.searchsorted(agents, agent_cells[i])
        part = _single_tables(model.store, model.policy, n, agents,
                              log_theta, log_miss)
        parts.append(part[:-1])
        caches.append(part[-1])
        row_slices.append(slice(offset, offset + agents.size * n ** 2))
        offset += agents.size * n ** 2
    cat = [np.concatenate([p[j] for p in parts]) for j in range(7)]
    return StepTables(n, slots, *cat, caches, row_slices)


def _pick(cum, u):
    """Inverse-CDF index with the generic sampler's strict comparison."""
    return np.sum(cum <= u[..., None], axis=-1)


@dataclass
class FilterResult:
    p_dead: np.ndarray
    degenerate: np.ndarray
    ess: np.ndarray
    log_weights: np.ndarray
    dead: np.ndarray
    mean_ess: float
    trace: dict | None = None


def filter_trajectories(model: EnemyRoomModel, trajs, n_particles: int,
                        keys, want_trace: bool = False,
                        record_paths: bool = False) -> FilterResult:
    """Run the room filter over a batch of same-shape trajectories.

    ``keys[i]`` is the key ``predict_death`` would receive for
    trajectory ``i``; single-enemy runs consume identical streams.
    ``want_trace`` keeps what :func:`surrogate_gradients` needs and is
    only supported for single-enemy rooms.
    """
    if not trajs:
        raise ContractError("empty trajectory batch")
    n, e, t_len = trajs[0].n, trajs[0].e, trajs[0].t
    if any(tr.n != n or tr.e != e or tr.t != t_len for tr in trajs):
        raise ContractError("batched trajectories must share (n, e, t)")
    if model.n != n or model.e != e:
        raise ContractError(
            f"model is a ({model.n},{model.e}) room, batch is ({n},{e})")
    if len(keys) != len(trajs):
        raise ContractError("one key per trajectory required")
    if want_trace and e != 1:
        raise ContractError("gradient traces need a single-enemy room")
    b, p = len(trajs), n_particles

    agent_cells = np.stack(
        [_cell_ids(agent_path(tr.agent_start, tr.actions, n), n)
         for tr in trajs])
    hit_obs = np.array([tr.hit_obs for tr in trajs], dtype=bool)
    tables = build_tables(model, agent_cells)

    key_states = np.array([k.state for k in keys], dtype=np.uint64)
    pidx = np.arange(p, dtype=np.uint64)[None, :]
    init_states = fold_array(fold_array(key_states, _INIT_LBL)[:, None], pidx)
    ecell = np.empty((e, b, p), dtype=np.int64)
    for j in range(e):
        ecell[j] = (uniform_array(init_states, j) * (n * n)).astype(np.int64)
    hp = np.full((b, p), 12, dtype=np.int64)
    logw = np.zeros((b, p))
    ess = np.zeros((b, t_len))

    trace = ({"rows": [], "acts": [], "adj": [], "tables": tables,
              "hit_obs": hit_obs} if want_trace else None)
    paths = ({"e": np.empty((t_len, e, b, p), dtype=np.int64),
              "hp": np.empty((t_len, b, p), dtype=np.int64)}
             if record_paths else None)

    for t in range(t_len):
        s0 = fold_array(
            fold_array(key_states, _label_to_int(("step", t)))[:, None], pidx)
        zt = hit_obs[:, t][:, None]
        frozen = ~np.isfinite(logw)
        alive = (hp > 0) & ~frozen
        dead = (hp == 0) & ~frozen
        new_cell = np.empty_like(ecell)
        hits = np.zeros((e, b, p), dtype=bool)
        dealt = np.zeros((b, p), dtype=np.int64)

        if e == 1:
            rows = tables.rows(t, ecell[0])
            u_move = uniform_array(fold_array(s0, 0), 0)
            u_die = uniform_array(fold_array(s0, 1), 0)
            k_t = np.minimum(_pick(tables.cum_t[rows], u_move),
                             tables.last_t[rows])
            k_f = np.minimum(_pick(tables.cum_f[rows], u_move), 7)
            k = np.where(zt, k_t, k_f)
            possible = np.where(zt, np.isfinite(tables.ev_t[rows]), True)
            ok = alive & possible
            evidence = np.where(zt, tables.ev_t[rows], tables.ev_f[rows])
            hits[0] = np.broadcast_to(zt, (b, p)) & ok
            new_cell[0] = np.take_along_axis(tables.dest[rows],
                                             k[..., None], -1)[..., 0]
            die = np.minimum(_pick(_DIE_CUM[None, None, :], u_die), 3) + 1
            dealt = np.where(hits[0], die, 0)
            if want_trace:
                trace["rows"].append(np.where(ok, rows, -1))
                trace["acts"].append(k)
                trace["adj"].append(
                    np.take_along_axis(tables.adj[rows], k[..., None], -1)[..., 0])
        else:
            # the merged two-enemy group factorises given the hit
            # pattern, so sample pattern then per-enemy tables; equal
            # in law to enumerating the joint, not draw for draw
            rows = [tables.rows(t, ecell[j]) for j in range(2)]
            merged = fold_array(s0, 0)
            u_pat = uniform_array(merged, 0)
            u_k = [uniform_array(merged, 1), uniform_array(merged, 2)]
            u_die = [uniform_array(fold_array(s0, 1), 0),
                     uniform_array(fold_array(s0, 2), 0)]
            hit_mass = [np.exp(tables.ev_t[rows[j]]) for j in range(2)]
            miss_mass = [np.exp(tables.ev_f[rows[j]]) for j in range(2)]
            pat = np.stack([hit_mass[0] * miss_mass[1],
                            miss_mass[0] * hit_mass[1],
                            hit_mass[0] * hit_mass[1]], axis=-1)
            tot = pat.sum(axis=-1)
            possible = np.where(zt, tot > 0.0, True)
            ok = alive & possible
            with np.errstate(divide="ignore"):
                evidence = np.where(
                    zt,
                    np.log(np.where(tot > 0.0, tot, 1.0)),
                    tables.ev_f[rows[0]] + tables.ev_f[rows[1]])
            which = np.minimum(_pick(np.cumsum(
                pat / np.where(tot > 0.0, tot, 1.0)[..., None], axis=-1),
                u_pat), 2)
            hits[0] = (which != 1) & np.broadcast_to(zt, (b, p)) & ok
            hits[1] = (which != 0) & np.broadcast_to(zt, (b, p)) & ok
            for j in range(2):
                k_h = np.minimum(_pick(tables.cum_t[rows[j]], u_k[j]),
                                 tables.last_t[rows[j]])
                k_m = np.minimum(_pick(tables.cum_f[rows[j]], u_k[j]), 7)
                k = np.where(hits[j], k_h, k_m)
                new_cell[j] = np.take_along_axis(tables.dest[rows[j]],
                                                 k[..., None], -1)[..., 0]
                die = np.minimum(_pick(_DIE_CUM[None, None, :], u_die[j]), 3) + 1
                dealt += np.where(hits[j], die, 0)

        newly_frozen = (alive & ~possible) | (dead & np.broadcast_to(zt, (b, p)))
        logw = np.where(newly_frozen, -np.inf, logw)
        logw = np.where(ok, logw + evidence, logw)
        for j in range(e):
            ecell[j] = np.where(ok, new_cell[j], ecell[j])
        hp = np.where(ok, np.maximum(hp - dealt, 0), hp)
        if record_paths:
            paths["e"][t] = ecell
            paths["hp"][t] = hp

        fin = np.isfinite(logw)
        shift = logw.max(axis=1, initial=-np.inf, where=fin)
        with np.errstate(invalid="ignore"):
            w = np.where(fin, np.exp(logw - shift[:, None]), 0.0)
        s1, s2 = w.sum(axis=1), (w * w).sum(axis=1)
        ess[:, t] = np.where(s2 > 0.0, s1 * s1 / np.where(s2 > 0.0, s2, 1.0), 0.0)

    fin = np.isfinite(logw)
    degenerate = ~fin.any(axis=1)
    shift = logw.max(axis=1, initial=0.0, where=fin)
    with np.errstate(invalid="ignore"):
        w = np.where(fin, np.exp(logw - shift[:, None]), 0.0)
    dead_final = (hp == 0) & fin
    denom = w.sum(axis=1)
    num = (w * dead_final).sum(axis=1)
    p_dead = np.where(degenerate, 0.5, num / np.where(denom > 0.0, denom, 1.0))

    if want_trace:
        trace.update(weights=w, denom=denom, f=dead_final.astype(np.float64))
    if record_paths:
        trace = {} if trace is None else trace
        trace["paths"] = paths
    return FilterResult(p_dead, degenerate, ess, logw, dead_final,
                        float(ess.mean()), trace)


# ---------------------------------------------------------------------------
# analytic gradient of the surrogate


def loo_coefficients(w: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Per-particle coefficients ``w_i * (f_i - leave-one-out mean)``.

    ``w`` holds unnormalised weights per row and is normalised here.
    With equal weights this reduces to the leave-one-out form of the
    plain batch estimator, ``(f_i - mean of the others) / n``.  A row
    with at most one carrier has no baseline and gets zeros.
    """
    denom = w.sum(axis=1)
    num = (w * f).sum(axis=1)
    rest_w = denom[:, None] - w
    rest_num = num[:, None] - w * f
    baseline = np.where(rest_w > 0.0,
                        rest_num / np.where(rest_w > 0.0, rest_w, 1.0), 0.0)
    wn = w / np.where(denom > 0.0, denom, 1.0)[:, None]
    return np.where(rest_w > 0.0, wn * (f - baseline), 0.0)


def surrogate_gradients(model: EnemyRoomModel, result: FilterResult,
                        outer: np.ndarray) -> dict:
    """Parameter gradients of ``sum_i outer_i * p_dead_i``'s surrogate.

    ``outer`` is the detached per-trajectory chain coefficient, e.g.
    the derivative of a loss in ``p_dead``; pass ones for raw
    estimates.  Each surviving particle's joint log-probability
    contributes through the sampled action (one-hot against the logit
    row; the VJP supplies the softmax pullback) and through the claw
    logit: ``1 - theta`` on an observed hit, ``-theta`` when a
    survived step left the enemy adjacent.
    """
    trace = result.trace
    if trace is None or "weights" not in trace:
        raise ContractError("filter run was not traced for gradients")
    tables: StepTables = trace["tables"]
    coef = loo_coefficients(trace["weights"], trace["f"])
    coef = coef * np.where(result.degenerate, 0.0,
                           np.asarray(outer, dtype=np.float64))[:, None]

    theta = 1.0 / (1.0 + np.exp(-float(model.store[THETA_NAME])))
    cot = np.zeros(tables.cum_f.shape)
    theta_grad = 0.0
    for t, (rows, acts, adj) in enumerate(zip(trace["rows"], trace["acts"],
                                              trace["adj"])):
        use = rows >= 0
        if not use.any():
            continue
        c = np.broadcast_to(coef, rows.shape)[use]
        np.add.at(cot, (rows[use], acts[use]), c)
        z_lane = np.broadcast_to(trace["hit_obs"][:, t][:, None],
                                 rows.shape)[use]
        theta_grad += float(np.sum(np.where(z_lane, (1.0 - theta) * c,
                                            np.where(adj[use], -theta * c,
                                                     0.0))))

    grads: dict = {}
    for cache, rows in zip(tables.caches, tables.row_slices):
        part = vjp_batch(model.store, model.policy, cache, cot[rows])
        for name, g in part.items():
            grads[name] = grads.get(name, 0.0) + g
    grads[THETA_NAME] = np.asarray(theta_grad)
    return grads
