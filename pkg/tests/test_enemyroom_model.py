"""Filtering model against exact enumeration on small rooms."""

import numpy as np
import pytest

from symsmc.diffcore import Tape
from symsmc.enemyroom.model import (DEAD, THETA_NAME, cell_index,
                                    exact_death_probability, init_particles,
                                    interior_cells, new_model,
                                    policy_features, predict_death,
                                    uniform_prior, with_grid)
from symsmc.enemyroom.world import Trajectory
from symsmc.errors import ContractError, ImpossibleEvidenceError
from symsmc.stochastics import RngKey, split
from symsmc.symbolic import SymbolicState, enumerate_joint, validate_clusters


def make_model(n=3, e=1, seed=0):
    return new_model(n, e, RngKey(seed))


def weighted_se(belief, f_values):
    lw = belief.log_weights
    fin = np.isfinite(lw)
    w = np.zeros_like(lw)
    w[fin] = np.exp(lw[fin] - lw[fin].max())
    wt = w / w.sum()
    mean = float(np.sum(wt * f_values))
    return mean, float(np.sqrt(np.sum(wt ** 2 * (f_values - mean) ** 2)))


class TestGeometry:

    def test_interior_cells_x_fastest(self):
        cells = interior_cells(3)
        assert cells[0] == (1, 1)
        assert cells[1] == (2, 1)
        assert cells[3] == (1, 2)
        assert len(cells) == 9

    def test_cell_index_inverts_enumeration(self):
        for n in (3, 5):
            for i, pos in enumerate(interior_cells(n)):
                assert cell_index(pos, n) == i

    def test_policy_features_normalised(self):
        feats = policy_features((1, 2), (3, 4), n=4)
        np.testing.assert_allclose(feats, [0.25, 0.5, 0.75, 1.0, 0.5, 0.5])


class TestClusterFactorisation:

    @pytest.mark.parametrize("e,trials", [(1, 30), (2, 10)])
    def test_product_equals_direct(self, e, trials):
        mdl = make_model(3, e, seed=e)
        report = validate_clusters(mdl.schema, mdl.models, trials,
                                   RngKey(17 + e), mdl.context)
        assert report.max_tv < 1e-9

    def test_health_update_consistent(self):
        mdl = make_model(3, 1)
        tape = Tape(record=False)
        ctx = mdl.context(tape)
        for hp0 in (12, 9, 2):
            prev = SymbolicState.of({"e0": (1, 1), "hp": hp0})
            joint = enumerate_joint(mdl.schema, mdl.models, prev,
                                    {"agent": (2, 2)}, True, ctx, tape)
            assert joint.assignments
            for a in joint.assignments:
                assert a["hit0"] is True
                assert a["hp"] == max(hp0 - a["dmg0"], 0)

    def test_miss_leaves_health_alone(self):
        mdl = make_model(3, 1)
        tape = Tape(record=False)
        ctx = mdl.context(tape)
        prev = SymbolicState.of({"e0": (1, 1), "hp": 7})
        joint = enumerate_joint(mdl.schema, mdl.models, prev,
                                {"agent": (2, 2)}, False, ctx, tape)
        for a in joint.assignments:
            assert a["hit0"] is False
            assert a["hp"] == 7

    def test_dead_state_is_absorbing_noop(self):
        mdl = make_model(3, 1)
        tape = Tape(record=False)
        ctx = mdl.context(tape)
        prev = SymbolicState.of({"e0": (3, 3), "hp": DEAD})
        joint = enumerate_joint(mdl.schema, mdl.models, prev,
                                {"agent": (1, 1)}, False, ctx, tape)
        for a in joint.assignments:
            assert a["hp"] == DEAD
            assert a["e0"] == (3, 3)
        # dead enemies deal no damage and never produce a hit
        assert joint.log_evidence == pytest.approx(0.0, abs=1e-12)

    def test_dead_state_cannot_emit_a_hit(self):
        mdl = make_model(3, 1)
        tape = Tape(record=False)
        ctx = mdl.context(tape)
        prev = SymbolicState.of({"e0": (1, 1), "hp": DEAD})
        with pytest.raises(ImpossibleEvidenceError):
            enumerate_joint(mdl.schema, mdl.models, prev,
                            {"agent": (2, 2)}, True, ctx, tape)

    def test_unreachable_adjacency_makes_hits_impossible(self):
        # both enemies too far to reach the agent in one move
        mdl = make_model(7, 2)
        tape = Tape(record=False)
        ctx = mdl.context(tape)
        prev = SymbolicState.of({"e0": (1, 1), "e1": (1, 2), "hp": 12})
        with pytest.raises(ImpossibleEvidenceError):
            enumerate_joint(mdl.schema, mdl.models, prev,
                            {"agent": (7, 7)}, True, ctx, tape)


class TestModelConstruction:

    def test_new_model_has_policy_and_claw_parameters(self):
        mdl = make_model(4, 1)
        assert THETA_NAME in mdl.store.values
        assert float(mdl.store[THETA_NAME]) == 0.0
        assert len(mdl.store.values) > 1

    def test_invalid_enemy_count(self):
        with pytest.raises(ContractError):
            new_model(3, 0, RngKey(0))

    def test_with_grid_shares_parameters(self):
        mdl = make_model(3, 1, seed=4)
        big = with_grid(mdl, 5)
        assert big.store is mdl.store
        assert big.n == 5 and big.e == 1
        traj = Trajectory(5, 1, (3, 3), ("up", "left"), (False, False), False)
        res = predict_death(big, traj, 200, RngKey(1))
        assert res.probability == 0.0

    def test_uniform_prior_covers_room(self):
        mdl = make_model(3, 1)
        prior = uniform_prior(mdl)
        assert len(prior) == 9
        assert sum(p for _, p in prior) == pytest.approx(1.0, abs=1e-12)
        assert all(state["hp"] == 12 for state, _ in prior)

    def test_init_particles_sample_prior(self):
        mdl = make_model(3, 1)
        tape = Tape(record=False)
        belief = init_particles(mdl, 60, RngKey(8), tape)
        cells = set(interior_cells(3))
        assert len(belief.particles) == 60
        for state in belief.particles:
            assert state["hp"] == 12
            assert state["e0"] in cells
        np.testing.assert_array_equal(belief.log_weights, np.zeros(60))


class TestPredictDeath:

    def test_no_hits_means_no_death(self):
        mdl = make_model(3, 1, seed=2)
        traj = Trajectory(3, 1, (2, 2), ("up", "right", "down"),
                          (False, False, False), False)
        res = predict_death(mdl, traj, 300, RngKey(3))
        assert res.probability == 0.0
        assert not res.degenerate

    def test_short_horizon_cannot_kill(self):
        # two d4 hits deal at most 8 < 12 damage
        mdl = make_model(3, 1, seed=2)
        traj = Trajectory(3, 1, (2, 2), ("up", "down"), (True, True), True)
        p_exact, _, _ = exact_death_probability(mdl, traj)
        assert p_exact == 0.0
        res = predict_death(mdl, traj, 300, RngKey(3))
        assert res.probability == 0.0

    def test_shape_mismatch_rejected(self):
        mdl = make_model(3, 1)
        traj = Trajectory(4, 1, (2, 2), ("up",), (True,), False)
        with pytest.raises(ContractError):
            predict_death(mdl, traj, 10, RngKey(0))

    def test_matches_exact_on_single_enemy_room(self):
        mdl = make_model(3, 1, seed=6)
        traj = Trajectory(3, 1, (2, 2), ("up", "left", "down", "right"),
                          (True, True, True, False), True)
        p_exact, _, _ = exact_death_probability(mdl, traj)
        res = predict_death(mdl, traj, 4000, RngKey(21))
        f = np.array([1.0 if h[-1]["hp"] == DEAD else 0.0
                      for h in res.belief.histories])
        mean, se = weighted_se(res.belief, f)
        assert mean == pytest.approx(res.probability, abs=1e-12)
        assert abs(res.probability - p_exact) < 3 * max(se, 1e-6)

    def test_matches_exact_on_two_enemy_room(self):
        mdl = make_model(3, 2, seed=7)
        traj = Trajectory(3, 2, (2, 2), ("up", "left", "down"),
                          (True, False, True), False)
        p_exact, _, _ = exact_death_probability(mdl, traj)
        res = predict_death(mdl, traj, 1500, RngKey(22))
        f = np.array([1.0 if h[-1]["hp"] == DEAD else 0.0
                      for h in res.belief.histories])
        _, se = weighted_se(res.belief, f)
        assert abs(res.probability - p_exact) < 3 * max(se, 1e-6)

    def test_rao_blackwell_mixture_tracks_exact_marginals(self):
        mdl = make_model(3, 1, seed=9)
        traj = Trajectory(3, 1, (2, 2), ("up", "left", "down"),
                          (True, True, False), False)
        p_exact, marginals, _ = exact_death_probability(mdl, traj)
        res = predict_death(mdl, traj, 3000, RngKey(30),
                            marginal_keys=lambda a: (a["e0"], a["hp"]))
        sv = mdl.schema.state_vars
        i_e0, i_hp = sv.index("e0"), sv.index("hp")
        for mix, exact in zip(res.mixtures, marginals):
            proj = {}
            for sk, p in exact.items():
                k = (sk[i_e0], sk[i_hp])
                proj[k] = proj.get(k, 0.0) + p
            keys = set(mix) | set(proj)
            tv = 0.5 * sum(abs(mix.get(k, 0.0) - proj.get(k, 0.0))
                           for k in keys)
            assert tv < 0.05
