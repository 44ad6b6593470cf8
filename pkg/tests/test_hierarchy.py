import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chf.control import AffineIdModel, SdsController
from chf.errors import HierarchyError, NetworkDiverged
from chf.experiments import _tuned_level
from chf.hierarchy import (
    HierarchyLevel, build_hierarchy, hierarchy_from_dict, load_hierarchy, mean_error,
    simulate_hierarchy, step_hierarchy, verify_feedforward, write_level_csv,
)
from chf.recon import ReconNet


def scalar_level(controller=True):
    lvl = HierarchyLevel(ReconNet.create([[1.0]], [[1.0]]))
    if controller:
        lvl.coupling_U = np.eye(1)
        lvl.controller = SdsController.create(AffineIdModel(np.eye(1)), AffineIdModel(np.eye(1)), 1.0, 1)
    return lvl


def tuned_stack(seed, n=3, d=2, perturb_level=None, **kw):
    rng = np.random.default_rng(seed)
    levels = []
    for k in range(n):
        q_scale = None
        if k == perturb_level:
            q_scale = np.ones(d)
            q_scale[-1] = 0.2
        levels.append(_tuned_level(rng, d, first=(k == 0), q_scale=q_scale, **kw))
    return levels


# --- construction --------------------------------------------------------------

def test_two_scalar_levels():
    hier = build_hierarchy([scalar_level(False), scalar_level()])
    assert hier.depth == 2 and hier.twist_target() is None


def test_mismatched_coupling_names_pair():
    upper = scalar_level()
    upper.coupling_U = np.eye(2)
    with pytest.raises(HierarchyError, match="levels 0->1"):
        build_hierarchy([scalar_level(False), upper])


def test_single_level_rejected():
    with pytest.raises(HierarchyError):
        build_hierarchy([scalar_level(False)])


def test_bottom_controller_rejected():
    with pytest.raises(HierarchyError):
        build_hierarchy([scalar_level(True), scalar_level()])


def test_unknown_speed_field():
    with pytest.raises(HierarchyError):
        HierarchyLevel(ReconNet.create([[1.0]], [[1.0]]), speed="fast")


def test_twist_wiring_is_introspectable():
    hier = build_hierarchy(tuned_stack(0), top_twist=True)
    assert hier.twist_target() == (2, 1)
    assert np.array_equal(hier.top.coupling_C, hier.top.coupling_U)


def test_twist_needs_matching_coupling():
    levels = tuned_stack(0)
    levels[-1].coupling_C = 2 * np.eye(2)
    with pytest.raises(HierarchyError):
        build_hierarchy(levels, top_twist=True)


def test_deconv_attached_at_top():
    hier = build_hierarchy(tuned_stack(1))
    assert hier.deconv is not None
    assert hier.deconv.dim == hier.top.net.h_dim


# --- dynamics ------------------------------------------------------------------

def test_zero_input_stays_at_rest():
    hier = build_hierarchy(tuned_stack(2))
    for snaps in simulate_hierarchy(hier, np.zeros(2), 0.02, 50):
        for s in snaps:
            assert not np.any(s.h) and not np.any(s.e) and not np.any(s.u)


def test_tuned_stack_with_exact_controllers_shows_no_error():
    hier = build_hierarchy(tuned_stack(3, speed="nominal"))
    hist = simulate_hierarchy(hier, np.array([1.0, -0.5]), 0.02, 1500)
    # the controllers never see a momentum mismatch
    for snaps in hist:
        for s in snaps[:-1]:
            assert np.linalg.norm(s.e_ctrl) < 1e-12
            assert np.linalg.norm(s.u) < 1e-12
    for s in hist[-1]:
        assert np.linalg.norm(s.e) < 1e-6


def test_controller_reduces_perturbed_level_error():
    drive = lambda t: np.array([np.sin(t), np.cos(0.5 * t)])
    errs, peak = {}, 0.0
    for on in (True, False):
        levels = tuned_stack(4, perturb_level=1)
        levels[2].kappa = 3.0
        hier = build_hierarchy(levels)
        hist = simulate_hierarchy(hier, drive, 0.02, 1000, control=on)
        errs[on] = mean_error(hist, 1)
        if on:
            peak = max(np.linalg.norm(s[1].u) for s in hist)
    assert peak > 0
    assert errs[True] < errs[False]


def test_top_twist_identity_each_step():
    levels = tuned_stack(5)
    levels[-1].speed = "decay"
    hier = build_hierarchy(levels, top_twist=True)
    for snaps in simulate_hierarchy(hier, np.array([1.0, 1.0]), 0.02, 200):
        assert snaps[1].twist_residual <= 1e-10


def test_divergence_is_level_tagged():
    levels = tuned_stack(6)
    net = levels[1].net
    net.Q = -net.Q
    hier = build_hierarchy(levels)
    with pytest.raises(NetworkDiverged) as info:
        simulate_hierarchy(hier, np.ones(2), 0.1, 5000, control=False)
    assert info.value.level == 1


def test_snapshots_are_copies():
    hier = build_hierarchy(tuned_stack(7))
    snaps = step_hierarchy(hier, np.ones(2), 0.1)
    h_before = snaps[0].h.copy()
    step_hierarchy(hier, np.ones(2), 0.1)
    assert np.array_equal(snaps[0].h, h_before)


# --- feedforward verification --------------------------------------------------

def test_tuned_stack_is_feedforward():
    hier = build_hierarchy(tuned_stack(8))
    rep = verify_feedforward(hier, np.random.default_rng(0).standard_normal((4, 2)))
    assert rep.all_equivalent
    assert max(rep.residuals) < 1e-6


def test_single_detuned_level_is_flagged():
    hier = build_hierarchy(tuned_stack(9, perturb_level=1))
    rep = verify_feedforward(hier, np.random.default_rng(0).standard_normal((4, 2)))
    assert rep.flagged == [1]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_tuned_implies_feedforward(seed):
    levels = tuned_stack(seed)
    assert all(np.linalg.norm(l.net.Q @ l.net.N @ l.net.W - np.eye(2)) < 1e-8 for l in levels)
    rep = verify_feedforward(build_hierarchy(levels), np.random.default_rng(seed).standard_normal((2, 2)))
    assert max(rep.residuals) < 1e-6


# --- persistence ---------------------------------------------------------------

SPEC = {
    "top_twist": False,
    "levels": [
        {"h_dim": 2, "x_dim": 2, "W": [[1.0, 0.2], [0.0, 1.0]]},
        {"h_dim": 2, "x_dim": 2, "W": {"init": "identity", "scale": 2.0}, "kappa": 2.0,
         "controller": {"gain": 3.0, "psi_hat": 1.0}},
    ],
}


def test_load_from_json(tmp_path):
    path = tmp_path / "h.json"
    path.write_text(json.dumps(SPEC))
    hier = load_hierarchy(path)
    assert hier.depth == 2
    top = hier.top
    assert np.allclose(top.net.Q @ top.net.W, np.eye(2))
    assert top.controller.gain == 3.0 and top.kappa == 2.0
    assert np.array_equal(top.coupling_U, np.eye(2))


def test_bad_initializer():
    bad = json.loads(json.dumps(SPEC))
    bad["levels"][1]["W"] = {"init": "magic"}
    with pytest.raises(HierarchyError):
        hierarchy_from_dict(bad)


def test_level_csv(tmp_path):
    hier = hierarchy_from_dict(SPEC)
    hist = simulate_hierarchy(hier, np.ones(2), 0.1, 5)
    path = write_level_csv(hist, 0, tmp_path / "l0.csv")
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "h0", "h1", "e0", "e1", "u0", "u1"]
    assert len(rows) == 6
