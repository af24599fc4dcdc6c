import json

import numpy as np
import pytest

from emts.kinematics import VehicleState, rollout
from emts.primitives import (LibraryConfig, build_library, gen_constant_control,
                             gen_polynomial, load_library, save_library)

CFG = LibraryConfig()


def serialized(lib):
    rows = []
    for e in lib.entries:
        rows.append(json.dumps({
            "family": e.family, "params": e.params,
            "actions": [[a.throttle, a.steer] for a in e.trajectory.actions]},
            sort_keys=True))
    return "\n".join(rows)


def test_single_rest_trajectory():
    entries = gen_constant_control([(0.0, 0.0)], [0.0], CFG)
    assert len(entries) == 1
    traj = entries[0].trajectory
    assert all(s == VehicleState(0, 0, 0, 0) for s in traj.states)


def test_full_throttle_speed_follows_clamp_recursion():
    entries = gen_constant_control([(1.0, 0.0)], [0.0], CFG)
    v = 0.0
    kin = CFG.kin
    for s in entries[0].trajectory.states:
        v = min(v + kin.max_accel * kin.dt, kin.v_max)
        assert s.v == pytest.approx(v, rel=1e-12)


def test_constant_grid_count():
    pairs = [(t, s) for t in np.linspace(-1, 1, 7) for s in np.linspace(-1, 1, 7)]
    entries = gen_constant_control(pairs, [0.0, 5.0, 10.0], CFG)
    assert len(entries) == 147


def test_degenerate_quintic_is_straight():
    entries, skipped = gen_polynomial([0.0], [10.0], [10.0], CFG)
    assert skipped == 0
    traj = entries[0].trajectory
    assert max(abs(a.steer) for a in traj.actions) < 1e-6


def test_lane_change_reaches_offset():
    entries, _ = gen_polynomial([3.5], [10.0], [10.0], CFG)
    y_final = entries[0].trajectory.states[-1].y
    assert abs(y_final - 3.5) < 0.35  # within 10 percent of one lane


def test_infeasible_speed_combinations_skipped():
    # |dv|/1s > 2 * max_accel = 8 m/s^2 must be skipped, not fatal
    entries, skipped = gen_polynomial([0.0], [15.0], [3.0], CFG)
    assert skipped == 1 and entries == []


def test_quintic_grid_count_minus_skips():
    entries, skipped = gen_polynomial(CFG.quintic_offsets, CFG.quintic_target_speeds,
                                      CFG.quintic_initial_speeds, CFG)
    assert len(entries) + skipped == 5 * 5 * 5


def test_every_trajectory_kinematically_consistent():
    cfg = LibraryConfig(spline_count=60)
    lib = build_library(cfg)
    rng = np.random.default_rng(0)
    for idx in rng.choice(len(lib), size=40, replace=False):
        traj = lib.entries[idx].trajectory
        assert list(traj.states) == rollout(traj.initial, traj.actions, cfg.kin)
        assert all(-1 <= a.throttle <= 1 and -1 <= a.steer <= 1 for a in traj.actions)


def test_build_is_deterministic_per_seed():
    cfg = LibraryConfig(spline_count=40, seed=11)
    assert serialized(build_library(cfg)) == serialized(build_library(cfg))
    other = LibraryConfig(spline_count=40, seed=12)
    assert serialized(build_library(cfg)) != serialized(build_library(other))


def test_single_family_library_size():
    cfg = LibraryConfig(families=["constant"], const_throttles=[0.0],
                        const_steers=[0.0], const_speeds=[0.0])
    lib = build_library(cfg)
    assert len(lib) == 1


def test_default_size_is_family_sum():
    lib = build_library(CFG)
    by_family = {}
    for e in lib.entries:
        by_family[e.family] = by_family.get(e.family, 0) + 1
    assert by_family["constant"] == 7 * 7 * 4
    assert by_family["spline"] == CFG.spline_count
    assert by_family["quintic"] + lib.skipped == 125
    assert len(lib) == sum(by_family.values())


def test_empty_configuration_fatal():
    with pytest.raises(ValueError):
        build_library(LibraryConfig(families=[]))
    with pytest.raises(ValueError):
        build_library(LibraryConfig(families=["nonsense"]))


def test_serialization_round_trip(tmp_path):
    cfg = LibraryConfig(spline_count=25)
    lib = build_library(cfg)
    path = tmp_path / "lib.jsonl"
    save_library(lib, path)
    loaded = load_library(path)
    assert len(loaded) == len(lib)
    assert loaded.horizon == cfg.horizon
    for a, b in zip(lib.entries, loaded.entries):
        assert a.family == b.family
        assert a.trajectory.actions == b.trajectory.actions
        assert a.trajectory.states == b.trajectory.states


def test_serialization_deterministic_bytes(tmp_path):
    cfg = LibraryConfig(spline_count=25, seed=3)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_library(build_library(cfg), p1)
    save_library(build_library(cfg), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_feature_matrix_shapes():
    cfg = LibraryConfig(spline_count=10)
    lib = build_library(cfg)
    acts = lib.action_matrix()
    assert acts.shape == (len(lib), 2 * cfg.horizon)
    assert np.all(np.abs(acts) <= 1.0)
    assert lib.initial_speeds().shape == (len(lib),)
