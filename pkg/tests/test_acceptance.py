"""Acceptance suite: one test per criterion, cheap checks first.

Heavyweight artifacts (library, skill space, intent encoders, training
runs) are built once in module fixtures and shared. Run with `pytest -s`
to stream the per-criterion PASS lines.
"""

import math
import time

import numpy as np
import pytest

from emts.envs import OBS_DIM, default_scenario_config, ego_speed_from_obs
from emts.intents import (IntentTrainConfig, STYLES, SegmentPair,
                          decoded_action_mse, extract_segments,
                          generate_expert_dataset, train_intent_encoder)
from emts.kinematics import VehicleState, KinematicsConfig, rollout
from emts.nets import Mlp, gmm_log_prob_many, gmm_sample
from emts.primitives import LibraryConfig, build_library, gen_constant_control
from emts.search import (MinMaxStats, Node, SearchConfig, adjusted_prior,
                         child_scores, run_search, sample_root_atoms)
from emts.skills import (SkillTrainConfig, decode, decode_actions, encode,
                         library_features, train_skill_space,
                         reconstruction_mse)
from emts.trainer import (PosteriorConfig, TrainConfig, loss_and_grads,
                          improved_policy, train_loop, visit_weight,
                          write_metrics_csv)
from emts.world_model import ModelConfig, new_model_bundle

SPEED_OF_OBS = lambda o: ego_speed_from_obs(o, 20.0)


def report(criterion, detail):
    print(f"[PASS] criterion {criterion}: {detail}")


def make_search_result(visits, expert_density, atoms=None):
    from emts.search import SearchResult
    k = len(visits)
    return SearchResult(
        atoms=np.zeros((k, 2)) if atoms is None else atoms,
        provenance=np.full(k, -1), visits=np.asarray(visits),
        prior=np.full(k, 1.0 / k), root_value=0.0, model_density=np.ones(k),
        expert_density=np.asarray(expert_density, dtype=float),
        q_values=np.zeros(k), gamma=0.0)


# ---------------------------------------------------------------------------
# criterion 1: reduction equivalences


def test_criterion_1_reduction_equivalence():
    start = time.time()
    rng_model = np.random.default_rng(0)
    bundle = new_model_bundle(OBS_DIM, 4, ModelConfig(d_s=16, hidden=16), rng_model)
    for p in bundle.all_params():
        p += rng_model.normal(0, 0.2, p.shape)
    from emts.world_model import predict, represent
    obs = rng_model.normal(0, 0.3, OBS_DIM)
    s0 = represent(bundle, obs)
    policy, _ = predict(bundle, s0)

    cfg = SearchConfig(k_samples=12, alpha=0.0, gamma_init=0.0)

    # pure Sampled-MuZero reference: K policy draws, density-renormalized
    # priors, the same upper-confidence scores
    rng_ref = np.random.default_rng(77)
    ref_atoms = np.array([gmm_sample(policy, rng_ref) for _ in range(12)])
    log_d = gmm_log_prob_many(policy, ref_atoms)
    shifted = np.exp(log_d - log_d.max())
    ref_prior = shifted / shifted.sum()

    rng_emts = np.random.default_rng(77)
    atoms, provenance = sample_root_atoms(obs, policy, [], cfg, rng_emts)
    assert np.array_equal(atoms, ref_atoms), "root sampling differs bitwise"
    assert np.all(provenance == -1)

    prior = adjusted_prior(gmm_log_prob_many(policy, atoms), np.zeros((0, 12)),
                           True, 0.0)
    assert np.array_equal(prior, ref_prior), "root priors differ bitwise"

    # selection scores on synthetic visit statistics
    node = Node(s0, atoms, prior)
    stat_rng = np.random.default_rng(5)
    node.edge_n = stat_rng.integers(0, 9, size=12)
    node.edge_w = node.edge_n * stat_rng.uniform(-1.0, 2.0, size=12)
    minmax = MinMaxStats()
    q_vals = node.edge_w[node.edge_n > 0] / node.edge_n[node.edge_n > 0]
    for q in q_vals:
        minmax.update(q)
    scores = child_scores(node, cfg, minmax)

    total = int(node.edge_n.sum())
    q = np.where(node.edge_n > 0, node.edge_w / np.maximum(node.edge_n, 1), 0.0)
    q_norm = np.where(node.edge_n > 0,
                      (q - minmax.lo) / (minmax.hi - minmax.lo)
                      if minmax.hi > minmax.lo else np.zeros_like(q), 0.0)
    ref_scores = q_norm + prior * (cfg.c1 + math.log((total + cfg.c2 + 1) / cfg.c2)) \
        * (max(math.sqrt(total), 1.0) / (1.0 + node.edge_n))
    assert np.array_equal(scores, ref_scores), "selection scores differ bitwise"
    assert time.time() - start < 1.0
    report(1, "alpha=0, gamma=0 root sampling, priors and scores are "
              "bit-identical to the pure sampled path")


# ---------------------------------------------------------------------------
# criterion 2: posterior suite


def test_criterion_2_posterior_suite():
    start = time.time()
    rng = np.random.default_rng(0)
    pcfg = PosteriorConfig()
    for _ in range(50):
        k = int(rng.integers(2, 12))
        result = make_search_result(rng.integers(0, 60, size=k),
                                    rng.uniform(0.01, 4.0, size=(3, k)))
        pi = improved_policy(result, pcfg)
        assert abs(pi.sum() - 1.0) <= 1e-9

    result = make_search_result([14, 3, 0, 7], rng.uniform(0.01, 2.0, size=(2, 4)))
    pi_inf = improved_policy(result, PosteriorConfig(lam=1e9))
    assert np.max(np.abs(pi_inf - visit_weight(result.visits))) < 1e-6

    dens = rng.uniform(0.1, 3.0, size=(3, 5))
    a = improved_policy(make_search_result([9, 0, 4, 2, 1], dens), pcfg)
    b = improved_policy(make_search_result([9, 0, 4, 2, 1], dens * 1234.5), pcfg)
    assert np.max(np.abs(a - b)) < 1e-12

    visits = np.array([3, 11, 0, 5])
    assert np.array_equal(visit_weight(visits), visit_weight(visits + 23))
    assert time.time() - start < 1.0
    report(2, "posterior sums to 1 (1e-9), lambda=1e9 recovers visit weights "
              "(1e-6), scaling invariance (1e-12), shift invariance (exact)")


# ---------------------------------------------------------------------------
# criterion 3: bandit oracle


class _BanditStub:
    """Ground-truth model: one pull from the root, absorbing afterwards."""

    class _H:
        def __init__(self, outer):
            self.widths = [OBS_DIM, outer.d_s]

        def forward(self, x):
            return np.zeros(4)

    class _G:
        def __init__(self, outer):
            self.outer = outer
            self.widths = [outer.d_s + outer.d_z, 1 + outer.d_s]

        def forward(self, x):
            out = np.full(1 + self.outer.d_s, -6.0)
            out[0] = (self.outer.arm_value(x[self.outer.d_s:])
                      if x[0] > -0.9 else 0.0)
            return out

    class _F:
        def __init__(self, outer):
            self.outer = outer
            m, d = outer.n_components, outer.d_z
            self.widths = [outer.d_s, m * (1 + 2 * d) + 1]

        def forward(self, s):
            m, d = self.outer.n_components, self.outer.d_z
            raw = np.zeros(m * (1 + 2 * d) + 1)
            raw[m:m + m * d] = self.outer.centers.reshape(-1)
            raw[m + m * d:m + 2 * m * d] = math.log(0.5)
            return raw

    def __init__(self, centers, values):
        self.centers = np.asarray(centers, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.d_s, self.d_z = 4, self.centers.shape[1]
        self.n_components = len(values)
        self.h, self.g, self.f = self._H(self), self._G(self), self._F(self)

    def arm_value(self, z):
        d = ((self.centers - np.asarray(z)[None, :]) ** 2).sum(axis=1)
        return float(self.values[int(np.argmin(d))])


def test_criterion_3_bandit_oracle():
    start = time.time()
    rng = np.random.default_rng(42)
    hits = 0
    for _ in range(20):
        n_arms = int(rng.integers(3, 11))
        bundle = _BanditStub(rng.normal(0, 3, size=(n_arms, 2)),
                             rng.uniform(0, 1, n_arms))
        cfg = SearchConfig(k_samples=max(6, n_arms), num_simulations=1000)
        result = run_search(np.zeros(OBS_DIM), bundle, [], cfg,
                            np.random.default_rng(int(rng.integers(1 << 30))), 0.0)
        atom_values = np.array([bundle.arm_value(z) for z in result.atoms])
        hits += atom_values[int(np.argmax(result.visits))] == atom_values.max()
    elapsed = time.time() - start
    assert hits >= 19, f"only {hits}/20 bandits solved"
    assert elapsed < 10.0
    report(3, f"ground-truth bandits solved {hits}/20 at 1000 simulations "
              f"({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# criterion 4: gradient checks


def _fd_check(value_fn, params, grads, rng, n_coords, h=1e-5, tol=1e-4):
    worst = 0.0
    for p, g in zip(params, grads):
        for _ in range(n_coords):
            idx = tuple(rng.integers(0, d) for d in p.shape)
            orig = p[idx]
            p[idx] = orig + h
            plus = value_fn()
            p[idx] = orig - h
            minus = value_fn()
            p[idx] = orig
            fd = (plus - minus) / (2 * h)
            an = g[idx]
            if max(abs(fd), abs(an)) < 1e-9:
                continue
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    assert worst < tol, f"gradient mismatch {worst:.2e}"
    return worst


def test_criterion_4_gradient_checks():
    start = time.time()
    rng = np.random.default_rng(1)
    instances = 0
    worst = 0.0

    # layer backward passes: 60 random network instances
    for _ in range(60):
        widths = [int(rng.integers(2, 8)) for _ in range(int(rng.integers(2, 5)))]
        net = Mlp(widths, rng, zero_final=False)
        x = rng.normal(size=widths[0])
        readout = rng.normal(size=widths[-1])
        _, cache = net.forward_cached(x)
        grads, _ = net.backward(cache, readout[None, :])
        worst = max(worst, _fd_check(lambda: float(net.forward(x) @ readout),
                                     net.params, grads, rng, 2))
        instances += 1

    # mixture log-density head: 20 instances against finite differences
    from emts.trainer import _gmm_head_forward, _gmm_head_backward
    for _ in range(20):
        m, d, k = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 6))
        raw = [rng.normal(0, 0.8, size=(1, m * (1 + 2 * d)))]
        atoms = rng.normal(size=(1, k, d))
        weights = rng.dirichlet(np.ones(k))

        def gmm_scalar():
            log_p, _ = _gmm_head_forward(raw[0], atoms, m, d)
            return float(log_p[0] @ weights)

        log_p, cache = _gmm_head_forward(raw[0], atoms, m, d)
        d_raw = _gmm_head_backward(cache, weights[None, :])
        worst = max(worst, _fd_check(gmm_scalar, raw, [d_raw], rng, 4))
        instances += 1

    # full three-part loss on a tiny bundle: 20 instances
    for _ in range(20):
        bundle = new_model_bundle(6, 2, ModelConfig(d_s=4, hidden=5, n_components=2), rng)
        for p in bundle.all_params():
            p += rng.normal(0, 0.25, p.shape)
        b, j, k = 2, 2, 3
        tensors = {
            "obs": rng.normal(size=(b, 6)),
            "z_exec": rng.normal(size=(b, j, 2)),
            "u": rng.normal(size=(b, j)),
            "v_tgt": rng.normal(size=(b, j + 1)),
            "atoms": rng.normal(size=(b, j + 1, k, 2)),
            "pi": rng.dirichlet(np.ones(k), size=(b, j + 1)),
            "p_mask": np.ones((b, j + 1)),
        }
        _, grads = loss_and_grads(bundle, tensors)
        worst = max(worst, _fd_check(
            lambda: loss_and_grads(bundle, tensors)[0]["total"],
            bundle.all_params(), grads, rng, 1))
        instances += 1

    elapsed = time.time() - start
    assert instances == 100
    assert elapsed < 30.0
    report(4, f"100 gradient instances vs central differences, worst relative "
              f"error {worst:.1e} ({elapsed:.1f}s)")


# ---------------------------------------------------------------------------
# heavyweight shared artifacts


@pytest.fixture(scope="module")
def pipeline():
    lib = build_library(LibraryConfig())
    feats = library_features(lib)
    rng = np.random.default_rng(0)
    order = rng.permutation(len(feats))
    n_holdout = len(feats) // 10
    holdout, train_feats = feats[order[:n_holdout]], feats[order[n_holdout:]]

    t0 = time.time()
    skill_model, history = train_skill_space(train_feats, SkillTrainConfig())
    skills_seconds = time.time() - t0
    holdout_mse = reconstruction_mse(skill_model, holdout)

    env_cfg = default_scenario_config("corridor")
    encoders = []
    for i, style in enumerate(STYLES):
        dataset = generate_expert_dataset(env_cfg, style, 30, i, seed=i)
        segments = extract_segments(dataset, skill_model.horizon, 5)
        encoder, _ = train_intent_encoder(segments, skill_model,
                                          IntentTrainConfig(seed=i),
                                          SPEED_OF_OBS, expert_id=i)
        encoders.append(encoder)
    return {"library": lib, "skill_model": skill_model, "encoders": encoders,
            "holdout_mse": holdout_mse, "skills_seconds": skills_seconds,
            "env_cfg": env_cfg}


def _training_run(pipeline_art, seed, expert: bool, stop_at: float):
    scfg = SearchConfig() if expert else SearchConfig(alpha=0.0, gamma_init=0.0)
    tcfg = TrainConfig(seed=seed)
    bundle = new_model_bundle(OBS_DIM, pipeline_art["skill_model"].d_z,
                              ModelConfig(), np.random.default_rng(seed))
    rows = train_loop(bundle, pipeline_art["skill_model"],
                      pipeline_art["encoders"] if expert else [],
                      pipeline_art["env_cfg"], scfg, PosteriorConfig(), tcfg,
                      stop_on_success=stop_at)
    return rows


def _first_step_reaching(rows, level, budget=50001):
    for row in rows:
        if row["success_rate"] >= level:
            return row["step"]
    return budget


@pytest.fixture(scope="module")
def expert_runs(pipeline):
    runs = []
    for seed in (1, 2, 3, 4, 5):
        t0 = time.time()
        rows = _training_run(pipeline, seed, expert=True, stop_at=0.8)
        runs.append({"seed": seed, "rows": rows, "seconds": time.time() - t0})
    return runs


# ---------------------------------------------------------------------------
# criterion 5: skill-space quality


def test_criterion_5_skill_space_quality(pipeline):
    assert pipeline["holdout_mse"] < 0.02
    assert pipeline["skills_seconds"] < 600

    model = pipeline["skill_model"]
    kin = KinematicsConfig()
    rng = np.random.default_rng(3)
    for _ in range(10):
        z = rng.normal(0, 1.5, model.d_z)
        initial = VehicleState(0, 0, 0, rng.uniform(0, 15))
        traj = decode(model, z, initial, kin)
        assert list(traj.states) == rollout(initial, traj.actions, kin)

    probe = gen_constant_control([(0.5, 0.0), (0.5, 0.05), (0.5, -1.0)], [8.0],
                                 LibraryConfig())
    z = [encode(model, e.trajectory).mean for e in probe]
    near = np.linalg.norm(z[0] - z[1])
    far = np.linalg.norm(z[0] - z[2])
    assert near < far
    report(5, f"held-out action MSE {pipeline['holdout_mse']:.4f} < 0.02 in "
              f"{pipeline['skills_seconds']:.0f}s; decoder/kinematics exact; "
              f"latent ordering {near:.2f} < {far:.2f}")


# ---------------------------------------------------------------------------
# criterion 6: expert intent recovery


def test_criterion_6_intent_recovery(pipeline):
    start = time.time()
    model = pipeline["skill_model"]
    decoder_before = [p.copy() for p in model.decoder.params]
    rng = np.random.default_rng(11)
    worst = 0.0
    for expert_id in range(3):
        segments = []
        for _ in range(48):
            z = rng.normal(0, 1, model.d_z)
            v0 = rng.uniform(0, 15)
            obs = np.zeros(OBS_DIM)
            obs[0] = v0 / 20.0
            obs[4:4 + model.d_z] = z / 3.0
            segments.append(SegmentPair(obs, decode_actions(model, z, v0)))
        cfg = IntentTrainConfig(steps=6000, lr=3e-3, seed=expert_id)
        encoder, _ = train_intent_encoder(segments, model, cfg, SPEED_OF_OBS,
                                          expert_id=expert_id)
        mse = decoded_action_mse(encoder, model, segments, SPEED_OF_OBS)
        worst = max(worst, mse)
        assert mse < 1e-3, f"expert {expert_id}: decoded MSE {mse:.2e}"
    for before, after in zip(decoder_before, model.decoder.params):
        assert before.tobytes() == after.tobytes()
    elapsed = time.time() - start
    assert elapsed < 300
    report(6, f"decoder-synthesized recovery MSE (worst of 3) {worst:.1e} < 1e-3; "
              f"decoder byte-identical ({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 7: end-to-end scaled training


def test_criterion_7_end_to_end_training(expert_runs):
    steps_to_80 = [_first_step_reaching(r["rows"], 0.8) for r in expert_runs]
    median = float(np.median(steps_to_80))
    detail = ", ".join(f"seed {r['seed']}: {s if s <= 50000 else 'not reached'}"
                       for r, s in zip(expert_runs, steps_to_80))
    assert median <= 50000, f"median steps to 80%: {median} ({detail})"
    total = sum(r["seconds"] for r in expert_runs)
    report(7, f"median env steps to 80% success = {median:.0f} <= 50000 "
              f"({detail}; {total:.0f}s total)")


# ---------------------------------------------------------------------------
# criterion 8: expert-guidance effect


def test_criterion_8_expert_guidance_effect(pipeline, expert_runs):
    expert_to_50 = [_first_step_reaching(r["rows"], 0.5) for r in expert_runs]
    baseline_to_50 = []
    for seed in (1, 2, 3, 4, 5):
        rows = _training_run(pipeline, seed, expert=False, stop_at=0.5)
        baseline_to_50.append(_first_step_reaching(rows, 0.5))
        print(f"  baseline seed {seed} curve: "
              f"{[(r['step'], r['success_rate']) for r in rows]}")
    expert_median = float(np.median(expert_to_50))
    baseline_median = float(np.median(baseline_to_50))
    assert expert_median < baseline_median, (
        f"expert median {expert_median} vs baseline {baseline_median}")
    report(8, f"median steps to 50%: experts {expert_median:.0f} < pure "
              f"sampled baseline {baseline_median:.0f} "
              f"(experts {expert_to_50}, baseline {baseline_to_50})")


# ---------------------------------------------------------------------------
# criterion 9: determinism


def test_criterion_9_determinism(pipeline, tmp_path):
    def run(out_name):
        scfg = SearchConfig()
        tcfg = TrainConfig(seed=123, total_env_steps=2000, eval_interval=500,
                           eval_episodes=2, workers=1)
        bundle = new_model_bundle(OBS_DIM, pipeline["skill_model"].d_z,
                                  ModelConfig(), np.random.default_rng(123))
        rows = train_loop(bundle, pipeline["skill_model"], pipeline["encoders"],
                          pipeline["env_cfg"], scfg, PosteriorConfig(), tcfg)
        path = tmp_path / out_name
        write_metrics_csv(path, rows)
        return path

    a = run("a.csv")
    b = run("b.csv")
    assert a.read_bytes() == b.read_bytes()
    report(9, f"two single-worker runs at seed 123 produced byte-identical "
              f"metrics CSVs ({a.stat().st_size} bytes)")
