"""Self-play data generation, the unrolled three-part loss, and the
Bayesian improved-policy targets.

Replay stores whole episodes so n-step value targets and unroll windows
never cross episode boundaries. The improved policy re-weights softmaxed
visit counts by the fused expert prior evaluated at the sampled atoms.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .envs import DrivingEnv, ScenarioConfig
from .nets import Adam, logsumexp, mlp_from_params, softmax
from .search import (SearchConfig, SearchResult, act, execute_skill,
                     run_search)
from .skills import SkillSpaceModel
from .world_model import (ModelBundle, dynamics_backward, dynamics_cached,
                          predict_backward, predict_cached, represent_backward,
                          represent_cached)

_LOG_2PI = math.log(2.0 * math.pi)
METRIC_COLUMNS = ("step", "episodes", "success_rate", "completion_ratio",
                  "mean_return", "loss_r", "loss_v", "loss_p", "gamma", "lambda")


@dataclass
class PosteriorConfig:
    lam: float = 1.0
    expert_weights: list = field(default_factory=list)  # empty -> uniform
    visit_norm: str = "softmax"  # or "linear"

    def validate(self):
        if self.lam <= 0:
            raise ValueError("posterior temperature lambda must be > 0")
        if self.visit_norm not in ("softmax", "linear"):
            raise ValueError("visit_norm must be 'softmax' or 'linear'")
        if self.expert_weights:
            w = np.asarray(self.expert_weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("expert weights must be nonnegative and sum to 1")

    def weights_for(self, n_experts: int) -> np.ndarray:
        if self.expert_weights:
            if len(self.expert_weights) != n_experts:
                raise ValueError("expert weight count does not match the encoder count")
            return np.asarray(self.expert_weights, dtype=float)
        if n_experts == 0:
            return np.zeros(0)
        return np.full(n_experts, 1.0 / n_experts)


@dataclass
class TrainConfig:
    unroll: int = 3
    n_step: int = 5
    batch_size: int = 64
    replay_capacity: int = 10000
    total_env_steps: int = 50000
    grad_steps_per_episode: int = 20
    eval_interval: int = 2500
    eval_episodes: int = 10
    checkpoint_interval: int = 25000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    value_scale: float = 0.05  # model-side reward units per env reward unit
    workers: int = 1
    seed: int = 0

    def validate(self):
        if self.unroll < 1:
            raise ValueError("unroll depth must be >= 1")
        if self.replay_capacity < self.batch_size:
            raise ValueError("replay capacity must be >= batch size")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.n_step < 0:
            raise ValueError("n_step must be >= 0")


# ---------------------------------------------------------------------------
# posterior targets


def visit_weight(visits, mode: str = "softmax") -> np.ndarray:
    """Normalized visit counts: exp-softmax of the raw counts (default) or
    plain linear normalization."""
    visits = np.asarray(visits, dtype=float)
    if mode == "softmax":
        return softmax(visits)
    total = visits.sum()
    if total <= 0:
        return np.full(len(visits), 1.0 / len(visits))
    return visits / total


def fused_expert_prior(result: SearchResult, m=None) -> np.ndarray:
    """Per-atom expert prior sum_n m_n * pi_n(z_k | o), unnormalized.

    Without experts every atom scores 1 so downstream posteriors reduce to
    the visit weights alone.
    """
    dens = np.asarray(result.expert_density, dtype=float)
    if dens.size == 0:
        return np.ones(len(result.atoms))
    if not np.all(np.isfinite(dens)):
        raise ValueError("non-finite expert density in search result")
    if m is None:
        m = np.full(dens.shape[0], 1.0 / dens.shape[0])
    return np.asarray(m, dtype=float) @ dens


def improved_policy(result: SearchResult, pcfg: PosteriorConfig) -> np.ndarray:
    """Posterior over the K sampled atoms: prior^(1/lambda) times visit
    weight, renormalized (computed in log space)."""
    w = visit_weight(result.visits, pcfg.visit_norm)
    prior = np.maximum(fused_expert_prior(result, pcfg.weights_for(result.expert_density.shape[0])),
                       1e-12)
    with np.errstate(divide="ignore"):
        log_pi = np.log(prior) / pcfg.lam + np.log(w)
    return softmax(log_pi)


def value_target(episode, t: int, n: int, discount: float, reward_scale: float = 1.0) -> float:
    """n-step bootstrapped target over skill steps; zero past terminal.

    Rewards enter in model units (reward_scale times the environment
    reward); stored root values are already model-side.
    """
    target = 0.0
    for i in range(n):
        if t + i >= len(episode):
            return target
        target += (discount ** i) * episode[t + i].u * reward_scale
    if t + n < len(episode):
        target += (discount ** n) * episode[t + n].result.root_value
    return target


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayEntry:
    obs: np.ndarray
    z_exec: np.ndarray
    result: SearchResult
    u: float
    done: bool
    pi_target: np.ndarray


class ReplayBuffer:
    """Episode-keyed buffer with uniform sampling over entries."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.episodes: list[list[ReplayEntry]] = []
        self._index: list[tuple[int, int]] = []

    def __len__(self):
        return len(self._index)

    def add_episode(self, entries):
        if not entries:
            return
        self.episodes.append(list(entries))
        total = sum(len(e) for e in self.episodes)
        while total > self.capacity and len(self.episodes) > 1:
            total -= len(self.episodes.pop(0))
        self._index = [(i, t) for i, ep in enumerate(self.episodes) for t in range(len(ep))]

    def sample(self, batch_size: int, rng):
        picks = rng.integers(0, len(self._index), size=batch_size)
        return [(self.episodes[self._index[p][0]], self._index[p][1]) for p in picks]


# ---------------------------------------------------------------------------
# loss


def prepare_batch(samples, tcfg: TrainConfig, discount: float, d_z: int, k: int):
    """Pack sampled (episode, t) pairs into dense unroll tensors.

    Steps past the terminal entry are absorbing: zero reward and value
    targets, zero executed skill, and a masked-out policy loss.
    """
    b = len(samples)
    j_max = tcfg.unroll
    obs = np.stack([ep[t].obs for ep, t in samples])
    z_exec = np.zeros((b, j_max, d_z))
    u = np.zeros((b, j_max))
    v_tgt = np.zeros((b, j_max + 1))
    atoms = np.zeros((b, j_max + 1, k, d_z))
    pi = np.full((b, j_max + 1, k), 1.0 / k)
    p_mask = np.zeros((b, j_max + 1))
    for bi, (ep, t) in enumerate(samples):
        for j in range(j_max + 1):
            if t + j < len(ep):
                entry = ep[t + j]
                v_tgt[bi, j] = value_target(ep, t + j, tcfg.n_step, discount,
                                            tcfg.value_scale)
                atoms[bi, j] = entry.result.atoms
                pi[bi, j] = entry.pi_target
                p_mask[bi, j] = 1.0
            else:
                atoms[bi, j] = ep[-1].result.atoms
            if j < j_max and t + j < len(ep):
                u[bi, j] = ep[t + j].u * tcfg.value_scale
                z_exec[bi, j] = ep[t + j].z_exec
    return {"obs": obs, "z_exec": z_exec, "u": u, "v_tgt": v_tgt,
            "atoms": atoms, "pi": pi, "p_mask": p_mask}


def _gmm_head_forward(raw, atoms, n_components, d_z):
    """Batched mixture log density of each atom plus backward intermediates;
    uses the same std range as the prediction head."""
    from .world_model import POLICY_LOG_STD_HI, POLICY_LOG_STD_LO
    b = raw.shape[0]
    m = n_components
    logits = raw[:, :m]
    means = raw[:, m:m + m * d_z].reshape(b, m, d_z)
    ls_raw = raw[:, m + m * d_z:m + 2 * m * d_z].reshape(b, m, d_z)
    clip_mask = (ls_raw > POLICY_LOG_STD_LO) & (ls_raw < POLICY_LOG_STD_HI)
    log_std = np.clip(ls_raw, POLICY_LOG_STD_LO, POLICY_LOG_STD_HI)
    std = np.exp(log_std)

    diff = (atoms[:, :, None, :] - means[:, None, :, :]) / std[:, None, :, :]
    log_comp = (-0.5 * (diff ** 2).sum(-1) - log_std.sum(-1)[:, None, :]
                - 0.5 * d_z * _LOG_2PI)
    log_w = logits - logsumexp(logits, axis=1)[:, None]
    joint = log_comp + log_w[:, None, :]
    log_p = logsumexp(joint, axis=2)
    resp = softmax(joint, axis=2)
    return log_p, {"resp": resp, "diff": diff, "std": std, "w": np.exp(log_w),
                   "clip_mask": clip_mask, "m": m, "d_z": d_z}


def _gmm_head_backward(cache, d_log_p):
    """Gradients w.r.t. (logits, means, log_stds) given dL/d log_p (B, K)."""
    resp, diff, std = cache["resp"], cache["diff"], cache["std"]
    d_logits = np.einsum("bk,bkm->bm", d_log_p, resp) - d_log_p.sum(1)[:, None] * cache["w"]
    d_means = np.einsum("bk,bkm,bkmd->bmd", d_log_p, resp, diff) / std[:, None, :, :].squeeze(1)
    d_log_std = np.einsum("bk,bkm,bkmd->bmd", d_log_p, resp, diff ** 2 - 1.0)
    d_log_std = d_log_std * cache["clip_mask"]
    b = d_log_p.shape[0]
    return np.hstack([d_logits, d_means.reshape(b, -1), d_log_std.reshape(b, -1)])


def loss_and_grads(bundle: ModelBundle, tensors):
    """Unrolled reward/value/policy loss with exact hand-composed gradients.

    Returns (components dict, grads list aligned with bundle.all_params()).
    The L2 term lives in the optimizer's decoupled weight decay.
    """
    b = tensors["obs"].shape[0]
    j_max = tensors["z_exec"].shape[1]
    m, d_z = bundle.n_components, bundle.d_z

    s, h_cache = represent_cached(bundle, tensors["obs"])
    f_steps = []
    g_steps = []
    l_r = l_v = l_p = 0.0
    for j in range(j_max + 1):
        raw_f, f_cache = predict_cached(bundle, s)
        value = raw_f[:, -1]
        v_err = value - tensors["v_tgt"][:, j]
        l_v += float((v_err ** 2).mean())

        log_p, gmm_cache = _gmm_head_forward(raw_f[:, :-1], tensors["atoms"][:, j], m, d_z)
        log_norm = logsumexp(log_p, axis=1)
        ce = -(tensors["pi"][:, j] * (log_p - log_norm[:, None])).sum(1)
        l_p += float((ce * tensors["p_mask"][:, j]).mean())
        f_steps.append((f_cache, gmm_cache, log_p, v_err))

        if j < j_max:
            r_hat, s_next, g_cache = dynamics_cached(bundle, s, tensors["z_exec"][:, j])
            r_err = r_hat - tensors["u"][:, j]
            l_r += float((r_err ** 2).mean())
            g_steps.append((g_cache, r_err))
            s = s_next

    grads_h = [np.zeros_like(p) for p in bundle.h.params]
    grads_g = [np.zeros_like(p) for p in bundle.g.params]
    grads_f = [np.zeros_like(p) for p in bundle.f.params]
    d_s_next = np.zeros((b, bundle.d_s))
    for j in range(j_max, -1, -1):
        f_cache, gmm_cache, log_p, v_err = f_steps[j]
        d_log_p = (softmax(log_p, axis=1) - tensors["pi"][:, j]) \
            * tensors["p_mask"][:, j][:, None] / b
        d_policy_raw = _gmm_head_backward(gmm_cache, d_log_p)
        d_value = (2.0 * v_err / b)[:, None]
        step_f, d_s = predict_backward(bundle, f_cache, np.hstack([d_policy_raw, d_value]))
        for acc, g_ in zip(grads_f, step_f):
            acc += g_
        d_s = d_s + d_s_next
        if j > 0:
            g_cache, r_err = g_steps[j - 1]
            step_g, d_s_prev, _dz = dynamics_backward(bundle, g_cache, 2.0 * r_err / b, d_s)
            for acc, g_ in zip(grads_g, step_g):
                acc += g_
            d_s_next = d_s_prev
        else:
            for acc, g_ in zip(grads_h, represent_backward(bundle, h_cache, d_s)):
                acc += g_

    components = {"loss_r": l_r, "loss_v": l_v, "loss_p": l_p,
                  "total": l_r + l_v + l_p}
    return components, grads_h + grads_g + grads_f


# ---------------------------------------------------------------------------
# self-play and the training loop


def self_play_episode(env: DrivingEnv, bundle, skill_model, encoders,
                      search_cfg: SearchConfig, pcfg: PosteriorConfig, rng,
                      gamma: float, temperature: float, reset_seed=None):
    """One episode of search -> act -> execute-skill, recorded for replay."""
    obs = env.reset(reset_seed)
    entries = []
    total_return = 0.0
    env_steps = 0
    while not env.done:
        result = run_search(obs, bundle, encoders, search_cfg, rng, gamma)
        k = act(result, temperature, rng)
        z = result.atoms[k]
        u, steps, done, log = execute_skill(env, skill_model, z)
        entries.append(ReplayEntry(obs, z.copy(), result, u, done,
                                   improved_policy(result, pcfg)))
        total_return += u
        env_steps += steps
        obs = log[-1].obs
    metrics = {"success": env.cause == "success",
               "completion": env.completion_ratio(),
               "return": total_return, "env_steps": env_steps,
               "cause": env.cause}
    return entries, metrics


def evaluate(bundle, skill_model, encoders, env_cfg: ScenarioConfig,
             search_cfg: SearchConfig, gamma: float, n_episodes: int, seed: int,
             collect_traces: bool = False):
    """Greedy (argmax-visit) evaluation episodes; deterministic per seed."""
    env = DrivingEnv(env_cfg)
    rng = np.random.default_rng(seed)
    successes = 0
    completions = []
    returns = []
    traces = []
    for i in range(n_episodes):
        obs = env.reset(seed * 9176 + i)
        ep_return = 0.0
        steps = []
        while not env.done:
            result = run_search(obs, bundle, encoders, search_cfg, rng, gamma)
            k = act(result, 0.0, rng)
            u, _, _, log = execute_skill(env, skill_model, result.atoms[k])
            ep_return += u
            obs = log[-1].obs
            if collect_traces:
                steps.extend(log)
        successes += env.cause == "success"
        completions.append(env.completion_ratio())
        returns.append(ep_return)
        if collect_traces:
            traces.append({"cause": env.cause, "completion": env.completion_ratio(),
                           "return": ep_return, "steps": steps})
    out = {"success_rate": successes / n_episodes,
           "completion_ratio": float(np.mean(completions)),
           "mean_return": float(np.mean(returns))}
    if collect_traces:
        out["traces"] = traces
    return out


def _format(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_format(row[c]) for c in METRIC_COLUMNS])


def save_full_checkpoint(path, bundle, skill_model, encoders, meta=None):
    """Everything evaluation needs in one file: planning nets, the skill
    codec, and the intent encoders."""
    nets = {"h": bundle.h.params, "g": bundle.g.params, "f": bundle.f.params,
            "skill_encoder": skill_model.encoder.params,
            "skill_decoder": skill_model.decoder.params}
    for e in encoders:
        nets[f"intent_{e.expert_id}"] = e.net.params
    full_meta = {"kind": "emts_full", "d_s": bundle.d_s, "d_z": bundle.d_z,
                 "n_components": bundle.n_components,
                 "horizon": skill_model.horizon,
                 "expert_ids": [e.expert_id for e in encoders]}
    if meta:
        full_meta.update(meta)
    checkpoint.save_checkpoint(path, nets, full_meta)


def load_full_checkpoint(path):
    from .intents import IntentEncoder
    nets, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "emts_full":
        raise ValueError(f"{path}: not a full training checkpoint")
    bundle = ModelBundle(mlp_from_params(nets["h"]), mlp_from_params(nets["g"]),
                         mlp_from_params(nets["f"]), int(meta["d_s"]),
                         int(meta["d_z"]), int(meta["n_components"]))
    skill_model = SkillSpaceModel(mlp_from_params(nets["skill_encoder"]),
                                  mlp_from_params(nets["skill_decoder"]),
                                  int(meta["d_z"]), int(meta["horizon"]))
    encoders = [IntentEncoder(mlp_from_params(nets[f"intent_{i}"]), int(i), int(meta["d_z"]))
                for i in meta["expert_ids"]]
    return bundle, skill_model, encoders, meta


def train_loop(bundle, skill_model, encoders, env_cfg: ScenarioConfig,
               search_cfg: SearchConfig, pcfg: PosteriorConfig, tcfg: TrainConfig,
               out_dir=None, stop_on_success=None, log_fn=None):
    """Alternate self-play episodes with optimizer steps; periodic greedy
    evaluations become the metrics rows (and the CSV, when out_dir is set).

    Single-worker runs are bit-deterministic in tcfg.seed; extra workers
    round-robin their own environments against the shared replay buffer.
    """
    tcfg.validate()
    pcfg.validate()
    search_cfg.validate()
    rng = np.random.default_rng(tcfg.seed)
    envs = [DrivingEnv(env_cfg) for _ in range(tcfg.workers)]
    opt = Adam(bundle.all_params(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    replay = ReplayBuffer(tcfg.replay_capacity)

    rows = []
    env_steps = 0
    episodes = 0
    next_eval = tcfg.eval_interval
    next_ckpt = tcfg.checkpoint_interval
    recent = {"loss_r": 0.0, "loss_v": 0.0, "loss_p": 0.0, "count": 0}
    stopped = False

    def checkpoint_now():
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_full_checkpoint(os.path.join(out_dir, "checkpoint.emts"),
                                 bundle, skill_model, encoders,
                                 meta={"env_steps": env_steps, "episodes": episodes})

    while env_steps < tcfg.total_env_steps and not stopped:
        gamma = search_cfg.gamma_at(env_steps)
        env = envs[episodes % tcfg.workers]
        reset_seed = tcfg.seed * 1000003 + episodes
        entries, ep_metrics = self_play_episode(
            env, bundle, skill_model, encoders, search_cfg, pcfg, rng, gamma,
            search_cfg.temperature, reset_seed)
        replay.add_episode(entries)
        env_steps += ep_metrics["env_steps"]
        episodes += 1

        if len(replay) >= tcfg.batch_size:
            for _ in range(tcfg.grad_steps_per_episode):
                samples = replay.sample(tcfg.batch_size, rng)
                tensors = prepare_batch(samples, tcfg, search_cfg.discount,
                                        bundle.d_z, search_cfg.k_samples)
                components, grads = loss_and_grads(bundle, tensors)
                if not math.isfinite(components["total"]):
                    raise RuntimeError(f"training loss diverged at env step {env_steps}: "
                                       f"{components}")
                opt.step(bundle.all_params(), grads)
                for key in ("loss_r", "loss_v", "loss_p"):
                    recent[key] += components[key]
                recent["count"] += 1

        while env_steps >= next_eval:
            n = max(recent["count"], 1)
            ev = evaluate(bundle, skill_model, encoders, env_cfg, search_cfg,
                          gamma, tcfg.eval_episodes, tcfg.seed * 7919 + next_eval)
            row = {"step": env_steps, "episodes": episodes,
                   "success_rate": ev["success_rate"],
                   "completion_ratio": ev["completion_ratio"],
                   "mean_return": ev["mean_return"],
                   "loss_r": recent["loss_r"] / n, "loss_v": recent["loss_v"] / n,
                   "loss_p": recent["loss_p"] / n, "gamma": gamma, "lambda": pcfg.lam}
            rows.append(row)
            recent = {"loss_r": 0.0, "loss_v": 0.0, "loss_p": 0.0, "count": 0}
            if log_fn:
                log_fn(f"step {env_steps}: success={ev['success_rate']:.2f} "
                       f"completion={ev['completion_ratio']:.2f} gamma={gamma:.3f}")
            next_eval += tcfg.eval_interval
            if stop_on_success is not None and ev["success_rate"] >= stop_on_success:
                stopped = True
                break
        while env_steps >= next_ckpt:
            checkpoint_now()
            next_ckpt += tcfg.checkpoint_interval

    checkpoint_now()
    if out_dir:
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return rows
