"""Expert intention encoding.

Scripted feedback controllers generate demonstration data in three driving
styles; per-expert encoders map an observation to a distribution in the
frozen skill latent space so expert intentions can be sampled and scored
during search.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint
from .envs import (IDX_HEAD, IDX_LAT, IDX_NEIGHBORS, IDX_SPEED, N_NEIGHBORS,
                   DrivingEnv)
from .kinematics import Action, clamp
from .nets import (Adam, Mlp, diag_gaussian_log_prob_many, mlp_from_params)
from .skills import SkillSpaceModel, encode_features

STYLES = ("cautious", "assertive", "lanekeeper")

INTENT_LOG_STD_LO = math.log(1e-6)
INTENT_LOG_STD_HI = 2.0


# ---------------------------------------------------------------------------
# scripted experts


def _neighbor_rows(obs):
    rows = []
    for i in range(N_NEIGHBORS):
        base = IDX_NEIGHBORS + 4 * i
        fwd, left, dv, same = obs[base:base + 4]
        if fwd == 0.0 and left == 0.0 and dv == 0.0 and same == 0.0:
            continue
        rows.append((fwd * 50.0, left * 10.0, dv * 20.0, same))
    return rows


def _leader(rows):
    """Nearest same-lane vehicle ahead: (gap, relative speed) or None."""
    best = None
    for fwd, _left, dv, same in rows:
        if same >= 0.5 and fwd > 0.5:
            if best is None or fwd < best[0]:
                best = (fwd, dv)
    return best


def _side_clear(rows, direction, fore, aft):
    """No vehicle occupying the adjacent lane window on that side."""
    for fwd, left, _dv, _same in rows:
        if abs(left - direction * 3.5) < 1.9 and -aft < fwd < fore:
            return False
    return True


def _lane_center(lat_norm):
    """Nearest lane center in half-lane units; lanes live on even integers
    within [-2, 2]."""
    return clamp(2.0 * round(lat_norm / 2.0), -2.0, 2.0)


def _steer_to(lat_target_norm, obs):
    """Aim for a capped crab angle proportional to the lateral error, then
    steer to that heading."""
    d_lat = (lat_target_norm - obs[IDX_LAT]) * 1.75
    theta_des = clamp(0.25 * d_lat, -0.35, 0.35)
    theta = obs[IDX_HEAD] * (math.pi / 2.0)
    return clamp(2.5 * (theta_des - theta), -1.0, 1.0)


def _speed_control(obs, v_target, leader, gap_margin):
    v = obs[IDX_SPEED] * 20.0
    # back off when tracking poorly (curves, mid lane change)
    comfort = clamp(1.0 - 1.2 * abs(obs[IDX_HEAD]) - 0.15 * abs(obs[IDX_LAT]), 0.35, 1.0)
    cmd = 0.4 * (v_target * comfort - v)
    if leader is not None:
        gap, dv = leader
        desired = gap_margin + 1.0 * v
        cmd = min(cmd, 0.35 * (gap - desired) + 0.8 * dv)
    return clamp(cmd / 4.0, -1.0, 1.0)


def _overtake_target(obs, rows, leader, trigger_gap, dv_trigger, fore, aft):
    """Adjacent-lane center when a slow leader warrants a change and the
    neighboring lane exists and is clear; otherwise the current center."""
    lane = _lane_center(obs[IDX_LAT])
    if leader is None or leader[0] >= trigger_gap or leader[1] >= dv_trigger:
        return lane
    for direction in (+1.0, -1.0):
        target = lane + 2.0 * direction
        if abs(target) <= 2.0 and _side_clear(rows, direction, fore, aft):
            return target
    return lane


def scripted_expert_act(style: str, obs) -> Action:
    """Deterministic feedback controller in one of three driving styles."""
    rows = _neighbor_rows(obs)
    leader = _leader(rows)
    if style == "lanekeeper":
        return Action(_speed_control(obs, 9.0, leader, 5.0),
                      _steer_to(_lane_center(obs[IDX_LAT]), obs))
    if style == "cautious":
        target = _overtake_target(obs, rows, leader, 24.0, -1.0, 20.0, 12.0)
        return Action(_speed_control(obs, 11.0, leader, 6.0), _steer_to(target, obs))
    if style == "assertive":
        target = _overtake_target(obs, rows, leader, 30.0, -0.5, 10.0, 5.0)
        return Action(_speed_control(obs, 14.0, leader, 3.0), _steer_to(target, obs))
    raise ValueError(f"unknown expert style {style!r}")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ExpertDataset:
    expert_id: int
    style: str
    episodes: list  # (obs array (L, obs_dim), action array (L, 2)) pairs


@dataclass
class SegmentPair:
    o1: np.ndarray      # observation at the segment start
    tau: np.ndarray     # the next T actions, (T, 2)


def run_expert_episode(env: DrivingEnv, style: str, seed: int, disturb_prob: float = 0.0):
    """One closed-loop episode; with disturb_prob an executed action is
    occasionally replaced by a random one so recovery states get visited."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    obs = env.reset(seed)
    obs_list, act_list = [], []
    while not env.done:
        action = scripted_expert_act(style, obs)
        if disturb_prob > 0.0 and rng.random() < disturb_prob:
            action = Action(rng.uniform(-1, 1), rng.uniform(-0.6, 0.6))
        obs_list.append(obs)
        act_list.append([action.throttle, action.steer])
        out = env.step(action)
        obs = out.obs
    return np.array(obs_list), np.array(act_list), env.cause


def generate_expert_dataset(env_cfg, style: str, n_episodes: int, expert_id: int,
                            seed: int = 0, min_len: int = 10,
                            perturb: bool = True) -> ExpertDataset:
    """Roll the scripted controller; episodes shorter than one skill horizon
    are dropped so every window extraction is valid.

    With perturb=True the start pose and speed are randomized and sporadic
    disturbance actions are injected, so the demonstrations cover the
    correction behavior an open-loop skill executor needs.
    """
    if perturb:
        env_cfg = replace(env_cfg, ego_noise=[2.2, 0.15, 12.0])
    env = DrivingEnv(env_cfg)
    episodes = []
    for i in range(n_episodes):
        obs_arr, act_arr, _ = run_expert_episode(env, style, seed * 100003 + i,
                                                 disturb_prob=0.05 if perturb else 0.0)
        if len(act_arr) >= min_len:
            episodes.append((obs_arr, act_arr))
    if not episodes:
        raise ValueError(f"expert {style!r} produced no usable episodes")
    return ExpertDataset(expert_id, style, episodes)


def save_expert_dataset(dataset: ExpertDataset, path):
    with open(path, "w") as f:
        for obs_arr, act_arr in dataset.episodes:
            row = {"expert_id": dataset.expert_id, "style": dataset.style,
                   "obs": obs_arr.tolist(), "actions": act_arr.tolist()}
            f.write(json.dumps(row) + "\n")


def load_expert_dataset(path) -> ExpertDataset:
    episodes, expert_id, style = [], 0, ""
    with open(path) as f:
        for line in f:
            row = json.loads(line)
            expert_id, style = row["expert_id"], row["style"]
            episodes.append((np.array(row["obs"]), np.array(row["actions"])))
    if not episodes:
        raise ValueError(f"{path}: empty expert dataset")
    return ExpertDataset(expert_id, style, episodes)


def extract_segments(dataset: ExpertDataset, horizon: int, stride: int) -> list[SegmentPair]:
    """Sliding windows (first observation, next T actions) per episode."""
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be >= 1")
    segments = []
    for obs_arr, act_arr in dataset.episodes:
        for start in range(0, len(act_arr) - horizon + 1, stride):
            segments.append(SegmentPair(obs_arr[start], act_arr[start:start + horizon]))
    if not segments:
        raise ValueError("no segments could be extracted from the dataset")
    return segments


# ---------------------------------------------------------------------------
# intent encoders


@dataclass
class IntentEncoder:
    net: Mlp  # obs -> (d_z mean, d_z log-std)
    expert_id: int
    d_z: int


@dataclass
class IntentTrainConfig:
    hidden: int = 64
    steps: int = 4000
    batch_size: int = 64
    lr: float = 2e-3
    lr_decay: bool = True  # linear decay to a 5 percent floor
    nll_weight: float = 0.02
    stride: int = 5
    episodes: int = 30  # demonstration episodes per expert
    styles: list = field(default_factory=lambda: list(STYLES))
    seed: int = 0


def new_intent_encoder(obs_dim, d_z, hidden, expert_id, rng) -> IntentEncoder:
    return IntentEncoder(Mlp([obs_dim, hidden, hidden, 2 * d_z], rng), expert_id, d_z)


def intent_mean_std(encoder: IntentEncoder, obs):
    out = encoder.net.forward(obs)
    mean = out[..., :encoder.d_z]
    log_std = np.clip(out[..., encoder.d_z:], INTENT_LOG_STD_LO, INTENT_LOG_STD_HI)
    return mean, np.exp(log_std)


def intent_log_prob_many(encoder: IntentEncoder, obs, zs) -> np.ndarray:
    mean, std = intent_mean_std(encoder, obs)
    return diag_gaussian_log_prob_many(mean, std, zs)


def intent_density(encoder: IntentEncoder, obs, z) -> float:
    return float(np.exp(intent_log_prob_many(encoder, obs, np.asarray(z)[None, :])[0]))


def intent_sample(encoder: IntentEncoder, obs, rng) -> np.ndarray:
    mean, std = intent_mean_std(encoder, obs)
    return mean + std * rng.standard_normal(encoder.d_z)


def train_intent_encoder(segments, skill_model: SkillSpaceModel, cfg: IntentTrainConfig,
                         speed_of_obs, expert_id: int = 0):
    """Fit one intent encoder through the frozen skill decoder.

    The mean head minimizes the decoded-action MSE against the expert's
    actions (the decoder gets no parameter updates, only its input gradient
    is used); the log-std head maximizes the Gaussian likelihood of the
    motion encoder's latent for the same segment, with the mean treated as
    constant in that term.
    """
    rng = np.random.default_rng(cfg.seed)
    obs_dim = segments[0].o1.shape[0]
    horizon = skill_model.horizon
    d_z = skill_model.d_z

    obs_mat = np.array([s.o1 for s in segments])
    taus = np.array([s.tau.reshape(-1) for s in segments])
    v0s = np.array([speed_of_obs(s.o1) for s in segments])
    surrogate = encode_features(skill_model, np.hstack([taus, v0s[:, None]])).mean

    encoder = new_intent_encoder(obs_dim, d_z, cfg.hidden, expert_id, rng)
    opt = Adam(encoder.net.params, lr=cfg.lr)
    n = len(segments)
    batch = min(cfg.batch_size, n)
    history = []
    for step_idx in range(cfg.steps):
        if cfg.lr_decay:
            opt.lr = cfg.lr * max(0.05, 1.0 - step_idx / cfg.steps)
        idx = rng.integers(0, n, size=batch) if n > batch else np.arange(n)
        out, cache = encoder.net.forward_cached(obs_mat[idx])
        mean = out[:, :d_z]
        ls_raw = out[:, d_z:]
        mask = (ls_raw > INTENT_LOG_STD_LO) & (ls_raw < INTENT_LOG_STD_HI)
        log_std = np.clip(ls_raw, INTENT_LOG_STD_LO, INTENT_LOG_STD_HI)
        std = np.exp(log_std)

        dec_in = np.hstack([mean, v0s[idx][:, None]])
        raw, dec_cache = skill_model.decoder.forward_cached(dec_in)
        recon = np.tanh(raw)
        diff = recon - taus[idx]
        mse = float((diff ** 2).mean())

        resid = surrogate[idx] - mean
        nll = float((log_std + 0.5 * (resid / std) ** 2).sum(axis=1).mean())
        loss = mse + cfg.nll_weight * nll
        if not math.isfinite(loss):
            raise RuntimeError(f"intent training diverged at step {step_idx}")

        d_raw = (2.0 * diff / diff.size) * (1.0 - recon ** 2)
        _, d_dec_in = skill_model.decoder.backward(dec_cache, d_raw)
        d_mean = d_dec_in[:, :d_z]
        d_log_std = cfg.nll_weight * (1.0 - (resid / std) ** 2) / len(idx)
        grads, _ = encoder.net.backward(cache, np.hstack([d_mean, d_log_std * mask]))
        opt.step(encoder.net.params, grads)
        history.append((step_idx, loss, mse, nll))
    return encoder, history


def decoded_action_mse(encoder: IntentEncoder, skill_model: SkillSpaceModel,
                       segments, speed_of_obs) -> float:
    obs_mat = np.array([s.o1 for s in segments])
    taus = np.array([s.tau.reshape(-1) for s in segments])
    v0s = np.array([speed_of_obs(s.o1) for s in segments])
    mean, _ = intent_mean_std(encoder, obs_mat)
    recon = np.tanh(skill_model.decoder.forward(np.hstack([mean, v0s[:, None]])))
    return float(((recon - taus) ** 2).mean())


def save_intent_encoders(path, encoders: list[IntentEncoder], styles=None):
    nets = {f"intent_{e.expert_id}": e.net.params for e in encoders}
    meta = {"kind": "intents", "d_z": encoders[0].d_z,
            "expert_ids": [e.expert_id for e in encoders],
            "styles": list(styles) if styles else []}
    checkpoint.save_checkpoint(path, nets, meta)


def load_intent_encoders(path) -> list[IntentEncoder]:
    nets, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "intents":
        raise ValueError(f"{path}: not an intent-encoder checkpoint")
    encoders = []
    for expert_id in meta["expert_ids"]:
        net = mlp_from_params(nets[f"intent_{expert_id}"])
        encoders.append(IntentEncoder(net, int(expert_id), int(meta["d_z"])))
    return encoders
