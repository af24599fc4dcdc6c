"""Motion-primitive latent space: a small VAE over action sequences.

The encoder reads a flattened action sequence plus the initial speed and
produces a diagonal Gaussian over the latent space; the decoder maps a
latent plus the initial speed back to a tanh-squashed action sequence.
State sequences are never predicted: they come from rolling the decoded
actions through the bicycle model, so both output modes always agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .kinematics import Action, KinematicsConfig, VehicleState, rollout
from .nets import Adam, Mlp, mlp_from_params
from .primitives import Trajectory, TrajectoryLibrary

ENC_LOG_STD_LO = -6.0
ENC_LOG_STD_HI = 3.0


@dataclass
class LatentDistribution:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class SkillSpaceModel:
    encoder: Mlp  # (2T+1,) -> (2*d_z,)
    decoder: Mlp  # (d_z+1,) -> (2T,)
    d_z: int
    horizon: int


@dataclass
class SkillTrainConfig:
    d_z: int = 8
    hidden: int = 64
    zeta: float = 1e-3
    warmup_frac: float = 0.2
    epochs: int = 300
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0


def new_skill_model(d_z, horizon, hidden, rng) -> SkillSpaceModel:
    encoder = Mlp([2 * horizon + 1, hidden, hidden, 2 * d_z], rng)
    decoder = Mlp([d_z + 1, hidden, hidden, 2 * horizon], rng)
    return SkillSpaceModel(encoder, decoder, d_z, horizon)


def trajectory_features(traj: Trajectory) -> np.ndarray:
    """Flattened actions plus initial speed, the encoder's input layout."""
    flat = [c for a in traj.actions for c in (a.throttle, a.steer)]
    return np.array(flat + [traj.initial.v])


def library_features(lib: TrajectoryLibrary) -> np.ndarray:
    return np.hstack([lib.action_matrix(), lib.initial_speeds()[:, None]])


def _split_encoder_output(out, d_z):
    mean = out[..., :d_z]
    log_std = np.clip(out[..., d_z:], ENC_LOG_STD_LO, ENC_LOG_STD_HI)
    return mean, np.exp(log_std)


def encode_features(model: SkillSpaceModel, feats) -> LatentDistribution:
    mean, std = _split_encoder_output(model.encoder.forward(feats), model.d_z)
    return LatentDistribution(mean, std)


def encode(model: SkillSpaceModel, traj: Trajectory) -> LatentDistribution:
    if len(traj.actions) != model.horizon:
        raise ValueError(f"trajectory horizon {len(traj.actions)} != model horizon {model.horizon}")
    return encode_features(model, trajectory_features(traj))


def decode_actions(model: SkillSpaceModel, z, v0: float) -> np.ndarray:
    """(T, 2) action array in [-1, 1] for a latent and an initial speed."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.d_z:
        raise ValueError(f"latent dimension {z.shape[-1]} != {model.d_z}")
    raw = model.decoder.forward(np.concatenate([z, [float(v0)]]))
    return np.tanh(raw).reshape(model.horizon, 2)


def decode(model: SkillSpaceModel, z, initial: VehicleState, kin: KinematicsConfig) -> Trajectory:
    """Both output modes: decoded actions and their rolled-out states."""
    acts = decode_actions(model, z, initial.v)
    actions = tuple(Action(float(t), float(s)) for t, s in acts)
    states = tuple(rollout(initial, actions, kin))
    return Trajectory(initial, actions, states)


def elbo_loss(model: SkillSpaceModel, feats, zeta: float, rng):
    """Reconstruction MSE plus zeta-weighted KL to the standard normal.

    Uses the reparameterized sample mean + std * eps so encoder gradients
    flow; returns (loss, recon, kl, grads dict).
    """
    feats = np.atleast_2d(np.asarray(feats, dtype=float))
    batch, width = feats.shape
    d_z = model.d_z
    n_act = width - 1
    targets = feats[:, :n_act]
    v0 = feats[:, -1:]

    enc_out, enc_cache = model.encoder.forward_cached(feats)
    mean = enc_out[:, :d_z]
    log_std_raw = enc_out[:, d_z:]
    clip_mask = (log_std_raw > ENC_LOG_STD_LO) & (log_std_raw < ENC_LOG_STD_HI)
    log_std = np.clip(log_std_raw, ENC_LOG_STD_LO, ENC_LOG_STD_HI)
    std = np.exp(log_std)

    eps = rng.standard_normal((batch, d_z))
    z = mean + std * eps

    dec_in = np.hstack([z, v0])
    raw, dec_cache = model.decoder.forward_cached(dec_in)
    recon_actions = np.tanh(raw)
    diff = recon_actions - targets
    recon = float((diff ** 2).mean())

    kl_per = 0.5 * (std ** 2 + mean ** 2 - 1.0 - 2.0 * log_std)
    kl = float(kl_per.sum(axis=1).mean())
    loss = recon + zeta * kl

    # backward: reconstruction path
    d_raw = (2.0 * diff / (batch * n_act)) * (1.0 - recon_actions ** 2)
    dec_grads, d_dec_in = model.decoder.backward(dec_cache, d_raw)
    d_z_grad = d_dec_in[:, :d_z]

    d_mean = d_z_grad + zeta * mean / batch
    d_log_std = d_z_grad * std * eps + zeta * (std ** 2 - 1.0) / batch
    d_log_std = d_log_std * clip_mask
    enc_grads, _ = model.encoder.backward(enc_cache, np.hstack([d_mean, d_log_std]))

    return loss, recon, kl, {"encoder": enc_grads, "decoder": dec_grads}


def train_skill_space(library, cfg: SkillTrainConfig):
    """Minibatch ELBO training over library features.

    Accepts a TrajectoryLibrary or a prebuilt feature matrix; returns the
    model and the per-step loss history.
    """
    feats = library_features(library) if isinstance(library, TrajectoryLibrary) else np.asarray(library)
    if feats.shape[0] == 0:
        raise ValueError("cannot train the skill space on an empty library")
    horizon = (feats.shape[1] - 1) // 2

    rng = np.random.default_rng(cfg.seed)
    model = new_skill_model(cfg.d_z, horizon, cfg.hidden, rng)
    params = model.encoder.params + model.decoder.params
    opt = Adam(params, lr=cfg.lr)

    n = feats.shape[0]
    batch = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = max(1, int(cfg.warmup_frac * total_steps))

    history = []
    step_idx = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * batch:(b + 1) * batch]
            zeta = cfg.zeta * min(1.0, step_idx / warmup)
            loss, recon, kl, grads = elbo_loss(model, feats[idx], zeta, rng)
            if not math.isfinite(loss):
                raise RuntimeError(f"skill-space training diverged at step {step_idx}: "
                                   f"loss={loss}, recon={recon}, kl={kl}")
            opt.step(params, grads["encoder"] + grads["decoder"])
            history.append((step_idx, loss, recon, kl))
            step_idx += 1
    return model, history


def reconstruction_mse(model: SkillSpaceModel, feats, rng=None) -> float:
    """Deterministic per-component action reconstruction error (decode at
    the posterior mean)."""
    feats = np.atleast_2d(np.asarray(feats, dtype=float))
    n_act = feats.shape[1] - 1
    dist = encode_features(model, feats)
    dec_in = np.hstack([dist.mean, feats[:, -1:]])
    recon = np.tanh(model.decoder.forward(dec_in))
    return float(((recon - feats[:, :n_act]) ** 2).mean())


def save_skill_model(path, model: SkillSpaceModel):
    checkpoint.save_checkpoint(path, {
        "encoder": model.encoder.params,
        "decoder": model.decoder.params,
    }, meta={"kind": "skill_space", "d_z": model.d_z, "horizon": model.horizon})


def load_skill_model(path) -> SkillSpaceModel:
    nets, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "skill_space":
        raise ValueError(f"{path}: not a skill-space checkpoint")
    return SkillSpaceModel(mlp_from_params(nets["encoder"]), mlp_from_params(nets["decoder"]),
                           int(meta["d_z"]), int(meta["horizon"]))
