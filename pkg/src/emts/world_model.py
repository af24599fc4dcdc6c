"""Learned planning model: representation, skill dynamics, prediction.

Hidden states are tanh-squashed to [-1, 1] to keep value normalization in
the search well behaved. The prediction head outputs a Gaussian-mixture
policy over the skill latent space plus a scalar value; the dynamics head
predicts the summed reward of executing one whole skill.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .nets import GmmPolicy, Mlp, mlp_from_params, softmax

# policy-head log-std range: the floor keeps root proposals diverse enough
# to search over, the ceiling keeps densities finite
POLICY_LOG_STD_LO = math.log(0.2)
POLICY_LOG_STD_HI = 2.0


@dataclass
class ModelBundle:
    h: Mlp  # obs -> d_s (pre-squash)
    g: Mlp  # (d_s + d_z,) -> (1 + d_s,)  [reward, next pre-squash]
    f: Mlp  # d_s -> (M + 2*M*d_z + 1,)   [logits, means, log-stds, value]
    d_s: int
    d_z: int
    n_components: int

    def all_params(self):
        return self.h.params + self.g.params + self.f.params


@dataclass
class ModelConfig:
    d_s: int = 64
    hidden: int = 64
    n_components: int = 3


def new_model_bundle(obs_dim, d_z, cfg: ModelConfig, rng) -> ModelBundle:
    f_out = cfg.n_components * (1 + 2 * d_z) + 1
    h = Mlp([obs_dim, cfg.hidden, cfg.hidden, cfg.d_s], rng, zero_final=False)
    g = Mlp([cfg.d_s + d_z, cfg.hidden, cfg.hidden, 1 + cfg.d_s], rng, zero_final=False)
    # near-zero head keeps the fresh policy close to the latent prior while
    # breaking the symmetry between mixture components
    f = Mlp([cfg.d_s, cfg.hidden, cfg.hidden, f_out], rng, zero_final=True,
            final_scale=0.05)
    return ModelBundle(h, g, f, cfg.d_s, d_z, cfg.n_components)


def represent(bundle: ModelBundle, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != bundle.h.widths[0]:
        raise ValueError(f"observation dim {obs.shape[-1]} != {bundle.h.widths[0]}")
    return np.tanh(bundle.h.forward(obs))


def dynamics(bundle: ModelBundle, s, z):
    """Skill transition: returns (predicted summed reward, next hidden)."""
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    if s.shape[-1] != bundle.d_s or z.shape[-1] != bundle.d_z:
        raise ValueError(f"dynamics input dims {s.shape[-1]}+{z.shape[-1]} do not match "
                         f"{bundle.d_s}+{bundle.d_z}")
    raw = bundle.g.forward(np.concatenate([s, z], axis=-1))
    return float(raw[..., 0]), np.tanh(raw[..., 1:])


def policy_head(raw, n_components, latent_dim) -> GmmPolicy:
    """GmmPolicy from a flat head output, with the policy-specific std range."""
    m, d = n_components, latent_dim
    raw = np.asarray(raw, dtype=float)
    log_stds = np.clip(raw[m + m * d:m + 2 * m * d].reshape(m, d),
                       POLICY_LOG_STD_LO, POLICY_LOG_STD_HI)
    return GmmPolicy(softmax(raw[:m]), raw[m:m + m * d].reshape(m, d).copy(),
                     np.exp(log_stds))


def predict(bundle: ModelBundle, s):
    """Prediction head: (GmmPolicy over skills, scalar value)."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != bundle.d_s:
        raise ValueError(f"hidden dim {s.shape[-1]} != {bundle.d_s}")
    raw = bundle.f.forward(s)
    policy = policy_head(raw[:-1], bundle.n_components, bundle.d_z)
    return policy, float(raw[-1])


# -- cached/batched variants for training ----------------------------------


def represent_cached(bundle, obs_batch):
    raw, cache = bundle.h.forward_cached(obs_batch)
    s = np.tanh(raw)
    return s, (cache, s)


def represent_backward(bundle, cache, d_s):
    mlp_cache, s = cache
    grads, _ = bundle.h.backward(mlp_cache, d_s * (1.0 - s ** 2))
    return grads


def dynamics_cached(bundle, s_batch, z_batch):
    raw, cache = bundle.g.forward_cached(np.hstack([s_batch, z_batch]))
    r = raw[:, 0]
    s_next = np.tanh(raw[:, 1:])
    return r, s_next, (cache, s_next)


def dynamics_backward(bundle, cache, d_r, d_s_next):
    mlp_cache, s_next = cache
    d_raw = np.hstack([d_r[:, None], d_s_next * (1.0 - s_next ** 2)])
    grads, d_in = bundle.g.backward(mlp_cache, d_raw)
    return grads, d_in[:, :bundle.d_s], d_in[:, bundle.d_s:]


def predict_cached(bundle, s_batch):
    raw, cache = bundle.f.forward_cached(s_batch)
    return raw, cache


def predict_backward(bundle, cache, d_raw):
    grads, d_s = bundle.f.backward(cache, d_raw)
    return grads, d_s


def save_model_bundle(path, bundle: ModelBundle, extra_meta=None):
    meta = {"kind": "model_bundle", "d_s": bundle.d_s, "d_z": bundle.d_z,
            "n_components": bundle.n_components}
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save_checkpoint(path, {"h": bundle.h.params, "g": bundle.g.params,
                                      "f": bundle.f.params}, meta)


def load_model_bundle(path) -> ModelBundle:
    nets, meta = checkpoint.load_checkpoint(path)
    if meta.get("kind") != "model_bundle":
        raise ValueError(f"{path}: not a model-bundle checkpoint")
    return ModelBundle(mlp_from_params(nets["h"]), mlp_from_params(nets["g"]),
                       mlp_from_params(nets["f"]), int(meta["d_s"]), int(meta["d_z"]),
                       int(meta["n_components"]))
