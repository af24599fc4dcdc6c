"""Minimal dense-network toolkit with hand-written backward passes.

Everything is float64 numpy. A network is a flat parameter list
[W0, b0, W1, b1, ...] so the optimizer and the checkpoint writer stay
generic; no autodiff graph, each model composes its own backward from
the layer primitives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_STD_FLOOR = math.log(1e-6)
LOG_STD_CEIL = 10.0
_LOG_2PI = math.log(2.0 * math.pi)


class Mlp:
    """Fully connected net: tanh on hidden layers, identity output.

    With zero_final=True the output layer starts at zero, so fresh heads
    predict zeros (uniform mixture weights, unit stds) before training.
    """

    def __init__(self, widths, rng=None, zero_final=True, final_scale=0.0):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = [int(w) for w in widths]
        self.params: list[np.ndarray] = []
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            if rng is None:
                w = np.zeros((n_out, n_in))
            elif zero_final and i == n_layers - 1:
                # final_scale > 0 breaks head symmetry while staying near zero
                w = final_scale * rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in))
            else:
                w = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_out, n_in))
            self.params.append(w)
            self.params.append(np.zeros(n_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x):
        h = np.asarray(x, dtype=float)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ w.T + b
            if i != last:
                h = np.tanh(h)
        return h

    def forward_cached(self, x):
        """Forward pass keeping the per-layer inputs needed by backward.

        Always works on a 2-D batch internally; cache is the list of layer
        inputs (post-tanh activations for hidden layers).
        """
        h = np.atleast_2d(np.asarray(x, dtype=float))
        inputs = []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            inputs.append(h)
            w, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ w.T + b
            if i != last:
                h = np.tanh(h)
        return h, inputs

    def backward(self, cache, grad_out):
        """Exact reverse-mode gradients.

        Returns (param_grads, grad_input); param_grads aligns with
        self.params, grad_input has the batch shape of the cached input.
        """
        inputs = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if g.shape[0] != inputs[-1].shape[0] or g.shape[1] != self.widths[-1]:
            raise ValueError(f"gradient shape {g.shape} does not match output width {self.widths[-1]}")
        grads = [None] * len(self.params)
        for i in range(self.n_layers - 1, -1, -1):
            x_in = inputs[i]
            w = self.params[2 * i]
            grads[2 * i] = g.T @ x_in
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ w
            if i > 0:
                g = g * (1.0 - inputs[i] ** 2)
        return grads, g


def mlp_from_params(params):
    """Rebuild an Mlp from a checkpointed parameter list."""
    widths = [params[0].shape[1]] + [params[2 * i].shape[0] for i in range(len(params) // 2)]
    net = Mlp(widths)
    net.params = [np.array(p, dtype=float) for p in params]
    return net


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


@dataclass
class GmmPolicy:
    """Diagonal Gaussian mixture over the latent space."""

    weights: np.ndarray  # (M,), sums to 1
    means: np.ndarray    # (M, d)
    stds: np.ndarray     # (M, d), > 0


def policy_from_raw(raw, n_components, latent_dim):
    """Split a flat head output into a valid GmmPolicy.

    Weights go through softmax, stds through exp of clipped log-stds, so
    the mixture invariants hold by construction.
    """
    m, d = n_components, latent_dim
    raw = np.asarray(raw, dtype=float)
    logits = raw[:m]
    means = raw[m:m + m * d].reshape(m, d)
    log_stds = np.clip(raw[m + m * d:m + 2 * m * d].reshape(m, d), LOG_STD_FLOOR, LOG_STD_CEIL)
    return GmmPolicy(softmax(logits), means.copy(), np.exp(log_stds))


def gmm_log_prob_many(policy: GmmPolicy, zs) -> np.ndarray:
    """Log density of each row of zs under the mixture (log-sum-exp stable)."""
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    d = policy.means.shape[1]
    diff = (zs[:, None, :] - policy.means[None, :, :]) / policy.stds[None, :, :]
    log_comp = (-0.5 * (diff ** 2).sum(axis=-1)
                - np.log(policy.stds).sum(axis=-1)[None, :]
                - 0.5 * d * _LOG_2PI)
    log_w = np.log(np.maximum(policy.weights, 1e-300))
    return logsumexp(log_comp + log_w[None, :], axis=1)


def gmm_log_prob(policy: GmmPolicy, z) -> float:
    return float(gmm_log_prob_many(policy, np.asarray(z, dtype=float)[None, :])[0])


def _pick_components(weights, us):
    c = np.cumsum(weights)
    idx = np.searchsorted(c, np.asarray(us) * c[-1], side="right")
    return np.clip(idx, 0, len(weights) - 1)


def gmm_sample(policy: GmmPolicy, rng) -> np.ndarray:
    """One draw: component by weight, then a diagonal Gaussian draw."""
    idx = int(_pick_components(policy.weights, rng.random()))
    eps = rng.standard_normal(policy.means.shape[1])
    return policy.means[idx] + policy.stds[idx] * eps


def gmm_sample_many(policy: GmmPolicy, count, rng):
    """Vectorized draws; returns (samples (count, d), component indices)."""
    us = rng.random(count)
    idx = _pick_components(policy.weights, us)
    eps = rng.standard_normal((count, policy.means.shape[1]))
    return policy.means[idx] + policy.stds[idx] * eps, idx


def diag_gaussian_log_prob_many(mean, std, zs) -> np.ndarray:
    """Log density of rows of zs under a single diagonal Gaussian."""
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    diff = (zs - mean[None, :]) / std[None, :]
    return -0.5 * (diff ** 2).sum(axis=-1) - np.log(std).sum() - 0.5 * mean.shape[0] * _LOG_2PI


class Adam:
    """Adaptive-moment optimizer with decoupled L2 weight decay.

    Steps with non-finite gradients are skipped and counted rather than
    corrupting the parameters.
    """

    def __init__(self, params, lr=1e-3, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.skipped = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> bool:
        """Update params in place; returns False when the step was skipped."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps))
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
        return True
