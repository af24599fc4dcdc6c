"""Skill-level Monte Carlo tree search with expert-guided root sampling.

Root children are drawn from a mixture of the model's policy head and the
expert intent encoders; root priors blend the best expert density with the
model density under a decaying mixing weight. Interior nodes are pure
model: sampled from the policy head, priors from its density alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .intents import intent_log_prob_many, intent_sample
from .kinematics import Action
from .nets import gmm_log_prob_many, gmm_sample, gmm_sample_many
from .skills import decode_actions
from .world_model import ModelBundle, dynamics, predict, represent


@dataclass
class SearchConfig:
    k_samples: int = 20
    num_simulations: int = 100
    c1: float = 1.25
    c2: float = 19652.0
    alpha: float = 0.3            # expert share of root samples
    gamma_init: float = 0.5       # initial expert prior mixing weight
    gamma_decay_steps: int = 25000
    discount: float = 0.99 ** 10  # per skill edge (one edge spans a horizon)
    temperature: float = 1.0

    def validate(self):
        if self.k_samples < 2:
            raise ValueError("k_samples must be >= 2")
        if self.num_simulations < 1:
            raise ValueError("num_simulations must be >= 1")
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.gamma_init <= 1.0):
            raise ValueError("alpha and gamma_init must lie in [0, 1]")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("c1 and c2 must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")

    def gamma_at(self, train_step: int) -> float:
        if self.gamma_decay_steps <= 0:
            return 0.0
        return self.gamma_init * max(0.0, 1.0 - train_step / self.gamma_decay_steps)


class MinMaxStats:
    """Running min/max of Q values seen in one tree."""

    __slots__ = ("lo", "hi")

    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf

    def update(self, q: float):
        if q < self.lo:
            self.lo = q
        if q > self.hi:
            self.hi = q

    def normalize(self, q):
        if self.hi > self.lo:
            return (q - self.lo) / (self.hi - self.lo)
        return np.zeros_like(q)


class Node:
    __slots__ = ("hidden", "atoms", "prior", "edge_n", "edge_w", "edge_r",
                 "children", "value_sum", "visit_count")

    def __init__(self, hidden, atoms, prior):
        self.hidden = hidden
        self.atoms = atoms
        self.prior = prior
        k = len(prior)
        self.edge_n = np.zeros(k, dtype=int)
        self.edge_w = np.zeros(k)
        self.edge_r = np.zeros(k)
        self.children = [None] * k
        self.value_sum = 0.0
        self.visit_count = 0

    def value(self) -> float:
        return self.value_sum / self.visit_count if self.visit_count else 0.0


@dataclass
class SearchResult:
    atoms: np.ndarray           # (K, d_z)
    provenance: np.ndarray      # (K,) int: -1 model, n >= 0 expert index
    visits: np.ndarray          # (K,) root edge visit counts
    prior: np.ndarray           # (K,) adjusted root prior
    root_value: float
    model_density: np.ndarray   # (K,) policy-head density at each atom
    expert_density: np.ndarray  # (n_experts, K) intent densities
    q_values: np.ndarray        # (K,)
    gamma: float


def renormalize_log_densities(log_dens) -> np.ndarray:
    """Exponentiate shifted log densities and renormalize to sum to 1."""
    log_dens = np.asarray(log_dens, dtype=float)
    w = np.exp(log_dens - log_dens.max())
    total = w.sum()
    if total <= 0 or not math.isfinite(total):
        return np.full(len(log_dens), 1.0 / len(log_dens))
    return w / total


def sample_root_atoms(obs, root_policy, encoders, cfg: SearchConfig, rng):
    """K root draws from the expert/model mixture.

    Each draw picks the expert source with probability alpha (then one
    expert uniformly, then its intent sample), otherwise samples the
    model's policy head. With alpha == 0 no mixture coin is consumed, so
    the stream matches a pure model-only sampler exactly.
    """
    n_exp = len(encoders) if encoders else 0
    atoms = np.empty((cfg.k_samples, len(root_policy.means[0])))
    provenance = np.full(cfg.k_samples, -1, dtype=int)
    use_experts = cfg.alpha > 0.0 and n_exp > 0
    for k in range(cfg.k_samples):
        if use_experts and rng.random() < cfg.alpha:
            i = int(rng.integers(n_exp))
            atoms[k] = intent_sample(encoders[i], obs, rng)
            provenance[k] = i
        else:
            atoms[k] = gmm_sample(root_policy, rng)
    return atoms, provenance


def adjusted_prior(model_log_dens, expert_log_dens, is_root: bool, gamma: float) -> np.ndarray:
    """Per-atom prior: gamma-blend of the best expert density with the model
    density at the root, the model density alone elsewhere; renormalized
    over the node's atoms."""
    model_log_dens = np.asarray(model_log_dens, dtype=float)
    if not is_root or gamma <= 0.0 or expert_log_dens is None or len(expert_log_dens) == 0:
        return renormalize_log_densities(model_log_dens)
    best_expert = np.max(np.asarray(expert_log_dens, dtype=float), axis=0)
    shift = max(model_log_dens.max(), best_expert.max())
    mixed = gamma * np.exp(best_expert - shift) + (1.0 - gamma) * np.exp(model_log_dens - shift)
    total = mixed.sum()
    if total <= 0 or not math.isfinite(total):
        return np.full(len(model_log_dens), 1.0 / len(model_log_dens))
    return mixed / total


def child_scores(node: Node, cfg: SearchConfig, minmax: MinMaxStats) -> np.ndarray:
    """Prior-weighted upper-confidence scores over a node's children."""
    n = node.edge_n
    total = int(n.sum())
    q = np.where(n > 0, node.edge_w / np.maximum(n, 1), 0.0)
    q_norm = np.where(n > 0, minmax.normalize(q), 0.0)
    explore = (cfg.c1 + math.log((total + cfg.c2 + 1.0) / cfg.c2))
    ratio = max(math.sqrt(total), 1.0) / (1.0 + n)
    return q_norm + node.prior * explore * ratio


def select_child(node: Node, cfg: SearchConfig, minmax: MinMaxStats) -> int:
    """Argmax of the selection scores; ties break to the lowest index."""
    return int(np.argmax(child_scores(node, cfg, minmax)))


def _expand_interior(bundle, hidden, cfg, rng):
    policy, value = predict(bundle, hidden)
    atoms, _ = gmm_sample_many(policy, cfg.k_samples, rng)
    prior = renormalize_log_densities(gmm_log_prob_many(policy, atoms))
    return Node(hidden, atoms, prior), value


def _backup(edges, leaf, leaf_value, discount, minmax):
    leaf.visit_count += 1
    leaf.value_sum += leaf_value
    g = leaf_value
    for node, k in reversed(edges):
        g = node.edge_r[k] + discount * g
        node.edge_w[k] += g
        node.edge_n[k] += 1
        minmax.update(node.edge_w[k] / node.edge_n[k])
        node.visit_count += 1
        node.value_sum += g


def run_search(obs, bundle: ModelBundle, encoders, cfg: SearchConfig, rng,
               gamma: float, return_tree: bool = False):
    """Full simulate/select/expand/backup loop from one observation.

    The first simulation expands the root itself (so a budget of one only
    evaluates the prediction head); each further simulation expands exactly
    one new child.
    """
    cfg.validate()
    encoders = encoders or []
    minmax = MinMaxStats()

    s0 = represent(bundle, obs)
    root_policy, root_value = predict(bundle, s0)
    atoms, provenance = sample_root_atoms(obs, root_policy, encoders, cfg, rng)
    model_log = gmm_log_prob_many(root_policy, atoms)
    expert_log = (np.stack([intent_log_prob_many(e, obs, atoms) for e in encoders])
                  if encoders else np.zeros((0, cfg.k_samples)))
    prior = adjusted_prior(model_log, expert_log, True, gamma)
    root = Node(s0, atoms, prior)
    _backup([], root, root_value, cfg.discount, minmax)

    for _ in range(cfg.num_simulations - 1):
        node = root
        edges = []
        while True:
            k = select_child(node, cfg, minmax)
            edges.append((node, k))
            child = node.children[k]
            if child is None:
                break
            node = child
        parent, k = edges[-1]
        reward, hidden = dynamics(bundle, parent.hidden, parent.atoms[k])
        child, value = _expand_interior(bundle, hidden, cfg, rng)
        parent.children[k] = child
        parent.edge_r[k] = reward
        _backup(edges, child, value, cfg.discount, minmax)

    visits = root.edge_n.copy()
    q = np.where(visits > 0, root.edge_w / np.maximum(visits, 1), 0.0)
    result = SearchResult(
        atoms=atoms, provenance=provenance, visits=visits, prior=prior,
        root_value=root.value(), model_density=np.exp(model_log),
        expert_density=np.exp(expert_log), q_values=q, gamma=gamma,
    )
    if return_tree:
        return result, root
    return result


def act(result: SearchResult, temperature: float, rng) -> int:
    """Pick a root atom index from visit counts at the given temperature;
    temperatures at or below 1e-3 mean argmax."""
    visits = np.asarray(result.visits, dtype=float)
    if visits.sum() <= 0:
        raise ValueError("cannot act on a search result with no visits")
    if temperature <= 1e-3:
        return int(np.argmax(visits))
    with np.errstate(divide="ignore"):
        logits = np.where(visits > 0, np.log(visits) / temperature, -np.inf)
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(0, len(p) - 1))


def execute_skill(env, skill_model, z):
    """Decode a skill from the vehicle's current speed and run it open loop
    until the horizon or episode end; returns (summed reward, steps, done,
    per-step outcome log)."""
    if env.done:
        raise RuntimeError("execute_skill() on a terminated environment")
    actions = decode_actions(skill_model, z, env.ego_speed)
    total = 0.0
    steps = 0
    log = []
    for throttle, steer in actions:
        out = env.step(Action(float(throttle), float(steer)))
        total += out.reward
        steps += 1
        log.append(out)
        if out.done:
            break
    return total, steps, env.done, log


def tree_to_dict(node: Node, depth: int = 0, max_depth: int = 64) -> dict:
    """JSON-friendly dump of atoms, priors, visits and Q values."""
    children = []
    for k, child in enumerate(node.children):
        entry = {
            "atom": [float(v) for v in node.atoms[k]],
            "prior": float(node.prior[k]),
            "visits": int(node.edge_n[k]),
            "q": float(node.edge_w[k] / node.edge_n[k]) if node.edge_n[k] else 0.0,
            "reward": float(node.edge_r[k]),
        }
        if child is not None and depth < max_depth:
            entry["child"] = tree_to_dict(child, depth + 1, max_depth)
        children.append(entry)
    return {"visit_count": int(node.visit_count), "value": float(node.value()),
            "children": children}
