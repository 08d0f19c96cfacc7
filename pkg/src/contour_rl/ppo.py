"""Clipped-surrogate PPO for the contour-walking agent.

Rollouts are collected in lock-step: at time step ``t`` every still-running
episode contributes one observation to a single policy forward pass. The same
layout is replayed whenever log-probabilities must match collection time
bit for bit (see :func:`replay_log_probs`).
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .env import N_ACTIONS, EnvConfig, Episode, total_return
from .errors import NonFiniteRatio

log = logging.getLogger(__name__)

LOG_FIELDS = ["k", "mean_return", "val_return", "surrogate", "value_mse", "lr", "wall_ms"]


@dataclass
class PPOConfig:
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    starts_per_image: int = 8
    actor_steps: int = 20
    critic_steps: int = 20
    learning_rate: float = 3e-4
    lr_decay: float = 0.999
    iterations: int = 2000
    minibatch_size: int | None = None  # None = full batch per update step
    validation_starts: int = 2
    validation_seed: int = 1234
    validation_gamma: float | None = 1.0  # None scores validation with gamma
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.actor_steps < 1 or self.critic_steps < 1 or self.starts_per_image < 1:
            raise ValueError("step counts must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")

    def lr_at(self, k: int) -> float:
        return self.learning_rate * self.lr_decay ** k


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, N, N) float32, state before each action
    actions: np.ndarray  # (T,) action indices 0..7 (code - 1)
    behavior_log_probs: np.ndarray  # (T,) float64
    rewards: np.ndarray  # (T,) raw environment rewards
    sample_id: str
    start_index: int
    termination_reason: str
    trace: np.ndarray  # (T + 1, 2) visited positions, or T if it left the image
    norm_rewards: np.ndarray | None = None
    rewards_to_go: np.ndarray | None = None
    values: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class EpisodeBatch:
    trajectories: list[Trajectory]
    k: int = 0
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("an episode batch needs at least one trajectory")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def step_weights(self) -> np.ndarray:
        """Per-step weight 1 / (|D| * T_i), concatenated in trajectory order."""
        n = len(self.trajectories)
        return np.concatenate([np.full(len(t), 1.0 / (n * len(t))) for t in self.trajectories])

    def concat(self, name: str) -> np.ndarray:
        return np.concatenate([getattr(t, name) for t in self.trajectories])

    def time_layout(self):
        """Yield ``(t, trajectory indices)`` in collection order."""
        lengths = np.array([len(t) for t in self.trajectories])
        for t in range(int(lengths.max())):
            yield t, np.flatnonzero(lengths > t)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def policy_log_probs(policy: nn.Network, observations: np.ndarray, keep_cache: bool = True):
    """Forward a batch; returns ``(log_probs (B, 8) float64, cache)``."""
    _, cache = policy.forward(observations, keep_cache=keep_cache)
    return log_softmax(policy.logits(cache)), cache


def sample_actions(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(log_probs), axis=1)
    u = rng.random(len(log_probs)) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), N_ACTIONS - 1)


def run_episodes(policy: nn.Network, episodes: list[Episode], rng=None, greedy: bool = False):
    """Drive ``episodes`` to completion in lock-step with one shared policy.

    Returns per-episode arrays ``(observations, actions, log_probs)``.
    """
    n = len(episodes)
    obs = [[] for _ in range(n)]
    acts = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    active = [i for i, ep in enumerate(episodes) if not ep.done]
    while active:
        batch_obs = np.stack([episodes[i].observation() for i in active])
        lp, _ = policy_log_probs(policy, batch_obs, keep_cache=False)
        if greedy:
            a = np.argmax(lp, axis=1)
        else:
            a = sample_actions(lp, rng)
        still = []
        for j, i in enumerate(active):
            obs[i].append(batch_obs[j])
            acts[i].append(int(a[j]))
            logps[i].append(lp[j, a[j]])
            episodes[i].step(int(a[j]) + 1)
            if not episodes[i].done:
                still.append(i)
        active = still
    return [
        (np.stack(o).astype(np.float32), np.array(a, dtype=np.int64), np.array(l, dtype=np.float64))
        for o, a, l in zip(obs, acts, logps)
    ]


def collect_rollouts(policy: nn.Network, samples, config: PPOConfig, rng: np.random.Generator,
                     env_config: EnvConfig | None = None, k: int = 0) -> EpisodeBatch:
    """``starts_per_image`` sampled episodes per training sample, random contour starts."""
    env_config = env_config or EnvConfig(gamma=config.gamma)
    episodes = []
    for s in samples:
        starts = rng.integers(0, len(s.contour), size=config.starts_per_image)
        episodes.extend(Episode(s, env_config, start_index=int(i)) for i in starts)
    return _to_batch(episodes, run_episodes(policy, episodes, rng=rng), k)


def _to_batch(episodes, results, k):
    trajs = []
    for ep, (o, a, lp) in zip(episodes, results):
        trajs.append(Trajectory(
            observations=o, actions=a, behavior_log_probs=lp,
            rewards=np.array(ep.rewards, dtype=np.float64),
            sample_id=ep.sample.id, start_index=ep.start_index,
            termination_reason=ep.termination_reason,
            trace=np.array(ep.trace, dtype=np.int64),
        ))
    return EpisodeBatch(trajs, k=k)


def replay_log_probs(policy: nn.Network, batch: EpisodeBatch) -> list[np.ndarray]:
    """Log-probs of the taken actions, recomputed with the collection-time layout."""
    out = [np.empty(len(t)) for t in batch.trajectories]
    for t, idx in batch.time_layout():
        obs = np.stack([batch.trajectories[i].observations[t] for i in idx])
        lp, _ = policy_log_probs(policy, obs, keep_cache=False)
        for j, i in enumerate(idx):
            out[i][t] = lp[j, batch.trajectories[i].actions[t]]
    return out


def rewards_to_go(rewards, gamma: float) -> np.ndarray:
    """Suffix sums ``sum_{t' >= t} gamma**(t'-t) r_t'`` in one backward pass."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def normalize_rewards(batch: EpisodeBatch) -> EpisodeBatch:
    """Min-max scale raw rewards over the whole batch (degenerate batch -> 0.5)."""
    allr = batch.concat("rewards")
    lo, hi = float(allr.min()), float(allr.max())
    for t in batch.trajectories:
        if hi > lo:
            t.norm_rewards = (t.rewards - lo) / (hi - lo)
        else:
            t.norm_rewards = np.full_like(t.rewards, 0.5)
    return batch


def standardize_advantages(batch: EpisodeBatch) -> EpisodeBatch:
    allv = batch.concat("advantages")
    mean, std = float(allv.mean()), float(allv.std())
    for t in batch.trajectories:
        t.advantages = (t.advantages - mean) / (std + 1e-8)
    return batch


def predict_values(value_net: nn.Network, observations: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = []
    for i in range(0, len(observations), chunk):
        v, _ = value_net.forward(observations[i:i + chunk], keep_cache=False)
        out.append(v[:, 0].astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def estimate_advantage(batch: EpisodeBatch, value_net: nn.Network, gamma: float,
                       reward_attr: str = "norm_rewards") -> EpisodeBatch:
    """Reward-to-go minus the value prediction at the current critic parameters."""
    for t in batch.trajectories:
        r = getattr(t, reward_attr)
        if r is None:
            r = t.rewards
        t.rewards_to_go = rewards_to_go(r, gamma)
    values = predict_values(value_net, batch.concat("observations"))
    pos = 0
    for t in batch.trajectories:
        t.values = values[pos:pos + len(t)]
        t.advantages = t.rewards_to_go - t.values
        pos += len(t)
    return batch


def normalize_batch(batch: EpisodeBatch, value_net: nn.Network, gamma: float) -> EpisodeBatch:
    """Min-max rewards, then returns and advantages, then z-scored advantages."""
    normalize_rewards(batch)
    estimate_advantage(batch, value_net, gamma)
    return standardize_advantages(batch)


def clip(x, lo, hi):
    if lo > hi:
        raise ValueError("clip needs lo <= hi")
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def surrogate_terms(ratio, adv, eps):
    """Per-step ``min(ratio*A, CLIP(ratio, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def _weighted_surrogate(new_logp, batch: EpisodeBatch, eps: float) -> float:
    n = len(batch)
    total = 0.0
    for lp, t in zip(new_logp, batch.trajectories):
        with np.errstate(over="ignore"):
            ratio = np.exp(lp - t.behavior_log_probs)
        if not np.all(np.isfinite(ratio)):
            raise NonFiniteRatio("importance ratio overflowed")
        total += float(np.mean(surrogate_terms(ratio, t.advantages, eps)))
    return total / n


def surrogate_objective(policy: nn.Network, batch: EpisodeBatch, eps: float) -> float:
    """Mean over trajectories of the per-trajectory mean clipped surrogate."""
    return _weighted_surrogate(replay_log_probs(policy, batch), batch, eps)


def weighted_mean_advantage(batch: EpisodeBatch) -> float:
    return float(np.mean([np.mean(t.advantages) for t in batch.trajectories]))


def _flat(batch: EpisodeBatch):
    return (
        batch.concat("observations"),
        batch.concat("actions"),
        batch.concat("behavior_log_probs"),
        batch.concat("advantages"),
        batch.step_weights(),
    )


def surrogate_gradient(policy: nn.Network, obs, actions, old_logp, adv, weights, eps):
    """Gradient of ``sum(w * min(r A, clip(r) A))`` w.r.t. the policy parameters.

    Returns ``(objective, gradients)``. Only the unclipped branch carries
    gradient; behaviour log-probs are constants.
    """
    logp_all, cache = policy_log_probs(policy, obs)
    rows = np.arange(len(actions))
    logp = logp_all[rows, actions]
    with np.errstate(over="ignore"):
        ratio = np.exp(logp - old_logp)
    if not np.all(np.isfinite(ratio)):
        raise NonFiniteRatio("importance ratio overflowed")
    objective = float(np.sum(weights * surrogate_terms(ratio, adv, eps)))
    active = np.where(adv >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)
    coef = weights * adv * ratio * active
    probs = np.exp(logp_all)
    g = -probs * coef[:, None]
    g[rows, actions] += coef
    return objective, policy.backward(cache, g, through_softmax=False)


def value_gradient(value_net: nn.Network, obs, targets, weights):
    v, cache = value_net.forward(obs)
    err = v[:, 0].astype(np.float64) - targets
    loss = float(np.sum(weights * err * err))
    g = (2.0 * weights * err)[:, None]
    return loss, value_net.backward(cache, g)


def value_loss(value_net: nn.Network, batch: EpisodeBatch) -> float:
    v = predict_values(value_net, batch.concat("observations"))
    err = v - batch.concat("rewards_to_go")
    return float(np.sum(batch.step_weights() * err * err))


def _minibatch(n, size, rng):
    if size is None or size >= n:
        return slice(None)
    return rng.choice(n, size=size, replace=False)


def update_policy(policy: nn.Network, batch: EpisodeBatch, config: PPOConfig, lr: float,
                  optimizer: nn.Adam | None = None, rng=None) -> float:
    """``actor_steps`` ascent steps on the clipped surrogate.

    Updates ``policy`` in place and returns the objective seen by the last step.
    """
    obs, act, old, adv, w = _flat(batch)
    rng = rng or np.random.default_rng(0)
    objective = float("nan")
    for _ in range(config.actor_steps):
        sel = _minibatch(len(act), config.minibatch_size, rng)
        ww = w[sel] / w[sel].sum()
        objective, grads = surrogate_gradient(policy, obs[sel], act[sel], old[sel], adv[sel], ww,
                                              config.clip_epsilon)
        if optimizer is None:
            nn.apply_update(policy, grads, lr, ascent=True)
        else:
            optimizer.step(policy, grads, lr, ascent=True)
    return objective


def update_value(value_net: nn.Network, batch: EpisodeBatch, config: PPOConfig, lr: float,
                 optimizer: nn.Adam | None = None, rng=None) -> float:
    """``critic_steps`` descent steps on the weighted squared error to rewards-to-go.

    Updates ``value_net`` in place and returns the loss seen by the last step.
    """
    obs = batch.concat("observations")
    targets = batch.concat("rewards_to_go")
    w = batch.step_weights()
    rng = rng or np.random.default_rng(0)
    loss = float("nan")
    for _ in range(config.critic_steps):
        sel = _minibatch(len(targets), config.minibatch_size, rng)
        ww = w[sel] / w[sel].sum()
        loss, grads = value_gradient(value_net, obs[sel], targets[sel], ww)
        if optimizer is None:
            nn.apply_update(value_net, grads, lr)
        else:
            optimizer.step(value_net, grads, lr)
    return loss


# ----------------------------------------------------------------- evaluation

def validation_starts(samples, n_starts: int, seed: int) -> list[list[int]]:
    """Fixed, evenly spaced start indices per sample with a seeded offset."""
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        T = len(s.contour)
        offset = int(rng.integers(T))
        out.append([(offset + (j * T) // n_starts) % T for j in range(n_starts)])
    return out


def greedy_returns(policy: nn.Network, samples, starts, env_config: EnvConfig, gamma: float | None = None):
    """Greedy train-mode rollouts from given starts; returns per-episode records."""
    episodes = [Episode(s, env_config, start_index=i) for s, idx in zip(samples, starts) for i in idx]
    if not episodes:
        return []
    run_episodes(policy, episodes, greedy=True)
    g = env_config.gamma if gamma is None else gamma
    return [
        {
            "sample_id": ep.sample.id,
            "start_index": ep.start_index,
            "return": total_return(ep.rewards, g),
            "steps": ep.step_count,
            "contour_length": ep.contour_length,
            "termination_reason": ep.termination_reason,
        }
        for ep in episodes
    ]


def per_step_deviation(records) -> float:
    """Mean of ``-return / contour length`` (use undiscounted returns)."""
    return float(np.mean([-r["return"] / r["contour_length"] for r in records]))


# ----------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    policy: nn.Network
    value: nn.Network
    history: list[dict]
    best_val_return: float
    best_iteration: int
    aborted: str | None = None


def train(samples_train, samples_val, config: PPOConfig, env_config: EnvConfig | None = None,
          out_dir=None, policy: nn.Network | None = None, value: nn.Network | None = None,
          start_iteration: int = 0, log_path=None, on_iteration=None) -> TrainResult:
    """Algorithm loop: collect, normalise, actor steps, critic steps, validate.

    The best-so-far (policy, value) pair by validation return is kept in memory
    and, with ``out_dir``, written as ``policy.ckpt`` / ``value.ckpt``.
    """
    env_config = env_config or EnvConfig(gamma=config.gamma)
    rng = np.random.default_rng(config.seed)
    policy = policy or nn.policy_network(seed=config.seed, patch_size=env_config.patch_size)
    value = value or nn.value_network(seed=config.seed + 1, patch_size=env_config.patch_size)
    actor_opt, critic_opt = nn.Adam(policy), nn.Adam(value)
    out_dir = Path(out_dir) if out_dir is not None else None
    val_starts = validation_starts(samples_val, config.validation_starts, config.validation_seed)

    def val_return(net):
        recs = greedy_returns(net, samples_val, val_starts, env_config, gamma=config.validation_gamma)
        return float(np.mean([r["return"] for r in recs])) if recs else float("-inf")

    best = val_return(policy)
    best_policy, best_value, best_k = policy.copy(), value.copy(), start_iteration - 1
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _save_pair(out_dir, best_policy, best_value, best_k, best)

    history = []
    writer = None
    if log_path is not None:
        fh = open(log_path, "a" if start_iteration else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if not start_iteration:
            writer.writeheader()
    aborted = None
    try:
        for k in range(start_iteration, start_iteration + config.iterations):
            t0 = time.perf_counter()
            lr = config.lr_at(k)
            batch = collect_rollouts(policy, samples_train, config, rng, env_config, k=k)
            mean_ret = float(np.mean([total_return(t.rewards, config.gamma) for t in batch.trajectories]))
            normalize_batch(batch, value, config.gamma)
            try:
                surrogate = update_policy(policy, batch, config, lr, actor_opt, rng)
            except NonFiniteRatio as exc:
                aborted = f"iteration {k}: {exc}"
                log.error("aborting: %s", aborted)
                policy, value = best_policy.copy(), best_value.copy()
                break
            vmse = update_value(value, batch, config, lr, critic_opt, rng)
            vr = val_return(policy)
            if vr > best:
                best, best_k = vr, k
                best_policy, best_value = policy.copy(), value.copy()
                if out_dir is not None:
                    _save_pair(out_dir, best_policy, best_value, k, best)
            row = {
                "k": k, "mean_return": mean_ret, "val_return": vr, "surrogate": surrogate,
                "value_mse": vmse, "lr": lr, "wall_ms": int(1000 * (time.perf_counter() - t0)),
            }
            history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            log.info("k=%d return=%.2f val=%.2f best=%.2f surr=%.4f vmse=%.4f (%d ms)",
                     k, mean_ret, vr, best, surrogate, vmse, row["wall_ms"])
            if on_iteration is not None:
                on_iteration(row, policy)
    finally:
        if writer is not None:
            fh.close()
    return TrainResult(best_policy, best_value, history, best, best_k, aborted)


def _save_pair(out_dir: Path, policy, value, k, val_ret):
    extra = {"val_return": val_ret}
    nn.save_checkpoint(out_dir / "policy.ckpt", policy, iteration=k, extra=extra)
    nn.save_checkpoint(out_dir / "value.ckpt", value, iteration=k, extra=extra)


def config_dict(cfg: PPOConfig) -> dict:
    return asdict(cfg)
