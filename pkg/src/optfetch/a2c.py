"""Advantage actor-critic over a fetched option subset.

A fresh policy is trained per goal variant: the actor softmaxes logits
over the fetched options only, the critic regresses Monte-Carlo
discounted returns, and the advantage is return minus value (no GAE;
episodes are short).  Rollouts run a batch of environments in lockstep
so the network forward passes are amortized across episodes.

Learning curves are recorded on a fixed env-step grid so runs of
different episode lengths stay aligned when aggregated.  Arms that reach
a stable perfect evaluation stop collecting and pad the rest of the grid
with the converged values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import SmdpEnv, VariantRef
from .errors import ConfigError, ShapeError
from .nn import (DenseNet, backward_from_cache, forward, forward_cached,
                 glorot_net, init_optimizer, net_parameters, softmax,
                 step_arrays)
from .utils import derive_seed, make_rng

LOGIT_CLAMP = 30.0


@dataclass
class A2CConfig:
    learning_rate: float = 3e-4
    gamma: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    rollout_episodes: int = 16     # episodes collected per update
    total_env_steps: int = 200_000
    eval_every_steps: int = 10_000
    eval_episodes: int = 20
    hidden: int = 64
    seed: int = 0
    early_stop: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"discount must lie in (0, 1], got {self.gamma}")
        for name in ("learning_rate", "entropy_coef", "value_coef"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if self.rollout_episodes < 1 or self.eval_episodes < 1:
            raise ConfigError("rollout_episodes and eval_episodes must be >= 1")
        if self.total_env_steps < 1 or self.eval_every_steps < 1:
            raise ConfigError("step budgets must be >= 1")


@dataclass
class HRLPolicy:
    """Actor/critic pair over an ordered tuple of fetched option ids."""

    actor: DenseNet
    critic: DenseNet
    action_set: tuple[int, ...]

    def __post_init__(self):
        if len(self.action_set) == 0:
            raise ConfigError("policy needs at least one option")
        if self.actor.output_dim != len(self.action_set):
            raise ShapeError(
                f"actor emits {self.actor.output_dim} logits for "
                f"{len(self.action_set)} options")
        if self.critic.output_dim != 1:
            raise ShapeError("critic must emit a single value")


@dataclass(frozen=True)
class CurvePoint:
    update: int
    env_steps: int
    mean_reward: float
    mean_length: float
    completion: float


def make_policy(state_dim: int, fetched, hidden: int,
                rng: np.random.Generator) -> HRLPolicy:
    action_set = tuple(sorted(int(o) for o in fetched))
    actor = glorot_net([state_dim, hidden, len(action_set)],
                       ["relu", "identity"], rng)
    critic = glorot_net([state_dim, hidden, 1], ["relu", "identity"], rng)
    return HRLPolicy(actor, critic, action_set)


def policy_probs(policy: HRLPolicy, states: np.ndarray) -> np.ndarray:
    logits = np.clip(forward(policy.actor, states), -LOGIT_CLAMP, LOGIT_CLAMP)
    return softmax(logits)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row."""
    u = rng.random(probs.shape[0])
    c = probs.cumsum(axis=1)
    c[:, -1] = 1.0 + 1e-12  # float tails must not fall through the last bin
    return (c > u[:, None]).argmax(axis=1)


def run_episodes(env: SmdpEnv, goal: VariantRef, policy: HRLPolicy,
                 episodes: int, seed: int, greedy: bool,
                 record_transitions: bool = False):
    """Lockstep batch of episodes.  Returns (rewards, lengths, completions,
    transitions); transitions is None unless requested, else a list of
    per-episode lists of (encoded_state, action_index, reward)."""
    rng = make_rng(derive_seed(seed, "act"))
    states = [env.reset(goal, derive_seed(seed, "reset", i))
              for i in range(episodes)]
    vecs = [env.encode(s) for s in states]
    active = list(range(episodes))
    rewards = np.zeros(episodes)
    lengths = np.zeros(episodes, dtype=np.int64)
    completions = np.zeros(episodes)
    trans = [[] for _ in range(episodes)] if record_transitions else None

    while active:
        batch = np.stack([vecs[i] for i in active])
        probs = policy_probs(policy, batch)
        if greedy:
            acts = probs.argmax(axis=1)
        else:
            acts = _sample_rows(probs, rng)
        still = []
        for row, i in enumerate(active):
            a = int(acts[row])
            option = policy.action_set[a]
            nxt, r, done = env.apply_option(states[i], option, goal)
            if record_transitions:
                trans[i].append((vecs[i], a, r))
            rewards[i] += r
            lengths[i] += 1
            states[i] = nxt
            vecs[i] = env.encode(nxt)
            if done:
                completions[i] = 1.0 if env.goal_achieved(nxt, goal) else 0.0
            else:
                still.append(i)
        active = still
    return rewards, lengths, completions, trans


def evaluate_policy(env: SmdpEnv, goal: VariantRef, policy: HRLPolicy,
                    episodes: int, seed: int):
    """Greedy rollouts; returns (mean reward, mean length, completion rate)."""
    if episodes < 1:
        raise ConfigError("need at least one evaluation episode")
    rewards, lengths, completions, _ = run_episodes(
        env, goal, policy, episodes, seed, greedy=True)
    return float(rewards.mean()), float(lengths.mean()), float(completions.mean())


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def a2c_gradients(policy: HRLPolicy, states: np.ndarray,
                  actions: np.ndarray, returns: np.ndarray,
                  entropy_coef: float, value_coef: float):
    """Gradients of the A2C objective on one frozen batch.

    Advantage (return minus critic value) is treated as a constant in the
    actor term, per the standard actor-critic estimator.  Returns
    (actor_grads, critic_grads, stats dict).
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    actions = np.asarray(actions, dtype=np.intp)
    returns = np.asarray(returns, dtype=np.float64)
    n = states.shape[0]
    if actions.shape != (n,) or returns.shape != (n,):
        raise ShapeError(
            f"batch mismatch: {n} states, {actions.shape} actions, "
            f"{returns.shape} returns")

    values_out, critic_cache = forward_cached(policy.critic, states)
    values = values_out[:, 0]
    adv = returns - values

    raw_logits, actor_cache = forward_cached(policy.actor, states)
    clip_mask = (np.abs(raw_logits) < LOGIT_CLAMP).astype(np.float64)
    logits = np.clip(raw_logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    probs = softmax(logits)
    logp = np.log(np.maximum(probs, 1e-300))
    entropy = -(probs * logp).sum(axis=1)

    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    # d/dz of -logp(a)*adv is adv*(p - onehot); d/dz of -H is p*(logp + H)
    logit_grad = (adv[:, None] * (probs - onehot)
                  + entropy_coef * probs * (logp + entropy[:, None])) / n
    actor_grads = backward_from_cache(policy.actor, actor_cache,
                                      logit_grad * clip_mask)

    value_grad = (value_coef * 2.0 * (values - returns) / n)[:, None]
    critic_grads = backward_from_cache(policy.critic, critic_cache, value_grad)

    stats = {
        "policy_loss": float(-(logp[np.arange(n), actions] * adv).mean()),
        "value_loss": float(value_coef * ((values - returns) ** 2).mean()),
        "entropy": float(entropy.mean()),
        "mean_advantage": float(adv.mean()),
    }
    return actor_grads, critic_grads, stats


class A2CLearner:
    """Owns the policy, the two optimizers, and the rollout loop."""

    def __init__(self, env: SmdpEnv, goal: VariantRef, fetched,
                 config: A2CConfig):
        self.env = env
        self.goal = goal
        self.config = config
        rng = make_rng(derive_seed(config.seed, "policy-init"))
        self.policy = make_policy(env.state_dim, fetched, config.hidden, rng)
        self.actor_opt = init_optimizer(net_parameters(self.policy.actor),
                                        "adam", config.learning_rate)
        self.critic_opt = init_optimizer(net_parameters(self.policy.critic),
                                         "adam", config.learning_rate)
        self.env_steps = 0
        self.updates = 0

    def collect_and_update(self) -> int:
        """One A2C update from a fresh batch of episodes; returns the
        number of env steps consumed."""
        cfg = self.config
        _, lengths, _, trans = run_episodes(
            self.env, self.goal, self.policy, cfg.rollout_episodes,
            derive_seed(cfg.seed, "rollout", self.updates), greedy=False,
            record_transitions=True)
        states, actions, returns = [], [], []
        for episode in trans:
            rs = [step[2] for step in episode]
            gs = discounted_returns(rs, cfg.gamma)
            for (vec, a, _), g in zip(episode, gs):
                states.append(vec)
                actions.append(a)
                returns.append(g)
        actor_grads, critic_grads, _ = a2c_gradients(
            self.policy, np.asarray(states), np.asarray(actions),
            np.asarray(returns), cfg.entropy_coef, cfg.value_coef)
        step_arrays(net_parameters(self.policy.actor),
                    actor_grads.as_list(), self.actor_opt)
        step_arrays(net_parameters(self.policy.critic),
                    critic_grads.as_list(), self.critic_opt)
        self.updates += 1
        used = int(lengths.sum())
        self.env_steps += used
        return used

    def evaluate(self) -> tuple[float, float, float]:
        return evaluate_policy(
            self.env, self.goal, self.policy, self.config.eval_episodes,
            derive_seed(self.config.seed, "eval", self.updates))


def train_policy(env: SmdpEnv, goal: VariantRef, fetched,
                 config: A2CConfig) -> tuple[HRLPolicy, list[CurvePoint]]:
    """Train a fresh policy on one goal variant under a fixed env-step
    budget, evaluating at every eval_every_steps boundary (step 0
    included).  With early_stop, two consecutive identical perfect
    evaluations freeze training and pad the remaining grid points."""
    learner = A2CLearner(env, goal, fetched, config)
    grid = list(range(0, config.total_env_steps + 1, config.eval_every_steps))
    if grid[-1] != config.total_env_steps:
        grid.append(config.total_env_steps)
    curve: list[CurvePoint] = []
    perfect_streak = 0
    last_eval = None

    def checkpoint():
        nonlocal perfect_streak, last_eval
        reward, length, completion = learner.evaluate()
        curve.append(CurvePoint(learner.updates, grid[len(curve)],
                                reward, length, completion))
        if completion == 1.0 and last_eval == (reward, length, 1.0):
            perfect_streak += 1
        else:
            perfect_streak = 0
        last_eval = (reward, length, completion)

    checkpoint()
    while len(curve) < len(grid):
        if config.early_stop and perfect_streak >= 1 and last_eval[2] == 1.0:
            curve.append(CurvePoint(learner.updates, grid[len(curve)],
                                    *last_eval))
            continue
        while learner.env_steps < grid[len(curve)]:
            learner.collect_and_update()
        checkpoint()
    return learner.policy, curve
