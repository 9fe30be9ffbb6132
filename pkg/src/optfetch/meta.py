"""Meta-training of the retrieval model against oracle trajectories.

The oracle stands in for a converged hierarchical policy: given a fetched
option set that covers the goal recipe, it emits successful trajectories
whose execution order is sampled uniformly over all valid topological
orders of the recipe's prerequisite graph.  Counting linear extensions
with a subset DP makes the uniform sampling exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .env import SmdpEnv, Trajectory, execution_prerequisites
from .errors import ConfigError, GraphError
from .index import (RetrievalModel, retrieval_loss_and_gradients,
                    target_from_trajectories)
from .nn import init_optimizer, step_arrays
from .tasks import DomainSplit, VariantRef
from .utils import derive_seed, make_rng


@dataclass(frozen=True)
class OracleConfig:
    trajectories_per_call: int = 4

    def __post_init__(self):
        if self.trajectories_per_call < 1:
            raise ConfigError("oracle needs at least one trajectory per call")


@dataclass(frozen=True)
class MetaTrainConfig:
    """Budget and schedule for retrieval meta-training.

    The optimizer fields describe one training recipe: heavy-ball
    updates whose learning rate ramps linearly over the first
    lr_warmup fraction of iterations, holds at learning_rate until
    lr_hold, then glides geometrically to learning_rate * lr_floor
    over the remainder.  The warmup is load-bearing, not cosmetic:
    supervision only exists when the fetched set covers the goal
    recipe, so the softmax must stay close to its broad initialization
    until the query network knows which options each scene needs.
    Sharpening too early shrinks fetches below coverage for the
    not-yet-learned variants, which silences their supervision
    permanently.  weight_decay shrinks the query-network weights a little
    every step, which caps how hard the softmax can saturate and keeps
    rarely-correct options from being driven to zero probability too
    early.  key_lr_scale slows the index keys relative to the network;
    near-static keys stop co-adaptation between variants that share
    options.  average_tail is the final fraction of iterations whose
    parameter average is written back at the end, ironing out the
    sampling jitter that batches of ambiguous resets induce."""

    iterations: int
    batch_size: int = 32
    p: float = 0.9
    seed: int = 0
    optimizer: str = "momentum"
    learning_rate: float = 0.5
    momentum: float = 0.95
    lr_warmup: float = 0.0
    lr_hold: float = 0.5
    lr_floor: float = 0.02
    weight_decay: float = 4e-6
    key_lr_scale: float = 0.02
    average_tail: float = 0.4

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if not 0.0 < self.p < 1.0:
            raise ConfigError(f"p must lie in (0, 1), got {self.p}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.lr_warmup <= self.lr_hold <= 1.0:
            raise ConfigError("need 0 <= lr_warmup <= lr_hold <= 1")
        if not 0.0 < self.lr_floor <= 1.0:
            raise ConfigError("lr_floor must lie in (0, 1]")
        if self.weight_decay < 0 or self.key_lr_scale < 0:
            raise ConfigError("weight_decay and key_lr_scale must be >= 0")
        if not 0.0 <= self.average_tail <= 1.0:
            raise ConfigError("average_tail must lie in [0, 1]")


class _OrderSampler:
    """Uniform sampling over linear extensions of one recipe's DAG."""

    def __init__(self, options: list[int], prereq: dict[int, frozenset[int]]):
        self.options = options
        pos = {o: i for i, o in enumerate(options)}
        self.pre_mask = [0] * len(options)
        for o, deps in prereq.items():
            m = 0
            for d in deps:
                m |= 1 << pos[d]
            self.pre_mask[pos[o]] = m
        self.full = (1 << len(options)) - 1
        self._count: dict[int, int] = {self.full: 1}

    def count_from(self, mask: int) -> int:
        cached = self._count.get(mask)
        if cached is not None:
            return cached
        total = 0
        for i in range(len(self.options)):
            bit = 1 << i
            if not mask & bit and self.pre_mask[i] & mask == self.pre_mask[i]:
                total += self.count_from(mask | bit)
        self._count[mask] = total
        return total

    def sample(self, rng: np.random.Generator) -> list[int]:
        if self.count_from(0) == 0:
            raise GraphError("recipe prerequisites admit no execution order")
        mask, order = 0, []
        while mask != self.full:
            choices, weights = [], []
            for i in range(len(self.options)):
                bit = 1 << i
                if not mask & bit and self.pre_mask[i] & mask == self.pre_mask[i]:
                    c = self.count_from(mask | bit)
                    if c:
                        choices.append(i)
                        weights.append(c)
            weights = np.array(weights, dtype=np.float64)
            pick = choices[rng.choice(len(choices), p=weights / weights.sum())]
            order.append(self.options[pick])
            mask |= 1 << pick
        return order


class HrlOracle:
    """Train-time stand-in for a converged hierarchical policy."""

    def __init__(self, env: SmdpEnv, config: OracleConfig | None = None):
        self.env = env
        self.config = config or OracleConfig()
        self._samplers: dict[VariantRef, _OrderSampler] = {}

    def _sampler(self, goal: VariantRef) -> _OrderSampler:
        sampler = self._samplers.get(goal)
        if sampler is None:
            prereq = execution_prerequisites(self.env, goal)
            sampler = _OrderSampler(sorted(prereq), prereq)
            self._samplers[goal] = sampler
        return sampler

    def solve(self, goal: VariantRef, fetched, seed: int) -> list[Trajectory]:
        """Up to M distinct successful trajectories, or [] when the fetched
        set cannot cover the goal recipe."""
        recipe = self.env.graph.recipe_options(goal)
        if not recipe <= frozenset(fetched):
            return []
        sampler = self._sampler(goal)
        rng = make_rng(seed)
        seen: set[tuple[int, ...]] = set()
        out: list[Trajectory] = []
        for i in range(self.config.trajectories_per_call):
            order = tuple(sampler.sample(rng))
            if order in seen:
                continue
            seen.add(order)
            traj = self.env.rollout(goal, order, derive_seed(seed, "reset", i))
            if len(traj.options) != len(order):
                raise GraphError(
                    f"oracle order for {goal} terminated early; domain "
                    f"dynamics violate the any-order property")
            out.append(traj)
        return out


def oracle_solve(env: SmdpEnv, goal: VariantRef, fetched,
                 config: OracleConfig | None = None,
                 seed: int = 0) -> list[Trajectory]:
    """One-shot oracle call (no sampler cache kept across calls)."""
    return HrlOracle(env, config).solve(goal, fetched, seed)


@dataclass
class MetaTrainReport:
    """Per-iteration mean loss (NaN when every sample was skipped) and
    skipped-sample counts."""

    losses: np.ndarray
    skipped: np.ndarray

    @property
    def iterations(self) -> int:
        return len(self.losses)

    def lines(self) -> list[str]:
        return [f"{i},{self.losses[i]:.6f},{self.skipped[i]}"
                for i in range(self.iterations)]


def meta_train(env: SmdpEnv, split: DomainSplit, model: RetrievalModel,
               config: MetaTrainConfig,
               oracle_config: OracleConfig | None = None,
               log=None) -> MetaTrainReport:
    """Alternate retrieval and oracle supervision over the train split.

    Each iteration samples a batch of train variants; for each, the model
    fetches options on the encoded reset state, the oracle produces
    trajectories restricted to that fetch, and the normalized option
    counts become the cross-entropy target.  Degenerate targets (oracle
    failure) are skipped; a batch with no valid samples records NaN loss
    and training continues.

    Updates run on the optimizer and schedule described by the config
    (hold then geometric learning-rate glide, weight decay on the query
    network only, slowed keys); when average_tail > 0 the parameters
    left in the model afterwards are the average over that final
    stretch of iterations rather than the last iterate.
    """
    if not split.train:
        raise ConfigError("train split is empty")
    train = sorted(split.train)
    oracle = HrlOracle(env, oracle_config)
    rng = make_rng(derive_seed(config.seed, "meta-sample"))
    k = model.index.k
    losses = np.full(config.iterations, np.nan)
    skipped = np.zeros(config.iterations, dtype=np.int64)

    params = model.parameters
    net_params = params[:-1]
    opt = init_optimizer(params, config.optimizer, config.learning_rate)
    opt.beta1 = config.momentum
    tail = int(round(config.iterations * config.average_tail))
    tail_start = config.iterations - tail
    averaged = [np.zeros_like(q) for q in params]
    n_averaged = 0

    for it in range(config.iterations):
        progress = it / config.iterations
        if progress < config.lr_warmup:
            opt.learning_rate = config.learning_rate * (
                (it + 1) / (config.lr_warmup * config.iterations))
        elif progress < config.lr_hold or config.lr_floor >= 1.0:
            opt.learning_rate = config.learning_rate
        else:
            u = (progress - config.lr_hold) / max(1e-12, 1.0 - config.lr_hold)
            opt.learning_rate = config.learning_rate * config.lr_floor ** u

        states, targets = [], []
        for b in range(config.batch_size):
            ref = train[int(rng.integers(len(train)))]
            state = env.reset(ref, derive_seed(config.seed, "reset", it, b))
            s0 = env.encode(state)
            fetched = model.select(s0, config.p).fetched
            lam = oracle.solve(ref, fetched,
                               derive_seed(config.seed, "oracle", it, b))
            y, ok = target_from_trajectories(lam, k)
            if not ok:
                skipped[it] += 1
                continue
            states.append(s0)
            targets.append(y)
        if states:
            mean_loss, net_grads, key_grad = retrieval_loss_and_gradients(
                model.index, model.qgn, np.asarray(states),
                np.asarray(targets))
            losses[it] = mean_loss
            if np.isfinite(mean_loss):
                grads = net_grads.as_list()
                if config.weight_decay:
                    for grad, param in zip(grads, net_params):
                        grad += config.weight_decay * param
                grads.append(config.key_lr_scale * key_grad)
                step_arrays(params, grads, opt)
            else:
                warnings.warn("non-finite retrieval loss; update skipped")
        if it >= tail_start:
            for acc, param in zip(averaged, params):
                acc += param
            n_averaged += 1
        if log is not None:
            log(it, losses[it], int(skipped[it]))

    if n_averaged:
        for param, acc in zip(params, averaged):
            param[...] = acc / n_averaged
    return MetaTrainReport(losses, skipped)
