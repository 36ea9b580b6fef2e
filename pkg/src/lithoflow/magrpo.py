"""Group-relative policy optimization on a three-module toy pipeline.

The toy models the workflow's three stages as a chain of tabular softmax
policies.  An episode feeds a context bucket through the modules; each
module picks an action, earns 1 if it hit its hidden per-context target,
and deterministically transforms the context for the next module.  The
episode outcome is the last module's hit alone, while the episode return
averages all module rewards.

The point of the toy is the optimizer comparison, not the task:
module-aware mode ("ma") normalizes each module's rewards within the
group and updates that module with its own advantages, while the
baseline mode ("grpo") normalizes only the outcome and applies that one
advantage to every module.  Both run the same clipped surrogate with a
KL leash to the reference policy, so any difference in the learning
curves comes from the credit assignment alone.

Because the policies are tabular softmax, every gradient is analytic and
can be checked against finite differences to tight tolerance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ADVANTAGE_EPSILON = 1e-8

DEFAULT_GROUP_SIZE = 8
DEFAULT_KL_WEIGHT = 0.04
DEFAULT_CLIP_LOW = 0.1
DEFAULT_CLIP_HIGH = 0.3


class MagrpoError(RuntimeError):
    """Raised for invalid optimizer configuration or numeric blowup."""


# ---------------------------------------------------------------------------
# task and policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyTask:
    """Hidden per-module target tables plus the context chaining rule."""

    targets: np.ndarray  # (num_modules, num_contexts) int actions
    num_actions: int

    @property
    def num_modules(self) -> int:
        return self.targets.shape[0]

    @property
    def num_contexts(self) -> int:
        return self.targets.shape[1]

    @classmethod
    def from_seed(cls, seed: int, num_modules: int = 3, num_contexts: int = 8,
                  num_actions: int = 4) -> "ToyTask":
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, num_actions, size=(num_modules, num_contexts))
        return cls(targets=targets, num_actions=num_actions)

    def next_context(self, context: int, action: int) -> int:
        return (context + action + 1) % self.num_contexts

    def module_reward(self, module: int, context: int, action: int) -> float:
        return 1.0 if action == self.targets[module, context] else 0.0


@dataclass
class ToyPolicy:
    """Tabular softmax policies, one (context x action) table per module."""

    logits: np.ndarray  # (num_modules, num_contexts, num_actions)
    temperature: float = 1.0

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        if self.logits.ndim != 3:
            raise MagrpoError("logits must have shape (modules, contexts, actions)")
        if self.temperature <= 0:
            raise MagrpoError("temperature must be positive")

    @classmethod
    def uniform(cls, num_modules: int = 3, num_contexts: int = 8,
                num_actions: int = 4, temperature: float = 1.0) -> "ToyPolicy":
        return cls(np.zeros((num_modules, num_contexts, num_actions)), temperature)

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits.copy(), self.temperature)

    def probs(self, module: int, context: int) -> np.ndarray:
        z = self.logits[module, context] / self.temperature
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def all_probs(self) -> np.ndarray:
        z = self.logits / self.temperature
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# episodes and advantages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    contexts: np.ndarray  # (num_modules,) context seen by each module
    actions: np.ndarray   # (num_modules,)
    rewards: np.ndarray   # (num_modules,) 0/1 per-module hits

    @property
    def ret(self) -> float:
        """Episode return: mean of the module rewards, so the max is 1."""
        return float(self.rewards.mean())

    @property
    def outcome(self) -> float:
        """Scalar outcome: did the final module hit its target."""
        return float(self.rewards[-1])


def play_episode(policy: ToyPolicy, task: ToyTask, context: int,
                 rng: np.random.Generator) -> Episode:
    M = task.num_modules
    contexts = np.empty(M, dtype=int)
    actions = np.empty(M, dtype=int)
    rewards = np.empty(M)
    c = int(context)
    for m in range(M):
        contexts[m] = c
        a = int(rng.choice(task.num_actions, p=policy.probs(m, c)))
        actions[m] = a
        rewards[m] = task.module_reward(m, c, a)
        c = task.next_context(c, a)
    return Episode(contexts=contexts, actions=actions, rewards=rewards)


def sample_group(policy: ToyPolicy, task: ToyTask, context: int,
                 group_size: int, seed) -> list[Episode]:
    """Independent episodes from one start context, one spawned stream each.

    ``seed`` may be an int or a ``SeedSequence``; members get disjoint
    child streams so group size changes never reshuffle earlier members.
    """
    if group_size < 2:
        raise MagrpoError(f"group size must be at least 2, got {group_size}")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(group_size)
    return [
        play_episode(policy, task, context, np.random.default_rng(child))
        for child in children
    ]


MODES = ("ma", "grpo")


def group_advantages(episodes: Sequence[Episode], mode: str) -> np.ndarray:
    """(G, M) normalized advantages.

    ``ma``: each module's rewards are normalized within the group by their
    own mean and population standard deviation, so one module's luck never
    bleeds into another's update.  ``grpo``: only the scalar outcome (the
    last module's hit) is normalized, and every module of an episode
    inherits that one value, which is what an outcome-only optimizer sees.
    """
    if mode not in MODES:
        raise MagrpoError(f"mode must be one of {MODES}, got {mode!r}")
    rewards = np.stack([e.rewards for e in episodes])  # (G, M)
    if not np.all(np.isfinite(rewards)):
        raise MagrpoError("non-finite reward in group")
    if mode == "ma":
        mu = rewards.mean(axis=0)
        sigma = rewards.std(axis=0)
        return (rewards - mu) / (sigma + ADVANTAGE_EPSILON)
    outcomes = rewards[:, -1]
    mu = outcomes.mean()
    sigma = outcomes.std()
    shared = (outcomes - mu) / (sigma + ADVANTAGE_EPSILON)
    return np.tile(shared[:, None], (1, rewards.shape[1]))


# ---------------------------------------------------------------------------
# clipped surrogate with KL leash, analytic gradient
# ---------------------------------------------------------------------------

def _kl(p: np.ndarray, r: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(r[mask]))))


def surrogate(policy: ToyPolicy, old: ToyPolicy, ref: ToyPolicy,
              episodes: Sequence[Episode], advantages: np.ndarray,
              kl_weight: float = DEFAULT_KL_WEIGHT,
              clip_low: float = DEFAULT_CLIP_LOW,
              clip_high: float = DEFAULT_CLIP_HIGH,
              modules: Optional[Sequence[int]] = None
              ) -> tuple[float, np.ndarray]:
    """Objective value and its exact gradient with respect to the logits.

    Per module and group member, the policy-improvement term is
    ``min(rho * A, clip(rho, 1-clip_low, 1+clip_high) * A)`` with
    ``rho`` the probability ratio against ``old`` at the visited
    (context, action); each module also pays ``kl_weight`` times the KL
    divergence from ``ref`` at its visited context.  ``modules`` restricts
    the computation to a subset, which makes the per-module decomposition
    of the total gradient directly checkable.

    Gradient pieces, with ``p`` the current softmax at the visited context
    and ``T`` the temperature: the ratio derivative is
    ``rho * (onehot(a) - p) / T`` and the KL derivative is
    ``p * (log p - log r - KL) / T``.
    """
    G = len(episodes)
    if advantages.shape != (G, policy.logits.shape[0]):
        raise MagrpoError(
            f"advantages shape {advantages.shape} != ({G}, {policy.logits.shape[0]})"
        )
    module_ids = range(policy.logits.shape[0]) if modules is None else modules
    T = policy.temperature
    lo, hi = 1.0 - clip_low, 1.0 + clip_high

    value = 0.0
    grad = np.zeros_like(policy.logits)
    for m in module_ids:
        for g, ep in enumerate(episodes):
            c = int(ep.contexts[m])
            a = int(ep.actions[m])
            A = float(advantages[g, m])
            p = policy.probs(m, c)
            p_old = old.probs(m, c)
            rho = p[a] / p_old[a]
            unclipped = rho * A
            clipped = float(np.clip(rho, lo, hi)) * A
            value += min(unclipped, clipped) / G
            if unclipped <= clipped + 1e-12:
                onehot = np.zeros_like(p)
                onehot[a] = 1.0
                grad[m, c] += (A * rho / T) * (onehot - p) / G
            # else: the clipped branch is active and saturated, zero slope

            r = ref.probs(m, c)
            kl = _kl(p, r)
            value -= kl_weight * kl / G
            grad[m, c] -= kl_weight * (p * (np.log(p) - np.log(r) - kl) / T) / G
    return value, grad


def numeric_gradient(fn, policy: ToyPolicy, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of the logits."""
    base = policy.logits.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        for sign in (+1, -1):
            probe = base.copy()
            probe[idx] += sign * h
            val = fn(ToyPolicy(probe, policy.temperature))
            grad[idx] += sign * val
        grad[idx] /= 2 * h
        it.iternext()
    return grad


def decomposition_gap(policy: ToyPolicy, old: ToyPolicy, ref: ToyPolicy,
                      episodes: Sequence[Episode], advantages: np.ndarray,
                      kl_weight: float = DEFAULT_KL_WEIGHT,
                      clip_low: float = DEFAULT_CLIP_LOW,
                      clip_high: float = DEFAULT_CLIP_HIGH) -> float:
    """Max |grad(total) - sum_m grad(module m)| over all logit entries.

    The objective is a sum of per-module terms, so the full gradient must
    equal the sum of per-module gradients exactly; a nonzero gap means the
    modules are coupled somewhere they should not be.
    """
    _, full = surrogate(policy, old, ref, episodes, advantages,
                        kl_weight, clip_low, clip_high)
    total = np.zeros_like(full)
    for m in range(policy.logits.shape[0]):
        _, gm = surrogate(policy, old, ref, episodes, advantages,
                          kl_weight, clip_low, clip_high, modules=[m])
        total += gm
    return float(np.max(np.abs(full - total)))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationStats:
    iteration: int
    train_return: float
    val_return: float
    grad_norm: float
    kl_to_ref: float


@dataclass
class TrainResult:
    mode: str
    seed: int
    history: list[IterationStats] = field(default_factory=list)
    task: Optional["ToyTask"] = None
    final_policy: Optional["ToyPolicy"] = None

    def iterations_to(self, target_return: float) -> Optional[int]:
        """First iteration whose validation return reaches the target, 1-based."""
        for stats in self.history:
            if stats.val_return >= target_return:
                return stats.iteration
        return None

    def final_val_return(self) -> float:
        return self.history[-1].val_return if self.history else 0.0


def expected_return(policy: ToyPolicy, task: ToyTask) -> float:
    """Exact expected episode return, averaged over start contexts.

    Propagates the context distribution through the module chain in closed
    form, so the validation curve carries no sampling noise.
    """
    per_module = np.zeros(task.num_modules)
    for c0 in range(task.num_contexts):
        dist = np.zeros(task.num_contexts)
        dist[c0] = 1.0
        for m in range(task.num_modules):
            probs = np.stack([policy.probs(m, c) for c in range(task.num_contexts)])
            hit = sum(
                dist[c] * probs[c, task.targets[m, c]]
                for c in range(task.num_contexts)
            )
            per_module[m] += hit / task.num_contexts
            nxt = np.zeros_like(dist)
            for c in range(task.num_contexts):
                if dist[c] == 0.0:
                    continue
                for a in range(task.num_actions):
                    nxt[task.next_context(c, a)] += dist[c] * probs[c, a]
            dist = nxt
    return float(per_module.mean())


def greedy_return(policy: ToyPolicy, task: ToyTask) -> float:
    """Mean return of argmax actions over every start context."""
    total = 0.0
    for c0 in range(task.num_contexts):
        c = c0
        hits = 0.0
        for m in range(task.num_modules):
            a = int(np.argmax(policy.probs(m, c)))
            hits += task.module_reward(m, c, a)
            c = task.next_context(c, a)
        total += hits / task.num_modules
    return total / task.num_contexts


def mean_kl_to_ref(policy: ToyPolicy, ref: ToyPolicy) -> float:
    p = policy.all_probs()
    r = ref.all_probs()
    kl = np.sum(p * (np.log(p) - np.log(r)), axis=-1)
    return float(kl.mean())


def train_toy(mode: str, seed: int, task_seed: int = 0,
              iterations: int = 160, lr: float = 0.2,
              group_size: int = DEFAULT_GROUP_SIZE,
              kl_weight: float = DEFAULT_KL_WEIGHT,
              clip_low: float = DEFAULT_CLIP_LOW,
              clip_high: float = DEFAULT_CLIP_HIGH) -> TrainResult:
    """Optimize the toy pipeline from a uniform policy.

    One iteration samples a group per start context, computes advantages in
    the chosen mode, accumulates the exact surrogate gradient across
    contexts, and takes a single ascent step (so the ratio term is 1 at the
    point of differentiation; the clip only matters off-policy).  The
    reference policy for the KL leash is the uniform init.  The validation
    column is the exact expected return, so curve comparisons are free of
    evaluation noise.  Raises on non-finite gradients rather than training
    through a blowup.
    """
    if mode not in MODES:
        raise MagrpoError(f"mode must be one of {MODES}, got {mode!r}")
    if group_size < 2:
        raise MagrpoError(f"group size must be at least 2, got {group_size}")
    if kl_weight < 0:
        raise MagrpoError(f"KL weight must be non-negative, got {kl_weight}")
    if not (0 < clip_low < 1 and 0 < clip_high < 1):
        raise MagrpoError("clip bounds must lie strictly between 0 and 1")
    if iterations < 1:
        raise MagrpoError(f"iterations must be positive, got {iterations}")
    task = ToyTask.from_seed(task_seed)
    policy = ToyPolicy.uniform(task.num_modules, task.num_contexts, task.num_actions)
    ref = policy.copy()
    root = np.random.SeedSequence((seed, task_seed))
    iteration_seeds = root.spawn(iterations)

    result = TrainResult(mode=mode, seed=seed, task=task)
    for it in range(iterations):
        context_seeds = iteration_seeds[it].spawn(task.num_contexts)
        grad_total = np.zeros_like(policy.logits)
        returns = []
        old = policy.copy()
        for c0 in range(task.num_contexts):
            episodes = sample_group(policy, task, c0, group_size, context_seeds[c0])
            adv = group_advantages(episodes, mode)
            _, grad = surrogate(policy, old, ref, episodes, adv,
                                kl_weight, clip_low, clip_high)
            grad_total += grad
            returns.extend(e.ret for e in episodes)
        if not np.all(np.isfinite(grad_total)):
            raise MagrpoError(f"non-finite gradient at iteration {it + 1}")
        policy.logits = policy.logits + lr * grad_total
        result.history.append(
            IterationStats(
                iteration=it + 1,
                train_return=float(np.mean(returns)),
                val_return=expected_return(policy, task),
                grad_norm=float(np.linalg.norm(grad_total)),
                kl_to_ref=mean_kl_to_ref(policy, ref),
            )
        )
    result.final_policy = policy
    return result


CSV_HEADER = ["mode", "seed", "iteration", "train_return", "val_return",
              "grad_norm", "kl_to_ref"]


def write_training_csv(results: Sequence[TrainResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for res in results:
            for s in res.history:
                writer.writerow([
                    res.mode, res.seed, s.iteration,
                    f"{s.train_return:.6f}", f"{s.val_return:.6f}",
                    f"{s.grad_norm:.6g}", f"{s.kl_to_ref:.6g}",
                ])


def read_training_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise MagrpoError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)
