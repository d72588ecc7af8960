"""PPO actor-critic over encoded states: categorical policy, value head,
GAE, clipped surrogate loss, and the minibatched update loop.

The update is generic over how states are produced: callers pass a
``state_fn`` that maps transition indices to a state matrix under the active
graph, so encoder parameters receive gradients through the states while the
single-row baseline can feed raw features with the exact same loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Graph, Tensor, backward, clip_grad_norm
from .errors import ConfigError, UsageError
from .preproc import ObservationWindow
from .rng import Rng


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    learning_rate: float = 3e-4
    normalize_advantages: bool = True

    def __post_init__(self):
        problems = []
        if not 0.0 < self.clip_eps < 1.0:
            problems.append(f"clip_eps={self.clip_eps} outside (0,1)")
        if not 0.0 <= self.gamma <= 1.0:
            problems.append(f"gamma={self.gamma} outside [0,1]")
        if not 0.0 <= self.lam <= 1.0:
            problems.append(f"lam={self.lam} outside [0,1]")
        if self.epochs < 1 or self.minibatch_size < 1:
            problems.append("epochs and minibatch_size must be >= 1")
        if self.learning_rate < 0.0:
            problems.append("learning_rate must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class PolicyValueParams:
    """Two-hidden-layer tanh trunk with separate policy and value heads."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w_pi: Tensor
    b_pi: Tensor
    w_v: Tensor
    b_v: Tensor

    def named(self, prefix: str = "pi") -> dict[str, Tensor]:
        return {
            f"{prefix}.{name}": getattr(self, name)
            for name in ("w1", "b1", "w2", "b2", "w_pi", "b_pi", "w_v", "b_v")
        }

    @property
    def n_actions(self) -> int:
        return self.w_pi.shape[1]


def init_policy_params(
    d_in: int, hidden: int, n_actions: int, rng: Rng
) -> PolicyValueParams:
    if n_actions < 2:
        raise ConfigError(f"need >= 2 actions, got {n_actions}")

    def mat(r: Rng, rows: int, cols: int) -> Tensor:
        bound = 1.0 / np.sqrt(rows)
        data = np.empty((rows, cols))
        for i in range(rows):
            for j in range(cols):
                data[i, j] = r.uniform(-bound, bound)
        return Tensor(data, requires_grad=True)

    def zeros(n: int) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    return PolicyValueParams(
        w1=mat(rng.split("w1"), d_in, hidden),
        b1=zeros(hidden),
        w2=mat(rng.split("w2"), hidden, hidden),
        b2=zeros(hidden),
        w_pi=mat(rng.split("w_pi"), hidden, n_actions),
        b_pi=zeros(n_actions),
        w_v=mat(rng.split("w_v"), hidden, 1),
        b_v=zeros(1),
    )


def _trunk(s: Tensor, params: PolicyValueParams) -> Tensor:
    h = ad.tanh(ad.add_row(ad.matmul(s, params.w1), params.b1))
    return ad.tanh(ad.add_row(ad.matmul(h, params.w2), params.b2))


def policy_forward_batch(
    s: Tensor, params: PolicyValueParams
) -> tuple[Tensor, Tensor]:
    """Batch of states (B x d) -> (logits B x |A|, values B x 1)."""
    h = _trunk(s, params)
    logits = ad.add_row(ad.matmul(h, params.w_pi), params.b_pi)
    values = ad.add_row(ad.matmul(h, params.w_v), params.b_v)
    return logits, values


def policy_forward(s: Tensor, params: PolicyValueParams) -> tuple[Tensor, float]:
    """Single state vector -> (logits as a flat tensor, value estimate)."""
    s2 = ad.reshape(s, (1, s.shape[0]))
    logits, values = policy_forward_batch(s2, params)
    return ad.reshape(logits, (params.n_actions,)), float(values.data[0, 0])


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def sample_action(logits: Tensor, rng: Rng) -> tuple[int, float]:
    """Draw from Categorical(softmax(logits)) by inverse CDF."""
    logp = _log_softmax_np(logits.data.ravel())
    cdf = np.cumsum(np.exp(logp))
    u = rng.uniform() * cdf[-1]  # guard the tail against rounding
    action = int(np.searchsorted(cdf, u, side="right"))
    action = min(action, len(logp) - 1)
    return action, float(logp[action])


def greedy_action(logits: Tensor) -> int:
    return int(np.argmax(logits.data.ravel()))


@dataclass
class Transition:
    window: ObservationWindow
    action: int
    reward: float
    done: bool
    log_prob: float
    value: float


class RolloutBuffer:
    """On-policy store for exactly one update cycle."""

    def __init__(self):
        self.transitions: list[Transition] = []
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.transitions)

    def add(self, t: Transition) -> None:
        self.transitions.append(t)

    def clear(self) -> None:
        self.transitions = []
        self.advantages = None
        self.returns = None

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions])

    def values(self) -> np.ndarray:
        return np.array([t.value for t in self.transitions])

    def dones(self) -> np.ndarray:
        return np.array([float(t.done) for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions], dtype=np.int64)

    def log_probs(self) -> np.ndarray:
        return np.array([t.log_prob for t in self.transitions])


def gae_advantages(
    buffer: RolloutBuffer, bootstrap_value: float, cfg: PPOConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Backward GAE(gamma, lam) recursion over the buffer, unnormalized.

    done at step t cuts both the bootstrap and the recursive tail, so the
    estimator never leaks across episode boundaries. Results are also stored
    on the buffer.
    """
    n = len(buffer)
    if n == 0:
        raise UsageError("gae_advantages: empty buffer")
    rewards = buffer.rewards()
    values = buffer.values()
    dones = buffer.dones()
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + cfg.gamma * next_value * nonterminal - values[t]
        last = delta + cfg.gamma * cfg.lam * nonterminal * last
        adv[t] = last
    returns = adv + values
    buffer.advantages = adv
    buffer.returns = returns
    return adv, returns


@dataclass
class Minibatch:
    states: Tensor  # B x d, graph-connected when encoder grads are wanted
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def _onehot_actions(actions: np.ndarray, n_actions: int) -> Tensor:
    m = np.zeros((len(actions), n_actions))
    m[np.arange(len(actions)), actions] = 1.0
    return Tensor(m)


def _policy_terms(mb: Minibatch, params: PolicyValueParams):
    logits, values = policy_forward_batch(mb.states, params)
    logp_all = ad.log_softmax(logits)
    picked = _onehot_actions(mb.actions, params.n_actions)
    logp = ad.rowsum(ad.mul(logp_all, picked))
    probs = ad.softmax(logits)
    entropy = ad.scale(ad.mean_all(ad.rowsum(ad.mul(probs, logp_all))), -1.0)
    vdiff = ad.sub(values, Tensor(mb.returns.reshape(-1, 1)))
    value_loss = ad.mean_all(ad.mul(vdiff, vdiff))
    return logp, value_loss, entropy


def ppo_loss(
    mb: Minibatch, params: PolicyValueParams, cfg: PPOConfig
) -> tuple[Tensor, dict]:
    """Clipped-surrogate loss.  Minimizing it maximizes the PPO objective.

    loss = -mean min(r*A, clip(r, 1-eps, 1+eps)*A)
           + value_coef * mean (V - returns)^2
           - entropy_coef * mean entropy
    """
    if len(mb.actions) == 0:
        raise UsageError("ppo_loss: empty minibatch")
    logp, value_loss, entropy = _policy_terms(mb, params)
    ratio = ad.exp(ad.sub(logp, Tensor(mb.old_log_probs.reshape(-1, 1))))
    adv = Tensor(mb.advantages.reshape(-1, 1))
    clipped = ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surrogate = ad.mean_all(ad.minimum(ad.mul(ratio, adv), ad.mul(clipped, adv)))
    loss = ad.add(
        ad.scale(surrogate, -1.0),
        ad.sub(
            ad.scale(value_loss, cfg.value_coef),
            ad.scale(entropy, cfg.entropy_coef),
        ),
    )
    clip_frac = float(np.mean(np.abs(ratio.data.ravel() - 1.0) > cfg.clip_eps))
    aux = {
        "surrogate": float(surrogate.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": clip_frac,
    }
    return loss, aux


def pg_loss(
    mb: Minibatch, params: PolicyValueParams, cfg: PPOConfig
) -> tuple[Tensor, dict]:
    """Unclipped policy-gradient loss: -mean(log pi(a|s) * A) + aux terms."""
    if len(mb.actions) == 0:
        raise UsageError("pg_loss: empty minibatch")
    logp, value_loss, entropy = _policy_terms(mb, params)
    adv = Tensor(mb.advantages.reshape(-1, 1))
    score = ad.mean_all(ad.mul(logp, adv))
    loss = ad.add(
        ad.scale(score, -1.0),
        ad.sub(
            ad.scale(value_loss, cfg.value_coef),
            ad.scale(entropy, cfg.entropy_coef),
        ),
    )
    aux = {
        "surrogate": float(score.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": 0.0,
    }
    return loss, aux


@dataclass(frozen=True)
class UpdateStats:
    n_samples: int
    n_minibatches: int
    loss: float
    surrogate: float
    value_loss: float
    entropy: float
    clip_fraction: float
    grad_norm: float


def update(
    buffer: RolloutBuffer,
    params: dict[str, Tensor],
    policy: PolicyValueParams,
    cfg: PPOConfig,
    optim: Adam,
    rng: Rng,
    state_fn,
    loss_fn=ppo_loss,
    epochs: int | None = None,
) -> UpdateStats:
    """Run the minibatched optimization over one rollout, then clear it.

    ``params`` is the full named collection the optimizer owns (policy plus
    any encoder parameters); ``state_fn(indices) -> Tensor`` must build the
    state matrix for those transitions under the caller-active graph.
    """
    n = len(buffer)
    if n == 0:
        raise UsageError("update: empty buffer")
    if buffer.advantages is None or buffer.returns is None:
        raise UsageError("update: advantages not computed; call gae_advantages first")

    adv = buffer.advantages.copy()
    if cfg.normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    actions = buffer.actions()
    old_logp = buffer.log_probs()
    returns = buffer.returns.copy()

    n_epochs = cfg.epochs if epochs is None else epochs
    order = np.arange(n)
    acc = {"loss": 0.0, "surrogate": 0.0, "value_loss": 0.0,
           "entropy": 0.0, "clip_fraction": 0.0, "grad_norm": 0.0}
    n_mb = 0
    for _ in range(n_epochs):
        rng.shuffle(order)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            with Graph() as g:
                states = state_fn(idx)
                mb = Minibatch(
                    states=states,
                    actions=actions[idx],
                    old_log_probs=old_logp[idx],
                    advantages=adv[idx],
                    returns=returns[idx],
                )
                loss, aux = loss_fn(mb, policy, cfg)
            backward(g, loss)
            grad_norm = clip_grad_norm(params, cfg.max_grad_norm)
            optim.step()
            n_mb += 1
            acc["loss"] += float(loss.data)
            acc["grad_norm"] += grad_norm
            for k in ("surrogate", "value_loss", "entropy", "clip_fraction"):
                acc[k] += aux[k]
    buffer.clear()
    return UpdateStats(
        n_samples=n,
        n_minibatches=n_mb,
        loss=acc["loss"] / n_mb,
        surrogate=acc["surrogate"] / n_mb,
        value_loss=acc["value_loss"] / n_mb,
        entropy=acc["entropy"] / n_mb,
        clip_fraction=acc["clip_fraction"] / n_mb,
        grad_norm=acc["grad_norm"] / n_mb,
    )


def estimate_objective(episode_rewards) -> float:
    """Monte Carlo estimate of the expected episode return."""
    episodes = [np.asarray(e, dtype=np.float64) for e in episode_rewards]
    if not episodes:
        raise UsageError("estimate_objective: need at least one episode")
    return float(np.mean([e.sum() for e in episodes]))
