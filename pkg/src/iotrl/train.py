"""Outer training loop: rollout collection, advantage estimation, joint
encoder+policy updates, per-episode metrics, and checkpointing.

Three model variants share the loop:
  transformer-ppo  windowed encoder state, clipped-surrogate updates
  mlp-ppo          latest observation row fed straight to the trunk
  transformer-pg   same encoder, one-epoch unclipped policy gradient

All per-episode randomness (environment events, action sampling, minibatch
shuffling, dropout masks) is derived from (seed, episode or update index),
so a checkpoint at an episode boundary plus the episode counter reproduces
the continuation bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from itertools import count

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .citysim import N_ACTIONS, Environment, EpisodeMetrics, ScenarioConfig, env_new, sensor_specs
from .encoder import EncoderConfig, EncoderParams, encode, encode_batch, init_encoder_params
from .errors import ConfigError
from .ppo import (
    PPOConfig,
    PolicyValueParams,
    RolloutBuffer,
    Transition,
    gae_advantages,
    init_policy_params,
    pg_loss,
    policy_forward,
    ppo_loss,
    sample_action,
    update,
)
from .preproc import ObservationWindow, encode_observation, feature_width, push_window
from .rng import Rng

VARIANTS = ("transformer-ppo", "mlp-ppo", "transformer-pg")


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 200
    steps_per_update: int = 0  # 0 means one episode per update
    eval_interval: int = 0  # 0 disables greedy evaluation episodes
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    checkpoint_path: str = ""
    seed: int = 1
    variant: str = "transformer-ppo"
    hidden: int = 64  # trunk width of the policy/value heads
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def __post_init__(self):
        problems = []
        if self.n_episodes < 1:
            problems.append("n_episodes must be >= 1")
        if self.steps_per_update < 0:
            problems.append("steps_per_update must be >= 0")
        if self.variant not in VARIANTS:
            problems.append(f"variant '{self.variant}' not in {VARIANTS}")
        if self.hidden < 1:
            problems.append("hidden must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


def config_fingerprint(cfg: TrainConfig) -> str:
    """Stable digest of everything that shapes the numerical trajectory."""
    payload = {
        "n_episodes": cfg.n_episodes,
        "steps_per_update": cfg.steps_per_update,
        "seed": cfg.seed,
        "variant": cfg.variant,
        "hidden": cfg.hidden,
        "encoder": vars(cfg.encoder).copy(),
        "ppo": vars(cfg.ppo).copy(),
        "scenario": vars(cfg.scenario).copy(),
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Model:
    variant: str
    d_state: int
    policy: PolicyValueParams
    enc_cfg: EncoderConfig | None = None
    enc_params: EncoderParams | None = None
    params: dict[str, Tensor] = field(default_factory=dict)

    def state_tensor(self, window: ObservationWindow) -> Tensor:
        """State for one stored window, on whatever graph is active."""
        if self.variant == "mlp-ppo":
            return Tensor(window.rows[window.n_valid - 1])
        return encode(window, self.enc_params, self.enc_cfg)

    def batch_states(
        self, windows: list[ObservationWindow], dropout_rng: Rng | None = None
    ) -> Tensor:
        if self.variant == "mlp-ppo":
            return Tensor(np.stack([w.rows[w.n_valid - 1] for w in windows]))
        return encode_batch(
            windows, self.enc_params, self.enc_cfg, dropout_rng=dropout_rng
        )


def build_model(cfg: TrainConfig) -> Model:
    f = feature_width(sensor_specs(cfg.scenario))
    rng = Rng(cfg.seed, "init")
    if cfg.variant == "mlp-ppo":
        policy = init_policy_params(f, cfg.hidden, N_ACTIONS, rng.split("policy"))
        return Model(cfg.variant, f, policy, params=policy.named())
    enc_cfg = replace(cfg.encoder, n_features=f)
    enc_params = init_encoder_params(enc_cfg, rng.split("encoder"))
    policy = init_policy_params(
        enc_cfg.d_model, cfg.hidden, N_ACTIONS, rng.split("policy")
    )
    params = {**enc_params.named(), **policy.named()}
    return Model(cfg.variant, enc_cfg.d_model, policy, enc_cfg, enc_params, params)


@dataclass
class RolloutCursor:
    """Where collection stands between updates."""

    episode: int
    needs_reset: bool = True
    window: ObservationWindow | None = None
    act_rng: Rng | None = None
    episode_reward: float = 0.0


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    total_reward: float
    metrics: EpisodeMetrics


def _fresh_window(env: Environment, cfg: TrainConfig) -> ObservationWindow:
    return ObservationWindow(cfg.encoder.window, feature_width(env.specs))


def collect_rollout(
    env: Environment,
    model: Model,
    cfg: TrainConfig,
    cursor: RolloutCursor,
    steps: int,
    stop_after_episode: int | None = None,
) -> tuple[RolloutBuffer, float, list[EpisodeRecord]]:
    """Advance the environment ``steps`` steps, recording transitions.

    Returns the buffer, the bootstrap value for the truncated tail (0 when
    the last step ended an episode) and records for episodes finished here.
    """
    buffer = RolloutBuffer()
    finished: list[EpisodeRecord] = []
    value = 0.0
    done = False
    for _ in range(steps):
        if cursor.needs_reset:
            obs = env.reset(cursor.episode)
            cursor.window = push_window(
                _fresh_window(env, cfg), encode_observation(obs, env.specs)
            )
            cursor.act_rng = Rng(cfg.seed, "act", cursor.episode)
            cursor.episode_reward = 0.0
            cursor.needs_reset = False
        state_window = cursor.window
        logits, value = policy_forward(model.state_tensor(state_window), model.policy)
        action, log_prob = sample_action(logits, cursor.act_rng)
        obs, reward, done, _info = env.step(action)
        cursor.window = push_window(cursor.window, encode_observation(obs, env.specs))
        cursor.episode_reward += reward
        buffer.add(Transition(state_window, action, reward, done, log_prob, value))
        if done:
            finished.append(
                EpisodeRecord(cursor.episode, cursor.episode_reward, env.metrics())
            )
            cursor.episode += 1
            cursor.needs_reset = True
            if stop_after_episode is not None and len(finished) >= stop_after_episode:
                break
    if done:
        return buffer, 0.0, finished
    _, tail_value = policy_forward(model.state_tensor(cursor.window), model.policy)
    return buffer, tail_value, finished


def _loss_and_epochs(cfg: TrainConfig):
    if cfg.variant == "transformer-pg":
        return pg_loss, 1
    return ppo_loss, None  # None: use cfg.ppo.epochs


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(
    path: str,
    model: Model,
    optim: Adam,
    episodes_done: int,
    updates_done: int,
    fingerprint: str,
) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    arrays.update(optim.state_arrays())
    ad.save_archive(path, arrays)
    sidecar = {
        "episodes_done": episodes_done,
        "updates_done": updates_done,
        "adam_steps": optim.step_count,
        "fingerprint": fingerprint,
        "variant": model.variant,
    }
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path: str, model: Model, optim: Adam, fingerprint: str) -> tuple[int, int]:
    with open(path + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    if sidecar["fingerprint"] != fingerprint:
        raise ConfigError(
            f"checkpoint {path} was written under a different configuration"
        )
    arrays = ad.load_archive(path)
    for name, p in model.params.items():
        p.data = np.ascontiguousarray(arrays[name])
    optim.load_state_arrays(arrays, sidecar["adam_steps"])
    return sidecar["episodes_done"], sidecar["updates_done"]


# -- the outer loop ----------------------------------------------------------


@dataclass
class TrainResult:
    records: list[EpisodeRecord]
    eval_rewards: list[tuple[int, float]]
    model: Model
    duration_seconds: float
    update_stats: list = field(default_factory=list)


def run_eval_episode(env: Environment, model: Model, cfg: TrainConfig, tag: int) -> float:
    """Greedy episode on a stream disjoint from training episodes."""
    obs = env.reset(1_000_000 + tag)
    window = push_window(_fresh_window(env, cfg), encode_observation(obs, env.specs))
    total = 0.0
    done = False
    while not done:
        logits, _ = policy_forward(model.state_tensor(window), model.policy)
        action = int(np.argmax(logits.data.ravel()))
        obs, reward, done, _ = env.step(action)
        window = push_window(window, encode_observation(obs, env.specs))
        total += reward
    return total


def train_loop(cfg: TrainConfig, resume_from: str = "") -> TrainResult:
    """Run the full training procedure for one (variant, seed) cell."""
    t_start = time.monotonic()
    scenario = replace(cfg.scenario, seed=cfg.scenario.seed or cfg.seed)
    env = env_new(scenario)
    model = build_model(replace(cfg, scenario=scenario))
    optim = Adam(model.params, lr=cfg.ppo.learning_rate)
    fingerprint = config_fingerprint(replace(cfg, scenario=scenario))
    loss_fn, epochs = _loss_and_epochs(cfg)

    episodes_done = 0
    updates_done = 0
    if resume_from:
        episodes_done, updates_done = load_checkpoint(
            resume_from, model, optim, fingerprint
        )

    records: list[EpisodeRecord] = []
    eval_rewards: list[tuple[int, float]] = []
    update_stats: list = []
    cursor = RolloutCursor(episode=episodes_done)
    per_episode_updates = cfg.steps_per_update == 0
    while episodes_done < cfg.n_episodes:
        steps = cfg.steps_per_update or scenario.n_steps
        buffer, bootstrap, finished = collect_rollout(
            env, model, cfg, cursor, steps,
            stop_after_episode=1 if per_episode_updates
            else cfg.n_episodes - episodes_done,
        )
        gae_advantages(buffer, bootstrap, cfg.ppo)
        windows = [t.window for t in buffer.transitions]
        update_rng = Rng(cfg.seed, "update", updates_done)
        use_dropout = model.enc_cfg is not None and model.enc_cfg.dropout > 0.0
        minibatch_no = count()

        def state_fn(idx):
            drng = (
                update_rng.split("dropout", next(minibatch_no))
                if use_dropout else None
            )
            return model.batch_states([windows[i] for i in idx], dropout_rng=drng)

        stats = update(
            buffer,
            model.params,
            model.policy,
            cfg.ppo,
            optim,
            update_rng,
            state_fn,
            loss_fn=loss_fn,
            epochs=epochs,
        )
        update_stats.append(stats)
        updates_done += 1
        for rec in finished:
            # per-episode accounting must agree exactly with the env's own sum
            assert rec.total_reward == rec.metrics.total_reward
            records.append(rec)
            episodes_done += 1
        if finished and cfg.eval_interval and episodes_done % cfg.eval_interval == 0:
            eval_rewards.append(
                (episodes_done, run_eval_episode(env, model, cfg, episodes_done))
            )
            cursor.needs_reset = True  # eval reused the env; restart the episode
        if (
            finished
            and cfg.checkpoint_path
            and cfg.checkpoint_interval
            and episodes_done % cfg.checkpoint_interval == 0
            and cursor.needs_reset
        ):
            save_checkpoint(
                cfg.checkpoint_path, model, optim,
                episodes_done, updates_done, fingerprint,
            )
    if cfg.checkpoint_path and not cfg.checkpoint_interval:
        save_checkpoint(
            cfg.checkpoint_path, model, optim, episodes_done, updates_done, fingerprint
        )
    return TrainResult(
        records=records,
        eval_rewards=eval_rewards,
        model=model,
        duration_seconds=time.monotonic() - t_start,
        update_stats=update_stats,
    )


def baseline_mlp(cfg: TrainConfig, resume_from: str = "") -> TrainResult:
    return train_loop(replace(cfg, variant="mlp-ppo"), resume_from)


def baseline_transformer_pg(cfg: TrainConfig, resume_from: str = "") -> TrainResult:
    return train_loop(replace(cfg, variant="transformer-pg"), resume_from)
