"""Discrete-event smart-city environment: three device classes feed sensor
readings and a task stream; the agent assigns each step's processing
capacity to one class (or splits it), trading completions against queue
wait and backlog.

All randomness comes from counter-based streams keyed by
(seed, episode, step, purpose), so event generation is a pure function of
the config: any episode can be replayed or resumed from its index alone.

State, action and reward definitions are artifact-specific (see README);
only the measurement axes (reward, completion time, response time, latency)
are meant to be comparable across models.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field


from .errors import ConfigError, UsageError
from .preproc import CATEGORICAL, CONTINUOUS, Observation, SensorSpec
from .rng import Rng

CLASSES = ("traffic", "environmental", "safety")
ACTIONS = ("traffic", "environmental", "safety", "balanced")
N_ACTIONS = len(ACTIONS)

ALERT_LEVELS = 3  # normal / elevated / high
_ALERT_TRANSITIONS = (
    (0.92, 0.07, 0.01),
    (0.25, 0.60, 0.15),
    (0.00, 0.45, 0.55),
)

_DAILY_AMPLITUDE = 0.5  # arrival modulation 1 + amp*sin(pi * step / T)
_QUEUE_OBS_MAX = 50.0  # queue-length sensor calibration ceiling

# modeled per-step processing latency (seconds)
_LATENCY_BASE = 0.005
_LATENCY_PER_EVENT = 0.001
_LATENCY_PER_PENDING = 0.0005

# memory variant: safety completions are worth more only when high alerts
# recurred recently, and less otherwise
_MEM_WINDOW = 8
_MEM_THRESHOLD = 3
_MEM_BONUS = 4.0
_MEM_PENALTY = 0.5
_MEM_URGENCY = 6.0  # safety backlog weight multiplier while the alert pattern is active


@dataclass(frozen=True)
class ScenarioConfig:
    n_traffic: int = 6
    n_environmental: int = 4
    n_safety: int = 2
    n_steps: int = 48
    seconds_per_step: float = 1800.0
    traffic_rate: float = 0.5  # task arrivals per device per step
    environmental_rate: float = 0.3
    safety_rate: float = 0.2
    capacity: int = 5
    completion_weight: float = 1.0
    latency_weight: float = 2e-4
    backlog_weight: float = 0.05
    memory_variant: bool = False
    seed: int = 0

    def __post_init__(self):
        problems = []
        counts = (self.n_traffic, self.n_environmental, self.n_safety)
        if min(counts) < 0 or sum(counts) < 1:
            problems.append("device counts must be >= 0 with at least one device")
        if self.n_steps < 1:
            problems.append("n_steps must be >= 1")
        if self.seconds_per_step <= 0:
            problems.append("seconds_per_step must be > 0")
        if min(self.traffic_rate, self.environmental_rate, self.safety_rate) < 0:
            problems.append("arrival rates must be >= 0")
        if self.capacity < 1:
            problems.append("capacity must be >= 1")
        if min(self.completion_weight, self.latency_weight, self.backlog_weight) < 0:
            problems.append("reward weights must be >= 0")
        peak = max(self._peak_rate(c) for c in CLASSES)
        if peak > 60.0:
            problems.append(
                f"peak per-class arrival rate {peak:.1f} exceeds the sampler limit (60)"
            )
        if problems:
            raise ConfigError("; ".join(problems))

    def class_count(self, cls: str) -> int:
        return {
            "traffic": self.n_traffic,
            "environmental": self.n_environmental,
            "safety": self.n_safety,
        }[cls]

    def class_rate(self, cls: str) -> float:
        return {
            "traffic": self.traffic_rate,
            "environmental": self.environmental_rate,
            "safety": self.safety_rate,
        }[cls]

    def _peak_rate(self, cls: str) -> float:
        return self.class_rate(cls) * self.class_count(cls) * (1.0 + _DAILY_AMPLITUDE)

    def max_arrivals_per_step(self, cls: str) -> int:
        """Clamp on each Poisson draw, making the reward bound computable."""
        return int(math.ceil(4.0 * self._peak_rate(cls))) + 4


def scale_devices(cfg: ScenarioConfig, total: int) -> ScenarioConfig:
    """Rescale class counts proportionally to a new total device count."""
    if total < 1:
        raise ConfigError(f"total device count must be >= 1, got {total}")
    base = [cfg.n_traffic, cfg.n_environmental, cfg.n_safety]
    base_total = sum(base)
    counts = [int(round(total * b / base_total)) for b in base]
    counts[0] += total - sum(counts)  # absorb rounding drift in the largest class
    return ScenarioConfig(
        n_traffic=counts[0],
        n_environmental=counts[1],
        n_safety=counts[2],
        n_steps=cfg.n_steps,
        seconds_per_step=cfg.seconds_per_step,
        traffic_rate=cfg.traffic_rate,
        environmental_rate=cfg.environmental_rate,
        safety_rate=cfg.safety_rate,
        capacity=cfg.capacity,
        completion_weight=cfg.completion_weight,
        latency_weight=cfg.latency_weight,
        backlog_weight=cfg.backlog_weight,
        memory_variant=cfg.memory_variant,
        seed=cfg.seed,
    )


def sensor_specs(cfg: ScenarioConfig) -> list[SensorSpec]:
    """Observation schema: per-device readings, then queue gauges, then clock."""
    specs = []
    for i in range(cfg.n_traffic):
        specs.append(SensorSpec(f"traffic_flow_{i}", CONTINUOUS, 0.0, 200.0))
    for i in range(cfg.n_environmental):
        specs.append(SensorSpec(f"env_quality_{i}", CONTINUOUS, 0.0, 500.0))
    for i in range(cfg.n_safety):
        specs.append(
            SensorSpec(f"safety_alert_{i}", CATEGORICAL, n_categories=ALERT_LEVELS)
        )
    for cls in CLASSES:
        specs.append(SensorSpec(f"queue_{cls}", CONTINUOUS, 0.0, _QUEUE_OBS_MAX))
    specs.append(SensorSpec("time_of_day", CONTINUOUS, 0.0, 1.0))
    return specs


@dataclass(frozen=True)
class SimEvent:
    timestamp: float
    seq: int
    kind: str  # reading | task-arrival | task-completion
    device_id: str
    payload: dict = field(default_factory=dict)


@dataclass
class StepInfo:
    completed: dict
    response_times: dict  # class -> mean this step, or None
    latency: float
    arrivals: dict
    queue_lengths: dict
    events_processed: int


@dataclass(frozen=True)
class EpisodeMetrics:
    total_reward: float
    n_steps: int
    tasks_arrived: int
    tasks_completed: int
    tasks_pending: int
    mean_completion_time: float | None
    p95_completion_time: float | None
    mean_response_time: dict  # class -> mean seconds or None
    mean_latency: float


def _modulation(step: int, n_steps: int) -> float:
    return 1.0 + _DAILY_AMPLITUDE * math.sin(math.pi * step / n_steps)


class Environment:
    """One agent-facing episode driver over the event simulation."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.specs = sensor_specs(cfg)
        self.episode = -1
        self._started = False
        self._reward_bound = self._compute_reward_bound()

    def _compute_reward_bound(self) -> float:
        cfg = self.cfg
        max_queue = cfg.n_steps * sum(
            cfg.max_arrivals_per_step(c) for c in CLASSES
        )
        horizon = cfg.n_steps * cfg.seconds_per_step
        bonus = _MEM_BONUS if cfg.memory_variant else 1.0
        urgency = _MEM_URGENCY if cfg.memory_variant else 1.0
        return (
            cfg.completion_weight * bonus * cfg.capacity
            + cfg.latency_weight * horizon
            + cfg.backlog_weight * urgency * max_queue
        )

    # -- episode lifecycle ---------------------------------------------------

    def reset(self, episode: int | None = None) -> Observation:
        self.episode = self.episode + 1 if episode is None else int(episode)
        self._rng = Rng(self.cfg.seed, "episode", self.episode)
        self.step_index = 0
        self.done = False
        self._started = True
        self._seq = 0
        self.queues = {c: [] for c in CLASSES}  # arrival timestamps, FIFO
        self.alert_levels = [0] * self.cfg.n_safety
        self.arrived = {c: 0 for c in CLASSES}
        self.completed = {c: 0 for c in CLASSES}
        self.completion_times: list[float] = []
        self.response_times = {c: [] for c in CLASSES}
        self.step_latencies: list[float] = []
        self.step_rewards: list[float] = []
        self.total_reward = 0.0
        self.events_log: list[SimEvent] = []
        self._high_alert_history: list[int] = []
        self._draw_readings(stage=0)
        return self._observe(time_of_day=0.0)

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _draw_readings(self, stage: int) -> None:
        """Refresh latest readings as of time stage * seconds_per_step."""
        cfg = self.cfg
        t = stage * cfg.seconds_per_step
        phase = math.pi * stage / cfg.n_steps
        day = 1.0 + _DAILY_AMPLITUDE * math.sin(phase)
        self.traffic_readings = []
        for i in range(cfg.n_traffic):
            r = self._rng.split("reading", "traffic", i, stage)
            flow = 100.0 * day * (1.0 + 0.3 * r.normal())
            self.traffic_readings.append(min(200.0, max(0.0, flow)))
            self._log_event(t, "reading", f"traffic-{i}", value=self.traffic_readings[-1])
        self.env_readings = []
        for i in range(cfg.n_environmental):
            r = self._rng.split("reading", "environmental", i, stage)
            q = 250.0 + 100.0 * math.sin(phase) + 40.0 * r.normal()
            self.env_readings.append(min(500.0, max(0.0, q)))
            self._log_event(t, "reading", f"env-{i}", value=self.env_readings[-1])
        any_high = 0
        for i in range(cfg.n_safety):
            r = self._rng.split("alert", i, stage)
            row = _ALERT_TRANSITIONS[self.alert_levels[i]]
            u = r.uniform()
            level = 0
            acc = 0.0
            for j, p in enumerate(row):
                acc += p
                if u < acc:
                    level = j
                    break
            else:
                level = ALERT_LEVELS - 1
            self.alert_levels[i] = level
            if level == ALERT_LEVELS - 1:
                any_high = 1
            self._log_event(t, "reading", f"safety-{i}", level=level)
        self._high_alert_history.append(any_high)

    def _log_event(self, t: float, kind: str, device_id: str, **payload) -> None:
        self.events_log.append(
            SimEvent(t, self._next_seq(), kind, device_id, payload)
        )

    def _observe(self, time_of_day: float) -> Observation:
        values = (
            list(self.traffic_readings)
            + list(self.env_readings)
            + list(self.alert_levels)
            + [float(len(self.queues[c])) for c in CLASSES]
            + [time_of_day]
        )
        t = time_of_day * self.cfg.n_steps * self.cfg.seconds_per_step
        return Observation(timestamp=t, values=tuple(values))

    def _memory_pattern_active(self) -> bool:
        recent = self._high_alert_history[-_MEM_WINDOW:]
        return sum(recent) >= _MEM_THRESHOLD

    # -- stepping ------------------------------------------------------------

    def step(self, action: int) -> tuple[Observation, float, bool, StepInfo]:
        if not self._started:
            raise UsageError("step before reset")
        if self.done:
            raise UsageError("step after episode end")
        if not 0 <= action < N_ACTIONS:
            raise UsageError(f"action {action} outside 0..{N_ACTIONS - 1}")
        cfg = self.cfg
        k = self.step_index
        t0 = k * cfg.seconds_per_step
        t1 = t0 + cfg.seconds_per_step
        pattern_active = cfg.memory_variant and self._memory_pattern_active()

        # generate this step's arrivals and deliver all events in time order
        pending_events = []
        for cls in CLASSES:
            lam = cfg.class_rate(cls) * cfg.class_count(cls) * _modulation(k, cfg.n_steps)
            r = self._rng.split("arrivals", cls, k)
            count = min(r.poisson(lam), cfg.max_arrivals_per_step(cls))
            for j in range(count):
                ts = t0 + r.uniform() * cfg.seconds_per_step
                heapq.heappush(
                    pending_events, (ts, self._next_seq(), cls, f"{cls}-task")
                )
        n_events = 0
        while pending_events:
            ts, seq, cls, device_id = heapq.heappop(pending_events)
            self.queues[cls].append(ts)
            self.arrived[cls] += 1
            self.events_log.append(
                SimEvent(ts, seq, "task-arrival", device_id, {"class": cls})
            )
            n_events += 1
        # queues stay sorted: old entries precede this step's, delivered in order

        # serve according to the chosen priority
        shares = self._allocate(action)
        completed = {c: 0 for c in CLASSES}
        step_responses = {c: [] for c in CLASSES}
        for cls in CLASSES:
            take = min(shares[cls], len(self.queues[cls]))
            for _ in range(take):
                arrival_ts = self.queues[cls].pop(0)
                wait = t1 - arrival_ts
                self.completion_times.append(wait)
                self.response_times[cls].append(wait)
                step_responses[cls].append(wait)
                self.completed[cls] += 1
                completed[cls] += 1
                self._log_event(t1, "task-completion", f"{cls}-worker", **{"class": cls, "wait": wait})
                n_events += 1

        # readings for the next observation
        self._draw_readings(stage=k + 1)
        n_events += cfg.n_traffic + cfg.n_environmental + cfg.n_safety

        backlog = sum(len(q) for q in self.queues.values())
        waits = [t1 - ts for q in self.queues.values() for ts in q]
        mean_wait = sum(waits) / len(waits) if waits else 0.0
        n_completed = sum(completed.values())
        completion_value = float(n_completed)
        backlog_value = float(backlog)
        if cfg.memory_variant:
            factor = _MEM_BONUS if pattern_active else _MEM_PENALTY
            completion_value += (factor - 1.0) * completed["safety"]
            if pattern_active:
                backlog_value += (_MEM_URGENCY - 1.0) * len(self.queues["safety"])
        reward = (
            cfg.completion_weight * completion_value
            - cfg.latency_weight * mean_wait
            - cfg.backlog_weight * backlog_value
        )
        assert abs(reward) <= self._reward_bound + 1e-9, "reward bound violated"

        latency = (
            _LATENCY_BASE
            + _LATENCY_PER_EVENT * n_events
            + _LATENCY_PER_PENDING * backlog
        )
        self.step_latencies.append(latency)
        self.step_rewards.append(reward)
        self.total_reward += reward

        self.step_index += 1
        self.done = self.step_index >= cfg.n_steps
        obs = self._observe(time_of_day=self.step_index / cfg.n_steps)
        info = StepInfo(
            completed=completed,
            response_times={
                c: (sum(v) / len(v) if v else None) for c, v in step_responses.items()
            },
            latency=latency,
            arrivals={c: self.arrived[c] for c in CLASSES},
            queue_lengths={c: len(self.queues[c]) for c in CLASSES},
            events_processed=n_events,
        )
        return obs, reward, self.done, info

    def _allocate(self, action: int) -> dict:
        cfg = self.cfg
        name = ACTIONS[action]
        if name != "balanced":
            return {c: (cfg.capacity if c == name else 0) for c in CLASSES}
        share, extra = divmod(cfg.capacity, len(CLASSES))
        out = {c: share for c in CLASSES}
        if extra:
            # remainder goes to the longest queue; ties to the first class
            longest = max(CLASSES, key=lambda c: (len(self.queues[c]), -CLASSES.index(c)))
            out[longest] += extra
        return out

    # -- reporting -----------------------------------------------------------

    def metrics(self) -> EpisodeMetrics:
        if not self._started or not self.done:
            raise UsageError("metrics: episode not finished")
        ct = sorted(self.completion_times)
        mean_ct = sum(ct) / len(ct) if ct else None
        p95 = ct[min(len(ct) - 1, int(math.ceil(0.95 * len(ct))) - 1)] if ct else None
        return EpisodeMetrics(
            total_reward=self.total_reward,
            n_steps=self.step_index,
            tasks_arrived=sum(self.arrived.values()),
            tasks_completed=sum(self.completed.values()),
            tasks_pending=sum(len(q) for q in self.queues.values()),
            mean_completion_time=mean_ct,
            p95_completion_time=p95,
            mean_response_time={
                c: (sum(v) / len(v) if v else None)
                for c, v in self.response_times.items()
            },
            mean_latency=(
                sum(self.step_latencies) / len(self.step_latencies)
                if self.step_latencies
                else 0.0
            ),
        )

    def write_trace(self, path) -> None:
        """Dump the episode's event log as JSON lines."""
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.events_log:
                fh.write(
                    json.dumps(
                        {
                            "timestamp": ev.timestamp,
                            "seq": ev.seq,
                            "kind": ev.kind,
                            "device_id": ev.device_id,
                            "payload": ev.payload,
                        },
                        sort_keys=True,
                    )
                )
                fh.write("\n")


def env_new(cfg: ScenarioConfig) -> Environment:
    return Environment(cfg)
