"""Flat experiment configuration: one `section.key = value` per line.

Every key is declared in the registry below with its type; unknown keys are
rejected with the file name and line number. serialize() emits every key in
registry order with lossless value formatting, so parse(serialize(c)) == c
holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .citysim import ScenarioConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .ppo import PPOConfig
from .train import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    bench_seeds: tuple = (1, 2, 3, 4, 5)
    sweep_device_counts: tuple = (10, 20, 50, 100)
    sweep_episodes_per_count: int = 3


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: '{s}'")


def _parse_int_list(s: str) -> tuple:
    items = [part.strip() for part in s.split(",") if part.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(int(part) for part in items)


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _fmt_int_list(v) -> str:
    return ",".join(str(int(x)) for x in v)


def _fmt_plain(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


# full key -> (parse, format); registry order is the canonical file order
_REGISTRY = {
    "scenario.n_traffic": (int, _fmt_plain),
    "scenario.n_environmental": (int, _fmt_plain),
    "scenario.n_safety": (int, _fmt_plain),
    "scenario.n_steps": (int, _fmt_plain),
    "scenario.seconds_per_step": (float, _fmt_plain),
    "scenario.traffic_rate": (float, _fmt_plain),
    "scenario.environmental_rate": (float, _fmt_plain),
    "scenario.safety_rate": (float, _fmt_plain),
    "scenario.capacity": (int, _fmt_plain),
    "scenario.completion_weight": (float, _fmt_plain),
    "scenario.latency_weight": (float, _fmt_plain),
    "scenario.backlog_weight": (float, _fmt_plain),
    "scenario.memory_variant": (_parse_bool, _fmt_bool),
    "scenario.seed": (int, _fmt_plain),
    "encoder.d_model": (int, _fmt_plain),
    "encoder.n_heads": (int, _fmt_plain),
    "encoder.n_layers": (int, _fmt_plain),
    "encoder.d_ff": (int, _fmt_plain),
    "encoder.window": (int, _fmt_plain),
    "encoder.dropout": (float, _fmt_plain),
    "ppo.clip_eps": (float, _fmt_plain),
    "ppo.gamma": (float, _fmt_plain),
    "ppo.lam": (float, _fmt_plain),
    "ppo.epochs": (int, _fmt_plain),
    "ppo.minibatch_size": (int, _fmt_plain),
    "ppo.value_coef": (float, _fmt_plain),
    "ppo.entropy_coef": (float, _fmt_plain),
    "ppo.max_grad_norm": (float, _fmt_plain),
    "ppo.learning_rate": (float, _fmt_plain),
    "ppo.normalize_advantages": (_parse_bool, _fmt_bool),
    "train.n_episodes": (int, _fmt_plain),
    "train.steps_per_update": (int, _fmt_plain),
    "train.eval_interval": (int, _fmt_plain),
    "train.checkpoint_interval": (int, _fmt_plain),
    "train.checkpoint_path": (str.strip, str),
    "train.seed": (int, _fmt_plain),
    "train.variant": (str.strip, str),
    "train.hidden": (int, _fmt_plain),
    "bench.seeds": (_parse_int_list, _fmt_int_list),
    "sweep.device_counts": (_parse_int_list, _fmt_int_list),
    "sweep.episodes_per_count": (int, _fmt_plain),
}

# encoder.n_features is deliberately absent: it is derived from the scenario's
# sensor schema at model build time.


def _flatten(cfg: ExperimentConfig) -> dict:
    t = cfg.train
    flat = {}
    for key in _REGISTRY:
        section, name = key.split(".", 1)
        if section == "scenario":
            flat[key] = getattr(t.scenario, name)
        elif section == "encoder":
            flat[key] = getattr(t.encoder, name)
        elif section == "ppo":
            flat[key] = getattr(t.ppo, name)
        elif section == "train":
            flat[key] = getattr(t, name)
        elif key == "bench.seeds":
            flat[key] = cfg.bench_seeds
        elif key == "sweep.device_counts":
            flat[key] = cfg.sweep_device_counts
        elif key == "sweep.episodes_per_count":
            flat[key] = cfg.sweep_episodes_per_count
    return flat


def _assemble(flat: dict) -> ExperimentConfig:
    def section(prefix: str) -> dict:
        return {
            key.split(".", 1)[1]: value
            for key, value in flat.items()
            if key.startswith(prefix + ".")
        }

    try:
        scenario = ScenarioConfig(**section("scenario"))
        enc = EncoderConfig(**section("encoder"))
        ppo = PPOConfig(**section("ppo"))
        train = TrainConfig(
            encoder=enc, ppo=ppo, scenario=scenario, **section("train")
        )
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return ExperimentConfig(
        train=train,
        bench_seeds=flat["bench.seeds"],
        sweep_device_counts=flat["sweep.device_counts"],
        sweep_episodes_per_count=flat["sweep.episodes_per_count"],
    )


def _set_key(flat: dict, key: str, raw: str, where: str) -> None:
    if key not in _REGISTRY:
        raise ConfigError(f"{where}: unknown key '{key}'")
    parse, _fmt = _REGISTRY[key]
    try:
        flat[key] = parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for '{key}': {exc}") from exc


def parse_config(text: str, filename: str = "<config>") -> ExperimentConfig:
    flat = _flatten(ExperimentConfig())
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{filename}:{lineno}: expected 'section.key = value', got '{stripped}'"
            )
        key, _, raw = stripped.partition("=")
        _set_key(flat, key.strip(), raw, f"{filename}:{lineno}")
    return _assemble(flat)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file '{path}': {exc}") from exc
    return parse_config(text, filename=path)


def serialize_config(cfg: ExperimentConfig) -> str:
    flat = _flatten(cfg)
    lines = []
    last_section = None
    for key in _REGISTRY:
        section = key.split(".", 1)[0]
        if section != last_section:
            if last_section is not None:
                lines.append("")
            last_section = section
        _parse, fmt = _REGISTRY[key]
        lines.append(f"{key} = {fmt(flat[key])}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply repeated `--override section.key=value` pairs."""
    flat = _flatten(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, _, raw = item.partition("=")
        _set_key(flat, key.strip(), raw, f"override '{item}'")
    return _assemble(flat)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Point both the trainer and the environment at one run seed."""
    train = replace(
        cfg.train,
        seed=seed,
        scenario=replace(cfg.train.scenario, seed=seed),
    )
    return replace(cfg, train=train)
