"""Command-line entry point: train | bench | sweep-latency | gradcheck.

All outputs are UTF-8 CSV with LF line endings, written under --out. Every
command is bit-deterministic for a fixed config and seed; wall-clock timing
is reported only in the JSON summaries so the CSVs stay byte-reproducible.
"""

from __future__ import annotations

import argparse
import csv
import json
import statistics
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .citysim import ACTIONS, env_new, scale_devices
from .config import (
    ExperimentConfig,
    apply_overrides,
    load_config,
    serialize_config,
    with_seed,
)
from .encoder import EncoderConfig, encode_rows, init_encoder_params
from .errors import ConfigError, UsageError
from .ppo import Minibatch, PPOConfig, init_policy_params, ppo_loss
from .rng import Rng
from .train import VARIANTS, TrainResult, train_loop

CSV_COLUMNS = [
    "run_id",
    "model",
    "seed",
    "episode",
    "total_reward",
    "mean_completion_time",
    "resp_traffic",
    "resp_environmental",
    "resp_safety",
    "mean_latency",
]


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    model: str
    seed: int
    episode: int
    total_reward: float
    mean_completion_time: float | None
    resp_traffic: float | None
    resp_environmental: float | None
    resp_safety: float | None
    mean_latency: float
    wall_clock_seconds: float  # per-run duration; kept out of the CSVs


def metrics_records(model: str, seed: int, result: TrainResult) -> list[MetricsRecord]:
    run_id = f"{model}-s{seed}"
    rows = []
    for rec in result.records:
        m = rec.metrics
        resp = m.mean_response_time
        rows.append(
            MetricsRecord(
                run_id=run_id,
                model=model,
                seed=seed,
                episode=rec.episode,
                total_reward=rec.total_reward,
                mean_completion_time=m.mean_completion_time,
                resp_traffic=resp["traffic"],
                resp_environmental=resp["environmental"],
                resp_safety=resp["safety"],
                mean_latency=m.mean_latency,
                wall_clock_seconds=result.duration_seconds,
            )
        )
    return rows


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt_cell(row[c]) for c in columns])


def write_metrics_csv(path: Path, records: list[MetricsRecord]) -> None:
    rows = [{c: getattr(r, c) for c in CSV_COLUMNS} for r in records]
    write_csv(path, CSV_COLUMNS, rows)


def summarize_bench(records: list[MetricsRecord], last_k: int = 20) -> list[dict]:
    """Per-model medians across runs: final-window reward, completion, latency."""
    by_model: dict[str, dict[str, list[MetricsRecord]]] = {}
    for r in records:
        by_model.setdefault(r.model, {}).setdefault(r.run_id, []).append(r)
    out = []
    for model in sorted(by_model):
        runs = by_model[model]
        final_rewards = []
        completions = []
        latencies = []
        for run_records in runs.values():
            tail = sorted(run_records, key=lambda r: r.episode)[-last_k:]
            final_rewards.append(
                statistics.fmean(r.total_reward for r in tail)
            )
            ct = [
                r.mean_completion_time
                for r in run_records
                if r.mean_completion_time is not None
            ]
            if ct:
                completions.append(statistics.fmean(ct))
            latencies.append(statistics.fmean(r.mean_latency for r in run_records))
        out.append(
            {
                "model": model,
                "n_runs": len(runs),
                "median_final_reward": statistics.median(final_rewards),
                "median_completion_time": (
                    statistics.median(completions) if completions else None
                ),
                "median_latency": statistics.median(latencies),
            }
        )
    return out


# -- gradcheck suite ---------------------------------------------------------


def _rand(rng: Rng, *shape: int) -> np.ndarray:
    out = np.empty(shape)
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = rng.uniform(-1.0, 1.0)
    return out


def run_gradcheck_suite(seed: int = 7) -> list[tuple[str, float]]:
    """One (name, max relative error) entry per checked operation."""
    rng = Rng(seed, "gradcheck")
    a34 = _rand(rng.split("a"), 3, 4)
    b43 = _rand(rng.split("b"), 4, 3)
    c34 = _rand(rng.split("c"), 3, 4) + 2.5  # keep log and clip interior happy
    row4 = _rand(rng.split("r"), 4)

    checks: list[tuple[str, float]] = []

    def check(name: str, f, x) -> None:
        checks.append((name, ad.gradcheck(f, Tensor(x))))

    check("matmul", lambda x: ad.sum_all(ad.matmul(x, Tensor(b43))), a34)
    check("add", lambda x: ad.sum_all(ad.mul(ad.add(x, Tensor(a34)), Tensor(b43.T))), a34)
    check("sub", lambda x: ad.sum_all(ad.mul(ad.sub(x, Tensor(a34)), Tensor(b43.T))), c34)
    check("mul", lambda x: ad.sum_all(ad.mul(x, Tensor(b43.T))), a34)
    check("scale", lambda x: ad.sum_all(ad.scale(x, -1.7)), a34)
    check("add_row", lambda x: ad.sum_all(ad.exp(ad.add_row(x, Tensor(row4)))), a34)
    check("relu", lambda x: ad.sum_all(ad.relu(x)), c34)
    check("tanh", lambda x: ad.sum_all(ad.tanh(x)), a34)
    check("exp", lambda x: ad.sum_all(ad.exp(x)), a34)
    check("log", lambda x: ad.sum_all(ad.log(x)), c34)
    check("sum", lambda x: ad.sum_all(ad.mul(x, x)), a34)
    check("mean", lambda x: ad.mean_all(ad.mul(x, x)), a34)
    check("rowsum", lambda x: ad.sum_all(ad.exp(ad.rowsum(x))), a34)
    check("softmax", lambda x: ad.sum_all(ad.mul(ad.softmax(x), Tensor(b43.T))), a34)
    check(
        "log_softmax",
        lambda x: ad.sum_all(ad.mul(ad.log_softmax(x), Tensor(b43.T))),
        a34,
    )
    check(
        "layer_norm",
        lambda x: ad.sum_all(
            ad.mul(ad.layer_norm(x, Tensor(row4), Tensor(row4)), Tensor(b43.T))
        ),
        a34,
    )
    check("transpose", lambda x: ad.sum_all(ad.exp(ad.transpose(x))), a34)
    check("reshape", lambda x: ad.sum_all(ad.exp(ad.reshape(x, (4, 3)))), a34)
    check("slice_cols", lambda x: ad.sum_all(ad.exp(ad.slice_cols(x, 1, 3))), a34)
    check(
        "concat_cols",
        lambda x: ad.sum_all(ad.exp(ad.concat_cols([x, Tensor(a34)]))),
        c34,
    )
    check(
        "concat_rows",
        lambda x: ad.sum_all(ad.exp(ad.concat_rows([x, Tensor(a34)]))),
        c34,
    )
    check("minimum", lambda x: ad.sum_all(ad.minimum(x, Tensor(a34))), c34)
    check("clip", lambda x: ad.sum_all(ad.clip(x, -0.9, 0.9)), a34 * 0.5)

    # composite micro-graphs
    check(
        "composite/softmax-square",
        lambda x: ad.sum_all(ad.mul(ad.softmax(x), ad.softmax(x))),
        a34,
    )
    check(
        "composite/norm-tanh-mean",
        lambda x: ad.mean_all(ad.tanh(ad.layer_norm(x, Tensor(row4), Tensor(row4)))),
        a34,
    )
    check(
        "composite/affine-relu-logsoftmax",
        lambda x: ad.sum_all(
            ad.mul(
                ad.log_softmax(ad.relu(ad.matmul(x, Tensor(b43)))),
                Tensor(b43[:3, :].T @ b43[:3, :]),
            )
        ),
        a34,
    )

    # full encoder, tiny config, probed at the input and at two parameters.
    # The pooled output is contracted with a fixed random vector: summing a
    # layer-normed row directly is identically ~0 (zero mean), which would
    # leave nothing but round-off for finite differences to see.
    enc_cfg = EncoderConfig(d_model=8, n_heads=2, n_layers=2, d_ff=12, window=4, n_features=3)
    enc = init_encoder_params(enc_cfg, Rng(seed, "enc"))
    window_rows = _rand(rng.split("win"), 4, 3) * 0.5 + 0.5
    n_valid = 3
    readout = Tensor(_rand(rng.split("readout"), 1, enc_cfg.d_model))

    def _pooled_scalar(x: Tensor, params) -> Tensor:
        pooled = encode_rows(x, n_valid, params, enc_cfg)
        return ad.sum_all(ad.mul(pooled, readout))

    check("encoder/input", lambda x: _pooled_scalar(x, enc), window_rows)

    def enc_wrt_embed(p: Tensor) -> Tensor:
        return _pooled_scalar(Tensor(window_rows), replace(enc, embed_w=p))

    check("encoder/embed_w", enc_wrt_embed, enc.embed_w.data)

    def enc_wrt_wq(p: Tensor) -> Tensor:
        layer0 = replace(enc.layers[0], wq=p)
        return _pooled_scalar(
            Tensor(window_rows), replace(enc, layers=[layer0] + enc.layers[1:])
        )

    check("encoder/layer0.wq", enc_wrt_wq, enc.layers[0].wq.data)

    # ppo loss, probed at the state batch and at the first trunk matrix
    pol = init_policy_params(6, 8, 3, Rng(seed, "pol"))
    ppo_cfg = PPOConfig(minibatch_size=5)
    states = _rand(rng.split("states"), 5, 6)
    actions = np.array([rng.split("acts").randint(3) for _ in range(5)])
    old_logp = _rand(rng.split("logp"), 5) - 1.5
    advs = _rand(rng.split("advs"), 5)
    rets = _rand(rng.split("rets"), 5)

    def loss_of_states(x: Tensor) -> Tensor:
        mb = Minibatch(x, actions, old_logp, advs, rets)
        return ppo_loss(mb, pol, ppo_cfg)[0]

    check("ppo_loss/states", loss_of_states, states)

    def loss_of_w1(p: Tensor) -> Tensor:
        probed = replace(pol, w1=p)
        mb = Minibatch(Tensor(states), actions, old_logp, advs, rets)
        return ppo_loss(mb, probed, ppo_cfg)[0]

    check("ppo_loss/w1", loss_of_w1, pol.w1.data)

    return checks


# -- commands ----------------------------------------------------------------


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.override:
        cfg = apply_overrides(cfg, args.override)
    return cfg


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _outdir(args)
    tcfg = cfg.train
    if tcfg.checkpoint_path and not Path(tcfg.checkpoint_path).is_absolute():
        tcfg = replace(tcfg, checkpoint_path=str(out / tcfg.checkpoint_path))
    result = train_loop(tcfg, resume_from=args.resume)
    records = metrics_records(tcfg.variant, tcfg.seed, result)
    write_metrics_csv(out / "train_metrics.csv", records)
    (out / "config.resolved.cfg").write_text(serialize_config(cfg), encoding="utf-8")
    tail = [r.total_reward for r in records[-20:]]
    summary = {
        "run_id": f"{tcfg.variant}-s{tcfg.seed}",
        "episodes": len(records),
        "mean_reward_last20": statistics.fmean(tail) if tail else None,
        "eval_rewards": result.eval_rewards,
        "duration_seconds": result.duration_seconds,
    }
    with open(out / "train_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return 0


def cmd_bench(args) -> int:
    cfg = _load(args)
    out = _outdir(args)
    all_records: list[MetricsRecord] = []
    durations = {}
    for variant in VARIANTS:
        for seed in cfg.bench_seeds:
            cell = with_seed(cfg, seed)
            tcfg = replace(cell.train, variant=variant, checkpoint_path="")
            result = train_loop(tcfg)
            recs = metrics_records(variant, seed, result)
            all_records.extend(recs)
            durations[f"{variant}-s{seed}"] = result.duration_seconds
    write_metrics_csv(out / "bench_metrics.csv", all_records)
    fig1 = [
        {c: getattr(r, c) for c in ("run_id", "model", "seed", "episode", "total_reward")}
        for r in all_records
    ]
    write_csv(out / "fig1_reward.csv",
              ["run_id", "model", "seed", "episode", "total_reward"], fig1)
    fig2 = [
        {
            c: getattr(r, c)
            for c in ("run_id", "model", "seed", "episode", "mean_completion_time")
        }
        for r in all_records
    ]
    write_csv(out / "fig2_completion.csv",
              ["run_id", "model", "seed", "episode", "mean_completion_time"], fig2)
    fig3_cols = ["run_id", "model", "seed", "episode",
                 "resp_traffic", "resp_environmental", "resp_safety"]
    fig3 = [{c: getattr(r, c) for c in fig3_cols} for r in all_records]
    write_csv(out / "fig3_response.csv", fig3_cols, fig3)
    summary_rows = summarize_bench(all_records)
    write_csv(
        out / "bench_summary.csv",
        ["model", "n_runs", "median_final_reward",
         "median_completion_time", "median_latency"],
        summary_rows,
    )
    with open(out / "bench_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"durations_seconds": durations}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return 0


def cmd_sweep_latency(args) -> int:
    cfg = _load(args)
    out = _outdir(args)
    counts = (
        tuple(int(x) for x in args.counts.split(","))
        if args.counts
        else cfg.sweep_device_counts
    )
    if any(c < 1 for c in counts) or list(counts) != sorted(set(counts)):
        raise UsageError(f"device counts must be positive and ascending: {counts}")
    balanced = ACTIONS.index("balanced")
    rows = []
    for count in counts:
        scenario = scale_devices(cfg.train.scenario, count)
        scenario = replace(scenario, seed=scenario.seed or cfg.train.seed)
        env = env_new(scenario)
        latencies = []
        for episode in range(cfg.sweep_episodes_per_count):
            env.reset(episode)
            done = False
            while not done:
                _obs, _reward, done, _info = env.step(balanced)
            latencies.append(env.metrics().mean_latency)
        rows.append(
            {
                "device_count": count,
                "mean_latency": statistics.fmean(latencies),
                "std_latency": statistics.pstdev(latencies),
            }
        )
    write_csv(out / "fig4_latency.csv",
              ["device_count", "mean_latency", "std_latency"], rows)
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.monotonic()
    checks = run_gradcheck_suite()
    worst = 0.0
    for name, err in checks:
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:32s} max_rel_err={err:.3e}  {status}")
        worst = max(worst, err)
    print(f"{len(checks)} checks, worst {worst:.3e}, {time.monotonic() - t0:.1f}s")
    return 0 if worst < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iotrl",
        description="Train and benchmark transformer-encoded PPO agents on a "
        "deterministic smart-city IoT simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default="", help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="run seed (u64)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="config override; repeatable",
        )

    p_train = sub.add_parser("train", help="run one training cell")
    common(p_train)
    p_train.add_argument("--resume", default="", help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_bench = sub.add_parser("bench", help="three-model comparison over seeds")
    common(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_sweep = sub.add_parser("sweep-latency", help="latency vs device count")
    common(p_sweep)
    p_sweep.add_argument(
        "--counts", default="", help="comma-separated ascending device totals"
    )
    p_sweep.set_defaults(func=cmd_sweep_latency)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
