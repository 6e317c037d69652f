"""Command-line experiment runner.

Subcommands:

* ``privacy-table`` -- epsilon-vs-rounds CSV for (population, sample, noise) rows
* ``synthesize``    -- generate a user-sharded JSONL dataset plus manifest
* ``train``         -- run federated training, emit metrics/checkpoints/privacy report
* ``compare``       -- align the accuracy curves of two or more finished runs

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .accountant import (
    DEFAULT_CHECKPOINTS,
    MomentsAccountant,
    build_privacy_table,
    epsilon_for,
)
from .data import TokenDataset, load_jsonl, save_jsonl, synthesize_dataset
from .errors import ConfigError
from .estimators import EstimatorKind
from .fedtrain import (
    Algorithm,
    RoundLog,
    TrainingConfig,
    run_training,
    smoothed_accuracy,
)
from .models import builtin_models
from .paramvec import ClipConfig, ClipMode, ParamVector


@dataclass
class ExperimentConfig:
    """Everything a run needs; archived as JSON beside its outputs."""

    # data source: a JSONL path, or synthesis parameters
    data_path: str | None = None
    synth_users: int = 1000
    tokens_per_user: int = 1600
    vocab_size: int = 100
    heterogeneity: float = 0.3
    unroll: int = 10
    eval_users: int = 100
    eval_data_path: str | None = None
    # model
    model: str = "bigram_softmax"
    hidden: int = 16
    # training
    rounds: int = 500
    q: float | None = 0.05
    fixed_sample_size: int | None = None
    example_cap: float = 1600.0
    z: float = 1.0
    noise_enabled: bool = False
    estimator: str = "fixed"
    w_min_fraction: float = 0.9
    clip_mode: str = "flat"
    S: float = math.inf
    algorithm: str = "fedavg"
    local_epochs: int = 1
    batch_size: int | None = 8
    learning_rate: float = 1.0
    seed: int = 0
    delta: float = 1e-9
    eval_every: int = 20
    eval_smoothing: int = 5
    greedy_clip: bool = True
    workers: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    # privacy reporting for a declared (deployment-scale) population
    declared_users: float | None = None
    declared_sample: float | None = None
    preset: str | None = None

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def training_config(self, num_layers: int) -> TrainingConfig:
        if self.clip_mode == "flat":
            clip = ClipConfig.flat(self.S)
        elif self.clip_mode == "per_layer":
            if not math.isfinite(self.S):
                raise ConfigError("per-layer clipping needs a finite S")
            clip = ClipConfig.per_layer_split(self.S, num_layers)
        else:
            raise ConfigError(f"clip_mode must be flat or per_layer, got {self.clip_mode!r}")
        try:
            estimator = EstimatorKind(self.estimator)
        except ValueError:
            raise ConfigError(f"estimator must be fixed or clipped, got {self.estimator!r}")
        try:
            algorithm = Algorithm(self.algorithm)
        except ValueError:
            raise ConfigError(f"algorithm must be fedavg or fedsgd, got {self.algorithm!r}")
        return TrainingConfig(
            rounds=self.rounds,
            q=self.q,
            fixed_sample_size=self.fixed_sample_size,
            example_cap=self.example_cap,
            z=self.z,
            noise_enabled=self.noise_enabled,
            estimator=estimator,
            w_min_fraction=self.w_min_fraction,
            clip=clip,
            algorithm=algorithm,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            delta=self.delta,
            eval_every=self.eval_every,
            eval_smoothing=self.eval_smoothing,
            greedy_clip=self.greedy_clip,
            workers=self.workers,
        )


# Experiment presets following the build-up: sampling -> estimator ->
# clipping -> noise, plus the headline private configuration.
PRESETS: dict[str, dict] = {
    "baseline": {
        "fixed_sample_size": 50,
        "estimator": "clipped",  # equals the true average on fixed samples
        "S": math.inf,
        "noise_enabled": False,
    },
    "sampling": {
        "q": 0.05,
        "estimator": "clipped",
        "S": math.inf,
        "noise_enabled": False,
    },
    "estimator": {
        "q": 0.05,
        "estimator": "fixed",
        "S": math.inf,
        "noise_enabled": False,
    },
    "clipping": {
        "q": 0.05,
        "estimator": "fixed",
        "S": 15.0,
        "noise_enabled": False,
    },
    "dp": {
        "q": 0.05,
        "estimator": "fixed",
        "S": 15.0,
        "z": 1.0,
        "noise_enabled": True,
    },
    # Headline configuration: desk-scale training at the same q and z as a
    # 763,430-user deployment sampling 5000 users per round.
    "table2-row": {
        "q": 5000 / 763430,
        "z": 1.0,
        "S": 15.0,
        "estimator": "fixed",
        "noise_enabled": True,
        "rounds": 5000,
        "declared_users": 763430,
        "declared_sample": 5000,
        "delta": 1e-9,
    },
}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def _write_csv(path_or_stdout, fieldnames, rows) -> None:
    if path_or_stdout is None:
        writer = csv.writer(sys.stdout)
        writer.writerow(fieldnames)
        writer.writerows(rows)
    else:
        with open(path_or_stdout, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(fieldnames)
            writer.writerows(rows)


# -- privacy-table -----------------------------------------------------------

_TABLE_DEFAULT_ROWS = (
    (1e5, 1e2, 1.0),
    (1e6, 1e1, 1.0),
    (1e6, 1e3, 1.0),
    (1e6, 1e4, 1.0),
    (1e6, 1e3, 3.0),
    (1e9, 1e3, 1.0),
)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad numeric list {text!r}: {exc}")


def cmd_privacy_table(args) -> int:
    if args.users is None and args.samples is None and args.noise is None:
        rows = _TABLE_DEFAULT_ROWS
        Ks, Cs, zs = zip(*rows)
    else:
        if args.users is None or args.samples is None or args.noise is None:
            raise ConfigError("--users, --samples and --noise must be given together")
        Ks = _parse_floats(args.users)
        Cs = _parse_floats(args.samples)
        zs = _parse_floats(args.noise)
    checkpoints = (
        [int(x) for x in _parse_floats(args.checkpoints)]
        if args.checkpoints
        else list(DEFAULT_CHECKPOINTS)
    )
    records = build_privacy_table(Ks, Cs, zs, checkpoints)
    rows = [
        (
            _fmt(r["K"]),
            _fmt(r["C_tilde"]),
            _fmt(r["z"]),
            r["rounds"],
            _fmt(r["delta"]),
            f"{r['epsilon']:.6g}",
        )
        for r in records
    ]
    _write_csv(args.out, ("K", "C_tilde", "z", "rounds", "delta", "epsilon"), rows)
    return 0


# -- synthesize --------------------------------------------------------------


def cmd_synthesize(args) -> int:
    dataset = synthesize_dataset(
        num_users=args.users,
        tokens_per_user=args.tokens_per_user,
        vocab_size=args.vocab,
        heterogeneity=args.heterogeneity,
        seed=args.seed,
        unroll=args.unroll,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_jsonl(dataset, out)
    manifest = {
        "users": dataset.num_users,
        "tokens_per_user": args.tokens_per_user,
        "token_count": sum(s.num_tokens for s in dataset.users),
        "vocab_size": dataset.vocab_size,
        "unroll": dataset.unroll,
        "heterogeneity": args.heterogeneity,
        "seed": args.seed,
        "dpfed_version": __version__,
    }
    manifest_path = out.with_suffix(out.suffix + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {dataset.num_users} users to {out} (manifest: {manifest_path})")
    return 0


# -- train -------------------------------------------------------------------


def _merge_config(args) -> ExperimentConfig:
    """Layer the effective config: defaults < preset < config file < flags."""
    data: dict = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}"
            )
        data.update(PRESETS[args.preset])
        data["preset"] = args.preset
    if args.config:
        try:
            file_data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}")
        if not isinstance(file_data, dict):
            raise ConfigError("config file must contain a JSON object")
        data.update(file_data)
    overrides = {
        name: getattr(args, name)
        for name in (
            "data_path",
            "synth_users",
            "tokens_per_user",
            "vocab_size",
            "heterogeneity",
            "unroll",
            "eval_users",
            "eval_data_path",
            "model",
            "hidden",
            "rounds",
            "q",
            "fixed_sample_size",
            "example_cap",
            "z",
            "estimator",
            "w_min_fraction",
            "clip_mode",
            "S",
            "algorithm",
            "local_epochs",
            "batch_size",
            "learning_rate",
            "seed",
            "delta",
            "eval_every",
            "eval_smoothing",
            "workers",
            "checkpoint_every",
            "declared_users",
            "declared_sample",
        )
        if getattr(args, name, None) is not None
    }
    if args.noise is not None:
        overrides["noise_enabled"] = args.noise
    if args.greedy_clip is not None:
        overrides["greedy_clip"] = args.greedy_clip
    if (
        "learning_rate" in overrides
        and "S" not in overrides
        and math.isfinite(data.get("S", math.inf))
    ):
        print(
            "warning: learning rate changed without revisiting the clip bound S; "
            "clip choices are learning-rate dependent",
            file=sys.stderr,
        )
    data.update(overrides)
    # a fixed sample size without an explicit q means q = size/K at run time,
    # not the default Bernoulli rate
    if data.get("fixed_sample_size") is not None and "q" not in data:
        data["q"] = None
    return ExperimentConfig.from_dict(data)


def _load_or_synthesize(cfg: ExperimentConfig) -> tuple[TokenDataset, tuple]:
    if cfg.data_path:
        dataset = load_jsonl(cfg.data_path, cfg.vocab_size, cfg.unroll)
    else:
        dataset = synthesize_dataset(
            cfg.synth_users,
            cfg.tokens_per_user,
            cfg.vocab_size,
            cfg.heterogeneity,
            cfg.seed,
            unroll=cfg.unroll,
            stream="train",
        )
    if cfg.eval_data_path:
        eval_ds = load_jsonl(cfg.eval_data_path, cfg.vocab_size, cfg.unroll)
    elif cfg.data_path:
        # no generating process to draw from: fall back to a training-set slice
        eval_ds = TokenDataset(
            dataset.users[: min(cfg.eval_users, dataset.num_users)],
            cfg.vocab_size,
            cfg.unroll,
        )
    else:
        eval_ds = synthesize_dataset(
            cfg.eval_users,
            cfg.tokens_per_user,
            cfg.vocab_size,
            cfg.heterogeneity,
            cfg.seed,
            unroll=cfg.unroll,
            stream="eval",
        )
    return dataset, eval_ds.all_windows()


def _checkpoint_obj(round_idx: int, params: ParamVector, acc: MomentsAccountant) -> dict:
    return {
        "round": round_idx,
        "params": params.to_json_obj(),
        "accountant": acc.state_dict(),
        "dpfed_version": __version__,
    }


def cmd_train(args) -> int:
    cfg = _merge_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())

    dataset, eval_set = _load_or_synthesize(cfg)
    models = builtin_models(cfg.vocab_size, cfg.hidden)
    if cfg.model not in models:
        raise ConfigError(f"unknown model {cfg.model!r}; available: {sorted(models)}")
    model = models[cfg.model]
    tcfg = cfg.training_config(num_layers=len(model.layer_dims))

    start_round = 0
    init_params = None
    accountant = None
    if args.resume:
        ckpt = json.loads(Path(args.resume).read_text())
        start_round = int(ckpt["round"])
        init_params = ParamVector.from_json_obj(ckpt["params"])
        accountant = MomentsAccountant.from_state_dict(ckpt["accountant"])
        if start_round >= cfg.rounds:
            raise ConfigError(
                f"checkpoint is at round {start_round}, nothing left of {cfg.rounds}"
            )
        tcfg.rounds = cfg.rounds - start_round

    metrics_csv = open(out_dir / "metrics.csv", "w", newline="", encoding="utf-8")
    metrics_jsonl = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    writer = csv.writer(metrics_csv)
    writer.writerow(RoundLog.CSV_FIELDS)

    def on_round(log: RoundLog, params: ParamVector, acc: MomentsAccountant) -> None:
        writer.writerow([_fmt(getattr(log, f)) for f in RoundLog.CSV_FIELDS])
        metrics_jsonl.write(json.dumps(dataclasses.asdict(log)) + "\n")
        done = log.round + 1
        if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.rounds:
            path = out_dir / f"checkpoint_{done:06d}.json"
            path.write_text(json.dumps(_checkpoint_obj(done, params, acc)))

    try:
        result = run_training(
            tcfg,
            dataset,
            model,
            eval_set=eval_set,
            start_round=start_round,
            init_params=init_params,
            accountant=accountant,
            round_callback=on_round,
        )
    finally:
        metrics_csv.close()
        metrics_jsonl.close()

    (out_dir / "checkpoint_final.json").write_text(
        json.dumps(_checkpoint_obj(cfg.rounds, result.params, result.accountant))
    )

    q_actual = tcfg.sampling_probability(dataset.num_users)
    try:
        final_acc = smoothed_accuracy(result.round_logs, cfg.eval_smoothing)
    except ConfigError:
        final_acc = None
    report = {
        "sigma": result.round_logs[-1].sigma if result.round_logs else None,
        "S": cfg.S,
        "users": dataset.num_users,
        "expected_sample": q_actual * dataset.num_users,
        "q": q_actual,
        "z": cfg.z,
        "rounds": cfg.rounds,
        "delta": cfg.delta,
        "epsilon": result.final_epsilon,
        "accuracy_top1_smoothed": final_acc,
        "declared": None,
    }
    if cfg.declared_users:
        if not cfg.declared_sample:
            raise ConfigError("declared_users needs declared_sample")
        q_declared = cfg.declared_sample / cfg.declared_users
        report["declared"] = {
            "users": cfg.declared_users,
            "expected_sample": cfg.declared_sample,
            "q": q_declared,
            "z": cfg.z,
            "rounds": cfg.rounds,
            "delta": cfg.delta,
            "epsilon": epsilon_for(q_declared, cfg.z, cfg.rounds, cfg.delta)
            if cfg.noise_enabled
            else math.inf,
        }
    (out_dir / "privacy.json").write_text(
        json.dumps(report, indent=2, sort_keys=True, default=str)
    )
    manifest = {
        "dpfed_version": __version__,
        "seed": cfg.seed,
        "preset": cfg.preset,
        "argv_out": str(out_dir),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    eps_text = "inf" if math.isinf(result.final_epsilon) else f"{result.final_epsilon:.4g}"
    acc_text = "n/a" if final_acc is None else f"{final_acc:.4f}"
    print(
        f"finished {cfg.rounds} rounds: epsilon={eps_text} at delta={cfg.delta}, "
        f"smoothed accuracy_top1={acc_text} -> {out_dir}"
    )
    return 0


# -- compare -----------------------------------------------------------------


def _read_accuracy_curve(run_dir: Path) -> dict[int, float]:
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise ConfigError(f"{run_dir} has no metrics.csv")
    curve: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["accuracy_top1"]:
                curve[int(row["round"])] = float(row["accuracy_top1"])
    if not curve:
        raise ConfigError(f"{run_dir} recorded no evaluations")
    return curve


def cmd_compare(args) -> int:
    run_dirs = [Path(d) for d in args.runs]
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    curves = [_read_accuracy_curve(d) for d in run_dirs]
    rounds = sorted(curves[0])
    for d, c in zip(run_dirs[1:], curves[1:]):
        if sorted(c) != rounds:
            raise ConfigError(
                f"evaluation cadence mismatch: {run_dirs[0]} evaluated at "
                f"{len(rounds)} rounds, {d} at {len(c)}"
            )
    names = [d.name or str(d) for d in run_dirs]
    header = ["round"] + [f"acc_{n}" for n in names] + [
        f"delta_{n}" for n in names[1:]
    ]
    rows = []
    for r in rounds:
        base = curves[0][r]
        row = [r] + [_fmt(c[r]) for c in curves] + [
            _fmt(c[r] - base) for c in curves[1:]
        ]
        rows.append(row)
    _write_csv(args.out, header, rows)

    window = args.smoothing
    final = [float(np.mean([c[r] for r in rounds[-window:]])) for c in curves]
    worst = max(abs(f - final[0]) for f in final[1:])
    print(
        f"final smoothed accuracy: "
        + ", ".join(f"{n}={f:.4f}" for n, f in zip(names, final))
        + f"; max |delta| vs {names[0]}: {worst:.4f}",
        file=sys.stderr,
    )
    if args.max_final_delta is not None and worst > args.max_final_delta:
        print(
            f"error: final accuracy delta {worst:.4f} exceeds "
            f"--max-final-delta {args.max_final_delta}",
            file=sys.stderr,
        )
        return 2
    return 0


# -- parser ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are configuration errors: exit 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpfed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dpfed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("privacy-table", help="epsilon table for (K, C, z) rows")
    p.add_argument("--users", help="comma list of population sizes K")
    p.add_argument("--samples", help="comma list of expected samples per round C")
    p.add_argument("--noise", help="comma list of noise scales z")
    p.add_argument("--checkpoints", help="comma list of round counts")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(func=cmd_privacy_table)

    p = sub.add_parser("synthesize", help="generate a JSONL dataset")
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--tokens-per-user", type=int, default=1600)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--heterogeneity", type=float, default=0.3)
    p.add_argument("--unroll", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", help="run a federated training experiment")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--preset", help=f"one of {sorted(PRESETS)}")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint JSON to resume from")
    p.add_argument("--data-path", dest="data_path")
    p.add_argument("--eval-data", dest="eval_data_path")
    p.add_argument("--synth-users", dest="synth_users", type=int)
    p.add_argument("--tokens-per-user", dest="tokens_per_user", type=int)
    p.add_argument("--vocab", dest="vocab_size", type=int)
    p.add_argument("--heterogeneity", type=float)
    p.add_argument("--unroll", type=int)
    p.add_argument("--eval-users", dest="eval_users", type=int)
    p.add_argument("--model", choices=("bigram_softmax", "tiny_rnn"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--fixed-sample-size", dest="fixed_sample_size", type=int)
    p.add_argument("--example-cap", dest="example_cap", type=float)
    p.add_argument("--z", type=float)
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--estimator", choices=("fixed", "clipped"))
    p.add_argument("--w-min-fraction", dest="w_min_fraction", type=float)
    p.add_argument("--clip-mode", dest="clip_mode", choices=("flat", "per_layer"))
    p.add_argument("--S", type=float, help="clip bound (inf disables clipping)")
    p.add_argument("--algorithm", choices=("fedavg", "fedsgd"))
    p.add_argument("--local-epochs", dest="local_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-smoothing", dest="eval_smoothing", type=int)
    p.add_argument("--greedy-clip", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--declared-users", dest="declared_users", type=float)
    p.add_argument("--declared-sample", dest="declared_sample", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="align accuracy curves of finished runs")
    p.add_argument("runs", nargs="+", help="run directories (>= 2)")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--smoothing", type=int, default=5)
    p.add_argument(
        "--max-final-delta",
        type=float,
        help="fail (exit 2) if the final smoothed accuracy differs by more",
    )
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 -- CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
