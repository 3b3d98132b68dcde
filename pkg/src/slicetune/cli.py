"""Command-line entry points for the file-based experiment pipeline."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .agent import DEFAULT_RETRIES, DEFAULT_WINDOW, load_trajectory, persist_trajectory, run_trajectory
from .errors import CapabilityError, ConfigError, SliceTuneError, TrajectoryAborted
from .jsonl import atomic_write_text
from .kto import KtoConfig, export_dataset
from .metrics import UtilityWeights, WindowMetrics, aggregate_window, step_metrics, write_metrics
from .policy import LlmEndpointConfig, LlmEndpointPolicy, Policy, ScriptedPolicy, ToySoftmaxPolicy
from .reflector import (
    LlmReflector, LlmReflectorConfig, OracleParams, load_labeled, persist_labeled, reflect_trajectory,
)
from .rfr import export_iteration_dataset, run_rfr
from .sim import SimConfig, dump_scenario, init_env, load_scenario

log = logging.getLogger("slicetune")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
TABLE_COLUMNS = ("policy", "seed", "Avg. SE", "Reconf. Times", "PQoS vio.", "Utility")


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class PolicySpec:
    """Which actor to build: ``hold``, ``constant:N``, ``cycle:A,B,..``, ``toy[:FILE]`` or ``llm``."""

    kind: str
    value: Optional[int] = None
    values: tuple[int, ...] = ()
    path: Optional[str] = None
    act_temperature: Optional[float] = None
    endpoint: Optional[LlmEndpointConfig] = None

    @classmethod
    def parse(cls, text: str, endpoint: Optional[LlmEndpointConfig] = None) -> "PolicySpec":
        kind, _, arg = text.partition(":")
        try:
            if kind == "hold" and not arg:
                return cls("hold")
            if kind == "constant":
                return cls("constant", value=int(arg))
            if kind == "cycle":
                vals = tuple(int(v) for v in arg.split(","))
                if not vals:
                    raise ValueError
                return cls("cycle", values=vals)
        except ValueError:
            raise ConfigError(f"bad policy argument in {text!r}") from None
        if kind == "toy":
            if arg and not Path(arg).is_file():
                raise ConfigError(f"policy file not found: {arg}")
            return cls("toy", path=arg or None)
        if kind == "llm" and not arg:
            if endpoint is None:
                raise ConfigError("llm policy needs --base-url and --model")
            return cls("llm", endpoint=endpoint)
        raise ConfigError(f"unknown policy {text!r}")

    def build(self, config: SimConfig, seed: int) -> Policy:
        """Fresh actor for one run; toy streams are reset to ``seed``."""
        if self.kind == "hold":
            return ScriptedPolicy("hold")
        if self.kind == "constant":
            return ScriptedPolicy("constant", value=self.value)
        if self.kind == "cycle":
            return ScriptedPolicy("cycle", values=self.values)
        if self.kind == "llm":
            return LlmEndpointPolicy(self.endpoint)
        if self.path:
            pol = ToySoftmaxPolicy.load(self.path)
        else:
            pol = ToySoftmaxPolicy.for_config(config, act_temperature=1.0, seed=seed)
        if pol.total_prbs != config.total_prbs:
            raise ConfigError(f"policy was built for {pol.total_prbs} PRBs, scenario has {config.total_prbs}")
        if self.act_temperature is not None:
            pol.act_temperature = self.act_temperature
        pol.reset_streams(seed)
        return pol


@dataclass
class ExperimentConfig:
    scenario: Optional[str] = None  # None: built-in defaults
    policy: dict = field(default_factory=dict)  # ToySoftmaxPolicy keyword overrides
    reflector: dict = field(default_factory=lambda: {"max_step_from_prev": 2})
    kto: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    rounds: int = 1
    out: str = "runs"
    jobs: int = 1

    def validate(self) -> None:
        if self.scenario is not None and not Path(self.scenario).is_file():
            raise ConfigError(f"scenario file not found: {self.scenario}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self.kto_config()
        self.oracle_params()

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"experiment config not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        return cls(**data)

    def sim_config(self) -> SimConfig:
        return load_scenario(self.scenario) if self.scenario else SimConfig()

    def utility_weights(self) -> UtilityWeights:
        return _checked(UtilityWeights, self.weights)

    def kto_config(self) -> KtoConfig:
        return _checked(KtoConfig, self.kto)

    def oracle_params(self) -> OracleParams:
        d = dict(self.reflector)
        d.setdefault("weights", asdict(self.utility_weights()))
        try:
            return OracleParams.from_dict(d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"reflector: {exc}") from exc


def _checked(cls, data: dict):
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _scenario(path: Optional[str], seed: Optional[int] = None, horizon: Optional[int] = None) -> SimConfig:
    try:
        cfg = load_scenario(path) if path else SimConfig()
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    changes = {k: v for k, v in (("seed", seed), ("horizon", horizon)) if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _endpoint(args) -> Optional[LlmEndpointConfig]:
    if not getattr(args, "base_url", None):
        return None
    if not args.model:
        raise ConfigError("--model is required with --base-url")
    return LlmEndpointConfig(base_url=args.base_url, model=args.model, token_env=args.token_env,
                             timeout=args.timeout, max_retries=args.max_retries)


def _kto_from_args(args) -> KtoConfig:
    d = {k: getattr(args, k) for k in ("beta", "m", "n", "rho", "learning_rate", "steps_per_iteration",
                                        "batch_size", "seed", "reference_mode") if getattr(args, k) is not None}
    return _checked(KtoConfig, d)


def _weights_from_args(args) -> UtilityWeights:
    d = {k: getattr(args, k) for k in ("alpha", "p_reconf", "p_qos") if getattr(args, k) is not None}
    return _checked(UtilityWeights, d)


# -- shared pieces ------------------------------------------------------------

def window_metrics(traj, weights: UtilityWeights) -> WindowMetrics:
    return aggregate_window([step_metrics(e.feedback, weights) for e in traj.entries])


def table_row(label: str, seed, m: WindowMetrics) -> list:
    return [label, seed, repr(m.mean_se), m.total_reconfigs, m.total_violations, repr(m.total_utility)]


def aggregate_rows(label: str, per_seed: Sequence[WindowMetrics]) -> list[list]:
    out = []
    for name, fn in (("mean", statistics.fmean), ("median", statistics.median)):
        out.append([label, name, repr(float(fn(m.mean_se for m in per_seed))),
                    repr(float(fn(m.total_reconfigs for m in per_seed))),
                    repr(float(fn(m.total_violations for m in per_seed))),
                    repr(float(fn(m.total_utility for m in per_seed)))])
    return out


def render_table(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _summary_line(m: WindowMetrics) -> str:
    return (f"steps={m.length} mean_se={m.mean_se:.4f} V={m.total_violations} "
            f"C={m.total_reconfigs} utility={m.total_utility:.3f}")


def _evaluate_one(spec: PolicySpec, scenario: SimConfig, seed: int, weights: UtilityWeights,
                  window: int) -> WindowMetrics:
    cfg = scenario.replace(seed=seed)
    traj = run_trajectory(spec.build(cfg, seed), init_env(cfg), window=window)
    return window_metrics(traj, weights)


def evaluate_policies(specs: Sequence[tuple[str, PolicySpec]], scenario: SimConfig, seeds: Sequence[int],
                      weights: UtilityWeights, window: int = DEFAULT_WINDOW, jobs: int = 1) -> list[list]:
    """Table rows: one per (policy, seed), then mean and median per policy."""
    tasks = [(spec, scenario, s, weights, window) for _, spec in specs for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_one, *zip(*tasks)))
    else:
        results = [_evaluate_one(*t) for t in tasks]
    rows = []
    for i, (label, _) in enumerate(specs):
        chunk = results[i * len(seeds):(i + 1) * len(seeds)]
        rows += [table_row(label, s, m) for s, m in zip(seeds, chunk)]
        rows += aggregate_rows(label, chunk)
    return rows


# -- commands -----------------------------------------------------------------

def cmd_scenario(args) -> int:
    cfg = _scenario(None, args.seed, args.horizon)
    if args.out:
        dump_scenario(cfg, args.out)
    else:
        sys.stdout.write(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False))
    return EXIT_OK


def cmd_run_trajectory(args) -> int:
    cfg = _scenario(args.scenario, args.seed, args.horizon)
    spec = PolicySpec.parse(args.policy, _endpoint(args))
    weights = _weights_from_args(args)
    policy = spec.build(cfg, cfg.seed)
    out = Path(args.out)
    try:
        traj = run_trajectory(policy, init_env(cfg), window=args.window, retries=args.retries)
    except TrajectoryAborted as exc:
        persist_trajectory(exc.trajectory, out / "trajectory.partial.jsonl")
        raise
    persist_trajectory(traj, out / "trajectory.jsonl")
    steps = [step_metrics(e.feedback, weights) for e in traj.entries]
    _atomic_csv(lambda path: write_metrics(path, steps, traj.actions), out / "metrics.csv")
    print(_summary_line(window_metrics(traj, weights)))
    return EXIT_OK


def cmd_reflect(args) -> int:
    traj = _load_input(args.trajectory, load_trajectory)
    if args.backend == "oracle":
        d = {"lookahead": args.lookahead, "margin": args.margin, "max_step_from_prev": args.max_step}
        d["weights"] = asdict(_weights_from_args(args))
        try:
            backend = OracleParams.from_dict({k: v for k, v in d.items() if v is not None})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"oracle: {exc}") from exc
    else:
        endpoint = _endpoint(args)
        if endpoint is None:
            raise ConfigError("llm reflector needs --base-url and --model")
        backend = LlmReflector(_checked(LlmReflectorConfig, dict(endpoint=endpoint, chunk_size=args.chunk_size,
                                                                  overlap=args.overlap)))
    lt = reflect_trajectory(traj, backend, source=str(args.trajectory))
    persist_labeled(lt, args.out)
    hist = lt.histogram()
    total = max(1, len(lt))
    print(" ".join(f"{k}={v} ({100.0 * v / total:.1f}%)" for k, v in hist.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    lt = _load_input(args.labeled, load_labeled)
    kto = _kto_from_args(args)
    out = Path(args.out)
    if args.backend == "llm":
        endpoint = _endpoint(args)
        if endpoint is None:
            raise ConfigError("llm backend needs --base-url and --model")
        policy: Policy = LlmEndpointPolicy(endpoint)
    elif args.policy_file:
        if not Path(args.policy_file).is_file():
            raise ConfigError(f"policy file not found: {args.policy_file}")
        policy = ToySoftmaxPolicy.load(args.policy_file)
    else:
        policy = ToySoftmaxPolicy.for_config(lt.config, act_temperature=1.0, seed=kto.seed)
    if args.export_only:
        data = export_iteration_dataset(policy, lt, kto)
        export_dataset(data, out / "dataset_iter1.jsonl")
        print(f"exported {len(data)} examples to {out / 'dataset_iter1.jsonl'}")
        return EXIT_OK
    if not isinstance(policy, ToySoftmaxPolicy):
        raise CapabilityError(f"{policy.backend} backend cannot be trained in-process; rerun with --export-only")
    train_to_dir(policy, lt, kto, out, verbose=True)
    return EXIT_OK


def train_to_dir(policy: ToySoftmaxPolicy, lt, kto: KtoConfig, out: Path, verbose: bool = False):
    def on_iteration(row, dataset):
        export_dataset(dataset, out / f"dataset_iter{row.iteration}.jsonl")
        if verbose:
            print(f"iteration {row.iteration}: pos={row.n_pos} neg={row.n_neg} loss={row.loss:.6f} "
                  f"chosen={row.chosen_reward:+.5f} rejected={row.rejected_reward:+.5f} "
                  f"rolled_out={row.rolled_out} saturated={row.saturated}")

    _, report = run_rfr(policy, lt, kto, on_iteration=on_iteration)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_csv(report.write_csv, out / "report.csv")
    _atomic_csv(report.write_steps_csv, out / "steps.csv")
    atomic_write_text(out / "policy.json", json.dumps(policy.to_dict(), indent=2) + "\n")
    return report


def _atomic_csv(writer, path: Path) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    writer(tmp)
    os.replace(tmp, path)


def cmd_evaluate(args) -> int:
    scenario = _scenario(args.scenario, horizon=args.horizon)
    endpoint = _endpoint(args)
    specs = []
    for text in args.policy:
        label, sep, body = text.partition("=")
        if not sep:
            label, body = text, text
        spec = PolicySpec.parse(body, endpoint)
        if args.act_temperature is not None:
            spec = replace(spec, act_temperature=args.act_temperature)
        specs.append((label, spec))
    if not args.seeds:
        raise ConfigError("--seeds must be non-empty")
    rows = evaluate_policies(specs, scenario, args.seeds, _weights_from_args(args), args.window, args.jobs)
    text = render_table(rows)
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def selftrain(exp: ExperimentConfig, resume: bool = False) -> list[list]:
    """Full loop per seed: act, reflect, train, evaluate; returns the summary rows."""
    exp.validate()
    tasks = [(exp, seed, resume) for seed in exp.seeds]
    if exp.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=exp.jobs) as pool:
            results = list(pool.map(_selftrain_seed, *zip(*tasks)))
    else:
        results = [_selftrain_seed(*t) for t in tasks]
    before = [b for b, _ in results]
    rows = [table_row("before", s, m) for s, m in zip(exp.seeds, before)] + aggregate_rows("before", before)
    if exp.rounds:
        after = [a for _, a in results]
        rows += [table_row("after", s, m) for s, m in zip(exp.seeds, after)] + aggregate_rows("after", after)
    atomic_write_text(Path(exp.out) / "summary.csv", render_table(rows))
    return rows


def _selftrain_seed(exp: ExperimentConfig, seed: int, resume: bool) -> tuple[WindowMetrics, Optional[WindowMetrics]]:
    cfg = exp.sim_config().replace(seed=seed)
    weights, oracle = exp.utility_weights(), exp.oracle_params()
    kto = replace(exp.kto_config(), seed=seed)
    seed_dir = Path(exp.out) / f"seed_{seed}"
    init_path = seed_dir / "policy_init.json"
    if not (resume and init_path.is_file()):
        policy = ToySoftmaxPolicy.for_config(cfg, **{"act_temperature": 1.0, "seed": seed, **exp.policy})
        atomic_write_text(init_path, json.dumps(policy.to_dict(), indent=2) + "\n")
    before = _evaluate_saved(init_path, cfg, seed, weights)
    prev_path = init_path
    for r in range(1, exp.rounds + 1):
        rdir = seed_dir / f"round_{r}"
        traj_path, lab_path = rdir / "trajectory.jsonl", rdir / "labeled.jsonl"
        if resume and (rdir / "policy.json").is_file():
            prev_path = rdir / "policy.json"
            continue
        policy = ToySoftmaxPolicy.load(prev_path)
        if resume and traj_path.is_file():
            traj = load_trajectory(traj_path)
        else:
            policy.reset_streams(seed)
            traj = run_trajectory(policy, init_env(cfg))
            persist_trajectory(traj, traj_path)
        if resume and lab_path.is_file():
            lt = load_labeled(lab_path)
        else:
            lt = reflect_trajectory(traj, oracle, source=str(traj_path))
            persist_labeled(lt, lab_path)
        log.info("seed %d round %d: %d of %d steps labeled False", seed, r, len(lt.false_steps()), len(lt))
        train_to_dir(policy, lt, kto, rdir)
        prev_path = rdir / "policy.json"
    after = _evaluate_saved(prev_path, cfg, seed, weights) if exp.rounds else None
    return before, after


def _evaluate_saved(path: Path, cfg: SimConfig, seed: int, weights: UtilityWeights) -> WindowMetrics:
    return _evaluate_one(PolicySpec("toy", path=str(path)), cfg, seed, weights, DEFAULT_WINDOW)


def cmd_selftrain(args) -> int:
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for key in ("scenario", "seeds", "rounds", "out", "jobs"):
        v = getattr(args, key)
        if v is not None:
            setattr(exp, key, v)
    rows = selftrain(exp, resume=args.resume)
    sys.stdout.write(render_table(rows))
    return EXIT_OK


def _load_input(path: str, loader):
    if not Path(path).is_file():
        raise ConfigError(f"input file not found: {path}")
    return loader(path)


# -- parser -------------------------------------------------------------------

def _add_endpoint_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("chat endpoint")
    g.add_argument("--base-url")
    g.add_argument("--model")
    g.add_argument("--token-env", default="SLICETUNE_API_KEY", help="environment variable holding the bearer token")
    g.add_argument("--timeout", type=float, default=60.0)
    g.add_argument("--max-retries", type=int, default=2)


def _add_weight_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("utility weights")
    g.add_argument("--alpha", type=float)
    g.add_argument("--p-reconf", type=float)
    g.add_argument("--p-qos", type=float)


def _add_kto_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--beta", type=float)
    g.add_argument("--m", type=int, help="rollouts per False step")
    g.add_argument("--n", type=int, help="iterations")
    g.add_argument("--rho", type=float, help="saturation threshold")
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--steps-per-iteration", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--reference-mode", choices=("initial", "iteration"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicetune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="print or write the built-in default scenario")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("run-trajectory", help="run one episode and write its log and metrics")
    p.add_argument("--scenario", help="YAML scenario file (default: built-in)")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--policy", default="hold", help="hold | constant:N | cycle:A,B | toy[:FILE] | llm")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--retries", type=int, default=DEFAULT_RETRIES)
    p.add_argument("--out", required=True, help="output directory")
    _add_endpoint_args(p)
    _add_weight_args(p)
    p.set_defaults(func=cmd_run_trajectory)

    p = sub.add_parser("reflect", help="label every step of a trajectory")
    p.add_argument("trajectory")
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=("oracle", "llm"), default="oracle")
    p.add_argument("--lookahead", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--max-step", type=int, help="oracle: largest |b - previous allocation| considered")
    p.add_argument("--chunk-size", type=int, default=100)
    p.add_argument("--overlap", type=int, default=2)
    _add_endpoint_args(p)
    _add_weight_args(p)
    p.set_defaults(func=cmd_reflect)

    p = sub.add_parser("train", help="fine-tune the toy actor on a labeled trajectory")
    p.add_argument("labeled")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--backend", choices=("toy", "llm"), default="toy")
    p.add_argument("--policy-file", help="initial toy policy (default: zero parameters)")
    p.add_argument("--export-only", action="store_true", help="write the first-iteration dataset and stop")
    _add_kto_args(p)
    _add_endpoint_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="comparison table over seeds")
    p.add_argument("--policy", action="append", required=True, help="[LABEL=]SPEC, repeatable")
    p.add_argument("--scenario")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--horizon", type=int)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--act-temperature", type=float, help="override the toy policy's acting temperature")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    _add_endpoint_args(p)
    _add_weight_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftrain", help="act, reflect, train and evaluate for each seed")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--scenario")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--rounds", type=int)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.add_argument("--resume", action="store_true", help="reuse artifacts already on disk")
    p.set_defaults(func=cmd_selftrain)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"slicetune: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SliceTuneError as exc:
        print(f"slicetune: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"slicetune: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
