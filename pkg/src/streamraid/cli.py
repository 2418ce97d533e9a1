"""Command-line harness: train models, run attacks, sweep, and plot.

A JSON experiment config carries the structured pieces (dataset choice,
training hyperparameters, objective spec, sweep grids); flags override
individual values for quick runs. Exit codes are a scripting contract:
0 success, 2 usage or configuration error, 3 data error, 4 numeric failure.

Every command is idempotent given the same inputs and seed: model files,
trace JSON, and CSV reports are byte-identical across reruns. Wall-clock
measurements are printed to stdout but written as zeros unless
--record-timing is given, precisely so that reruns stay byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets, models
from .attack import (
    AttackConfig,
    ClairvoyantSource,
    GreedySource,
    IidSource,
    PredictiveSource,
    RealTimeObjective,
    SumObjective,
    SurpriseObjective,
    TimeWindowObjective,
    TRACE_FORMAT_VERSION,
    WeightedObjective,
    make_schedule,
    objective_name,
    run_online_attack_batch,
    source_name,
)
from .errors import ConfigError, DataError, NumericError
from .eval import MetricsReport, read_csv, render_svg, summarize_traces, sweep, write_csv

ATTACK_NAMES = ("greedy", "iid", "predictive", "clairvoyant")
OBJECTIVE_NAMES = ("sum", "weighted", "realtime", "timewindow", "surprise")

_TOP_KEYS = {"dataset", "victim", "predictor", "attack", "objective", "targets",
             "sweep", "seed", "eval_count", "out_dir", "victim_path", "predictor_path"}

_SECTION_KEYS = {
    "dataset": {"kind", "count", "classes", "seed", "length", "n", "noise_sd",
                "images", "labels", "path", "seq_id_col", "time_col", "feature_cols",
                "target_col", "task", "name", "train_fraction", "split_seed"},
    "victim": {"hidden", "head_width", "epochs", "batch_size", "lr", "seed",
               "head_on_pre_state"},
    "predictor": {"hidden", "head_width", "dropout_rate", "epochs", "batch_size",
                  "lr", "seed", "val_fraction", "stochastic_at_inference"},
    "attack": {"attack", "epsilon", "p", "k", "max_count", "alpha", "mc_samples",
               "eta", "warm_start", "condition_on_perturbed", "seed"},
    "objective": {"kind", "gammas", "adv_mask", "a", "b", "tau"},
    "targets": {"pattern", "frequency", "value", "values", "steps"},
    "sweep": {"axis", "grid", "seeds", "attacks"},
}

_DATASET_COMMON = {"kind", "train_fraction", "split_seed"}
_DATASET_KINDS = {
    "synth_digits": {"count", "classes", "seed", "name"},
    "synth_sine": {"count", "length", "n", "noise_sd", "seed"},
    "idx": {"images", "labels", "classes", "name"},
    "csv": {"path", "seq_id_col", "time_col", "feature_cols", "target_col",
            "task", "name"},
}


# ---------------------------------------------------------------------------
# config plumbing


def load_config(path) -> dict:
    """Read and schema-check the experiment config; {} when no path given."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p}: top level must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, "config")
    for section, allowed in _SECTION_KEYS.items():
        if section in doc:
            if not isinstance(doc[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            _reject_unknown(doc[section], allowed, f"config section {section!r}")
    return doc


def _reject_unknown(mapping, allowed, where):
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _resolve_seed(flag_value, config, section=None) -> int:
    """Precedence: --seed flag, section seed, top-level seed, STREAMRAID_SEED, 0."""
    if flag_value is not None:
        return int(flag_value)
    if section and "seed" in section:
        return int(section["seed"])
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("STREAMRAID_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"STREAMRAID_SEED must be an integer, got {env!r}") from None
    return 0


# ---------------------------------------------------------------------------
# resolving config sections into objects


def _load_dataset(config):
    """Dataset section -> (train, test) splits."""
    section = config.get("dataset") or {}
    kind = section.get("kind", "synth_digits")
    if kind not in _DATASET_KINDS:
        raise ConfigError(f"unknown dataset kind {kind!r}; "
                          f"expected one of {sorted(_DATASET_KINDS)}")
    stray = sorted(set(section) - _DATASET_KINDS[kind] - _DATASET_COMMON)
    if stray:
        raise ConfigError(f"dataset keys {stray} do not apply to kind {kind!r}")

    if kind == "synth_digits":
        data = datasets.digit_columns(section.get("count", 480),
                                      classes=tuple(section.get("classes", (3, 8))),
                                      seed=section.get("seed", 0),
                                      name=section.get("name", "digits"))
    elif kind == "synth_sine":
        data = datasets.synth_sine(section.get("count", 480),
                                   length=section.get("length", 28),
                                   n=section.get("n", 8),
                                   noise_sd=section.get("noise_sd", 0.02),
                                   seed=section.get("seed", 0))
    elif kind == "idx":
        images, labels = section.get("images"), section.get("labels")
        if images is None or labels is None:
            raise ConfigError("idx dataset needs 'images' and 'labels' file paths")
        for p in (images, labels):
            if not Path(p).exists():
                raise ConfigError(f"dataset file not found: {p}")
        raw, lab = datasets.load_idx(images, labels)
        classes = section.get("classes")
        data = datasets.to_column_sequences(
            raw, lab, classes=None if classes is None else tuple(classes),
            name=section.get("name", "idx"))
    else:  # csv
        path = section.get("path")
        if path is None:
            raise ConfigError("csv dataset needs a 'path'")
        if not Path(path).exists():
            raise ConfigError(f"dataset file not found: {path}")
        missing = [key for key in ("seq_id_col", "time_col", "feature_cols")
                   if key not in section]
        if missing:
            raise ConfigError(f"csv dataset needs {missing}")
        schema = datasets.CsvSchema(section["seq_id_col"], section["time_col"],
                                    list(section["feature_cols"]),
                                    target_col=section.get("target_col"),
                                    task=section.get("task", "classification"))
        data = datasets.load_csv_sequences(path, schema, name=section.get("name"))

    return datasets.split_dataset(data, section.get("train_fraction", 0.8),
                                  seed=section.get("split_seed"))


def _eval_subset(test, count):
    if count is None:
        return test
    count = int(count)
    if not 1 <= count <= len(test):
        raise ConfigError(f"eval_count must be in [1, {len(test)}], got {count}")
    return test.subset(np.arange(count))


def _build_objective(config, flag_kind, eval_length):
    section = config.get("objective") or {}
    kind = flag_kind if flag_kind is not None else section.get("kind", "sum")
    if kind == "sum":
        return SumObjective()
    if kind == "realtime":
        return RealTimeObjective()
    if kind == "surprise":
        return SurpriseObjective()
    if kind == "weighted":
        if "gammas" not in section:
            raise ConfigError("weighted objective needs 'gammas' in the objective section")
        mask = section.get("adv_mask")
        return WeightedObjective(tuple(section["gammas"]),
                                 None if mask is None else tuple(mask))
    if kind == "timewindow":
        # default window: the last quarter of the stream
        a = section.get("a", max(1, math.ceil(3 * eval_length / 4)))
        b = section.get("b", eval_length)
        return TimeWindowObjective(int(a), int(b), float(section.get("tau", 1.0)))
    raise ConfigError(f"unknown objective {kind!r}; expected one of {OBJECTIVE_NAMES}")


def _build_schedule(config, train, evalset, frequency=None):
    """Targets section -> TargetSchedule over the evaluation split.

    Adversarial payloads derive from the train split (most frequent classes,
    or value percentiles); true targets come from the eval labels.
    """
    section = dict(config.get("targets") or {})
    if frequency is not None:
        section["frequency"] = int(frequency)
    values = section.get("values")
    spec = datasets.TargetSpec(pattern=section.get("pattern", "square_wave"),
                               frequency=section.get("frequency", 2),
                               value=section.get("value"),
                               values=None if values is None else tuple(values),
                               steps=section.get("steps"))
    meta = evalset.meta
    adv = datasets.make_targets(spec, meta.length, meta.task, reference=train.labels)
    if meta.task == models.CLASSIFICATION:
        return make_schedule(adv=adv, labels=evalset.labels,
                             length=meta.length, task=meta.task)
    return make_schedule(adv=adv, true=evalset.labels,
                         length=meta.length, task=meta.task)


def _build_source(attack, train, predictor_path):
    if attack == "greedy":
        return GreedySource()
    if attack == "clairvoyant":
        return ClairvoyantSource()
    if attack == "predictive":
        return PredictiveSource(models.load_predictor(predictor_path))
    if attack == "iid":
        return IidSource(datasets.build_iid_pool(train))
    raise ConfigError(f"unknown attack {attack!r}; expected one of {ATTACK_NAMES}")


def _attack_config(args, section, k, seed, input_range) -> AttackConfig:
    def pick(flag, key, default):
        return flag if flag is not None else section.get(key, default)

    return AttackConfig(
        epsilon=float(pick(getattr(args, "epsilon", None), "epsilon", 0.1)),
        p=str(section.get("p", "inf")),
        k=int(k),
        max_count=int(pick(getattr(args, "max_count", None), "max_count", 100)),
        alpha=pick(getattr(args, "alpha", None), "alpha", None),
        mc_samples=int(pick(getattr(args, "mc", None), "mc_samples", 1)),
        eta=float(pick(getattr(args, "eta", None), "eta", 0.0)),
        warm_start=bool(section.get("warm_start", False)),
        input_range=tuple(input_range),
        seed=seed)


# ---------------------------------------------------------------------------
# commands


def cmd_train_victim(args) -> int:
    config = load_config(args.config)
    train, test = _load_dataset(config)
    section = config.get("victim") or {}
    cfg = models.VictimTrainConfig(
        hidden=section.get("hidden", 4),
        head_width=section.get("head_width", 10),
        epochs=section.get("epochs", 5),
        batch_size=section.get("batch_size", 1),
        lr=section.get("lr", 1e-4),
        seed=_resolve_seed(args.seed, config, section),
        head_on_pre_state=section.get("head_on_pre_state", False))
    res = models.train_victim(train, cfg)
    print(f"trained victim on {train.meta.name}: "
          f"{len(train)} train / {len(test)} test sequences")
    print(f"loss {res.initial_loss:.4f} -> {res.final_loss:.4f} "
          f"in {res.wall_time_s:.1f}s")
    for name, value in sorted(models.victim_clean_metrics(
            res.model, test.sequences, test.labels).items()):
        print(f"{name}: {value:.4f}")
    models.save_model(res.model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train_predictor(args) -> int:
    config = load_config(args.config)
    train, test = _load_dataset(config)
    section = config.get("predictor") or {}
    cfg = models.PredictorTrainConfig(
        hidden=section.get("hidden", 128),
        head_width=section.get("head_width", 150),
        dropout_rate=section.get("dropout_rate", 0.3),
        epochs=section.get("epochs", 10),
        batch_size=section.get("batch_size", 8),
        lr=section.get("lr", 1e-4),
        seed=_resolve_seed(args.seed, config, section),
        val_fraction=section.get("val_fraction", 0.1),
        stochastic_at_inference=section.get("stochastic_at_inference", False))
    res = models.train_predictor(train, cfg)
    print(f"trained predictor on {train.meta.name}: "
          f"{len(train)} train / {len(test)} test sequences")
    print(f"loss {res.initial_loss:.4f} -> {res.final_loss:.4f} "
          f"in {res.wall_time_s:.1f}s")
    print(f"val_mse: {res.metrics['val_mse']:.6f}")
    print(f"open_loop_mse: {models.open_loop_mse(res.model, test.sequences):.6f}")
    models.save_model(res.model, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_attack(args) -> int:
    config = load_config(args.config)
    section = config.get("attack") or {}
    attack = args.attack if args.attack is not None else section.get("attack")
    if attack is None:
        raise ConfigError("no attack selected; pass --attack or set attack.attack")
    if attack not in ATTACK_NAMES:
        raise ConfigError(f"unknown attack {attack!r}; expected one of {ATTACK_NAMES}")

    # flag contradictions fail before any data or model is touched
    predictor_path = (args.predictor if args.predictor is not None
                      else config.get("predictor_path"))
    if attack == "predictive" and predictor_path is None:
        raise ConfigError("predictive attack requires --predictor")
    if attack == "clairvoyant" and args.predictor is not None:
        raise ConfigError("clairvoyant attack reads the true future; "
                          "--predictor contradicts it")
    victim_path = args.victim if args.victim is not None else config.get("victim_path")
    if victim_path is None:
        raise ConfigError("no victim model; pass --victim or set victim_path")

    victim = models.load_victim(victim_path)
    train, test = _load_dataset(config)
    count = args.count if args.count is not None else config.get("eval_count")
    evalset = _eval_subset(test, count)

    k = args.k if args.k is not None else section.get("k")
    if attack == "greedy":
        if k not in (None, 0):
            print(f"warning: greedy attack has no lookahead; ignoring k={k}",
                  file=sys.stderr)
        k = 0
    elif k is None:
        k = evalset.meta.length if attack == "clairvoyant" else 8

    seed = _resolve_seed(args.seed, config, section)
    cfg = _attack_config(args, section, k, seed, evalset.meta.value_range)
    source = _build_source(attack, train, predictor_path)
    if attack == "predictive" and section.get("condition_on_perturbed"):
        source = replace(source, condition_on_perturbed=True)
    objective = _build_objective(config, args.objective, evalset.meta.length)
    schedule = _build_schedule(config, train, evalset)
    print(f"attacking {len(evalset)} sequences with {attack} "
          f"(epsilon={cfg.epsilon:g}, k={cfg.k}, max_count={cfg.max_count}, "
          f"eta={cfg.eta:g}, seed={seed})")
    print(f"effective alpha: {cfg.step_size!r}")

    start = time.perf_counter()
    traces = run_online_attack_batch(victim, evalset.sequences, schedule, source,
                                     cfg, objective)
    elapsed = time.perf_counter() - start
    rows = summarize_traces(traces, victim.task, evalset.meta.name,
                            source_name(source), objective_name(objective), cfg,
                            seed, elapsed if args.record_timing else 0.0)
    for row in rows:
        print(f"{row.metric}: {row.value:.4f}")
    print(f"done in {elapsed:.1f}s")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = []
    for tr in traces:
        doc = tr.to_json_dict()
        if not args.record_timing:
            doc["wall_time_s"] = [0.0] * len(doc["wall_time_s"])
        docs.append(doc)
    trace_path = out_dir / "trace.json"
    trace_path.write_text(json.dumps({"format_version": TRACE_FORMAT_VERSION,
                                      "traces": docs}), encoding="utf-8")
    csv_path = out_dir / "report.csv"
    write_csv(MetricsReport(rows=rows), csv_path)
    print(f"wrote {trace_path} and {csv_path}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    section = config.get("sweep") or {}
    missing = [key for key in ("axis", "grid", "seeds", "attacks")
               if key not in section]
    if missing:
        raise ConfigError(f"sweep config needs {missing}")
    attacks = list(section["attacks"])
    for name in attacks:
        if name not in ATTACK_NAMES:
            raise ConfigError(f"unknown attack {name!r}; expected one of {ATTACK_NAMES}")

    predictor_path = (args.predictor if args.predictor is not None
                      else config.get("predictor_path"))
    if "predictive" in attacks and predictor_path is None:
        raise ConfigError("predictive attack requires --predictor")
    victim_path = args.victim if args.victim is not None else config.get("victim_path")
    if victim_path is None:
        raise ConfigError("no victim model; pass --victim or set victim_path")

    victim = models.load_victim(victim_path)
    train, test = _load_dataset(config)
    evalset = _eval_subset(test, config.get("eval_count"))
    attack_section = config.get("attack") or {}
    base_k = attack_section.get("k", 8)
    base_cfg = _attack_config(args, attack_section, base_k,
                              _resolve_seed(None, config, attack_section),
                              evalset.meta.value_range)
    sources = {name: _build_source(name, train, predictor_path) for name in attacks}
    objective = _build_objective(config, None, evalset.meta.length)
    schedule = _build_schedule(config, train, evalset)
    schedule_for_frequency = None
    if section["axis"] == "target_frequency":
        schedule_for_frequency = lambda f: _build_schedule(config, train, evalset,
                                                           frequency=f)

    start = time.perf_counter()
    report = sweep(victim, evalset.sequences, schedule,
                   [sources[name] for name in attacks], base_cfg, section["axis"],
                   list(section["grid"]), [int(s) for s in section["seeds"]],
                   objective=objective, dataset=evalset.meta.name,
                   schedule_for_frequency=schedule_for_frequency, jobs=args.jobs)
    elapsed = time.perf_counter() - start
    if not args.record_timing:
        report.rows = [replace(r, wall_time_s=0.0) for r in report.rows]
    write_csv(report, args.out)
    cells = len(attacks) * len(section["grid"]) * len(section["seeds"])
    print(f"swept {cells} cells ({len(report.rows)} rows) in {elapsed:.1f}s")
    print(f"wrote {args.out}")
    for err in report.errors:
        print(f"sweep cell failed: attack={err.attack} {err.axis}={err.value:g} "
              f"seed={err.seed}: {err.message}", file=sys.stderr)
    if report.errors and not args.keep_going:
        codes = {"config": 2, "data": 3, "numeric": 4}
        return codes[report.errors[0].category]
    return 0


def cmd_report(args) -> int:
    if not Path(args.in_path).exists():
        raise DataError(f"report csv not found: {args.in_path}")
    report = read_csv(args.in_path)
    render_svg(report, args.x, args.metric, args.plot, title=args.title)
    print(f"wrote {args.plot}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_and_seed(sub):
    sub.add_argument("--config", help="JSON experiment config")
    sub.add_argument("--seed", type=int, help="seed override (beats config and env)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamraid",
        description="Online evasion attacks on recurrent models: train victims "
                    "and predictors, attack streams, sweep configurations, plot.")
    subs = parser.add_subparsers(dest="command", required=True)

    tv = subs.add_parser("train-victim", help="train a victim and write it to JSON")
    _add_config_and_seed(tv)
    tv.add_argument("--out", required=True, help="output model path")
    tv.set_defaults(func=cmd_train_victim)

    tp = subs.add_parser("train-predictor",
                         help="train a next-step predictor and write it to JSON")
    _add_config_and_seed(tp)
    tp.add_argument("--out", required=True, help="output model path")
    tp.set_defaults(func=cmd_train_predictor)

    at = subs.add_parser("attack", help="attack the evaluation split of a dataset")
    _add_config_and_seed(at)
    at.add_argument("--victim", help="victim model path")
    at.add_argument("--predictor", help="predictor model path (predictive only)")
    at.add_argument("--attack", choices=ATTACK_NAMES)
    at.add_argument("--objective", choices=OBJECTIVE_NAMES)
    at.add_argument("--epsilon", type=float, help="perturbation budget")
    at.add_argument("--k", type=int, help="lookahead steps")
    at.add_argument("--max-count", type=int, help="PGD iterations per stream step")
    at.add_argument("--alpha", type=float, help="PGD step size; default 1.5*eps/max_count")
    at.add_argument("--eta", type=float, help="hallucination degradation in [0, 1]")
    at.add_argument("--mc", type=int, help="Monte Carlo hallucination samples")
    at.add_argument("--count", type=int, help="evaluation sequences to attack")
    at.add_argument("--record-timing", action="store_true",
                    help="write measured wall times (breaks byte-identical reruns)")
    at.add_argument("--out", required=True,
                    help="output directory for trace.json and report.csv")
    at.set_defaults(func=cmd_attack)

    sw = subs.add_parser("sweep", help="run an axis sweep from the config")
    sw.add_argument("--config", required=True, help="JSON experiment config")
    sw.add_argument("--victim", help="victim model path")
    sw.add_argument("--predictor", help="predictor model path")
    sw.add_argument("--out", required=True, help="output CSV path")
    sw.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    sw.add_argument("--keep-going", action="store_true",
                    help="exit 0 even when some cells fail")
    sw.add_argument("--record-timing", action="store_true",
                    help="write measured wall times (breaks byte-identical reruns)")
    sw.set_defaults(func=cmd_sweep)

    rp = subs.add_parser("report", help="render an SVG chart from a metrics CSV")
    rp.add_argument("--in", dest="in_path", required=True, help="metrics CSV path")
    rp.add_argument("--plot", required=True, help="output SVG path")
    rp.add_argument("--x", default="epsilon", help="x axis column")
    rp.add_argument("--metric", default="tasr", help="metric to plot")
    rp.add_argument("--title", help="chart title")
    rp.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
