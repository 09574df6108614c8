"""
Command-line front end.

    nesy-soc synth     --out DIR
    nesy-soc train     --data flows.csv --nws-config nws.conf --out DIR
    nesy-soc eval      --data flows.csv --nws-config nws.conf --out DIR
    nesy-soc detect    --checkpoint DIR/ltn.ckpt --data flows.csv --alert-map alerts.conf --out trace.txt
    nesy-soc recognize --trace trace.txt --rules rules.txt --plans plans.txt
    nesy-soc extract   --report report.txt --table keywords.txt --out plans.txt

Diagnostics go to standard error, tables and key-value lines to standard
output or files. Exit status is 0 on success, 1 on a reported error and 2 on
a usage error.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from nesy_soc import ctibridge, flowdata, ltlf, netmodel, planrec, stats
from nesy_soc.config import read_kv_file
from nesy_soc.errors import ConfigError, NesySocError

logger = logging.getLogger(__name__)

DEFAULT_SEED = 1
DEFAULT_DATA_SEED = 7
DEFAULT_FRACTION = 0.7
DEFAULT_OUT = "run"


def _require_file(path: Optional[str], flag: str) -> str:
    if not path:
        raise ConfigError(f"{flag} is required")
    if not os.path.isfile(path):
        raise ConfigError(f"{flag}: no such file: {path}")
    return path


def _load_labelled(args) -> flowdata.Dataset:
    schema = flowdata.read_schema(args.schema) if args.schema else None
    return flowdata.load_flows(_require_file(args.data, "--data"), schema)


def _split(args, fraction: float, seed: int) -> Tuple[flowdata.Dataset, flowdata.Dataset]:
    return flowdata.split(_load_labelled(args), fraction, seed)


def _nws_config(args, required: bool) -> Optional[flowdata.NwsConfig]:
    if args.nws_config:
        return flowdata.read_nws_config(_require_file(args.nws_config, "--nws-config"))
    if required:
        raise ConfigError("--nws-config is required to train or evaluate the LTN detector")
    return None


def _recorded_split(models: Dict[str, netmodel.MlpModel], args) -> Tuple[float, int]:
    """
    The split both checkpoints were trained on.

    ``--fraction`` and ``--seed`` may restate it but not change it; for
    checkpoints that record no split they choose it, as in ``train``.
    """
    recorded = {
        (model.config.split_fraction, model.config.split_seed)
        for model in models.values()
        if model.config is not None and model.config.split_seed is not None
    }
    if len(recorded) > 1:
        raise ConfigError("baseline and ltn checkpoints were trained on different splits")
    if not recorded:
        fraction = DEFAULT_FRACTION if args.fraction is None else args.fraction
        return fraction, DEFAULT_SEED if args.seed is None else args.seed

    fraction, seed = recorded.pop()
    for flag, given, used in (("--fraction", args.fraction, fraction), ("--seed", args.seed, seed)):
        if given is not None and given != used:
            raise ConfigError(f"{flag} {given} differs from the split the checkpoints were trained on ({flag} {used})")
    return fraction, seed


def _history_lines(name: str, model: netmodel.MlpModel) -> List[str]:
    lines = []
    for entry in model.history:
        values = " ".join(f"{key} {value:.6f}" for key, value in entry.items() if key != "epoch")
        lines.append(f"{name} epoch {entry['epoch']} {values}\n")
    return lines


# ===== COMMANDS =====


def cmd_synth(args) -> int:
    paths = flowdata.write_synthetic_bundle(args.out, args.flows, args.seed)
    sys.stdout.write(stats.format_kv(paths))
    return 0


def cmd_train(args) -> int:
    modes = ("baseline", "ltn") if args.mode == "both" else (args.mode,)
    _require_file(args.data, "--data")
    nws_config = _nws_config(args, required="ltn" in modes)
    train, _ = _split(args, args.fraction, args.seed)
    features = train.feature_matrix()
    labels = train.labels

    os.makedirs(args.out, exist_ok=True)
    log_lines = []
    histories = {}
    for mode in modes:
        config = netmodel.TrainConfig(
            epochs=args.epochs,
            seed=args.seed,
            learning_rate=args.lr,
            mode=mode,
            split_seed=args.seed,
            split_fraction=args.fraction,
        )
        if mode == "baseline":
            model = netmodel.train_baseline(features, labels, config)
        else:
            nws = flowdata.compute_nws(train, nws_config)
            flowdata.nws_diagnostics(train, nws)
            logger.info("%d of %d training flows are NWS", len(nws), len(train))
            model = netmodel.train_ltn(features, labels, sorted(nws), config)
        model.stats = train.stats
        netmodel.save_checkpoint(os.path.join(args.out, f"{mode}.ckpt"), model)
        log_lines += _history_lines(mode, model)
        histories[mode] = model.history

    with open(os.path.join(args.out, "train.log"), "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(log_lines)
    if args.figures == "save":
        from nesy_soc import figs

        figs.figtofile(figs.training_curves(histories), os.path.join(args.out, "training_curves.pdf"))
    return 0


def cmd_eval(args) -> int:
    nws_config = _nws_config(args, required=True)
    models = {
        mode: netmodel.load_checkpoint(_require_file(os.path.join(args.out, f"{mode}.ckpt"), "checkpoint"))
        for mode in ("baseline", "ltn")
    }
    fraction, seed = _recorded_split(models, args)
    _, test = _split(args, fraction, seed)
    truth = test.labels
    nws = flowdata.compute_nws(test, nws_config)

    results = {}
    nws_attacks = {}
    kv: Dict[str, object] = {
        "split.seed": seed,
        "split.fraction": fraction,
        "test.flows": len(test),
        "test.nws_flows": len(nws),
    }
    for mode, model in models.items():
        if model.stats is None:
            raise ConfigError(f"{mode} checkpoint carries no normalization statistics")
        predictions = netmodel.classify_batch(model, test.feature_matrix(model.stats))
        results[mode] = flowdata.metrics(predictions, truth)
        nws_attacks[mode] = stats.count_nws_attacks(predictions, nws)
        kv.update(stats.metrics_kv(mode, results[mode]))
        kv[f"nws.{mode}.attack_predictions"] = nws_attacks[mode]

    checks = stats.directional_checks(results["baseline"], results["ltn"], nws_attacks["baseline"], nws_attacks["ltn"])
    kv.update({name: "pass" if ok else "fail" for name, ok in checks.items()})

    sys.stdout.write(stats.metrics_table(results))
    sys.stdout.write("\n" + stats.reference_table() + "\n")
    sys.stdout.write(stats.format_kv({name: kv[name] for name in checks}))
    stats.save_to_txt(os.path.join(args.out, "metrics.txt"), stats.format_kv(kv))
    if args.figures == "save":
        from nesy_soc import figs

        figs.figtofile(figs.metrics_bargraph(results), os.path.join(args.out, "metrics.pdf"))
    return 0


def read_alert_map(path: str) -> Dict[flowdata.Label, str]:
    """``<class> = <alert atom>`` for the classes that raise alerts."""
    mapping = {}
    for name, atom in read_kv_file(path).items():
        label = flowdata.Label.from_display(name)
        if not ltlf.ATOM_PATTERN.fullmatch(atom):
            raise ConfigError(f"{path}: alert name {atom!r} for {name} is not an atom")
        mapping[label] = atom
    return mapping


def cmd_detect(args) -> int:
    model = netmodel.load_checkpoint(_require_file(args.checkpoint, "--checkpoint"))
    alert_map = read_alert_map(_require_file(args.alert_map, "--alert-map"))
    schema = flowdata.read_schema(args.schema) if args.schema else None
    flows = flowdata.load_flows(_require_file(args.data, "--data"), schema, labelled=False)
    if model.stats is None:
        raise ConfigError("checkpoint carries no normalization statistics")

    predictions = netmodel.classify_batch(model, flows.feature_matrix(model.stats))
    alerts = []
    for cls in predictions:
        label = flowdata.Label(int(cls))
        if label == flowdata.Label.BENIGN:
            continue
        if label not in alert_map:
            raise ConfigError(f"alert map has no alert for class {label.display}")
        alerts.append(alert_map[label])

    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{alert}\n" for alert in alerts)
    logger.info("wrote %d alerts for %d flows to %s", len(alerts), len(flows), args.out)
    return 0


def cmd_recognize(args) -> int:
    trace = planrec.read_trace(_require_file(args.trace, "--trace"))
    rules = planrec.read_rules(_require_file(args.rules, "--rules"))
    plans = planrec.read_plans(_require_file(args.plans, "--plans"))
    results = planrec.recognize(trace, rules, plans, args.max_witnesses) if plans else []

    kv = stats.format_kv(planrec.recognition_kv(results))
    sys.stdout.write(planrec.format_recognition(results))
    sys.stdout.write(kv)
    if args.out:
        stats.save_to_txt(args.out, kv)
    return 0


def cmd_extract(args) -> int:
    report_path = _require_file(args.report, "--report")
    if args.backend == "remote":
        backend = ctibridge.RemoteBackend(ctibridge.CompletionClient.from_env())
    else:
        backend = ctibridge.KeywordBackend(ctibridge.read_keyword_table(_require_file(args.table, "--table")))

    if args.out and os.path.isfile(args.out):
        if args.plan_id in ltlf.read_pattern_library(args.out):
            raise ConfigError(f"{args.out} already defines plan {args.plan_id!r}")

    with open(report_path, encoding="utf-8") as fh:
        plan = ctibridge.extract_plan(fh.read(), backend, args.plan_id)
    sys.stdout.write(plan.text + "\n")
    if args.out:
        ltlf.write_pattern_library(args.out, [(plan.plan_id, plan.formula)], append=os.path.isfile(args.out))
    return 0


# ===== PARSER =====


def _add_data_args(p: argparse.ArgumentParser, split_defaults: bool = True) -> None:
    p.add_argument("--data", help="flow CSV in CICIDS2017 column layout")
    p.add_argument("--schema", help="key-value file remapping CSV column names")
    p.add_argument("--nws-config", help="key-value file naming web server addresses and ports")
    p.add_argument(
        "--seed",
        type=int,
        default=DEFAULT_SEED if split_defaults else None,
        help="split, initialisation and batching seed",
    )
    p.add_argument(
        "--fraction",
        type=float,
        default=DEFAULT_FRACTION if split_defaults else None,
        help="training share of every class",
    )
    p.add_argument("--out", default=DEFAULT_OUT, help="directory holding checkpoints and reports")
    p.add_argument("--figures", choices=("none", "save"), default="none")


def build_parser() -> Tuple[argparse.ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="nesy-soc", description="Neurosymbolic alert detection and attack-plan recognition."
    )
    parser.add_argument("--config", help="key-value file with defaults for the subcommand's flags")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {}

    p = sub.add_parser("synth", help="write the miniature flow dataset with its configs")
    p.add_argument("--out", default="data/mini")
    p.add_argument("--flows", type=int, default=2000)
    p.add_argument("--seed", type=int, default=DEFAULT_DATA_SEED)
    p.set_defaults(func=cmd_synth)
    commands["synth"] = p

    p = sub.add_parser("train", help="train the baseline and LTN detectors")
    _add_data_args(p)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--mode", choices=("both", "baseline", "ltn"), default="both")
    p.set_defaults(func=cmd_train)
    commands["train"] = p

    p = sub.add_parser("eval", help="score both detectors on the test split recorded in their checkpoints")
    _add_data_args(p, split_defaults=False)
    p.set_defaults(func=cmd_eval)
    commands["eval"] = p

    p = sub.add_parser("detect", help="turn detector verdicts into a symbolic alert trace")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--alert-map", help="key-value file: <class> = <alert atom>")
    p.add_argument("--out", default="trace.txt")
    p.set_defaults(func=cmd_detect)
    commands["detect"] = p

    p = sub.add_parser("recognize", help="decide which attack plans explain an alert trace")
    p.add_argument("--trace")
    p.add_argument("--rules")
    p.add_argument("--plans")
    p.add_argument("--max-witnesses", type=int, default=1)
    p.add_argument("--out", help="write key-value results here as well")
    p.set_defaults(func=cmd_recognize)
    commands["recognize"] = p

    p = sub.add_parser("extract", help="turn a CTI report into a plan pattern")
    p.add_argument("--report")
    p.add_argument("--table", help="keyword table: phrase => technique_id")
    p.add_argument("--backend", choices=("keyword", "remote"), default="keyword")
    p.add_argument("--plan-id", default=ctibridge.DEFAULT_PLAN_ID)
    p.add_argument("--out", help="pattern library to write or append to")
    p.set_defaults(func=cmd_extract)
    commands["extract"] = p

    return parser, commands


def _apply_config_file(path: str, command: argparse.ArgumentParser) -> None:
    """Turns config-file keys into parser defaults, so explicit flags still win."""
    values = read_kv_file(path)
    known = {action.dest for action in command._actions if action.dest not in ("help", "func")}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys for {command.prog}: {', '.join(unknown)}")
    command.set_defaults(**values)


def _configure_logging(args) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser, commands = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        _configure_logging(args)
        if args.config:
            _apply_config_file(args.config, commands[args.command])
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NesySocError as exc:
        sys.stderr.write(f"nesy-soc: error: {exc}\n")
        return 1

    try:
        return args.func(args)
    except (NesySocError, OSError) as exc:
        logger.debug("command failed", exc_info=True)
        sys.stderr.write(f"nesy-soc: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
