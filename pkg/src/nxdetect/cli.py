"""Command-line surface: forge, train, eval, experiment, detect, bench, triage.

Every command prints one JSON report document to stdout and writes any file
artifacts under --out.  Exit codes: 0 success, 1 usage problem, 2 bad input
data or configuration, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import codec, forge, harness, models, triage
from .errors import DataError, UsageError


class MalformedHeader(DataError):
    """Query log does not start with the expected ts,host,qname header."""


class ConfigError(DataError):
    """Experiment or forge configuration is invalid."""


class ModelMismatch(DataError):
    """Loaded model has the wrong kind for this command."""


LOG_HEADER = "ts,host,qname"


# ---------------------------------------------------------------------------
# query-log ingestion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryRecord:
    """One observed DNS query: event time, anonymized client, queried name."""

    timestamp: float
    host_id: str
    qname: str


@dataclass(frozen=True)
class AlertPolicy:
    """Alert when one host accrues `threshold` positives inside the window."""

    window_seconds: int = 3600
    threshold: int = 10

    def __post_init__(self):
        if self.window_seconds < 1:
            raise DataError(f"window_seconds must be >= 1, got {self.window_seconds}")
        if self.threshold < 1:
            raise DataError(f"threshold must be >= 1, got {self.threshold}")


@dataclass
class IngestReport:
    """Valid records in file order plus first-seen unique qnames."""

    records: list[QueryRecord]
    unique_domains: list[str]
    malformed: int


def ingest(path: str) -> IngestReport:
    """Parse a ts,host,qname CSV log; count-and-skip malformed lines."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise harness.IoError(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0].strip() != LOG_HEADER:
        raise MalformedHeader(f"{path} must start with '{LOG_HEADER}'")

    records: list[QueryRecord] = []
    unique: dict[str, None] = {}
    malformed = 0
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            malformed += 1
            continue
        ts_text, host, qname = (p.strip() for p in parts)
        qname = qname.lower()
        try:
            timestamp = float(ts_text)
            if timestamp < 0 or not host:
                raise ValueError
            codec.encode(qname)
        except (ValueError, DataError):
            malformed += 1
            continue
        records.append(QueryRecord(timestamp, host, qname))
        unique.setdefault(qname, None)
    return IngestReport(records, list(unique), malformed)


# ---------------------------------------------------------------------------
# streaming detection with per-host alerting
# ---------------------------------------------------------------------------

def sliding_window_alerts(
    records: list[QueryRecord], policy: AlertPolicy
) -> list[dict]:
    """Event-time sliding-window counts per host over positive records.

    A host alerts once any window (t - window_seconds, t] holds at least
    `threshold` of its records.  State is partitioned by host, so the scan
    order across hosts cannot matter.
    """
    by_host: dict[str, list[float]] = {}
    for record in records:
        by_host.setdefault(record.host_id, []).append(record.timestamp)

    alerts = []
    for host in sorted(by_host):
        stamps = sorted(by_host[host])
        first_alert = None
        peak = 0
        left = 0
        for right, now in enumerate(stamps):
            while stamps[left] <= now - policy.window_seconds:
                left += 1
            count = right - left + 1
            if count > peak:
                peak = count
            if count >= policy.threshold and first_alert is None:
                first_alert = now
        if first_alert is not None:
            alerts.append({
                "host": host,
                "first_alert_timestamp": first_alert,
                "peak_window_count": peak,
                "total_positives": len(stamps),
            })
    return alerts


def _load_lines(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]
    except OSError as exc:
        raise harness.IoError(f"cannot read {path}: {exc}") from exc


def detect(
    model_path: str,
    log_path: str,
    policy: AlertPolicy,
    blacklist_path: str | None = None,
    out_dir: str | None = None,
    threshold: float = 0.5,
) -> dict:
    """Classify a query log and raise per-host alerts on positive bursts.

    Blacklisted names are matched exactly (case-insensitively) before the
    model ever sees them and are reported on their own; window alerting runs
    over the model's positives.
    """
    model = models.load_model(model_path)
    if model.spec.kind != "binary":
        raise ModelMismatch(f"detect needs a binary model, got {model.spec.kind}")

    log = ingest(log_path)
    blacklist = set(d.lower() for d in _load_lines(blacklist_path)) if blacklist_path else set()
    blacklisted = [d for d in log.unique_domains if d in blacklist]
    to_classify = [d for d in log.unique_domains if d not in blacklist]

    positives: list[str] = []
    scores_by_domain: dict[str, float] = {}
    if to_classify:
        scores = model.predict_domains(to_classify)
        for domain, score in zip(to_classify, scores):
            scores_by_domain[domain] = float(score)
            if score >= threshold:
                positives.append(domain)

    positive_set = set(positives)
    positive_records = [r for r in log.records if r.qname in positive_set]
    alerts = sliding_window_alerts(positive_records, policy)

    queue = {
        domain: sorted(r.timestamp for r in log.records if r.qname == domain)
        for domain in positives
    }
    report = {
        "records": len(log.records),
        "malformed": log.malformed,
        "unique_domains": len(log.unique_domains),
        "policy": asdict(policy),
        "score_threshold": threshold,
        "blacklist": {
            "domains": sorted(blacklisted),
            "hit_records": sum(1 for r in log.records if r.qname in blacklist),
        },
        "positives": [
            {"domain": d, "score": scores_by_domain[d], "queries": len(queue[d])}
            for d in sorted(positives)
        ],
        "alerts": alerts,
        "triage_queue": None,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        queue_path = os.path.join(out_dir, "triage-queue.json")
        harness._write_json(queue_path, queue)
        report["triage_queue"] = queue_path
        harness._write_json(os.path.join(out_dir, "detect-report.json"), report)
    return report


# ---------------------------------------------------------------------------
# throughput benchmark
# ---------------------------------------------------------------------------

def bench(
    model_path: str,
    n: int = 10000,
    repetitions: int = 3,
    batch_size: int = 1024,
    threads: int | None = None,
    seed: int = 0,
) -> dict:
    """Measure batched prediction throughput, single- and multi-threaded."""
    if n < 1000:
        raise DataError(f"bench needs n >= 1000, got {n}")
    if repetitions < 1:
        raise DataError(f"repetitions must be >= 1, got {repetitions}")
    model = models.load_model(model_path)
    words = forge.load_wordlist()
    half = n // 2
    domains = [s.domain for s in forge.generate_benign_like(words, seed=seed, n=half)]
    spec = forge.load_family_specs()[0]
    domains += [s.domain for s in forge.generate_regex_dga(spec, seed=seed, n=n - half)]
    ids = codec.encode_batch(domains)

    def _measure(limit: int | None) -> list[float]:
        rates = []
        with threadpool_limits(limits=limit):
            model.predict(ids[:batch_size], batch_size=batch_size)  # warm up
            for _ in range(repetitions):
                start = time.perf_counter()
                model.predict(ids, batch_size=batch_size)
                rates.append(n / (time.perf_counter() - start))
        return rates

    single = _measure(1)
    multi = _measure(threads)
    return {
        "n": n,
        "repetitions": repetitions,
        "batch_size": batch_size,
        "total_classified": n * repetitions * 2,
        "single_thread": {
            "samples_per_second": harness.aggregate_stats(single),
            "runs": single,
        },
        "multi_thread": {
            "threads": threads if threads is not None else "all",
            "samples_per_second": harness.aggregate_stats(multi),
            "runs": multi,
        },
    }


# ---------------------------------------------------------------------------
# corpus assembly shared by forge and experiment
# ---------------------------------------------------------------------------

def _unique_samples(generate, count: int, what: str) -> list[forge.GeneratedSample]:
    """Collect `count` distinct domains from a prefix-stable generator."""
    ask = count
    for _ in range(12):
        seen: dict[str, forge.GeneratedSample] = {}
        for sample in generate(ask):
            seen.setdefault(sample.domain, sample)
            if len(seen) == count:
                return list(seen.values())
        ask = max(ask + 1, int(ask * 1.3))
    raise ConfigError(f"cannot draw {count} distinct domains for {what}")


def _assemble_corpus(spec: dict, default_seed: int) -> list[forge.GeneratedSample]:
    """Build a labeled corpus from a config block.

    Keys: `per_family` (count for every bundled family) or `families`
    (name -> count), plus optional `benign`, `charbot`, `prng_pair`
    ({"variant": "a"|"b", "n": count}) and `seed`.
    """
    if not isinstance(spec, dict):
        raise ConfigError("corpus block must be an object")
    known = {"seed", "per_family", "families", "benign", "charbot", "prng_pair"}
    unknown = set(spec) - known
    if unknown:
        raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
    seed = int(spec.get("seed", default_seed))
    family_specs = {s.name: s for s in forge.load_family_specs()}

    wanted: dict[str, int] = {}
    if "per_family" in spec:
        wanted.update({name: int(spec["per_family"]) for name in family_specs})
    for name, count in spec.get("families", {}).items():
        if name not in family_specs:
            raise ConfigError(f"unknown family {name!r}")
        wanted[name] = int(count)

    samples: list[forge.GeneratedSample] = []
    for name in sorted(wanted):
        samples += _unique_samples(
            lambda k, s=family_specs[name]: forge.generate_regex_dga(s, seed, k),
            wanted[name], name)
    if spec.get("benign", 0):
        words = forge.load_wordlist()
        samples += _unique_samples(
            lambda k: forge.generate_benign_like(words, seed=seed, n=k),
            int(spec["benign"]), "benign")
    if spec.get("charbot", 0):
        words = forge.load_wordlist()
        samples += _unique_samples(
            lambda k: forge.generate_charbot(words, seed=seed, n=k),
            int(spec["charbot"]), "charbot")
    if "prng_pair" in spec:
        block = spec["prng_pair"]
        samples += _unique_samples(
            lambda k: forge.generate_prng_pair(block["variant"], seed, k),
            int(block["n"]), "prng_pair")
    if not samples:
        raise ConfigError("corpus block generates nothing")
    return samples


def _read_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise harness.IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _train_config(block: dict, seed: int) -> models.TrainConfig:
    allowed = {"batch_size", "max_epochs", "patience", "holdout_fraction",
               "learning_rate", "gamma"}
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    return models.TrainConfig(seed=seed, **block)


# ---------------------------------------------------------------------------
# experiment protocols
# ---------------------------------------------------------------------------

def experiment(config_path: str, out_dir: str, seed: int | None = None) -> dict:
    """Run a full protocol from one config: forge, split, train, evaluate."""
    config = _read_config(config_path)
    protocol = config.get("protocol")
    run_seed = int(config.get("seed", 0)) if seed is None else seed
    train_config = _train_config(config.get("train", {}), run_seed)
    threshold = float(config.get("threshold", 0.5))
    os.makedirs(out_dir, exist_ok=True)

    if protocol == "kfold":
        dataset = _dataset_from_block(config, "corpus", run_seed)
        plan = harness.make_kfold(
            dataset,
            k=int(config.get("k", 5)),
            reps=int(config.get("reps", 5)),
            holdout=float(config.get("holdout", 0.05)),
            seed=run_seed,
        )
        report = harness.run_binary_kfold(dataset, plan, train_config,
                                          out_dir=out_dir, threshold=threshold)
    elif protocol == "logo":
        dataset = _dataset_from_block(config, "corpus", run_seed)
        splits = harness.make_logo(dataset, seed=run_seed)
        report = harness.run_logo(dataset, splits, train_config,
                                  out_dir=out_dir, threshold=threshold)
    elif protocol == "cross-dataset":
        train_set = _dataset_from_block(config, "train_corpus", run_seed)
        test_set = _dataset_from_block(config, "test_corpus", run_seed + 1)
        report = harness.run_cross_dataset(train_set, test_set, train_config,
                                           out_dir=out_dir, threshold=threshold)
    else:
        raise ConfigError(f"protocol must be kfold, logo, or cross-dataset, "
                          f"got {protocol!r}")

    harness._write_json(os.path.join(out_dir, "config.json"),
                        {**config, "seed": run_seed})
    return report


def _dataset_from_block(config: dict, key: str, seed: int) -> harness.LabeledDataset:
    if key not in config:
        raise ConfigError(f"config needs a {key!r} block")
    samples = _assemble_corpus(config[key], seed)
    return harness.build_dataset([(s.domain, s.family) for s in samples])


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def _cmd_forge(args) -> dict:
    config = _read_config(args.config)
    samples = _assemble_corpus(config, args.seed)
    removed = 0
    if args.blacklist:
        samples, dropped = forge.filter_blacklist(
            samples, set(_load_lines(args.blacklist)))
        removed = len(dropped)
    forge.write_corpus(samples, args.out)
    by_family: dict[str, int] = {}
    for sample in samples:
        by_family[sample.family] = by_family.get(sample.family, 0) + 1
    return {"out": args.out, "written": len(samples),
            "by_family": dict(sorted(by_family.items())),
            "blacklist_removed": removed}


def _load_dataset_csv(path: str) -> harness.LabeledDataset:
    return harness.build_dataset(forge.read_corpus(path))


def _cmd_train(args) -> dict:
    dataset = _load_dataset_csv(args.data)
    config = _train_config(_read_config(args.config) if args.config else {},
                           args.seed)
    if args.mode == "binary":
        model, report = models.train_binary(dataset.ids, dataset.binary_labels,
                                            config)
    else:
        labels = sorted(dataset.family_index, key=dataset.family_index.get)
        model, report = models.train_multiclass(
            dataset.ids, dataset.class_labels, len(labels), config)
        harness._write_json(args.out + ".labels.json", {"classes": labels})
    models.save_model(model, args.out)
    return {"out": args.out, "mode": args.mode, "samples": len(dataset),
            "train": harness._train_report_dict(report)}


def _cmd_eval(args) -> dict:
    model = models.load_model(args.model)
    dataset = _load_dataset_csv(args.data)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    with threadpool_limits(limits=args.threads):
        scores = model.predict(dataset.ids)
    if model.spec.kind == "binary":
        counts = harness.count_confusion(scores >= args.threshold,
                                         dataset.binary_labels)
        report = {
            "mode": "binary", "samples": len(dataset),
            "counts": asdict(counts),
            "metrics": asdict(harness.binary_metrics(counts)),
        }
    else:
        if model.spec.num_classes != len(dataset.family_index):
            raise ModelMismatch(
                f"model has {model.spec.num_classes} classes, dataset has "
                f"{len(dataset.family_index)}")
        matrix = harness.confusion_matrix(scores.argmax(axis=1),
                                          dataset.class_labels,
                                          model.spec.num_classes)
        report = {
            "mode": "multiclass", "samples": len(dataset),
            "matrix": matrix.tolist(),
            "metrics": asdict(harness.multiclass_metrics(matrix)),
        }
        if args.out:
            labels = sorted(dataset.family_index, key=dataset.family_index.get)
            harness.export_confusion(matrix, os.path.join(args.out, "confusion"),
                                     labels=labels)
    if args.out:
        harness._write_json(os.path.join(args.out, "eval-report.json"), report)
    return report


def _cmd_experiment(args) -> dict:
    return experiment(args.config, args.out, seed=args.seed)


def _cmd_detect(args) -> dict:
    policy = AlertPolicy(window_seconds=args.window, threshold=args.alert_threshold)
    with threadpool_limits(limits=args.threads):
        return detect(args.model, args.log, policy,
                      blacklist_path=args.blacklist, out_dir=args.out,
                      threshold=args.threshold)


def _cmd_bench(args) -> dict:
    return bench(args.model, n=args.n, repetitions=args.reps,
                 batch_size=args.batch_size, threads=args.threads,
                 seed=args.seed)


def _cmd_triage(args) -> dict:
    queue = _read_config(args.queue)
    if not isinstance(queue, dict) or not queue:
        raise ConfigError(f"{args.queue} must map domains to timestamp lists")
    words = set(forge.load_wordlist())
    features = []
    for domain, stamps in sorted(queue.items()):
        if (not isinstance(stamps, list)
                or not all(isinstance(t, (int, float)) for t in stamps)):
            raise ConfigError(
                f"queue entry for {domain!r} must be a list of timestamps")
        features.append(
            triage.extract_features(domain, [float(t) for t in stamps],
                                    wordlist=words))
    groups = triage.cluster_positives(features)
    report = {
        "domains": len(features),
        "groups": [
            {
                "size": len(g.members),
                "regex": g.regex,
                "verdict": g.verdict,
                "centroid": g.centroid,
                "members": g.members,
            }
            for g in groups
        ],
    }
    if args.out:
        harness._write_json(args.out, report)
    return report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nxd",
                     description="Detect and triage algorithmically "
                                 "generated domain names in NX traffic")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", parents=[], help="generate a labeled corpus")
    p.add_argument("--config", required=True, help="corpus config (JSON)")
    p.add_argument("--out", required=True, help="corpus CSV to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blacklist", help="drop exact matches from this list")
    p.set_defaults(handler=_cmd_forge)

    p = sub.add_parser("train", help="train a detector on a corpus CSV")
    p.add_argument("--data", required=True, help="corpus CSV (domain,family)")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--mode", choices=("binary", "multiclass"), default="binary")
    p.add_argument("--config", help="training config (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="score a model against a labeled corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="directory for the report and exports")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("experiment", help="run a full protocol from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="artifact directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(handler=_cmd_experiment)

    p = sub.add_parser("detect", help="classify a query log and raise alerts")
    p.add_argument("--model", required=True)
    p.add_argument("--log", required=True, help="query log CSV (ts,host,qname)")
    p.add_argument("--out", help="directory for report and triage queue")
    p.add_argument("--blacklist", help="known-bad domains, one per line")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="score cutoff for a positive")
    p.add_argument("--window", type=int, default=3600,
                   help="alert window in seconds")
    p.add_argument("--alert-threshold", type=int, default=10,
                   help="positives per host per window that trigger an alert")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(handler=_cmd_detect)

    p = sub.add_parser("bench", help="measure prediction throughput")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--threads", type=int, default=None,
                   help="thread cap for the multi-thread figure")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=_cmd_bench)

    p = sub.add_parser("triage", help="group and summarize flagged domains")
    p.add_argument("--queue", required=True,
                   help="triage queue JSON (domain -> timestamps)")
    p.add_argument("--out", help="report file to write")
    p.set_defaults(handler=_cmd_triage)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        report = args.handler(args)
        json.dump(report, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
