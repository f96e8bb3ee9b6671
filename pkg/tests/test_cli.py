"""Command-line pipeline tests: ingest, detect, bench, experiment, exit codes."""

from __future__ import annotations

import json
import random

import pytest

from nxdetect import cli, forge, harness
from nxdetect.errors import DataError


def _write(path, text):
    path.write_text(text)
    return str(path)


def _write_log(path, rows):
    lines = [cli.LOG_HEADER] + [f"{ts},{host},{qname}" for ts, host, qname in rows]
    return _write(path, "\n".join(lines) + "\n")


def _run(capsys, argv):
    code = cli.main(argv)
    out = capsys.readouterr().out
    return code, json.loads(out) if out.strip() else None


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def test_ingest_dedupes_and_retains_records(tmp_path):
    log = _write_log(tmp_path / "q.csv", [
        (1, "h1", "SAME.com"), (2, "h2", "same.com"), (3, "h1", "same.COM"),
    ])
    report = cli.ingest(log)
    assert report.unique_domains == ["same.com"]
    assert len(report.records) == 3
    assert all(r.qname == "same.com" for r in report.records)
    assert report.malformed == 0


def test_ingest_counts_and_skips_malformed(tmp_path):
    text = "\n".join([
        cli.LOG_HEADER,
        "1,h1,good.com",
        "2,h1,bad^char.com",      # character outside the alphabet
        "not,enough",             # wrong column count
        "-5,h1,neg.com",          # negative timestamp
        "3,,nohost.com",          # empty host
        "nan3,h1,badts.com",      # unparseable timestamp
        "",                       # blank lines are not records
        "4,h2,also-good.com",
    ]) + "\n"
    report = cli.ingest(_write(tmp_path / "q.csv", text))
    assert [r.qname for r in report.records] == ["good.com", "also-good.com"]
    assert report.malformed == 5


def test_ingest_requires_header_and_readable_file(tmp_path):
    with pytest.raises(cli.MalformedHeader):
        cli.ingest(_write(tmp_path / "no-header.csv", "1,h,a.com\n"))
    with pytest.raises(cli.MalformedHeader):
        cli.ingest(_write(tmp_path / "empty.csv", ""))
    with pytest.raises(harness.IoError):
        cli.ingest(str(tmp_path / "missing.csv"))


def test_ingest_unique_count_matches_set_recount(tmp_path):
    rng = random.Random(3)
    pool = [f"name{i}.com" for i in range(700)]
    rows, expected = [], set()
    planted_bad = 0
    for i in range(10_000):
        if rng.random() < 0.03:
            rows.append((i, "h", "bad^name.com"))
            planted_bad += 1
        else:
            qname = rng.choice(pool)
            rows.append((i, f"h{rng.randrange(9)}", qname))
            expected.add(qname)
    report = cli.ingest(_write_log(tmp_path / "big.csv", rows))
    assert len(report.unique_domains) == len(expected)
    assert set(report.unique_domains) == expected
    assert report.malformed == planted_bad
    assert len(report.records) == 10_000 - planted_bad


# ---------------------------------------------------------------------------
# per-host sliding-window alerting
# ---------------------------------------------------------------------------

def test_alert_policy_validation():
    with pytest.raises(DataError):
        cli.AlertPolicy(window_seconds=0)
    with pytest.raises(DataError):
        cli.AlertPolicy(threshold=0)
    assert cli.AlertPolicy() == cli.AlertPolicy(3600, 10)


def _alert_oracle(records, window, threshold):
    hosts = {}
    for r in records:
        hosts.setdefault(r.host_id, []).append(r.timestamp)
    out = {}
    for host, stamps in hosts.items():
        first, peak = None, 0
        for t in sorted(stamps):
            c = sum(1 for s in stamps if t - window < s <= t)
            peak = max(peak, c)
            if c >= threshold and first is None:
                first = t
        if first is not None:
            out[host] = (first, peak)
    return out


def test_window_alerts_match_quadratic_oracle():
    rng = random.Random(11)
    for window in (1, 50, 500):
        for threshold in (1, 2, 3, 5):
            records = [
                cli.QueryRecord(rng.uniform(0, 3000), f"h{rng.randrange(6)}", "x.com")
                for _ in range(rng.randrange(5, 120))
            ]
            expected = _alert_oracle(records, window, threshold)
            got = cli.sliding_window_alerts(
                records, cli.AlertPolicy(window, threshold))
            assert {a["host"] for a in got} == set(expected)
            for alert in got:
                first, peak = expected[alert["host"]]
                assert alert["first_alert_timestamp"] == first
                assert alert["peak_window_count"] == peak
            shuffled = records[:]
            rng.shuffle(shuffled)
            assert cli.sliding_window_alerts(
                shuffled, cli.AlertPolicy(window, threshold)) == got


def test_window_is_half_open_on_the_left():
    policy = cli.AlertPolicy(window_seconds=60, threshold=2)
    apart = [cli.QueryRecord(0.0, "h", "x.com"), cli.QueryRecord(60.0, "h", "x.com")]
    assert cli.sliding_window_alerts(apart, policy) == []
    close = [cli.QueryRecord(0.5, "h", "x.com"), cli.QueryRecord(60.0, "h", "x.com")]
    assert [a["host"] for a in cli.sliding_window_alerts(close, policy)] == ["h"]


def test_alert_count_is_monotone_in_threshold():
    rng = random.Random(4)
    records = [
        cli.QueryRecord(rng.uniform(0, 2000), f"h{rng.randrange(5)}", "x.com")
        for _ in range(300)
    ]
    counts = [
        len(cli.sliding_window_alerts(records, cli.AlertPolicy(300, t)))
        for t in range(1, 12)
    ]
    assert counts == sorted(counts, reverse=True)
    # threshold 1 alerts every host that has at least one positive
    assert counts[0] == len({r.host_id for r in records})


# ---------------------------------------------------------------------------
# trained-model fixtures shared by the pipeline tests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus_config = _write(root / "corpus.json", json.dumps(
        {"families": {"dnschanger": 120, "ramnit": 120}, "benign": 240}))
    train_config = _write(root / "train.json", json.dumps(
        {"max_epochs": 4, "batch_size": 64}))
    corpus = str(root / "corpus.csv")
    model = str(root / "model.json")
    assert cli.main(["forge", "--config", corpus_config, "--out", corpus,
                     "--seed", "11"]) == 0
    assert cli.main(["train", "--data", corpus, "--out", model,
                     "--config", train_config, "--seed", "3"]) == 0
    return {"root": root, "corpus": corpus, "model": model,
            "train_config": train_config}


def test_forge_cli_writes_corpus_and_filters_blacklist(tmp_path, capsys):
    config = _write(tmp_path / "c.json", json.dumps(
        {"families": {"blackhole": 30}, "benign": 20}))
    spec = [s for s in forge.load_family_specs() if s.name == "blackhole"][0]
    known = forge.generate_regex_dga(spec, seed=5, n=1)[0].domain
    blacklist = _write(tmp_path / "bl.txt", known.upper() + "\n")
    out = str(tmp_path / "corpus.csv")
    code, report = _run(capsys, ["forge", "--config", config, "--out", out,
                                 "--seed", "5", "--blacklist", blacklist])
    assert code == 0
    assert report["written"] == 49 and report["blacklist_removed"] == 1
    pairs = forge.read_corpus(out)
    assert len(pairs) == 49
    assert known not in {d for d, _ in pairs}
    assert report["by_family"] == {"benign": 20, "blackhole": 29}


def test_forge_cli_rejects_bad_configs(tmp_path, capsys):
    out = str(tmp_path / "c.csv")
    for bad in ({"families": {"nosuch": 5}}, {"bogus_key": 1}, {}):
        config = _write(tmp_path / "bad.json", json.dumps(bad))
        assert cli.main(["forge", "--config", config, "--out", out]) == 2
        capsys.readouterr()


def test_unique_sample_collection_dedupes():
    def doubled(k):
        return [forge.GeneratedSample(f"d{i // 2}.com", "f", ("f", 0, i))
                for i in range(k)]

    got = cli._unique_samples(doubled, 5, "doubled")
    assert [s.domain for s in got] == [f"d{i}.com" for i in range(5)]

    def constant(k):
        return [forge.GeneratedSample("same.com", "f", ("f", 0, i))
                for i in range(k)]

    with pytest.raises(cli.ConfigError):
        cli._unique_samples(constant, 2, "constant")


def test_train_eval_roundtrip(workspace, tmp_path, capsys):
    out_dir = str(tmp_path / "eval")
    code, report = _run(capsys, [
        "eval", "--model", workspace["model"], "--data", workspace["corpus"],
        "--out", out_dir])
    assert code == 0
    assert report["mode"] == "binary" and report["samples"] == 480
    assert report["metrics"]["acc"] >= 0.9
    on_disk = json.load(open(out_dir + "/eval-report.json"))
    assert on_disk == report


def test_detect_planted_burst_alerts_exactly_one_host(workspace, tmp_path, capsys):
    spec = [s for s in forge.load_family_specs() if s.name == "dnschanger"][0]
    burst = [s.domain for s in forge.generate_regex_dga(spec, seed=77, n=50)]
    benign = [s.domain for s in
              forge.generate_benign_like(forge.load_wordlist(), seed=77, n=48)]
    rows = [(2000 + 20 * i, "host-burst", d) for i, d in enumerate(burst)]
    rows += [(1000 + 11 * i, f"host-{i % 6}", d) for i, d in enumerate(benign)]
    log = _write_log(tmp_path / "q.csv", rows)
    out_dir = str(tmp_path / "det")
    code, report = _run(capsys, [
        "detect", "--model", workspace["model"], "--log", log,
        "--out", out_dir, "--window", "3600", "--alert-threshold", "10"])
    assert code == 0
    assert [a["host"] for a in report["alerts"]] == ["host-burst"]
    assert report["alerts"][0]["peak_window_count"] >= 10
    queue = json.load(open(out_dir + "/triage-queue.json"))
    assert set(queue) == {p["domain"] for p in report["positives"]}
    assert all(stamps == sorted(stamps) for stamps in queue.values())


def test_detect_blacklist_short_circuits_the_model(workspace, tmp_path, capsys):
    spec = [s for s in forge.load_family_specs() if s.name == "dnschanger"][0]
    domains = [s.domain for s in forge.generate_regex_dga(spec, seed=9, n=12)]
    rows = [(100 + i, "h1", d) for i, d in enumerate(domains)]
    rows.append((300, "h1", domains[0]))
    blacklist = _write(tmp_path / "bl.txt", domains[0].upper() + "\n")
    log = _write_log(tmp_path / "q.csv", rows)
    code, report = _run(capsys, [
        "detect", "--model", workspace["model"], "--log", log,
        "--blacklist", blacklist, "--alert-threshold", "1"])
    assert code == 0
    assert report["blacklist"] == {"domains": [domains[0]], "hit_records": 2}
    flagged = {p["domain"] for p in report["positives"]}
    assert domains[0] not in flagged  # never reaches the model
    assert flagged <= set(domains[1:])


def test_detect_threshold_one_alerts_every_positive_host(workspace, tmp_path, capsys):
    spec = [s for s in forge.load_family_specs() if s.name == "ramnit"][0]
    domains = [s.domain for s in forge.generate_regex_dga(spec, seed=21, n=30)]
    rows = [(50 * i, f"h{i % 7}", d) for i, d in enumerate(domains)]
    log = _write_log(tmp_path / "q.csv", rows)
    code, report = _run(capsys, [
        "detect", "--model", workspace["model"], "--log", log,
        "--alert-threshold", "1"])
    assert code == 0
    positives = {p["domain"] for p in report["positives"]}
    hosts_with_positive = {f"h{i % 7}" for i, d in enumerate(domains)
                           if d in positives}
    assert {a["host"] for a in report["alerts"]} == hosts_with_positive
    assert len(positives) >= 25  # the detector recognizes most of the family


def test_bench_accounting_and_batching_gain(workspace):
    slow = cli.bench(workspace["model"], n=1500, repetitions=2, batch_size=1)
    fast = cli.bench(workspace["model"], n=1500, repetitions=2, batch_size=1024)
    for report in (slow, fast):
        assert report["total_classified"] == 1500 * 2 * 2
        assert len(report["single_thread"]["runs"]) == 2
        assert len(report["multi_thread"]["runs"]) == 2
        assert report["single_thread"]["samples_per_second"]["mean"] > 0
    assert (fast["single_thread"]["samples_per_second"]["mean"]
            > slow["single_thread"]["samples_per_second"]["mean"])
    with pytest.raises(DataError):
        cli.bench(workspace["model"], n=999)
    with pytest.raises(DataError):
        cli.bench(workspace["model"], n=1000, repetitions=0)


def test_multiclass_train_eval_and_detect_mismatch(workspace, tmp_path, capsys):
    config = _write(tmp_path / "t.json", json.dumps(
        {"max_epochs": 1, "batch_size": 256}))
    model = str(tmp_path / "mc.json")
    code, report = _run(capsys, [
        "train", "--data", workspace["corpus"], "--out", model,
        "--mode", "multiclass", "--config", config, "--seed", "1"])
    assert code == 0
    labels = json.load(open(model + ".labels.json"))
    assert sorted(labels["classes"]) == ["benign", "dnschanger", "ramnit"]

    out_dir = str(tmp_path / "eval")
    code, report = _run(capsys, [
        "eval", "--model", model, "--data", workspace["corpus"],
        "--out", out_dir])
    assert code == 0
    assert report["mode"] == "multiclass"
    matrix = report["matrix"]
    assert len(matrix) == 3 and sum(map(sum, matrix)) == 480
    assert (tmp_path / "eval" / "confusion.pgm").exists()
    assert (tmp_path / "eval" / "confusion.csv").exists()

    log = _write_log(tmp_path / "q.csv", [(1, "h", "abc.com")])
    assert cli.main(["detect", "--model", model, "--log", log]) == 2
    capsys.readouterr()


def test_experiment_kfold_accounting_and_bitwise_rerun(tmp_path, capsys):
    config = _write(tmp_path / "exp.json", json.dumps({
        "protocol": "kfold", "seed": 7, "k": 2, "reps": 2, "holdout": 0.1,
        "corpus": {"families": {"dnschanger": 40, "blackhole": 40}, "benign": 80},
        "train": {"max_epochs": 2, "batch_size": 64},
    }))
    out1, out2 = str(tmp_path / "run1"), str(tmp_path / "run2")
    code, report = _run(capsys, ["experiment", "--config", config, "--out", out1])
    assert code == 0
    assert len(report["folds"]) == 4  # k x reps models and fold reports
    for rep in (0, 1):
        for fold in (0, 1):
            assert (tmp_path / "run1" / f"model-r{rep}-f{fold}.json").exists()
    assert (tmp_path / "run1" / "plan.json").exists()

    assert cli.main(["experiment", "--config", config, "--out", out2]) == 0
    capsys.readouterr()
    for name in ("report.json", "plan.json"):
        assert ((tmp_path / "run1" / name).read_bytes()
                == (tmp_path / "run2" / name).read_bytes())


def test_experiment_rejects_bad_configs(tmp_path, capsys):
    out = str(tmp_path / "o")
    for bad in ({"protocol": "nope"}, {"protocol": "kfold"},
                {"protocol": "kfold", "corpus": {"benign": 10},
                 "train": {"bogus": 1}}):
        config = _write(tmp_path / "bad.json", json.dumps(bad))
        assert cli.main(["experiment", "--config", config, "--out", out]) == 2
        capsys.readouterr()
    broken = _write(tmp_path / "broken.json", "{not json")
    assert cli.main(["experiment", "--config", broken, "--out", out]) == 2
    capsys.readouterr()


def test_triage_cli_groups_flagged_domains(workspace, tmp_path, capsys):
    spec = [s for s in forge.load_family_specs() if s.name == "dnschanger"][0]
    queue = {s.domain: [10.0 * s.seed_record[2], 10.0 * s.seed_record[2] + 5]
             for s in forge.generate_regex_dga(spec, seed=31, n=30)}
    queue["mailbox.net"] = [50.0]
    path = _write(tmp_path / "queue.json", json.dumps(queue))
    out = str(tmp_path / "triage.json")
    code, report = _run(capsys, ["triage", "--queue", path, "--out", out])
    assert code == 0
    assert report["domains"] == 31
    assert report["groups"][0]["size"] == 30
    assert report["groups"][0]["regex"] == "[a-z]{10}.com"
    assert json.load(open(out)) == report

    assert cli.main(["triage", "--queue",
                     _write(tmp_path / "bad.json", "[]"), "--out", out]) == 2
    capsys.readouterr()
    bad_ts = _write(tmp_path / "badts.json", json.dumps({"a.com": ["x"]}))
    assert cli.main(["triage", "--queue", bad_ts, "--out", out]) == 2
    capsys.readouterr()


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------

def test_exit_codes(tmp_path, capsys, monkeypatch):
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["bench"]) == 1                      # missing --model
    assert cli.main(["bench", "--model", str(tmp_path / "nope.json")]) == 2
    assert cli.main(["--help"]) == 0
    assert cli.main(["detect", "--help"]) == 0
    capsys.readouterr()

    def boom(path):
        raise RuntimeError("wires crossed")

    monkeypatch.setattr(cli.models, "load_model", boom)
    assert cli.main(["bench", "--model", "x.json"]) == 3
    capsys.readouterr()


def test_reports_are_json_on_stdout(tmp_path, capsys):
    config = _write(tmp_path / "c.json", json.dumps({"benign": 12}))
    code, report = _run(capsys, [
        "forge", "--config", config, "--out", str(tmp_path / "c.csv")])
    assert code == 0
    assert report["written"] == 12
