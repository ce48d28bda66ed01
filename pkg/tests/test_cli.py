import json
from pathlib import Path

import pytest

from quicecn.campaign import read_records
from quicecn.cli import main

FIX = Path(__file__).parent / "fixtures"
SCN = FIX / "scenarios"


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.mark.parametrize(
    "scenario, expected",
    [("bleach", "NoMirroring"), ("clean", "Capable"), ("litespeed", "Undercount"), ("swapped", "RemarkEct1"), ("noquic", "Unreachable")],
)
def test_sim_prints_class_first(capsys, scenario, expected):
    rc, out, _ = run(capsys, "sim", "--scenario", SCN / f"{scenario}.scn")
    assert rc == 0
    assert out.splitlines()[0] == expected


def test_sim_events_and_tcp(capsys):
    rc, out, _ = run(capsys, "sim", "--scenario", SCN / "clean.scn", "--tcp", "--events")
    assert rc == 0
    assert "tcp: " in out
    assert any(line.strip().startswith("closed") for line in out.splitlines())


def test_probe_help_exits_zero(capsys):
    rc, out, _ = run(capsys, "probe", "--help")
    assert rc == 0
    assert "usage:" in out and "--ipv6" in out


@pytest.mark.parametrize(
    "argv",
    [
        ["probe", "example.com", "--bogus"],
        ["frobnicate"],
        [],
        ["probe", "example.com"],  # neither --scenario nor --live
        ["trace", "example.com"],
        ["report", "diff", "--in", str(FIX / "table1.json")],  # --in2 missing
        ["report", "table9", "--in", "x"],
        ["campaign", "--domains", "d.txt", "--out", "o.jsonl"],
    ],
)
def test_usage_errors_exit_one(capsys, argv):
    rc, _, err = run(capsys, *argv)
    assert rc == 1
    assert "error" in err


def test_runtime_errors_exit_two(capsys, tmp_path):
    rc, _, err = run(capsys, "report", "table1", "--in", tmp_path / "missing.jsonl")
    assert rc == 2 and "FileNotFoundError" in err
    bad = tmp_path / "bad.scn"
    bad.write_text("hop 1 teleport\n")
    rc, _, err = run(capsys, "sim", "--scenario", bad)
    assert rc == 2 and "ParseError" in err
    rc, _, err = run(capsys, "report", "table4", "--in", FIX / "table1.json")
    assert rc == 2


def test_probe_sim_prints_record(capsys):
    rc, out, _ = run(capsys, "probe", "www.example.org", "--scenario", SCN / "clean.scn", "--tcp")
    assert rc == 0
    rec = json.loads(out)
    assert rec["mirror_class"] == "Capable"
    assert rec["quic_ok"] is True
    assert rec["tcp_class"] == {"negotiated": True, "ce_mirroring": False, "use": True}
    assert rec["ip"].startswith("198.1")


def test_probe_sim_ipv6_and_ce(capsys):
    rc, out, _ = run(capsys, "probe", "www.example.org", "--scenario", SCN / "clean.scn", "--ipv6", "--ce")
    assert rc == 0
    rec = json.loads(out)
    assert rec["ip_version"] == 6 and ":" in rec["ip"]


def test_trace_sim_reports_finding(capsys):
    rc, out, _ = run(capsys, "trace", "192.0.2.7", "--scenario", SCN / "arelion.scn")
    assert rc == 0
    assert "finding: Remarked(ECT(1)) at ttl 2" in out
    rc, out, _ = run(capsys, "trace", "192.0.2.7", "--scenario", SCN / "bleach.scn", "--cp", "ce")
    assert rc == 0
    assert "sent CE" in out


def test_report_table1_fixture(capsys):
    rc, out, _ = run(capsys, "report", "table1", "--in", FIX / "table1.json")
    assert rc == 0
    assert "3.3%" in out.splitlines()[2]
    assert "5.6%" in out.splitlines()[4]


def test_report_is_byte_stable(capsys):
    outs = set()
    for _ in range(3):
        for table, fixture in (("table1", "table1.json"), ("table4", "table4.json"), ("as-rank", "orgs_cno.json")):
            for fmt in ("text", "csv"):
                rc, out, _ = run(capsys, "report", table, "--in", FIX / fixture, "--format", fmt)
                assert rc == 0
                outs.add((table, fmt, out))
    assert len(outs) == 6


def _write_campaign_inputs(tmp_path, seed=3, n=20):
    domains = tmp_path / "domains.txt"
    domains.write_text("".join(f"{i},site{i}.example\n" for i in range(n)) + "not a domain!\n")
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"[campaign]\nseed = {seed}\ntrace_probability = 1.0\nmax_concurrency = 4\n")
    return domains, cfg


def test_campaign_sim_writes_store(capsys, tmp_path):
    domains, cfg = _write_campaign_inputs(tmp_path)
    out = tmp_path / "run.jsonl"
    rc, stdout, _ = run(capsys, "campaign", "--domains", domains, "--config", cfg, "--out", out, "--sim", SCN)
    assert rc == 0
    summary = json.loads(stdout)
    records = read_records(out)
    assert summary["records"] == len(records) == 20
    assert [r.domain for r in records] == [f"www.site{i}.example" for i in range(20)]
    traces = [json.loads(line) for line in (tmp_path / "run.traces.jsonl").read_text().splitlines()]
    assert {t["trace_ref"] for t in traces} == {r.trace_ref for r in records if r.trace_ref}

    # redo from the records: one probe per viable IP
    rc, stdout, _ = run(capsys, "campaign", "--redo", out, "--out", tmp_path / "redo.jsonl", "--sim", SCN)
    assert rc == 0
    viable = {r.ip for r in records if r.quic_ok}
    assert json.loads(stdout)["probes"] == len(viable)


def test_report_diff_over_campaigns(capsys, tmp_path):
    domains, cfg = _write_campaign_inputs(tmp_path)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, "campaign", "--domains", domains, "--config", cfg, "--out", a, "--sim", SCN)[0] == 0
    (SCN_COPY := tmp_path / "only_bleach").mkdir()
    (SCN_COPY / "bleach.scn").write_text((SCN / "bleach.scn").read_text())
    assert run(capsys, "campaign", "--domains", domains, "--config", cfg, "--out", b, "--sim", SCN_COPY)[0] == 0
    rc, out, _ = run(capsys, "report", "diff", "--in", a, "--in2", b, "--format", "csv")
    assert rc == 0
    rows = [line.split(",") for line in out.splitlines()[1:]]
    assert sum(int(r[2]) for r in rows) == 20
    assert all(r[1] == "NoMirroring v1" for r in rows)
    rc, filtered, _ = run(capsys, "report", "diff", "--in", a, "--in2", b, "--format", "csv", "--min-cell", 100)
    assert filtered.splitlines() == ["source,target,count"]


def test_report_table4_over_records(capsys, tmp_path):
    domains, cfg = _write_campaign_inputs(tmp_path)
    a = tmp_path / "a.jsonl"
    run(capsys, "campaign", "--domains", domains, "--config", cfg, "--out", a, "--sim", SCN)
    rc, out, _ = run(capsys, "report", "table4", "--in", a)
    assert rc == 0
    assert out.splitlines()[0].startswith("Mirrored Counters")


def test_as_rank_records_need_maps(capsys, tmp_path):
    domains, cfg = _write_campaign_inputs(tmp_path)
    a = tmp_path / "a.jsonl"
    run(capsys, "campaign", "--domains", domains, "--config", cfg, "--out", a, "--sim", SCN)
    rc, _, err = run(capsys, "report", "as-rank", "--in", a)
    assert rc == 1
    pm, om = tmp_path / "pfx.txt", tmp_path / "orgs.txt"
    pm.write_text("198.18.0.0/15,64500\n2001:db8::/32,64501\n")
    om.write_text("64500,Sim Hosting\n")
    rc, out, _ = run(capsys, "report", "as-rank", "--in", a, "--prefix-map", pm, "--org-map", om)
    assert rc == 0
    assert "Sim Hosting" in out
