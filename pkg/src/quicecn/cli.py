"""Command line entry point: ``quicecn probe|trace|campaign|report|sim``.

Every subcommand runs against simulated scenarios by default. Anything that
sends packets to real hosts requires ``--live``.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import ipaddress
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .campaign import (
    CampaignConfig,
    HashResolver,
    JsonlStore,
    SimAdapter,
    StaticResolver,
    StoreFailure,
    SystemResolver,
    ingest_domains,
    probe_domain,
    read_records,
    resolve_first,
    run_campaign,
    run_distributed,
)
from .core import EcnCodepoint
from .netsim import ParseError, load_scenario, simulate_probe, simulate_trace
from .pathtrace import PathTrace, PrefixMap, TransportUnavailable, localize_mutation
from .report import (
    load_input,
    load_org_map,
    ranking_from_input,
    render_rank,
    render_table1,
    render_table4,
    snapshot_diff,
    table1_from_input,
    table4_from_input,
)
from .validator import ValidatorConfig

log = logging.getLogger("quicecn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _scenario_from(path: str):
    p = Path(path)
    return load_scenario(p.read_text(encoding="utf-8"), p.stem)


def _target_ip(host: str, resolver, family: int) -> str:
    try:
        return str(ipaddress.ip_address(host))
    except ValueError:
        return resolve_first(host, resolver, family)


def _require_mode(args, what: str) -> None:
    if args.live and args.scenario:
        raise UsageError(f"{what}: --live and --scenario are mutually exclusive")
    if not args.live and not args.scenario:
        raise UsageError(f"{what}: give --scenario FILE, or --live to send real packets")


# -- subcommands -------------------------------------------------------------


def cmd_probe(args) -> int:
    _require_mode(args, "probe")
    cfg = CampaignConfig(
        ip_version=6 if args.ipv6 else 4, tcp=args.tcp, ce=args.ce, request_timeout=args.timeout, seed=args.seed
    )
    if args.live:
        from .live import LiveAdapter

        adapter, resolver = LiveAdapter(verify=not args.insecure), SystemResolver()
    else:
        s = _scenario_from(args.scenario)
        adapter, resolver = SimAdapter({s.name: s}), HashResolver()
    ip = _target_ip(args.host, resolver, cfg.ip_version)
    record = probe_domain(args.host, cfg, adapter, resolver, ip=ip)
    print(json.dumps(record.to_dict(), indent=2))
    return 0


def _print_trace(trace: PathTrace) -> None:
    print(f"trace to {trace.target}, sent {trace.sent_codepoint.label}")
    for hop in trace.hops:
        if hop.timed_out:
            print(f"{hop.ttl:3d}  *")
            continue
        quoted = "-" if hop.quoted_codepoint is None else hop.quoted_codepoint.label
        rtt = "" if hop.rtt is None else f"  {hop.rtt * 1000:.1f} ms"
        print(f"{hop.ttl:3d}  {hop.responder}  {quoted}{rtt}")
    print(f"terminated: {trace.terminated_by.value}")
    print(f"finding: {localize_mutation(trace)}")


def cmd_trace(args) -> int:
    _require_mode(args, "trace")
    cp = EcnCodepoint.CE if args.cp == "ce" else EcnCodepoint.ECT0
    family = 6 if args.ipv6 else 4
    if args.live:
        from .live import live_trace

        trace = live_trace(_target_ip(args.host, SystemResolver(), family), cp)
    else:
        s = _scenario_from(args.scenario)
        target = _target_ip(args.host, HashResolver(), family)
        trace = simulate_trace(s, cp, target=target)
    _print_trace(trace)
    return 0


def cmd_campaign(args) -> int:
    if bool(args.live) == bool(args.sim):
        raise UsageError("campaign: give exactly one of --sim DIR or --live")
    if bool(args.domains) == bool(args.redo):
        raise UsageError("campaign: give exactly one of --domains FILE or --redo RECORDS")
    cfg = CampaignConfig.load(args.config) if args.config else CampaignConfig()
    if args.live:
        from .live import LiveAdapter

        adapter = LiveAdapter(verify=not args.insecure)
        resolver = SystemResolver()
    else:
        adapter = SimAdapter.from_dir(args.sim)
        resolver = HashResolver()
    if args.resolver:
        resolver = StaticResolver.load(args.resolver)
    with JsonlStore(args.out) as store:
        if args.redo:
            summary = run_distributed(cfg, read_records(args.redo), adapter, store)
        else:
            ingest = ingest_domains(Path(args.domains).read_text(encoding="utf-8").splitlines(), prefix=args.prefix)
            if ingest.skipped:
                log.info("skipped %d malformed input lines", ingest.skipped)
            summary = run_campaign(cfg, ingest.domains, adapter, resolver, store)
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


def cmd_report(args) -> int:
    inp = load_input(args.input)
    if args.table == "table1":
        out = render_table1(table1_from_input(inp), args.format)
    elif args.table == "table4":
        out = render_table4(table4_from_input(inp), args.format)
    elif args.table == "as-rank":
        if inp.fixture is None and not (args.prefix_map and args.org_map):
            raise UsageError("report as-rank over records needs --prefix-map and --org-map")
        prefix_map = PrefixMap.load(args.prefix_map) if args.prefix_map else None
        org_map = load_org_map(Path(args.org_map).read_text(encoding="utf-8")) if args.org_map else {}
        out = render_rank(ranking_from_input(inp, prefix_map, org_map), args.top, args.format)
    else:
        if not args.input2:
            raise UsageError("report diff needs --in2 with the newer snapshot")
        old, new = load_input(args.input), load_input(args.input2)
        if old.records is None or new.records is None:
            raise UsageError("report diff compares two record files")
        matrix = snapshot_diff(old.records, new.records, args.min_cell)
        out = matrix.to_csv() if args.format == "csv" else matrix.to_text()
    sys.stdout.write(out if out.endswith("\n") else out + "\n")
    return 0


def cmd_sim(args) -> int:
    s = _scenario_from(args.scenario)
    cfg = ValidatorConfig(mark=EcnCodepoint.CE if args.ce else EcnCodepoint.ECT0)
    r = simulate_probe(s, cfg, tcp=args.tcp, tcp_mode="ce" if args.ce else "ect0")
    print(r.mirror_class.value)
    u = r.usage
    print(f"usage: mirroring={u.mirroring} capable={u.capable} use={u.use}")
    print(f"quic: ok={r.quic_ok} version={r.quic_version or '-'} server={r.server_header or '-'}")
    if r.tcp_class is not None:
        print(f"tcp: {r.tcp_class.label}")
    if args.events:
        for line in r.events:
            print(f"  {line}")
        for ev in r.tcp_events:
            print(f"  tcp {ev}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quicecn", description="QUIC ECN validation, path tracing and campaign reports.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("probe", help="validate ECN against one host")
    sp.add_argument("host")
    sp.add_argument("--ipv6", action="store_true")
    sp.add_argument("--tcp", action="store_true", help="also classify TCP ECN")
    sp.add_argument("--ce", action="store_true", help="mark with CE instead of ECT(0)")
    sp.add_argument("--scenario", metavar="FILE", help="simulated path and endpoint")
    sp.add_argument("--live", action="store_true", help="send real packets")
    sp.add_argument("--insecure", action="store_true", help="skip certificate verification (live)")
    sp.add_argument("--timeout", type=float, default=10.0, help="request timeout in seconds")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("trace", help="localize ECN mutations on the path to a host")
    sp.add_argument("host")
    sp.add_argument("--cp", choices=["ect0", "ce"], default="ect0", help="codepoint to send")
    sp.add_argument("--ipv6", action="store_true")
    sp.add_argument("--scenario", metavar="FILE")
    sp.add_argument("--live", action="store_true", help="raw sockets, needs CAP_NET_RAW")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("campaign", help="probe a domain list and write a record store")
    sp.add_argument("--domains", metavar="FILE", help="one domain (or rank,domain) per line")
    sp.add_argument("--redo", metavar="RECORDS", help="re-probe each viable IP of an earlier run once")
    sp.add_argument("--config", metavar="FILE", help="TOML or JSON campaign config")
    sp.add_argument("--out", metavar="FILE", required=True, help="JSONL record store")
    sp.add_argument("--sim", metavar="DIR", help="directory of .scn files (and optional assign.txt)")
    sp.add_argument("--live", action="store_true")
    sp.add_argument("--insecure", action="store_true")
    sp.add_argument("--resolver", metavar="JSON", help="static domain -> [addresses] map")
    sp.add_argument("--prefix", default="www.", help="label prepended to each domain (default: www.)")
    sp.set_defaults(func=cmd_campaign)

    sp = sub.add_parser("report", help="render tables from a record store or fixture")
    sp.add_argument("table", choices=["table1", "table4", "as-rank", "diff"])
    sp.add_argument("--in", dest="input", metavar="FILE", required=True)
    sp.add_argument("--in2", dest="input2", metavar="FILE", help="newer snapshot for diff")
    sp.add_argument("--prefix-map", metavar="FILE")
    sp.add_argument("--org-map", metavar="FILE")
    sp.add_argument("--min-cell", type=int, default=0, help="drop diff cells below this count")
    sp.add_argument("--top", type=int, default=5, help="rows per ranking")
    sp.add_argument("--format", choices=["text", "csv"], default="text")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sim", help="run one simulated scenario end to end")
    sp.add_argument("--scenario", metavar="FILE", required=True)
    sp.add_argument("--ce", action="store_true")
    sp.add_argument("--tcp", action="store_true")
    sp.add_argument("--events", action="store_true", help="print the probe's event log")
    sp.set_defaults(func=cmd_sim)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"quicecn: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ParseError, ValueError, LookupError, TransportUnavailable, StoreFailure, RuntimeError) as exc:
        print(f"quicecn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
