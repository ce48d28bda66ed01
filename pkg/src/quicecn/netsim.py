"""Deterministic simulated paths and QUIC/TCP endpoint models.

A scenario is a forward path of hop policies plus one endpoint behaviour.
The simulator drives the real :class:`~quicecn.validator.Validator` and the
real tracer against it, so whole probes can be checked without a network.

Scenario files are line oriented::

    # Arelion-style re-mark then clear
    hop remark-ect1 62.115.0.1
    hop bleach
    hop pass
    endpoint full-mirror
    tcp ecn

``hop <pass|bleach|remark-ect1|mark-ce|drop|silent|quiet> [address]`` lines
come first, then exactly one ``endpoint <full-mirror|no-mirror|swapped-ect|
undercount[:N]|all-ce|no-quic>`` line. Optional ``tcp <ecn|no-ecn>``,
``seed N`` and ``target ADDRESS`` lines may follow.

Only the forward path is modelled; server-to-client packets arrive with
the codepoint the server set.
"""

from __future__ import annotations

import enum
import ipaddress
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .core import EcnCodepoint, EcnCounts, MirrorClass, UsageClass
from .pathtrace import (
    PathTrace,
    ProbeReply,
    TraceConfig,
    build_ipv4_header,
    build_ipv6_header,
    build_time_exceeded,
    build_udp_header,
    quic_initial_template,
    run_trace,
)
from .tcp import CWR, ECE, Direction, Kind, TcpEcnClass, TcpEvent, build_tcp_probe_plan, classify_tcp
from .validator import Validator, ValidatorConfig, classify_usage

HOP_RTT = 0.010
DEFAULT_TARGET = "192.0.2.1"
DEFAULT_TARGET6 = "2001:db8::1"
SIM_QUIC_VERSION = "v1"


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class HopPolicy(enum.Enum):
    PASS = "pass"
    BLEACH = "bleach"
    REMARK_ECT1 = "remark-ect1"
    MARK_CE = "mark-ce"
    DROP = "drop"  # drops ECN-marked packets, forwards Not-ECT
    SILENT = "silent"  # unresponsive device: forwards, never answers
    QUIET = "quiet"  # ICMP-filtered router: forwards, sends no ICMP

    def apply(self, cp: EcnCodepoint) -> Optional[EcnCodepoint]:
        """Codepoint leaving this hop, or None if the packet is dropped here."""
        if self is HopPolicy.BLEACH:
            return EcnCodepoint.NOT_ECT
        if self is HopPolicy.REMARK_ECT1:
            return EcnCodepoint.ECT1 if cp is EcnCodepoint.ECT0 else cp
        if self is HopPolicy.MARK_CE:
            return EcnCodepoint.CE if cp.is_ect else cp
        if self is HopPolicy.DROP and cp.is_ect:
            return None
        return cp

    @property
    def answers_icmp(self) -> bool:
        return self not in (HopPolicy.SILENT, HopPolicy.QUIET)


class EndpointKind(enum.Enum):
    FULL_MIRROR = "full-mirror"
    NO_MIRROR = "no-mirror"
    SWAPPED_ECT = "swapped-ect"
    UNDERCOUNT_ON_SPACE_SWITCH = "undercount"
    ALL_CE_REPORTER = "all-ce"
    NO_QUIC = "no-quic"


@dataclass(frozen=True)
class EndpointBehavior:
    kind: EndpointKind
    # packets mirrored before the switch to the 1-RTT space drops ECN
    after: int = 2

    def __str__(self) -> str:
        if self.kind is EndpointKind.UNDERCOUNT_ON_SPACE_SWITCH:
            return f"undercount:{self.after}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> EndpointBehavior:
        name, _, arg = text.partition(":")
        kind = EndpointKind(name)
        if kind is EndpointKind.UNDERCOUNT_ON_SPACE_SWITCH:
            after = int(arg) if arg else 2
            if after < 0:
                raise ValueError("undercount threshold must be >= 0")
            return cls(kind, after)
        if arg:
            raise ValueError(f"{name} takes no argument")
        return cls(kind)


ALL_ENDPOINTS = [
    EndpointBehavior(EndpointKind.FULL_MIRROR),
    EndpointBehavior(EndpointKind.NO_MIRROR),
    EndpointBehavior(EndpointKind.SWAPPED_ECT),
    EndpointBehavior(EndpointKind.UNDERCOUNT_ON_SPACE_SWITCH, 2),
    EndpointBehavior(EndpointKind.ALL_CE_REPORTER),
    EndpointBehavior(EndpointKind.NO_QUIC),
]


@dataclass(frozen=True)
class Hop:
    policy: HopPolicy
    address: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    hops: tuple[Hop, ...]
    endpoint: EndpointBehavior
    seed: int = 0
    tcp_ecn: bool = True
    target: Optional[str] = None
    name: str = ""

    @property
    def policies(self) -> list[HopPolicy]:
        return [h.policy for h in self.hops]

    def hop_address(self, index: int, ip_version: int = 4) -> str:
        """Address of hop ``index`` (0-based), explicit or synthesized."""
        hop = self.hops[index]
        if hop.address:
            return hop.address
        if ip_version == 6:
            return str(ipaddress.IPv6Address("fd00::") + index + 1)
        return f"10.0.{index // 250}.{index % 250 + 1}"

    def to_text(self) -> str:
        lines = [f"hop {h.policy.value}" + (f" {h.address}" if h.address else "") for h in self.hops]
        lines.append(f"endpoint {self.endpoint}")
        if not self.tcp_ecn:
            lines.append("tcp no-ecn")
        if self.seed:
            lines.append(f"seed {self.seed}")
        if self.target:
            lines.append(f"target {self.target}")
        return "\n".join(lines) + "\n"


def load_scenario(text: str, name: str = "") -> Scenario:
    hops: list[Hop] = []
    endpoint = None
    seed = 0
    tcp_ecn = True
    target = None
    lineno = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *args = line.split()
        keyword = keyword.lower()
        if keyword == "hop":
            if endpoint is not None:
                raise ParseError(lineno, "hop lines must precede the endpoint line")
            if not 1 <= len(args) <= 2:
                raise ParseError(lineno, "expected 'hop <policy> [address]'")
            try:
                policy = HopPolicy(args[0].lower())
            except ValueError:
                raise ParseError(lineno, f"unknown hop policy {args[0]!r}") from None
            address = None
            if len(args) == 2:
                try:
                    address = str(ipaddress.ip_address(args[1]))
                except ValueError:
                    raise ParseError(lineno, f"bad hop address {args[1]!r}") from None
            hops.append(Hop(policy, address))
        elif keyword == "endpoint":
            if endpoint is not None:
                raise ParseError(lineno, "more than one endpoint line")
            if len(args) != 1:
                raise ParseError(lineno, "expected 'endpoint <behavior>'")
            try:
                endpoint = EndpointBehavior.parse(args[0].lower())
            except ValueError:
                raise ParseError(lineno, f"unknown endpoint behavior {args[0]!r}") from None
        elif keyword == "tcp" and len(args) == 1 and args[0].lower() in ("ecn", "no-ecn"):
            tcp_ecn = args[0].lower() == "ecn"
        elif keyword == "seed" and len(args) == 1 and args[0].lstrip("-").isdigit():
            seed = int(args[0])
        elif keyword == "target" and len(args) == 1:
            try:
                target = str(ipaddress.ip_address(args[0]))
            except ValueError:
                raise ParseError(lineno, f"bad target address {args[0]!r}") from None
        else:
            raise ParseError(lineno, f"cannot parse {raw.strip()!r}")
    if endpoint is None:
        raise ParseError(lineno + 1, "missing endpoint line")
    return Scenario(tuple(hops), endpoint, seed, tcp_ecn, target, name)


def forward(policies: list[HopPolicy], cp: EcnCodepoint, upto: Optional[int] = None) -> Optional[EcnCodepoint]:
    """Codepoint after the first ``upto`` hops (all hops by default), None if dropped."""
    current: Optional[EcnCodepoint] = cp
    for policy in policies[:upto]:
        current = policy.apply(current)
        if current is None:
            return None
    return current


class EndpointModel:
    """Receiver-side ECN accounting for one connection."""

    def __init__(self, behavior: EndpointBehavior):
        self.behavior = behavior
        self.counts = EcnCounts()
        self.marked_received = 0

    @property
    def kind(self) -> EndpointKind:
        return self.behavior.kind

    def receive(self, cp: EcnCodepoint) -> None:
        kind = self.kind
        if kind is EndpointKind.FULL_MIRROR:
            self.counts = self.counts.bump(cp)
        elif kind is EndpointKind.SWAPPED_ECT:
            swapped = {EcnCodepoint.ECT0: EcnCodepoint.ECT1, EcnCodepoint.ECT1: EcnCodepoint.ECT0}.get(cp, cp)
            self.counts = self.counts.bump(swapped)
        elif kind is EndpointKind.UNDERCOUNT_ON_SPACE_SWITCH:
            if self.marked_received < self.behavior.after:
                self.counts = self.counts.bump(cp)
        elif kind is EndpointKind.ALL_CE_REPORTER:
            if cp.is_ect:
                self.counts = self.counts.bump(EcnCodepoint.CE)
        if cp.is_ect:
            self.marked_received += 1

    def ack_counts(self) -> Optional[EcnCounts]:
        """ECN section of the next ACK, None for a plain ACK frame."""
        if self.kind in (EndpointKind.NO_MIRROR, EndpointKind.NO_QUIC) or self.marked_received == 0:
            return None
        if self.kind is EndpointKind.UNDERCOUNT_ON_SPACE_SWITCH and self.marked_received > self.behavior.after:
            return None
        return self.counts

    def send_codepoint(self) -> EcnCodepoint:
        if self.kind is EndpointKind.FULL_MIRROR:
            return EcnCodepoint.ECT0
        if self.kind is EndpointKind.SWAPPED_ECT:
            return EcnCodepoint.ECT1
        return EcnCodepoint.NOT_ECT


@dataclass
class SimProbeResult:
    mirror_class: MirrorClass
    usage: UsageClass
    received: Counter
    quic_ok: bool
    quic_version: str
    server_header: Optional[str]
    events: list[str] = field(default_factory=list)
    tcp_class: Optional[TcpEcnClass] = None
    tcp_events: list[TcpEvent] = field(default_factory=list)


_SERVER_HEADERS = {
    EndpointKind.FULL_MIRROR: "sim-quic",
    EndpointKind.NO_MIRROR: "sim-nomirror",
    EndpointKind.SWAPPED_ECT: "sim-swapped",
    EndpointKind.UNDERCOUNT_ON_SPACE_SWITCH: "LiteSpeed",
    EndpointKind.ALL_CE_REPORTER: "sim-allce",
}


def _cps(cps) -> str:
    return ",".join("drop" if cp is None else cp.name for cp in cps) or "-"


def simulate_probe(
    s: Scenario,
    cfg: Optional[ValidatorConfig] = None,
    *,
    request_packets: int = 12,
    burst: int = 2,
    max_rounds: int = 64,
    tcp: bool = False,
    tcp_mode: str = "ect0",
) -> SimProbeResult:
    """Run one validated QUIC request (and optionally a TCP probe) against ``s``.

    Each round the client sends ``burst`` packets; the server acknowledges
    whatever arrived with one ACK and answers with one packet of its own.
    A round with no arrivals is a timeout. The connection gives up after
    more consecutive timeouts than the validator tolerates.
    """
    cfg = cfg or ValidatorConfig()
    rng = random.Random(s.seed)
    cid = rng.getrandbits(64)
    v = Validator(cfg)
    endpoint = EndpointModel(s.endpoint)
    policies = s.policies
    received: Counter = Counter()
    events = [f"conn {cid:016x} endpoint={s.endpoint} hops={','.join(p.value for p in policies) or '-'}"]
    delivered = 0
    silent_rounds = 0
    reachable = s.endpoint.kind is not EndpointKind.NO_QUIC

    for rnd in range(1, max_rounds + 1):
        if delivered >= request_packets and v.finished:
            break
        sent = [v.mark_decision() for _ in range(burst)]
        arrivals = [forward(policies, cp) for cp in sent]
        line = f"r{rnd} sent={_cps(sent)} arrived={_cps(arrivals)}"
        if reachable and any(a is not None for a in arrivals):
            newly_marked = 0
            for cp, arrived in zip(sent, arrivals):
                if arrived is None:
                    continue
                endpoint.receive(arrived)
                newly_marked += cp.is_ect
                delivered += 1
            counts = endpoint.ack_counts()
            t = v.on_ack(newly_marked, counts)
            reply = endpoint.send_codepoint()
            received[reply] += 1
            silent_rounds = 0
            shown = "none" if counts is None else "%d,%d,%d" % counts.as_tuple()
            line += f" ack marked={newly_marked} counts={shown} reply={reply.name}"
        else:
            t = v.on_timeout()
            silent_rounds += 1
            line += " timeout"
        line += f" {t.from_phase.value}->{t.to_phase.value}" + (f"({t.reason})" if t.reason else "")
        events.append(line)
        if silent_rounds > cfg.max_timeouts:
            events.append("connection abandoned")
            break
    t = v.close()
    mirror_class = v.outcome()
    events.append(f"closed {mirror_class}")
    quic_ok = delivered >= request_packets
    usage = classify_usage(mirror_class, received)
    result = SimProbeResult(
        mirror_class=mirror_class,
        usage=usage,
        received=received,
        quic_ok=quic_ok,
        quic_version=SIM_QUIC_VERSION if quic_ok else "",
        server_header=_SERVER_HEADERS.get(s.endpoint.kind) if quic_ok else None,
        events=events,
    )
    if tcp:
        result.tcp_events = simulate_tcp(s, tcp_mode)
        result.tcp_class = classify_tcp(result.tcp_events)
    return result


def simulate_tcp(s: Scenario, mode: str = "ect0") -> list[TcpEvent]:
    """Event trace of an ECN-setup TCP exchange over the scenario path."""
    plan = build_tcp_probe_plan(mode)
    policies = s.policies
    events = [TcpEvent(Direction.SENT, Kind.SYN, plan.syn_flags)]
    if forward(policies, EcnCodepoint.NOT_ECT) is None:
        events.append(TcpEvent(Direction.RECEIVED, Kind.FAIL))
        return events
    synack_flags = frozenset({ECE}) if s.tcp_ecn else frozenset()
    events.append(TcpEvent(Direction.RECEIVED, Kind.SYNACK, synack_flags))
    negotiated = s.tcp_ecn
    data_cp = plan.data_codepoint if negotiated else EcnCodepoint.NOT_ECT
    events.append(TcpEvent(Direction.SENT, Kind.DATA, frozenset(), data_cp))
    arrived = forward(policies, data_cp)
    if arrived is None:
        # marked segment lost; the unmarked retransmission gets through
        events.append(TcpEvent(Direction.SENT, Kind.DATA, frozenset(), EcnCodepoint.NOT_ECT))
        arrived = forward(policies, EcnCodepoint.NOT_ECT)
    echo = frozenset({ECE}) if negotiated and arrived is EcnCodepoint.CE else frozenset()
    events.append(TcpEvent(Direction.RECEIVED, Kind.ACK, echo))
    if negotiated:
        events.append(TcpEvent(Direction.SENT, Kind.ACK, frozenset({CWR}) if echo else frozenset()))
    server_cp = EcnCodepoint.ECT0 if negotiated else EcnCodepoint.NOT_ECT
    events.append(TcpEvent(Direction.RECEIVED, Kind.DATA, frozenset(), server_cp))
    return events


class SimTransport:
    """ProbeTransport answering TTL-limited probes from a scenario's hop list."""

    def __init__(self, scenario: Scenario, source: Optional[str] = None):
        self.scenario = scenario
        self.source = source
        self.sent_ttls: list[int] = []

    def send_probe(self, target, ttl, codepoint, payload, timeout) -> Optional[ProbeReply]:
        self.sent_ttls.append(ttl)
        policies = self.scenario.policies
        version = ipaddress.ip_address(target).version
        if ttl > len(policies):
            if forward(policies, codepoint) is None:
                return None
            return ProbeReply(target, None, HOP_RTT * (len(policies) + 1), from_target=True)
        index = ttl - 1
        # probe must survive the hops before the one where it expires
        if forward(policies, codepoint, upto=index) is None:
            return None
        hop = policies[index]
        if not hop.answers_icmp:
            return None
        seen = forward(policies, codepoint, upto=ttl)
        if seen is None:
            # the hop drops on forwarding, but TTL expiry is handled first
            seen = forward(policies, codepoint, upto=index)
        assert seen is not None
        responder = self.scenario.hop_address(index, version)
        quoted = self._quote(target, seen, version, len(payload))
        return ProbeReply(responder, build_time_exceeded(quoted, version), HOP_RTT * ttl)

    def _quote(self, target: str, cp: EcnCodepoint, version: int, payload_len: int) -> bytes:
        udp = build_udp_header(50000, 443, payload_len)
        if version == 4:
            src = self.source or "198.51.100.10"
            return build_ipv4_header(src, target, cp, ttl=1, payload_len=8 + payload_len) + udp
        src = self.source or "2001:db8:ffff::10"
        return build_ipv6_header(src, target, cp, hop_limit=1, payload_len=8 + payload_len) + udp


def simulate_trace(
    s: Scenario,
    sent_cp: EcnCodepoint = EcnCodepoint.ECT0,
    cfg: Optional[TraceConfig] = None,
    target: Optional[str] = None,
) -> PathTrace:
    target = target or s.target or DEFAULT_TARGET
    return run_trace(target, quic_initial_template(target), sent_cp, SimTransport(s), cfg)
