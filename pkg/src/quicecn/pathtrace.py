"""Tracebox-style localization of on-path ECN changes.

QUIC-Initial-shaped UDP probes are sent with a fixed ECN codepoint and
increasing TTL. Each ICMP time-exceeded reply quotes the probe's IP header
as the expiring router saw it, so comparing the quoted ECN bits with the
sent ones pins down the first hop that cleared or re-marked them.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import logging
import struct
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Protocol, Union

from .core import EcnCodepoint, decode_codepoint

log = logging.getLogger(__name__)

IPV4_HEADER_LEN = 20
IPV6_HEADER_LEN = 40
ICMP_HEADER_LEN = 8
ICMP_TIME_EXCEEDED = 11
ICMPV6_TIME_EXCEEDED = 3
QUIC_PORT = 443


class Truncated(ValueError):
    """The ICMP quotation is shorter than one IP header."""


class WrongIcmpType(ValueError):
    pass


class TransportUnavailable(RuntimeError):
    """Raw probing is not possible here (missing privileges or platform support)."""


IPAddress = Union[ipaddress.IPv4Address, ipaddress.IPv6Address]


# -- packet codec ------------------------------------------------------------


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_ipv4_header(
    src: str, dst: str, codepoint: EcnCodepoint, ttl: int = 64, payload_len: int = 8, proto: int = 17, dscp: int = 0
) -> bytes:
    header = struct.pack(
        "!BBHHHBBH4s4s",
        0x45,
        (dscp << 2) | int(codepoint),
        IPV4_HEADER_LEN + payload_len,
        0,
        0x4000,
        ttl,
        proto,
        0,
        ipaddress.IPv4Address(src).packed,
        ipaddress.IPv4Address(dst).packed,
    )
    return header[:10] + struct.pack("!H", _checksum(header)) + header[12:]


def build_ipv6_header(
    src: str, dst: str, codepoint: EcnCodepoint, hop_limit: int = 64, payload_len: int = 8, next_header: int = 17, dscp: int = 0
) -> bytes:
    traffic_class = (dscp << 2) | int(codepoint)
    first_word = (6 << 28) | (traffic_class << 20)
    return struct.pack(
        "!IHBB16s16s",
        first_word,
        payload_len,
        next_header,
        hop_limit,
        ipaddress.IPv6Address(src).packed,
        ipaddress.IPv6Address(dst).packed,
    )


def build_udp_header(sport: int, dport: int, payload_len: int) -> bytes:
    return struct.pack("!HHHH", sport, dport, 8 + payload_len, 0)


def build_time_exceeded(quoted: bytes, ip_version: int) -> bytes:
    """ICMP(v6) time-exceeded message (header included) carrying ``quoted``."""
    icmp_type = ICMP_TIME_EXCEEDED if ip_version == 4 else ICMPV6_TIME_EXCEEDED
    body = struct.pack("!BBHI", icmp_type, 0, 0, 0) + quoted
    if ip_version == 4:
        body = body[:2] + struct.pack("!H", _checksum(body)) + body[4:]
    return body


class Quotation(NamedTuple):
    codepoint: EcnCodepoint
    destination: IPAddress


def parse_icmp_quotation(payload: bytes, ip_version: int) -> Quotation:
    """Decode the ECN bits and destination of the IP header quoted in an ICMP reply.

    ``payload`` is the ICMP message starting at its type byte, without the
    outer IP header.
    """
    if ip_version not in (4, 6):
        raise ValueError(f"IP version must be 4 or 6, got {ip_version}")
    if len(payload) < ICMP_HEADER_LEN:
        raise Truncated(f"ICMP message of {len(payload)} bytes")
    icmp_type, code = payload[0], payload[1]
    expected = ICMP_TIME_EXCEEDED if ip_version == 4 else ICMPV6_TIME_EXCEEDED
    if icmp_type != expected or code != 0:
        raise WrongIcmpType(f"ICMPv{ip_version if ip_version == 6 else ''} type {icmp_type} code {code}")
    quote = payload[ICMP_HEADER_LEN:]
    if ip_version == 4:
        if len(quote) < IPV4_HEADER_LEN:
            raise Truncated(f"quotation of {len(quote)} bytes, need {IPV4_HEADER_LEN}")
        codepoint = decode_codepoint(quote[1] & 0b11)
        return Quotation(codepoint, ipaddress.IPv4Address(quote[16:20]))
    if len(quote) < IPV6_HEADER_LEN:
        raise Truncated(f"quotation of {len(quote)} bytes, need {IPV6_HEADER_LEN}")
    traffic_class = ((quote[0] & 0x0F) << 4) | (quote[1] >> 4)
    return Quotation(decode_codepoint(traffic_class & 0b11), ipaddress.IPv6Address(quote[24:40]))


def _varint(value: int) -> bytes:
    if value < 0x40:
        return bytes([value])
    if value < 0x4000:
        return struct.pack("!H", 0x4000 | value)
    return struct.pack("!I", 0x80000000 | value)


def flow_dcid(target: str) -> bytes:
    """Destination connection ID held constant for all probes towards ``target``."""
    return hashlib.sha256(target.encode()).digest()[:8]


def quic_initial_template(target: str = "", size: int = 1200, version: int = 1) -> bytes:
    """A QUIC v1 Initial long-header packet padded to ``size`` bytes.

    Only the header is meaningful; the protected payload is zero padding.
    """
    dcid = flow_dcid(target)
    scid = dcid[::-1]
    head = bytes([0xC0 | 0x03]) + struct.pack("!I", version)
    head += bytes([len(dcid)]) + dcid + bytes([len(scid)]) + scid + _varint(0)
    pn_len = 4
    length = size - len(head) - 2
    packet = head + _varint(length) + b"\x00" * pn_len
    return packet + b"\x00" * (size - len(packet))


def is_plausible_initial(data: bytes) -> bool:
    return len(data) >= 7 and data[0] & 0xC0 == 0xC0 and data[0] & 0x30 == 0


# -- trace -------------------------------------------------------------------


class Termination(enum.Enum):
    TARGET_REACHED = "target-reached"
    TIMEOUT_BUDGET = "timeout-budget"
    MAX_TTL = "max-ttl"


@dataclass(frozen=True)
class TraceConfig:
    hop_timeout: float = 3.0
    max_consecutive_timeouts: int = 5
    max_ttl: int = 32
    first_ttl: int = 1


@dataclass(frozen=True)
class HopObservation:
    ttl: int
    responder: Optional[str] = None
    quoted_codepoint: Optional[EcnCodepoint] = None
    rtt: float = 0.0
    timed_out: bool = False

    def __post_init__(self) -> None:
        if self.quoted_codepoint is not None and (self.responder is None or self.timed_out):
            raise ValueError("a quotation needs a responding hop")

    def to_dict(self) -> dict:
        return {
            "ttl": self.ttl,
            "responder": self.responder,
            "quoted_codepoint": None if self.quoted_codepoint is None else self.quoted_codepoint.name,
            "rtt": round(self.rtt, 6),
            "timed_out": self.timed_out,
        }


@dataclass
class PathTrace:
    target: str
    sent_codepoint: EcnCodepoint
    hops: list[HopObservation] = field(default_factory=list)
    terminated_by: Optional[Termination] = None

    def quotes(self) -> list[Optional[EcnCodepoint]]:
        return [h.quoted_codepoint for h in self.hops]

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "sent_codepoint": self.sent_codepoint.name,
            "hops": [h.to_dict() for h in self.hops],
            "terminated_by": None if self.terminated_by is None else self.terminated_by.value,
        }


@dataclass(frozen=True)
class ProbeReply:
    responder: str
    # ICMP message for time-exceeded replies, None when the target itself answered
    icmp: Optional[bytes]
    rtt: float
    from_target: bool = False


class ProbeTransport(Protocol):
    def send_probe(
        self, target: str, ttl: int, codepoint: EcnCodepoint, payload: bytes, timeout: float
    ) -> Optional[ProbeReply]:
        """Send one TTL-limited probe; None if nothing answered within ``timeout``."""


def run_trace(
    target: str,
    probe_template: bytes,
    sent_cp: EcnCodepoint,
    sender: ProbeTransport,
    cfg: Optional[TraceConfig] = None,
) -> PathTrace:
    cfg = cfg or TraceConfig()
    if not is_plausible_initial(probe_template):
        raise ValueError("probe template does not look like a QUIC Initial packet")
    ip_version = ipaddress.ip_address(target).version
    trace = PathTrace(target, sent_cp)
    silent_run = 0
    for ttl in range(cfg.first_ttl, cfg.max_ttl + 1):
        reply = sender.send_probe(target, ttl, sent_cp, probe_template, cfg.hop_timeout)
        if reply is None:
            trace.hops.append(HopObservation(ttl, timed_out=True, rtt=cfg.hop_timeout))
            silent_run += 1
            if silent_run >= cfg.max_consecutive_timeouts:
                trace.terminated_by = Termination.TIMEOUT_BUDGET
                return trace
            continue
        silent_run = 0
        if reply.from_target:
            trace.hops.append(HopObservation(ttl, reply.responder, None, reply.rtt))
            trace.terminated_by = Termination.TARGET_REACHED
            return trace
        quoted = None
        try:
            quoted = parse_icmp_quotation(reply.icmp or b"", ip_version).codepoint
        except (Truncated, WrongIcmpType) as exc:
            log.debug("ttl %d from %s: unusable quotation (%s)", ttl, reply.responder, exc)
        trace.hops.append(HopObservation(ttl, reply.responder, quoted, reply.rtt))
    trace.terminated_by = Termination.MAX_TTL
    return trace


# -- analysis ----------------------------------------------------------------


class MutationKind(enum.Enum):
    NOT_CLEARED = "NotCleared"
    CLEARED = "Cleared"
    REMARKED = "Remarked"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class MutationFinding:
    kind: MutationKind
    remarked_to: Optional[EcnCodepoint] = None
    first_mutation_ttl: Optional[int] = None
    last_preserving_responder: Optional[str] = None
    first_mutated_responder: Optional[str] = None

    def __post_init__(self) -> None:
        mutated = self.kind in (MutationKind.CLEARED, MutationKind.REMARKED)
        if mutated != (self.first_mutation_ttl is not None):
            raise ValueError("first_mutation_ttl is set exactly for Cleared/Remarked")
        if (self.kind is MutationKind.REMARKED) != (self.remarked_to is not None):
            raise ValueError("remarked_to is set exactly for Remarked")

    def __str__(self) -> str:
        if self.kind is MutationKind.REMARKED:
            assert self.remarked_to is not None
            return f"Remarked({self.remarked_to.label}) at ttl {self.first_mutation_ttl}"
        if self.kind is MutationKind.CLEARED:
            return f"Cleared at ttl {self.first_mutation_ttl}"
        return self.kind.value

    def to_dict(self) -> dict:
        return {
            "class": self.kind.value,
            "remarked_to": None if self.remarked_to is None else self.remarked_to.name,
            "first_mutation_ttl": self.first_mutation_ttl,
            "last_preserving_responder": self.last_preserving_responder,
            "first_mutated_responder": self.first_mutated_responder,
        }


def localize_mutation(trace: PathTrace) -> MutationFinding:
    """First hop whose quotation differs from the sent codepoint."""
    if not trace.hops:
        raise ValueError("trace has no hops")
    last_preserving = None
    any_quote = False
    for hop in trace.hops:
        if hop.quoted_codepoint is None:
            continue
        any_quote = True
        if hop.quoted_codepoint is trace.sent_codepoint:
            last_preserving = hop.responder
            continue
        if hop.quoted_codepoint is EcnCodepoint.NOT_ECT:
            return MutationFinding(MutationKind.CLEARED, None, hop.ttl, last_preserving, hop.responder)
        return MutationFinding(
            MutationKind.REMARKED, hop.quoted_codepoint, hop.ttl, last_preserving, hop.responder
        )
    if not any_quote:
        return MutationFinding(MutationKind.INCONCLUSIVE)
    return MutationFinding(MutationKind.NOT_CLEARED, last_preserving_responder=last_preserving)


def mutation_chain(trace: PathTrace) -> list[tuple[EcnCodepoint, EcnCodepoint, Optional[str]]]:
    """Every visible codepoint change along the path as (before, after, responder)."""
    changes = []
    current = trace.sent_codepoint
    for hop in trace.hops:
        if hop.quoted_codepoint is not None and hop.quoted_codepoint is not current:
            changes.append((current, hop.quoted_codepoint, hop.responder))
            current = hop.quoted_codepoint
    return changes


@dataclass(frozen=True)
class PrefixEntry:
    network: Union[ipaddress.IPv4Network, ipaddress.IPv6Network]
    asn: int
    org: str


class PrefixMap:
    """Longest-prefix-match IP to ASN table.

    Text format: one ``CIDR,ASN,org-name`` per line; ``#`` starts a comment.
    """

    def __init__(self, entries: Iterable[PrefixEntry] = ()):
        self._by_len: dict[tuple[int, int], dict[int, PrefixEntry]] = {}
        for entry in entries:
            self.add(entry)

    def add(self, entry: PrefixEntry) -> None:
        net = entry.network
        self._by_len.setdefault((net.version, net.prefixlen), {})[int(net.network_address)] = entry

    def __len__(self) -> int:
        return sum(len(t) for t in self._by_len.values())

    @classmethod
    def parse(cls, text: str) -> PrefixMap:
        pm = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",", 2)]
            if len(parts) < 2:
                raise ValueError(f"line {lineno}: expected CIDR,ASN,org-name")
            try:
                network = ipaddress.ip_network(parts[0], strict=False)
                asn = int(parts[1].upper().removeprefix("AS"))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            pm.add(PrefixEntry(network, asn, parts[2] if len(parts) > 2 else ""))
        return pm

    @classmethod
    def load(cls, path) -> PrefixMap:
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def lookup(self, ip: Union[str, IPAddress]) -> Optional[PrefixEntry]:
        addr = ipaddress.ip_address(ip)
        value = int(addr)
        bits = addr.max_prefixlen
        lengths = sorted((plen for version, plen in self._by_len if version == addr.version), reverse=True)
        for plen in lengths:
            key = value & (((1 << plen) - 1) << (bits - plen)) if plen else 0
            entry = self._by_len[(addr.version, plen)].get(key)
            if entry is not None:
                return entry
        return None

    def asn(self, ip: Union[str, IPAddress, None]) -> Optional[int]:
        if ip is None:
            return None
        entry = self.lookup(ip)
        return None if entry is None else entry.asn


def attribute_as(
    finding: MutationFinding, trace: PathTrace, prefix_map: PrefixMap
) -> tuple[Optional[int], Optional[int]]:
    """ASNs around the change: (last hop that preserved the codepoint, first hop that changed it)."""
    if finding.first_mutation_ttl is None:
        return (None, None)
    return (prefix_map.asn(finding.last_preserving_responder), prefix_map.asn(finding.first_mutated_responder))
