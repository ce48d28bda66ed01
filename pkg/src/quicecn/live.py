"""Network-facing adapters: raw-socket tracing, a QUIC ECN probe and a TCP probe.

Nothing here runs unless the CLI is given ``--live``. The QUIC probe needs
the optional ``aioquic`` dependency (``pip install quicecn[live]``); raw
tracing needs CAP_NET_RAW.

Known limits of the live probes:

* aioquic coalesces packets into datagrams and the IP ECN field is per
  datagram, so marks are decided per datagram and packets are mapped back
  to datagrams by size (a short-header packet always ends its datagram).
* ACK_ECN counters are kept per packet number space; the validator sees
  their sum over spaces, which is monotone as long as each space is.
* The TCP probe reads the kernel's TCP_INFO negotiation bits. It cannot
  send CE-marked data or observe ECE echoes, so ce_mirroring is always
  False there; negotiation also requires ``net.ipv4.tcp_ecn=1``.
"""

from __future__ import annotations

import errno
import importlib.util
import ipaddress
import logging
import select
import socket
import ssl
import struct
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .core import DecreasingCounter, EcnCodepoint, EcnCounts, MirrorClass, set_ecn_bits
from .pathtrace import (
    ICMP_TIME_EXCEEDED,
    ICMPV6_TIME_EXCEEDED,
    PathTrace,
    ProbeReply,
    TraceConfig,
    TransportUnavailable,
    Truncated,
    WrongIcmpType,
    parse_icmp_quotation,
    quic_initial_template,
    run_trace,
)
from .tcp import TcpEcnClass
from .validator import Validator, ValidatorConfig, classify_usage

log = logging.getLogger(__name__)

IP_RECVTOS = getattr(socket, "IP_RECVTOS", 13)
IPV6_RECVTCLASS = getattr(socket, "IPV6_RECVTCLASS", 66)
IPV6_TCLASS = getattr(socket, "IPV6_TCLASS", 67)
TCPI_OPT_ECN = 8
TCPI_OPT_ECN_SEEN = 16


def _family(ip: str) -> int:
    return socket.AF_INET6 if ipaddress.ip_address(ip).version == 6 else socket.AF_INET


def set_codepoint(sock: socket.socket, family: int, cp: EcnCodepoint) -> None:
    if family == socket.AF_INET6:
        sock.setsockopt(socket.IPPROTO_IPV6, IPV6_TCLASS, set_ecn_bits(0, cp))
    else:
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_TOS, set_ecn_bits(0, cp))


def enable_tos_reporting(sock: socket.socket, family: int) -> None:
    if family == socket.AF_INET6:
        sock.setsockopt(socket.IPPROTO_IPV6, IPV6_RECVTCLASS, 1)
    else:
        sock.setsockopt(socket.IPPROTO_IP, IP_RECVTOS, 1)


def codepoint_from_ancillary(ancdata) -> Optional[EcnCodepoint]:
    for level, kind, data in ancdata:
        if level == socket.IPPROTO_IP and kind == socket.IP_TOS and data:
            return EcnCodepoint(data[0] & 0b11)
        if level == socket.IPPROTO_IPV6 and kind == IPV6_TCLASS and len(data) >= 4:
            return EcnCodepoint(struct.unpack("i", data[:4])[0] & 0b11)
    return None


# -- tracing -----------------------------------------------------------------


class RawSocketTransport:
    """TTL-limited UDP probes with ICMP time-exceeded capture on a raw socket."""

    def __init__(self, port: int = 443):
        self.port = port

    def send_probe(self, target, ttl, codepoint, payload, timeout) -> Optional[ProbeReply]:
        family = _family(target)
        v6 = family == socket.AF_INET6
        try:
            icmp = socket.socket(family, socket.SOCK_RAW, socket.IPPROTO_ICMPV6 if v6 else socket.IPPROTO_ICMP)
        except PermissionError as exc:
            raise TransportUnavailable("raw ICMP socket needs CAP_NET_RAW") from exc
        except OSError as exc:
            raise TransportUnavailable(f"raw ICMP socket: {exc}") from exc
        udp = socket.socket(family, socket.SOCK_DGRAM)
        try:
            udp.bind(("::" if v6 else "0.0.0.0", 0))
            sport = udp.getsockname()[1]
            if v6:
                udp.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_UNICAST_HOPS, ttl)
            else:
                udp.setsockopt(socket.IPPROTO_IP, socket.IP_TTL, ttl)
            set_codepoint(udp, family, codepoint)
            start = time.monotonic()
            udp.sendto(payload, (target, self.port))
            deadline = start + timeout
            while True:
                left = deadline - time.monotonic()
                if left <= 0:
                    return None
                ready, _, _ = select.select([icmp, udp], [], [], left)
                now = time.monotonic()
                if udp in ready:
                    udp.recvfrom(65535)
                    return ProbeReply(target, None, now - start, from_target=True)
                if icmp in ready:
                    data, addr = icmp.recvfrom(65535)
                    msg = data if v6 else data[(data[0] & 0x0F) * 4 :]
                    reply = self._match(msg, addr[0], target, sport, v6, now - start)
                    if reply is not None:
                        return reply
        finally:
            udp.close()
            icmp.close()

    @staticmethod
    def _match(msg: bytes, responder: str, target: str, sport: int, v6: bool, rtt: float) -> Optional[ProbeReply]:
        if len(msg) < 8:
            return None
        unreachable = 1 if v6 else 3
        if msg[0] == unreachable and responder == target:
            return ProbeReply(target, None, rtt, from_target=True)
        if msg[0] != (ICMPV6_TIME_EXCEEDED if v6 else ICMP_TIME_EXCEEDED):
            return None
        try:
            quote = parse_icmp_quotation(msg, 6 if v6 else 4)
        except (Truncated, WrongIcmpType):
            # keep it: the hop answered even if the quote is unusable
            return ProbeReply(responder, msg, rtt)
        if str(quote.destination) != target:
            return None
        inner = msg[8:]
        hdr_len = 40 if v6 else (inner[0] & 0x0F) * 4
        if len(inner) >= hdr_len + 2 and struct.unpack("!H", inner[hdr_len : hdr_len + 2])[0] != sport:
            return None
        return ProbeReply(responder, msg, rtt)


def live_trace(target: str, sent_cp: EcnCodepoint = EcnCodepoint.ECT0, cfg: Optional[TraceConfig] = None) -> PathTrace:
    return run_trace(target, quic_initial_template(target), sent_cp, RawSocketTransport(), cfg)


# -- QUIC --------------------------------------------------------------------


@dataclass
class QuicProbeResult:
    mirror_class: MirrorClass
    received: Counter
    quic_ok: bool
    quic_version: str = ""
    server_header: Optional[str] = None
    status: Optional[int] = None
    error: Optional[str] = None
    transitions: list = field(default_factory=list)


_VERSION_NAMES = {0x00000001: "v1", 0x6B3343CF: "v2", 0xFF00001D: "d29", 0xFF00001B: "d27"}


def _require_aioquic():
    if importlib.util.find_spec("aioquic") is None:
        raise TransportUnavailable("live QUIC probing needs the optional 'aioquic' package")


def _ecn_connection_class():
    from aioquic.quic.connection import QuicConnection
    from aioquic.quic.packet import QuicFrameType, pull_ack_frame

    class EcnQuicConnection(QuicConnection):
        """QuicConnection that marks outgoing datagrams and feeds ACK_ECN counts to a validator."""

        def __init__(self, *args, validator: Validator, **kwargs):
            super().__init__(*args, **kwargs)
            self.validator = validator
            self.marked: set[int] = set()  # packet numbers sent inside marked datagrams
            self.space_counts: dict = {}
            self.ack_seen = False

        def _handle_ack_frame(self, context, frame_type, buf) -> None:
            start = buf.tell()
            ranges, _ = pull_ack_frame(buf)
            counts = None
            if frame_type == QuicFrameType.ACK_ECN:
                ect0, ect1, ce = buf.pull_uint_var(), buf.pull_uint_var(), buf.pull_uint_var()
                self.space_counts[context.epoch] = EcnCounts(ect0, ect1, ce)
                counts = sum(self.space_counts.values(), EcnCounts())
            buf.seek(start)
            space = self._spaces[context.epoch]
            newly = sum(1 for pn in space.sent_packets if pn in ranges and pn in self.marked)
            self.ack_seen = True
            try:
                self.validator.on_ack(newly, counts)
            except DecreasingCounter as exc:
                # a peer bug, not a path property; keep the connection going
                log.info("ignoring ACK_ECN counters: %s", exc)
                self.validator.on_ack(newly, None)
            super()._handle_ack_frame(context, frame_type, buf)

        def marked_datagrams_to_send(self, now: float):
            first_pn = self._packet_number
            datagrams = self.datagrams_to_send(now)
            packets = sorted(
                (p for s in self._spaces.values() for p in s.sent_packets.values() if p.packet_number >= first_pn),
                key=lambda p: p.packet_number,
            )
            out = []
            it = iter(packets)
            pending = next(it, None)
            for data, addr in datagrams:
                cp = self.validator.mark_decision()
                used = 0
                members = []
                while pending is not None and used + pending.sent_bytes <= len(data):
                    members.append(pending)
                    used += pending.sent_bytes
                    short = pending.packet_type.name == "ONE_RTT"
                    pending = next(it, None)
                    if short:
                        break
                if cp.is_ect and members:
                    self.marked.add(members[0].packet_number)
                    for extra in members[1:]:
                        # the whole datagram carries the mark; count what the validator allows
                        if self.validator.mark_decision().is_ect:
                            self.marked.add(extra.packet_number)
                out.append((data, addr, cp))
            return out

    return EcnQuicConnection


def quic_probe(
    host: str,
    ip: str,
    cfg: Optional[ValidatorConfig] = None,
    port: int = 443,
    path: str = "/",
    verify: bool = True,
) -> QuicProbeResult:
    """One HTTP/3 GET towards ``ip`` (SNI ``host``) with ECN validation."""
    _require_aioquic()
    from aioquic.h3.connection import H3_ALPN, H3Connection
    from aioquic.h3.events import DataReceived, HeadersReceived
    from aioquic.quic.configuration import QuicConfiguration
    from aioquic.quic.events import ConnectionTerminated, HandshakeCompleted

    cfg = cfg or ValidatorConfig()
    validator = Validator(cfg)
    qcfg = QuicConfiguration(is_client=True, alpn_protocols=H3_ALPN, server_name=host)
    if not verify:
        qcfg.verify_mode = ssl.CERT_NONE
    conn = _ecn_connection_class()(configuration=qcfg, validator=validator)
    h3 = H3Connection(conn)
    family = _family(ip)
    sock = socket.socket(family, socket.SOCK_DGRAM)
    enable_tos_reporting(sock, family)
    received: Counter = Counter()
    result = QuicProbeResult(MirrorClass.UNREACHABLE, received, False)
    addr = (ip, port)
    deadline = time.monotonic() + cfg.request_timeout
    stream_id = None
    done = False
    pto_seen = 0
    try:
        conn.connect(addr, now=time.monotonic())
        while not done:
            now = time.monotonic()
            for data, dest, cp in conn.marked_datagrams_to_send(now):
                set_codepoint(sock, family, cp)
                sock.sendto(data, dest)
            if now >= deadline:
                result.error = "request timeout"
                break
            timer = conn.get_timer()
            wait = deadline - now if timer is None else max(0.0, min(timer, deadline) - now)
            ready, _, _ = select.select([sock], [], [], wait)
            now = time.monotonic()
            if ready:
                data, anc, _, src = sock.recvmsg(65535, socket.CMSG_SPACE(4))
                cp = codepoint_from_ancillary(anc)
                if cp is not None:
                    received[cp] += 1
                conn.receive_datagram(data, src, now=now)
            elif timer is not None and now >= timer:
                conn.handle_timer(now=now)
                pto = conn._loss._pto_count
                if pto > pto_seen:
                    pto_seen = pto
                    validator.on_timeout()
            event = conn.next_event()
            while event is not None:
                if isinstance(event, HandshakeCompleted):
                    result.quic_version = _VERSION_NAMES.get(conn._version, hex(conn._version or 0))
                    stream_id = conn.get_next_available_stream_id()
                    h3.send_headers(
                        stream_id,
                        [(b":method", b"GET"), (b":scheme", b"https"), (b":authority", host.encode()),
                         (b":path", path.encode()), (b"user-agent", b"quicecn")],
                        end_stream=True,
                    )
                elif isinstance(event, ConnectionTerminated):
                    result.error = result.error or f"closed: {event.reason_phrase or event.error_code}"
                    done = True
                for h3_event in h3.handle_event(event):
                    if isinstance(h3_event, HeadersReceived) and h3_event.stream_id == stream_id:
                        for k, v in h3_event.headers:
                            if k == b"server":
                                result.server_header = v.decode(errors="replace")
                            elif k == b":status":
                                result.status = int(v)
                        if h3_event.stream_ended:
                            result.quic_ok = done = True
                    elif isinstance(h3_event, DataReceived) and h3_event.stream_id == stream_id and h3_event.stream_ended:
                        result.quic_ok = done = True
                event = conn.next_event()
        if result.quic_ok:
            conn.close()
            for data, dest, _ in conn.marked_datagrams_to_send(time.monotonic()):
                sock.sendto(data, dest)
    except OSError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
    finally:
        sock.close()
    validator.close()
    result.mirror_class = validator.outcome()
    if result.mirror_class is MirrorClass.UNREACHABLE:
        result.quic_ok = False
    result.transitions = list(validator.history)
    return result


# -- TCP ---------------------------------------------------------------------


def tcp_probe(ip: str, port: int = 443, timeout: float = 10.0) -> TcpEcnClass:
    """Negotiation and ECT-seen bits from TCP_INFO after a plain connect."""
    family = _family(ip)
    try:
        with open("/proc/sys/net/ipv4/tcp_ecn") as fh:
            if fh.read().strip() != "1":
                log.warning("net.ipv4.tcp_ecn != 1: the kernel will not request ECN")
    except OSError:
        pass
    with socket.socket(family, socket.SOCK_STREAM) as s:
        s.settimeout(timeout)
        try:
            s.connect((ip, port))
        except OSError as exc:
            if exc.errno in (errno.ECONNREFUSED, errno.ETIMEDOUT) or isinstance(exc, socket.timeout):
                return TcpEcnClass()
            raise
        try:
            s.sendall(b"\x16\x03\x01\x00\x00")  # elicit a response so ECT on inbound data is visible
            s.recv(1)
        except OSError:
            pass
        info = s.getsockopt(socket.IPPROTO_TCP, socket.TCP_INFO, 104)
    options = info[5]
    return TcpEcnClass(negotiated=bool(options & TCPI_OPT_ECN), use=bool(options & TCPI_OPT_ECN_SEEN))


# -- campaign adapter --------------------------------------------------------


class LiveAdapter:
    """ProbeAdapter over the live QUIC, TCP and trace probes."""

    def __init__(self, verify: bool = True):
        _require_aioquic()
        self.verify = verify

    def probe(self, domain: str, ip: str, cfg):
        from .campaign import ProbeOutcome

        r = quic_probe(domain, ip, cfg.validator_config(), verify=self.verify)
        tcp_class = None
        if cfg.tcp:
            try:
                tcp_class = tcp_probe(ip, timeout=cfg.request_timeout)
            except OSError as exc:
                log.info("tcp probe %s failed: %s", ip, exc)
        usage = classify_usage(r.mirror_class, r.received)
        return ProbeOutcome(r.mirror_class, usage, r.quic_ok, r.quic_version, r.server_header, tcp_class)

    def trace(self, ip: str, sent_cp: EcnCodepoint, domain: str = "") -> PathTrace:
        return live_trace(ip, sent_cp)
