"""TCP ECN classification from handshake/flag event traces.

Live capture and the simulator both emit the same line format, one event
per line::

    sent     syn     ECE,CWR  00
    received synack  ECE      00
    sent     data    -        11
    received ack     ECE      00

``flags`` is a comma-separated subset of {ECE, CWR} (``-`` for none) and the
last column is the IP ECN field as two binary digits. A ``fail`` event
(e.g. ``received fail - 00``) records a handshake that never completed.
"""

from __future__ import annotations

import enum
from collections.abc import Iterable
from dataclasses import dataclass, field

from .core import EcnCodepoint


class IncompleteTrace(ValueError):
    pass


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Direction(enum.Enum):
    SENT = "sent"
    RECEIVED = "received"


class Kind(enum.Enum):
    SYN = "syn"
    SYNACK = "synack"
    DATA = "data"
    ACK = "ack"
    FAIL = "fail"


ECE = "ECE"
CWR = "CWR"
_FLAGS = {ECE, CWR}
_DIRECTIONS = {"sent": Direction.SENT, "send": Direction.SENT, "received": Direction.RECEIVED, "recv": Direction.RECEIVED}


@dataclass(frozen=True)
class TcpEvent:
    direction: Direction
    kind: Kind
    flags: frozenset = frozenset()
    ip_codepoint: EcnCodepoint = EcnCodepoint.NOT_ECT

    def to_line(self) -> str:
        flags = ",".join(sorted(self.flags)) or "-"
        return f"{self.direction.value} {self.kind.value} {flags} {int(self.ip_codepoint):02b}"


@dataclass(frozen=True)
class TcpEcnClass:
    negotiated: bool = False
    ce_mirroring: bool = False
    use: bool = False

    def __post_init__(self) -> None:
        if self.ce_mirroring and not self.negotiated:
            raise ValueError("CE mirroring requires negotiation")

    @property
    def label(self) -> str:
        if not self.negotiated:
            base = "No Negotiation"
        elif self.ce_mirroring:
            base = "CE Mirroring"
        else:
            base = "Negotiation"
        return f"{base} + Use" if self.use else base

    def to_dict(self) -> dict[str, bool]:
        return {"negotiated": self.negotiated, "ce_mirroring": self.ce_mirroring, "use": self.use}

    @classmethod
    def from_dict(cls, data: dict) -> TcpEcnClass:
        return cls(bool(data.get("negotiated")), bool(data.get("ce_mirroring")), bool(data.get("use")))


@dataclass(frozen=True)
class ProbePlan:
    syn_flags: frozenset = field(default_factory=lambda: frozenset({ECE, CWR}))
    data_codepoint: EcnCodepoint = EcnCodepoint.ECT0


def build_tcp_probe_plan(mode: str = "ect0") -> ProbePlan:
    """ECN-setup SYN plus data segments marked ECT(0), or CE to force an ECE echo."""
    codepoints = {"ect0": EcnCodepoint.ECT0, "ce": EcnCodepoint.CE}
    if mode not in codepoints:
        raise ValueError(f"mode must be 'ect0' or 'ce', not {mode!r}")
    return ProbePlan(frozenset({ECE, CWR}), codepoints[mode])


def classify_tcp(trace: Iterable[TcpEvent]) -> TcpEcnClass:
    events = list(trace)
    synack = next(
        (e for e in events if e.direction is Direction.RECEIVED and e.kind is Kind.SYNACK), None
    )
    if synack is None:
        if any(e.kind is Kind.FAIL for e in events):
            return TcpEcnClass()
        raise IncompleteTrace("trace has neither a SYN-ACK nor a failure marker")

    # ECE together with CWR on a SYN-ACK is an echo, not an agreement
    negotiated = ECE in synack.flags and CWR not in synack.flags

    ce_mirroring = False
    ce_sent = False
    for e in events:
        if e.direction is Direction.SENT and e.kind is Kind.DATA and e.ip_codepoint is EcnCodepoint.CE:
            ce_sent = True
        elif ce_sent and e.direction is Direction.RECEIVED and e.kind is not Kind.SYNACK and ECE in e.flags:
            ce_mirroring = True
            break

    use = any(e.direction is Direction.RECEIVED and e.ip_codepoint.is_ect for e in events)
    return TcpEcnClass(negotiated=negotiated, ce_mirroring=negotiated and ce_mirroring, use=use)


def parse_trace(text: str) -> list[TcpEvent]:
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise TraceFormatError(lineno, f"expected 'dir kind flags codepoint', got {raw!r}")
        direction, kind, flags, cp = parts
        if direction.lower() not in _DIRECTIONS:
            raise TraceFormatError(lineno, f"unknown direction {direction!r}")
        try:
            kind_ = Kind(kind.lower())
        except ValueError:
            raise TraceFormatError(lineno, f"unknown kind {kind!r}") from None
        flag_set = frozenset() if flags == "-" else frozenset(f.upper() for f in flags.split(","))
        if not flag_set <= _FLAGS:
            raise TraceFormatError(lineno, f"unknown flags {flags!r}")
        if len(cp) != 2 or set(cp) - {"0", "1"}:
            raise TraceFormatError(lineno, f"codepoint must be two binary digits, got {cp!r}")
        events.append(TcpEvent(_DIRECTIONS[direction.lower()], kind_, flag_set, EcnCodepoint(int(cp, 2))))
    return events


def format_trace(events: Iterable[TcpEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)
