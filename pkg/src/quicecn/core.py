"""Shared ECN vocabulary: codepoints, ACK counters and the classification enums."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class DecreasingCounter(ValueError):
    """A cumulative ECN counter went backwards between two ACKs."""


class EcnCodepoint(enum.IntEnum):
    """The 2-bit ECN field of the IPv4 ToS / IPv6 traffic class byte."""

    NOT_ECT = 0b00
    ECT1 = 0b01
    ECT0 = 0b10
    CE = 0b11

    @property
    def is_ect(self) -> bool:
        return self is not EcnCodepoint.NOT_ECT

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, text: str) -> EcnCodepoint:
        """Accept ``ect0``/``ECT(0)``-style names or two binary digits."""
        key = text.strip().lower().replace("(", "").replace(")", "").replace("-", "").replace("_", "")
        if key in _NAMES:
            return _NAMES[key]
        if len(key) == 2 and set(key) <= {"0", "1"}:
            return cls(int(key, 2))
        raise ValueError(f"unknown ECN codepoint {text!r}")


_LABELS = {
    EcnCodepoint.NOT_ECT: "Not-ECT",
    EcnCodepoint.ECT1: "ECT(1)",
    EcnCodepoint.ECT0: "ECT(0)",
    EcnCodepoint.CE: "CE",
}

_NAMES = {
    "notect": EcnCodepoint.NOT_ECT,
    "ect1": EcnCodepoint.ECT1,
    "ect0": EcnCodepoint.ECT0,
    "ce": EcnCodepoint.CE,
}


def encode_codepoint(cp: EcnCodepoint) -> int:
    return int(cp)


def decode_codepoint(bits: int) -> EcnCodepoint:
    if not 0 <= bits < 4:
        raise ValueError(f"ECN field is 2 bits, got {bits}")
    return EcnCodepoint(bits)


def set_ecn_bits(tos: int, cp: EcnCodepoint) -> int:
    """Replace the ECN bits of a ToS/traffic-class byte, keeping the DSCP bits."""
    return (tos & 0xFC) | int(cp)


@dataclass(frozen=True)
class EcnCounts:
    """Cumulative per-connection counters as carried in a QUIC ACK_ECN frame."""

    ect0: int = 0
    ect1: int = 0
    ce: int = 0

    def __post_init__(self) -> None:
        if min(self.ect0, self.ect1, self.ce) < 0:
            raise ValueError(f"ECN counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.ect0 + self.ect1 + self.ce

    def __add__(self, other: EcnCounts) -> EcnCounts:
        return EcnCounts(self.ect0 + other.ect0, self.ect1 + other.ect1, self.ce + other.ce)

    def bump(self, cp: EcnCodepoint, n: int = 1) -> EcnCounts:
        """Counts after receiving ``n`` more packets carrying ``cp``."""
        if cp is EcnCodepoint.ECT0:
            return EcnCounts(self.ect0 + n, self.ect1, self.ce)
        if cp is EcnCodepoint.ECT1:
            return EcnCounts(self.ect0, self.ect1 + n, self.ce)
        if cp is EcnCodepoint.CE:
            return EcnCounts(self.ect0, self.ect1, self.ce + n)
        return self

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.ect0, self.ect1, self.ce)


ZERO_COUNTS = EcnCounts()


def counts_delta(prev: EcnCounts, cur: EcnCounts) -> EcnCounts:
    """Component-wise ``cur - prev``; raises DecreasingCounter on any regression."""
    if cur.ect0 < prev.ect0 or cur.ect1 < prev.ect1 or cur.ce < prev.ce:
        raise DecreasingCounter(f"ECN counts went backwards: {prev.as_tuple()} -> {cur.as_tuple()}")
    return EcnCounts(cur.ect0 - prev.ect0, cur.ect1 - prev.ect1, cur.ce - prev.ce)


class MirrorClass(enum.Enum):
    """Outcome of one QUIC ECN probe. Exactly one applies per completed probe."""

    CAPABLE = "Capable"
    UNDERCOUNT = "Undercount"
    REMARK_ECT1 = "RemarkEct1"
    ALL_CE = "AllCe"
    NO_MIRRORING = "NoMirroring"
    UNREACHABLE = "Unreachable"

    def __str__(self) -> str:
        return self.value

    @property
    def label(self) -> str:
        return _MIRROR_LABELS[self]

    @property
    def mirrors(self) -> bool:
        return self not in (MirrorClass.NO_MIRRORING, MirrorClass.UNREACHABLE)


# Row labels as printed in the validation results table.
_MIRROR_LABELS = {
    MirrorClass.ALL_CE: "All CE",
    MirrorClass.REMARK_ECT1: "Re-Marking ECT(1)",
    MirrorClass.UNDERCOUNT: "Undercount",
    MirrorClass.CAPABLE: "Capable",
    MirrorClass.NO_MIRRORING: "No Mirroring",
    MirrorClass.UNREACHABLE: "Unreachable",
}


@dataclass(frozen=True)
class UsageClass:
    mirroring: bool = False
    capable: bool = False
    use: bool = False

    def __post_init__(self) -> None:
        if self.capable and not self.mirroring:
            raise ValueError("a capable endpoint necessarily mirrors")

    @property
    def full_use(self) -> bool:
        return self.use and self.capable

    def to_dict(self) -> dict[str, bool]:
        return {
            "mirroring": self.mirroring,
            "capable": self.capable,
            "use": self.use,
            "full_use": self.full_use,
        }

    @classmethod
    def from_dict(cls, data: dict) -> UsageClass:
        return cls(
            mirroring=bool(data.get("mirroring")),
            capable=bool(data.get("capable")),
            use=bool(data.get("use")),
        )
