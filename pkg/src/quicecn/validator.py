"""Per-connection QUIC ECN validation.

The validator marks the first ``testing_packets`` packets of a connection,
then stops marking and waits until those packets are acknowledged. The
mirrored ACK_ECN counters decide between the ECN-capable state and one of
the failure classes of :class:`~quicecn.core.MirrorClass`.

Decision rules, in priority order, for an ECT(0)-marking validator:

* nonzero ECT(1) delta in any ACK                    -> RemarkEct1 (immediate)
* cumulative CE larger than the number of marked sends -> AllCe (immediate)
* no ACK of the connection ever carried ECN counts   -> NoMirroring
* every acked marked packet reported CE              -> keep marking up to
  ``all_ce_window`` packets, then AllCe if the run of CE reports persists
* cumulative ECT(0)+CE below the acked marked count  -> Undercount
* otherwise                                          -> Capable

Undercount and NoMirroring are only decided once every testing packet has
been acknowledged, the timeout budget is spent, or the connection closes.
A Capable validator keeps checking later ACKs and fails on inconsistency.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Optional, Union

from .core import ZERO_COUNTS, EcnCodepoint, EcnCounts, MirrorClass, UsageClass, counts_delta


class InvalidConfig(ValueError):
    pass


class NotFinished(RuntimeError):
    """Outcome requested while validation is still waiting for ACKs."""


class Phase(enum.Enum):
    TESTING = "Testing"
    UNKNOWN = "Unknown"
    CAPABLE = "Capable"
    FAILED = "Failed"


@dataclass(frozen=True)
class ValidatorConfig:
    testing_packets: int = 5
    max_timeouts: int = 2
    all_ce_window: int = 10
    request_timeout: float = 10.0
    # ECT(0) normally; CE reproduces the CE-for-ECT replacement used for TCP comparison
    mark: EcnCodepoint = EcnCodepoint.ECT0

    def validate(self) -> None:
        if self.testing_packets < 1:
            raise InvalidConfig("testing_packets must be >= 1")
        if self.all_ce_window < self.testing_packets:
            raise InvalidConfig("all_ce_window must be >= testing_packets")
        if self.max_timeouts < 1:
            raise InvalidConfig("max_timeouts must be >= 1")
        if self.request_timeout <= 0:
            raise InvalidConfig("request_timeout must be positive")
        if self.mark not in (EcnCodepoint.ECT0, EcnCodepoint.CE):
            raise InvalidConfig("validator marks with ECT(0) or CE")


# RFC 9000's sample algorithm tests with 10 packets and 3 PTOs.
RFC9000_CONFIG = ValidatorConfig(testing_packets=10, max_timeouts=3, all_ce_window=10)


@dataclass(frozen=True)
class StateTransition:
    from_phase: Phase
    to_phase: Phase
    reason: Optional[MirrorClass] = None

    def __post_init__(self) -> None:
        if (self.reason is not None) != (self.to_phase is Phase.FAILED):
            raise ValueError("a transition carries a reason iff it ends in Failed")

    @property
    def changed(self) -> bool:
        return self.from_phase is not self.to_phase


@dataclass
class Validator:
    cfg: ValidatorConfig = field(default_factory=ValidatorConfig)

    phase: Phase = Phase.TESTING
    sent_ect0: int = 0  # marks sent while validating, extension included
    sent_marked: int = 0  # every marked send, Capable-phase marks included
    acked_marked: int = 0
    timeouts_seen: int = 0
    last_counts: Optional[EcnCounts] = None
    counts_ever_seen: bool = False
    consecutive_ce_acked: int = 0
    any_acked: bool = False
    failure: Optional[MirrorClass] = None
    extending: bool = False
    history: list[StateTransition] = field(default_factory=list, repr=False)
    _failed_on_timeouts: bool = field(default=False, repr=False)

    def __post_init__(self) -> None:
        self.cfg.validate()

    @property
    def finished(self) -> bool:
        return self.phase in (Phase.CAPABLE, Phase.FAILED)

    @property
    def _budget(self) -> int:
        return self.cfg.all_ce_window if self.extending else self.cfg.testing_packets

    def mark_decision(self) -> EcnCodepoint:
        """Codepoint for the next outgoing packet; counts it if marked."""
        if self.phase is Phase.FAILED:
            return EcnCodepoint.NOT_ECT
        if self.phase is Phase.CAPABLE:
            self.sent_marked += 1
            return self.cfg.mark
        if self.sent_ect0 < self._budget:
            self.sent_ect0 += 1
            self.sent_marked += 1
            if self.sent_ect0 >= self.cfg.testing_packets:
                self.phase = Phase.UNKNOWN
            return self.cfg.mark
        return EcnCodepoint.NOT_ECT

    def on_ack(self, newly_acked_marked: int, counts: Optional[EcnCounts] = None) -> StateTransition:
        """Process one ACK frame, in arrival order.

        ``newly_acked_marked`` counts packets first acknowledged by this ACK
        that were sent marked; ``counts`` are the frame's ECN counters, or
        None for a plain ACK frame.
        """
        if newly_acked_marked < 0 or newly_acked_marked > self.sent_marked - self.acked_marked:
            raise ValueError(
                f"{newly_acked_marked} newly acked marked packets, "
                f"but only {self.sent_marked - self.acked_marked} outstanding"
            )
        delta = None
        if counts is not None:
            # raises DecreasingCounter before any state is touched
            delta = counts_delta(self.last_counts or ZERO_COUNTS, counts)

        self.any_acked = True
        self.acked_marked += newly_acked_marked
        if delta is not None:
            self.counts_ever_seen = True
            self.last_counts = counts
        if newly_acked_marked:
            if delta is not None and delta.ce >= newly_acked_marked:
                self.consecutive_ce_acked += newly_acked_marked
            else:
                self.consecutive_ce_acked = 0

        if self.phase is Phase.FAILED:
            if self._failed_on_timeouts and self.failure is MirrorClass.UNREACHABLE:
                # the host answered after all: no ECN evidence rather than no host
                return self._fail(MirrorClass.NO_MIRRORING)
            return self._stay()

        if delta is not None:
            if delta.ect1 > 0:
                return self._fail(MirrorClass.REMARK_ECT1)
            if self._ce_overrepresented():
                return self._fail(MirrorClass.ALL_CE)

        if self.phase is Phase.CAPABLE:
            if newly_acked_marked and counts is None:
                return self._fail(MirrorClass.UNDERCOUNT)
            if self._covered() < self.acked_marked:
                return self._fail(MirrorClass.UNDERCOUNT)
            if self._all_ce_run():
                return self._fail(MirrorClass.ALL_CE)
            return self._stay()

        if self.sent_ect0 >= self._budget and self.acked_marked >= self.sent_ect0:
            return self._decide(final=False)
        return self._stay()

    def on_timeout(self) -> StateTransition:
        if self.finished:
            return self._stay()
        self.timeouts_seen += 1
        if self.timeouts_seen < self.cfg.max_timeouts:
            return self._stay()
        if self.acked_marked == 0:
            # every marked packet was lost
            self._failed_on_timeouts = True
            return self._fail(MirrorClass.NO_MIRRORING if self.any_acked else MirrorClass.UNREACHABLE)
        return self._decide(final=True)

    def close(self) -> StateTransition:
        """The connection ended; settle a validation still waiting for ACKs."""
        if self.finished:
            return self._stay()
        if not self.any_acked:
            return self._fail(MirrorClass.UNREACHABLE)
        if self.acked_marked == 0:
            return self._fail(MirrorClass.NO_MIRRORING)
        return self._decide(final=True)

    def outcome(self) -> MirrorClass:
        if self.phase is Phase.CAPABLE:
            return MirrorClass.CAPABLE
        if self.phase is Phase.FAILED:
            assert self.failure is not None
            return self.failure
        raise NotFinished(
            f"validation in {self.phase.value}: {self.acked_marked}/{self.sent_ect0} marked packets acked"
        )

    def _covered(self) -> int:
        counts = self.last_counts or ZERO_COUNTS
        if self.cfg.mark is EcnCodepoint.CE:
            return counts.ce
        return counts.ect0 + counts.ce

    def _ce_overrepresented(self) -> bool:
        if self.cfg.mark is EcnCodepoint.CE:
            return False
        return (self.last_counts or ZERO_COUNTS).ce > self.sent_marked

    def _all_ce_run(self) -> bool:
        if self.cfg.mark is EcnCodepoint.CE:
            return False
        return self.consecutive_ce_acked >= self.cfg.all_ce_window

    def _decide(self, final: bool) -> StateTransition:
        if not self.counts_ever_seen:
            return self._fail(MirrorClass.NO_MIRRORING)
        every_acked_ce = (
            self.cfg.mark is EcnCodepoint.ECT0
            and self.acked_marked > 0
            and self.consecutive_ce_acked >= self.acked_marked
        )
        if every_acked_ce:
            if self._all_ce_run():
                return self._fail(MirrorClass.ALL_CE)
            if not final and self.sent_ect0 < self.cfg.all_ce_window:
                # could be genuine congestion: keep probing before calling it
                self.extending = True
                return self._stay()
        if self._covered() < self.acked_marked:
            return self._fail(MirrorClass.UNDERCOUNT)
        return self._move(Phase.CAPABLE)

    def _fail(self, reason: MirrorClass) -> StateTransition:
        self.failure = reason
        return self._move(Phase.FAILED, reason)

    def _move(self, to: Phase, reason: Optional[MirrorClass] = None) -> StateTransition:
        transition = StateTransition(self.phase, to, reason)
        self.phase = to
        self.history.append(transition)
        return transition

    def _stay(self) -> StateTransition:
        return StateTransition(self.phase, self.phase, self.failure if self.phase is Phase.FAILED else None)


def new_validator(cfg: Optional[ValidatorConfig] = None) -> Validator:
    return Validator(cfg or ValidatorConfig())


def classify_usage(
    result: Union[Validator, MirrorClass], received: Mapping[EcnCodepoint, int]
) -> UsageClass:
    """Combine the validation outcome with the codepoints seen on incoming packets."""
    outcome = result.outcome() if isinstance(result, Validator) else result
    use = any(received.get(cp, 0) > 0 for cp in (EcnCodepoint.ECT0, EcnCodepoint.ECT1, EcnCodepoint.CE))
    return UsageClass(
        mirroring=outcome.mirrors,
        capable=outcome is MirrorClass.CAPABLE,
        use=use,
    )
