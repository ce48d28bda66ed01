"""Small event drivers that push the validator through canned ACK patterns,
plus record factories for the report tests."""

from quicecn.campaign import CampaignRecord
from quicecn.core import EcnCodepoint, EcnCounts, MirrorClass, UsageClass
from quicecn.validator import Validator, ValidatorConfig


def single_final_ack(e0: int, e1: int, ce: int, n: int = 5):
    """Send n marked packets, acknowledge all of them in one ACK.

    If the validator extends its testing window, the extra packets are
    acknowledged with CE, modelling a path that keeps marking.
    """
    v = Validator(ValidatorConfig(testing_packets=n))
    for _ in range(n):
        assert v.mark_decision() is EcnCodepoint.ECT0
    v.on_ack(n, EcnCounts(e0, e1, ce))
    extra = 0
    while not v.finished and v.mark_decision() is EcnCodepoint.ECT0:
        extra += 1
    if extra:
        v.on_ack(extra, EcnCounts(e0, e1, ce + extra))
    if not v.finished:
        v.close()
    return v


def make_record(domain, ip, cls=MirrorClass.CAPABLE, use=False, quic_ok=None, version="v1", ip_version=4):
    if quic_ok is None:
        quic_ok = cls is not MirrorClass.UNREACHABLE
    usage = UsageClass(cls.mirrors and quic_ok, cls is MirrorClass.CAPABLE and quic_ok, use)
    return CampaignRecord("t", domain, ip, ip_version, quic_ok, version if quic_ok else "", cls, usage)
