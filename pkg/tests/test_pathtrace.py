import ipaddress

import pytest
from hypothesis import given, strategies as st

from quicecn.core import EcnCodepoint
from quicecn.pathtrace import (
    HopObservation,
    MutationFinding,
    MutationKind,
    PathTrace,
    PrefixMap,
    ProbeReply,
    Termination,
    TraceConfig,
    Truncated,
    WrongIcmpType,
    attribute_as,
    build_ipv4_header,
    build_ipv6_header,
    build_time_exceeded,
    build_udp_header,
    flow_dcid,
    is_plausible_initial,
    localize_mutation,
    mutation_chain,
    parse_icmp_quotation,
    quic_initial_template,
    run_trace,
)

from oracles import fold_codepoint

E0, E1, CE, NE = EcnCodepoint.ECT0, EcnCodepoint.ECT1, EcnCodepoint.CE, EcnCodepoint.NOT_ECT
TARGET = "192.0.2.1"


def v4_quote(cp, dst=TARGET, tos=None):
    hdr = bytearray(build_ipv4_header("198.51.100.10", dst, cp, ttl=1, payload_len=16))
    if tos is not None:
        hdr[1] = tos
    return bytes(hdr) + build_udp_header(50000, 443, 8)


def v6_quote(cp, dst="2001:db8::1", dscp=0):
    return build_ipv6_header("2001:db8::10", dst, cp, hop_limit=1, payload_len=16, dscp=dscp) + build_udp_header(
        50000, 443, 8
    )


# -- codec -------------------------------------------------------------------


def test_tos_0x02_is_ect0():
    q = parse_icmp_quotation(build_time_exceeded(v4_quote(NE, tos=0x02), 4), 4)
    assert q.codepoint is E0
    assert q.destination == ipaddress.ip_address(TARGET)


def test_tos_0x01_is_ect1():
    assert parse_icmp_quotation(build_time_exceeded(v4_quote(NE, tos=0x01), 4), 4).codepoint is E1


def test_dscp_bits_ignored():
    assert parse_icmp_quotation(build_time_exceeded(v4_quote(NE, tos=0xB8 | 0x03), 4), 4).codepoint is CE


def test_twelve_byte_quotation_truncated():
    msg = build_time_exceeded(v4_quote(E0)[:12], 4)
    with pytest.raises(Truncated):
        parse_icmp_quotation(msg, 4)


def test_short_v6_quotation_truncated():
    with pytest.raises(Truncated):
        parse_icmp_quotation(build_time_exceeded(v6_quote(E0)[:39], 6), 6)


def test_short_icmp_header_truncated():
    with pytest.raises(Truncated):
        parse_icmp_quotation(b"\x0b\x00", 4)


@pytest.mark.parametrize("icmp_type,code", [(3, 3), (0, 0), (11, 1)])
def test_wrong_icmp_type(icmp_type, code):
    msg = bytearray(build_time_exceeded(v4_quote(E0), 4))
    msg[0], msg[1] = icmp_type, code
    with pytest.raises(WrongIcmpType):
        parse_icmp_quotation(bytes(msg), 4)


def test_icmpv4_type_rejected_for_v6():
    with pytest.raises(WrongIcmpType):
        parse_icmp_quotation(build_time_exceeded(v6_quote(E0), 4), 6)


def test_bad_ip_version():
    with pytest.raises(ValueError):
        parse_icmp_quotation(build_time_exceeded(v4_quote(E0), 4), 5)


@pytest.mark.parametrize("cp", list(EcnCodepoint))
@pytest.mark.parametrize("version", [4, 6])
def test_codec_roundtrip(cp, version):
    quote = v4_quote(cp) if version == 4 else v6_quote(cp)
    assert parse_icmp_quotation(build_time_exceeded(quote, version), version).codepoint is cp


@given(st.sampled_from(list(EcnCodepoint)), st.integers(0, 63))
def test_v6_traffic_class_split_across_bytes(cp, dscp):
    quote = v6_quote(cp, dscp=dscp)
    # independent decode of the 8-bit traffic class straddling bytes 0 and 1
    tc = int.from_bytes(quote[:4], "big") >> 20 & 0xFF
    assert tc == (dscp << 2) | int(cp)
    assert parse_icmp_quotation(build_time_exceeded(quote, 6), 6).codepoint is cp


def test_ipv4_header_checksum_valid():
    hdr = build_ipv4_header("198.51.100.10", TARGET, E0)
    words = [int.from_bytes(hdr[i : i + 2], "big") for i in range(0, 20, 2)]
    total = sum(words)
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    assert total == 0xFFFF


def test_initial_template_shape():
    t = quic_initial_template(TARGET)
    assert len(t) == 1200
    assert is_plausible_initial(t)
    assert t[1:5] == b"\x00\x00\x00\x01"
    assert t[6:14] == flow_dcid(TARGET)
    # flow id constant per destination, distinct across destinations
    assert quic_initial_template(TARGET) == t
    assert flow_dcid("192.0.2.2") != flow_dcid(TARGET)


def test_short_header_not_plausible():
    assert not is_plausible_initial(b"\x40" + b"\x00" * 30)
    assert not is_plausible_initial(b"")


# -- run_trace ---------------------------------------------------------------


class FakeTransport:
    """Hops given as a list of quoted codepoints; None marks a silent hop."""

    def __init__(self, hops, target_answers=True, icmp_override=None):
        self.hops = hops
        self.target_answers = target_answers
        self.icmp_override = icmp_override or {}
        self.ttls = []

    def send_probe(self, target, ttl, codepoint, payload, timeout):
        self.ttls.append(ttl)
        if ttl > len(self.hops):
            return ProbeReply(target, None, 0.01 * ttl, from_target=True) if self.target_answers else None
        cp = self.hops[ttl - 1]
        if cp is None:
            return None
        icmp = self.icmp_override.get(ttl, build_time_exceeded(v4_quote(cp, target), 4))
        return ProbeReply(f"10.0.0.{ttl}", icmp, 0.01 * ttl)


def trace_with(hops, cfg=None, **kw):
    transport = FakeTransport(hops, **kw)
    return run_trace(TARGET, quic_initial_template(TARGET), E0, transport, cfg), transport


def test_three_responsive_hops_reach_target():
    tr, _ = trace_with([E0, E0, E0])
    assert tr.terminated_by is Termination.TARGET_REACHED
    assert tr.quotes()[:3] == [E0, E0, E0]
    assert len(tr.hops) == 4 and tr.hops[-1].responder == TARGET


def test_five_silent_hops_from_ttl_2_exhaust_budget():
    tr, transport = trace_with([E0] + [None] * 5 + [E0, E0])
    assert tr.terminated_by is Termination.TIMEOUT_BUDGET
    assert tr.hops[-1].ttl == 6
    assert transport.ttls == [1, 2, 3, 4, 5, 6]


def test_isolated_silent_hop():
    tr, _ = trace_with([E0, E0, E0, None, E0])
    assert tr.hops[3].ttl == 4 and tr.hops[3].timed_out
    assert tr.hops[4].ttl == 5 and tr.hops[4].quoted_codepoint is E0


def test_four_timeouts_are_tolerated():
    tr, _ = trace_with([None] * 4 + [E0])
    assert tr.terminated_by is Termination.TARGET_REACHED


def test_max_ttl_respected():
    tr, transport = trace_with([E0] * 40, cfg=TraceConfig(max_ttl=8))
    assert tr.terminated_by is Termination.MAX_TTL
    assert max(transport.ttls) == 8


def test_unusable_quote_is_responsive_but_unquoted():
    short = build_time_exceeded(v4_quote(NE)[:12], 4)
    tr, _ = trace_with([E0, NE, E0], icmp_override={2: short})
    hop = tr.hops[1]
    assert hop.responder == "10.0.0.2" and hop.quoted_codepoint is None and not hop.timed_out
    assert localize_mutation(tr).kind is MutationKind.NOT_CLEARED


def test_template_checked():
    with pytest.raises(ValueError):
        run_trace(TARGET, b"\x00" * 100, E0, FakeTransport([E0]))


@given(st.lists(st.one_of(st.none(), st.sampled_from(list(EcnCodepoint))), max_size=40), st.integers(1, 40))
def test_trace_bounds(hops, max_ttl):
    cfg = TraceConfig(max_ttl=max_ttl)
    tr, transport = trace_with(hops, cfg=cfg, target_answers=False)
    assert max(transport.ttls) <= max_ttl
    assert transport.ttls == list(range(1, len(transport.ttls) + 1))
    run = 0
    for hop in tr.hops:
        run = run + 1 if hop.timed_out else 0
        assert run <= cfg.max_consecutive_timeouts


def test_hop_observation_invariant():
    with pytest.raises(ValueError):
        HopObservation(3, None, E0)
    with pytest.raises(ValueError):
        HopObservation(3, "10.0.0.3", E0, timed_out=True)


# -- localize_mutation -------------------------------------------------------


def quoted_trace(quotes, sent=E0):
    hops = [
        HopObservation(i, None if q is None else f"10.0.0.{i}", q, 0.01, timed_out=q is None)
        for i, q in enumerate(quotes, 1)
    ]
    return PathTrace(TARGET, sent, hops, Termination.TARGET_REACHED)


def test_cleared_at_third_hop():
    f = localize_mutation(quoted_trace([E0, E0, NE]))
    assert f.kind is MutationKind.CLEARED and f.first_mutation_ttl == 3
    assert f.last_preserving_responder == "10.0.0.2" and f.first_mutated_responder == "10.0.0.3"


def test_remarked_then_cleared():
    tr = quoted_trace([E0, E1, NE])
    f = localize_mutation(tr)
    assert f.kind is MutationKind.REMARKED and f.remarked_to is E1 and f.first_mutation_ttl == 2
    assert str(f) == "Remarked(ECT(1)) at ttl 2"
    assert mutation_chain(tr) == [(E0, E1, "10.0.0.2"), (E1, NE, "10.0.0.3")]


def test_all_preserved_is_not_cleared():
    f = localize_mutation(quoted_trace([E0] * 4))
    assert f.kind is MutationKind.NOT_CLEARED and f.first_mutation_ttl is None


def test_no_quotes_inconclusive():
    assert localize_mutation(quoted_trace([None, None])).kind is MutationKind.INCONCLUSIVE


def test_empty_trace_rejected():
    with pytest.raises(ValueError):
        localize_mutation(PathTrace(TARGET, E0))


def test_finding_invariants():
    with pytest.raises(ValueError):
        MutationFinding(MutationKind.CLEARED)
    with pytest.raises(ValueError):
        MutationFinding(MutationKind.NOT_CLEARED, first_mutation_ttl=2)
    with pytest.raises(ValueError):
        MutationFinding(MutationKind.REMARKED, first_mutation_ttl=2)


@pytest.mark.parametrize("policy", ["bleach", "remark-ect1", "mark-ce"])
def test_single_mutator_localized_exhaustively(policy):
    expected_kind = MutationKind.CLEARED if policy == "bleach" else MutationKind.REMARKED
    for length in range(1, 11):
        for k in range(1, length + 1):
            policies = ["pass"] * length
            policies[k - 1] = policy
            quotes = fold_codepoint(policies, E0)
            f = localize_mutation(quoted_trace(quotes))
            assert f.kind is expected_kind, (length, k)
            assert f.first_mutation_ttl == k


# -- AS attribution ----------------------------------------------------------

PREFIXES = """\
# cidr,asn,org
62.115.0.0/16,1299,Arelion
62.115.128.0/17,AS1299,Arelion (more specific)
154.54.0.0/16,174,Cogent
2001:2000::/20,1299,Arelion
"""


def test_longest_prefix_match():
    pm = PrefixMap.parse(PREFIXES)
    assert len(pm) == 4
    assert pm.lookup("62.115.200.1").org == "Arelion (more specific)"
    assert pm.lookup("62.115.1.1").org == "Arelion"
    assert pm.asn("2001:2000::1") == 1299
    assert pm.asn("192.0.2.1") is None
    assert pm.asn(None) is None


def test_prefix_map_rejects_garbage():
    with pytest.raises(ValueError, match="line 1"):
        PrefixMap.parse("not-a-prefix,12,x")


def as_trace(responders, quotes):
    hops = [HopObservation(i, r, q, 0.01) for i, (r, q) in enumerate(zip(responders, quotes), 1)]
    return PathTrace(TARGET, E0, hops, Termination.TARGET_REACHED)


def test_attribution_preserving_known_mutated_unknown():
    tr = as_trace(["62.115.1.1", "203.0.113.9"], [E0, E1])
    f = localize_mutation(tr)
    assert attribute_as(f, tr, PrefixMap.parse(PREFIXES)) == (1299, None)


def test_attribution_mutated_in_cogent():
    tr = as_trace(["62.115.1.1", "154.54.3.4"], [E0, NE])
    f = localize_mutation(tr)
    assert attribute_as(f, tr, PrefixMap.parse(PREFIXES))[1] == 174


def test_attribution_without_mutation():
    tr = as_trace(["62.115.1.1", "154.54.3.4"], [E0, E0])
    assert attribute_as(localize_mutation(tr), tr, PrefixMap.parse(PREFIXES)) == (None, None)


@given(st.lists(st.sampled_from(list(EcnCodepoint)), min_size=1, max_size=10))
def test_mutation_chain_consistent_with_finding(quotes):
    tr = quoted_trace(quotes)
    f = localize_mutation(tr)
    chain = mutation_chain(tr)
    if chain:
        assert f.first_mutated_responder == chain[0][2]
    else:
        assert f.kind is MutationKind.NOT_CLEARED
