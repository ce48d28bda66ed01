"""Aggregation of campaign records into support, validation and AS tables.

Tables accept either raw records or pre-aggregated count fixtures, since
Internet-scale record sets are not something to keep around for a unit
test. Both paths go through the same rendering code.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Optional, Union

from .campaign import CampaignRecord, iter_records
from .core import MirrorClass
from .pathtrace import PrefixMap

DASH = "–"

# row order of the validation table
VALIDATION_ORDER = [
    MirrorClass.ALL_CE,
    MirrorClass.REMARK_ECT1,
    MirrorClass.UNDERCOUNT,
    MirrorClass.CAPABLE,
    MirrorClass.NO_MIRRORING,
]


def pct(num: int, den: int, places: int = 1) -> str:
    """``num/den`` as a percentage, rounded half-up; a dash for an empty denominator."""
    if den == 0:
        return DASH
    q = Decimal(100 * num) / Decimal(den)
    return f"{q.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)}%"


def count(n: Optional[int]) -> str:
    return "" if n is None else f"{n:,}"


def render_text(header: list[str], rows: list[list[str]], right: Optional[set[int]] = None) -> str:
    """Aligned plain-text table; columns in ``right`` are right-aligned."""
    right = right if right is not None else set(range(1, len(header)))
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]

    def line(cells):
        out = [str(c).rjust(w) if i in right else str(c).ljust(w) for i, (c, w) in enumerate(zip(cells, widths))]
        return "  ".join(out).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep, *(line(r) for r in rows)]) + "\n"


def render_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -- support summary ---------------------------------------------------------


@dataclass(frozen=True)
class Population:
    total: Optional[int]
    resolved: int
    quic: int
    mirroring: int
    use: int
    capable: Optional[int] = None  # not every published table reports it

    def check(self) -> None:
        chain = [self.mirroring, self.quic, self.resolved]
        if self.capable is not None:
            chain.insert(0, self.capable)
        if self.total is not None:
            chain.append(self.total)
        if any(a > b for a, b in zip(chain, chain[1:])):
            raise ValueError(f"capable <= mirroring <= quic <= resolved <= total violated: {self}")
        if self.use > self.quic:
            raise ValueError(f"use exceeds QUIC population: {self}")


@dataclass(frozen=True)
class SupportSummary:
    domains: Population
    ips: Population

    def __post_init__(self) -> None:
        self.domains.check()
        self.ips.check()

    @classmethod
    def from_dict(cls, d: Mapping) -> SupportSummary:
        def pop(x: Mapping) -> Population:
            return Population(
                x.get("total"), x["resolved"], x["quic"], x["mirroring"], x["use"], x.get("capable")
            )

        return cls(pop(d["domains"]), pop(d["ips"]))

    def to_dict(self) -> dict:
        return {"domains": asdict(self.domains), "ips": asdict(self.ips)}


def aggregate(records: Iterable[CampaignRecord]) -> SupportSummary:
    total = resolved = quic = mirroring = use = capable = 0
    ip_sets: dict[str, set] = defaultdict(set)
    for r in records:
        total += 1
        if r.ip is None:
            continue
        resolved += 1
        ip_sets["resolved"].add(r.ip)
        if not r.quic_ok:
            continue
        quic += 1
        ip_sets["quic"].add(r.ip)
        for name, flag in (("mirroring", r.usage.mirroring), ("use", r.usage.use), ("capable", r.usage.capable)):
            if flag:
                ip_sets[name].add(r.ip)
        mirroring += r.usage.mirroring
        use += r.usage.use
        capable += r.usage.capable
    by_ip = {k: len(ip_sets[k]) for k in ("resolved", "quic", "mirroring", "use", "capable")}
    return SupportSummary(
        Population(total, resolved, quic, mirroring, use, capable),
        Population(None, **by_ip),
    )


TABLE1_HEADER = ["", "", "Total #", "Resolved #", "QUIC #", "Mirroring", "Use"]


def table1_rows(rows: list[tuple[str, SupportSummary]]) -> list[list[str]]:
    out = []
    for name, s in rows:
        for axis, p in (("#Domains", s.domains), ("#IPs", s.ips)):
            out.append(
                [name if axis == "#Domains" else "", axis, count(p.total), count(p.resolved), count(p.quic),
                 pct(p.mirroring, p.quic), pct(p.use, p.quic)]
            )
    return out


def render_table1(rows: list[tuple[str, SupportSummary]], fmt: str = "text") -> str:
    if fmt == "csv":
        header = ["population", "axis", "total", "resolved", "quic", "mirroring", "mirroring_pct", "use", "use_pct"]
        data = []
        for name, s in rows:
            for axis, p in (("domains", s.domains), ("ips", s.ips)):
                data.append([name, axis, "" if p.total is None else p.total, p.resolved, p.quic,
                             p.mirroring, pct(p.mirroring, p.quic), p.use, pct(p.use, p.quic)])
        return render_csv(header, data)
    return render_text(TABLE1_HEADER, table1_rows(rows), right=set(range(2, 7)))


# -- validation breakdown ----------------------------------------------------


@dataclass
class ClassCounts:
    ips: int = 0
    domains: int = 0


@dataclass
class ValidationBreakdown:
    """Per IP version: mirror class -> IP and domain counts."""

    columns: dict[str, dict[MirrorClass, ClassCounts]] = field(default_factory=dict)

    def get(self, column: str, cls: MirrorClass) -> ClassCounts:
        return self.columns.get(column, {}).get(cls, ClassCounts())

    @classmethod
    def from_dict(cls, d: Mapping) -> ValidationBreakdown:
        cols = {}
        for col, classes in d.items():
            cols[col] = {MirrorClass(k): ClassCounts(v["ips"], v["domains"]) for k, v in classes.items()}
        return cls(cols)


def validation_breakdown(records: Iterable[CampaignRecord]) -> ValidationBreakdown:
    domains: dict[str, Counter] = defaultdict(Counter)
    ips: dict[str, dict[MirrorClass, set]] = defaultdict(lambda: defaultdict(set))
    for r in records:
        if not r.quic_ok or r.mirror_class not in VALIDATION_ORDER:
            continue
        col = f"IPv{r.ip_version}"
        domains[col][r.mirror_class] += 1
        ips[col][r.mirror_class].add(r.ip)
    cols = {}
    for col in sorted(set(domains) | set(ips)):
        cols[col] = {c: ClassCounts(len(ips[col][c]), domains[col][c]) for c in VALIDATION_ORDER}
    return ValidationBreakdown(cols)


def render_table4(b: ValidationBreakdown, fmt: str = "text") -> str:
    cols = sorted(b.columns) or ["IPv4"]
    if fmt == "csv":
        data = [[c.value, col, b.get(col, c).ips, b.get(col, c).domains] for c in VALIDATION_ORDER for col in cols]
        return render_csv(["class", "column", "ips", "domains"], data)
    header = ["Mirrored Counters"]
    for col in cols:
        header += [f"{col} IPs #", f"{col} Domains #"]
    rows = []
    for c in VALIDATION_ORDER:
        row = [c.label]
        for col in cols:
            cc = b.get(col, c)
            row += [count(cc.ips), count(cc.domains)]
        rows.append(row)
    text = render_text(header, rows)
    shares = []
    for col in cols:
        mirrored = sum(b.get(col, c).domains for c in VALIDATION_ORDER if c is not MirrorClass.NO_MIRRORING)
        parts = ", ".join(f"{c.label} {pct(b.get(col, c).domains, mirrored)}" for c in VALIDATION_ORDER[:-1])
        shares.append(f"{col} share of mirroring domains: {parts}")
    return text + "\n".join(shares) + "\n"


# -- AS ranking --------------------------------------------------------------


def load_org_map(text: str) -> dict[int, str]:
    """``ASN,org`` lines; ASNs of one organization share the org string."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        asn, sep, org = line.partition(",")
        if not sep or not org.strip():
            raise ValueError(f"line {lineno}: expected ASN,org")
        out[int(asn.strip().upper().removeprefix("AS"))] = org.strip()
    return out


@dataclass(frozen=True)
class OrgTotals:
    total: int = 0
    mirroring: int = 0
    use: int = 0


@dataclass(frozen=True)
class RankRow:
    org: str
    total: int
    total_rank: int
    mirroring: int
    mirroring_rank: int
    use: int
    use_rank: int


def competition_ranks(values: Mapping[str, int]) -> dict[str, int]:
    """Rank 1 for the largest value; equal values share the best rank ("1224")."""
    ordered = sorted(values.values(), reverse=True)
    first = {}
    for i, v in enumerate(ordered, 1):
        first.setdefault(v, i)
    return {k: first[v] for k, v in values.items()}


def rank_orgs(totals: Mapping[str, OrgTotals]) -> list[RankRow]:
    """Rows ordered by total rank, equal ranks by org name."""
    if not totals:
        return []
    tr = competition_ranks({k: v.total for k, v in totals.items()})
    mr = competition_ranks({k: v.mirroring for k, v in totals.items()})
    ur = competition_ranks({k: v.use for k, v in totals.items()})
    rows = [RankRow(org, t.total, tr[org], t.mirroring, mr[org], t.use, ur[org]) for org, t in totals.items()]
    return sorted(rows, key=lambda r: (r.total_rank, r.org))


def org_of(ip: Optional[str], prefix_map: PrefixMap, org_map: Mapping[int, str]) -> str:
    if ip is None:
        return "<unknown>"
    entry = prefix_map.lookup(ip)
    if entry is None:
        return "<unknown>"
    return org_map.get(entry.asn) or f"AS{entry.asn}"


def org_totals(records: Iterable[CampaignRecord], prefix_map: PrefixMap, org_map: Mapping[int, str]) -> dict[str, OrgTotals]:
    acc: dict[str, list[int]] = defaultdict(lambda: [0, 0, 0])
    for r in records:
        if not r.quic_ok:
            continue
        a = acc[org_of(r.ip, prefix_map, org_map)]
        a[0] += 1
        a[1] += r.usage.mirroring
        a[2] += r.usage.use
    return {org: OrgTotals(*v) for org, v in acc.items()}


def rank_by_as(records: Iterable[CampaignRecord], prefix_map: PrefixMap, org_map: Mapping[int, str]) -> list[RankRow]:
    return rank_orgs(org_totals(records, prefix_map, org_map))


def select_rank_rows(rows: list[RankRow], top: int = 5) -> tuple[list[RankRow], OrgTotals]:
    """Top ``top`` by total, then the top ``top`` by mirroring and use not yet shown; rest summed."""
    shown = rows[:top]
    names = {r.org for r in shown}
    extra = []
    for key in ("mirroring_rank", "use_rank"):
        best = sorted((r for r in rows if getattr(r, key.split("_")[0]) > 0), key=lambda r: (getattr(r, key), r.org))
        for r in best[:top]:
            if r.org not in names:
                names.add(r.org)
                extra.append(r)
    extra.sort(key=lambda r: (r.total_rank, r.org))
    rest = [r for r in rows if r.org not in names]
    other = OrgTotals(sum(r.total for r in rest), sum(r.mirroring for r in rest), sum(r.use for r in rest))
    return shown + extra, other


def render_rank(rows: list[RankRow], top: int = 5, fmt: str = "text") -> str:
    header = ["Rank", "Total #", "AS Org.", "Mirroring #", "Rank", "Use #", "Rank"]
    if fmt == "csv":
        data = [[r.total_rank, r.total, r.org, r.mirroring, r.mirroring_rank, r.use, r.use_rank] for r in rows]
        return render_csv(["total_rank", "total", "org", "mirroring", "mirroring_rank", "use", "use_rank"], data)
    shown, other = select_rank_rows(rows, top)
    body = [[str(r.total_rank), count(r.total), r.org, count(r.mirroring), str(r.mirroring_rank), count(r.use), str(r.use_rank)]
            for r in shown]
    if other.total:
        body.append(["", count(other.total), "<other>", count(other.mirroring), "", count(other.use), ""])
    return render_text(header, body, right={0, 1, 3, 4, 5, 6})


# -- snapshot transitions ----------------------------------------------------


@dataclass(frozen=True, order=True)
class SupportState:
    kind: str  # Unavailable | NoMirroring | Mirroring
    version: str = ""

    def __str__(self) -> str:
        return f"{self.kind} {self.version}" if self.version else self.kind


UNAVAILABLE = SupportState("Unavailable")


def support_state(record: Optional[CampaignRecord]) -> SupportState:
    if record is None or not record.quic_ok:
        return UNAVAILABLE
    return SupportState("Mirroring" if record.usage.mirroring else "NoMirroring", record.quic_version)


@dataclass
class TransitionMatrix:
    cells: dict[tuple[SupportState, SupportState], int] = field(default_factory=dict)

    def row_marginals(self) -> Counter:
        out: Counter = Counter()
        for (a, _), n in self.cells.items():
            out[a] += n
        return out

    def col_marginals(self) -> Counter:
        out: Counter = Counter()
        for (_, b), n in self.cells.items():
            out[b] += n
        return out

    def total(self) -> int:
        return sum(self.cells.values())

    def filtered(self, min_cell: int) -> TransitionMatrix:
        return TransitionMatrix({k: v for k, v in self.cells.items() if v >= min_cell})

    def edges(self) -> list[tuple[str, str, int]]:
        return [(str(a), str(b), n) for (a, b), n in sorted(self.cells.items())]

    def to_csv(self) -> str:
        return render_csv(["source", "target", "count"], [list(e) for e in self.edges()])

    def to_text(self) -> str:
        return render_text(["From", "To", "Domains"], [[a, b, count(n)] for a, b, n in self.edges()], right={2})


def snapshot_diff(
    old: Iterable[CampaignRecord], new: Iterable[CampaignRecord], min_cell: int = 0
) -> TransitionMatrix:
    """Count each domain seen in either snapshot once, by (old state, new state)."""
    before = {r.domain: r for r in old}
    after = {r.domain: r for r in new}
    cells: Counter = Counter()
    for domain in before.keys() | after.keys():
        cells[(support_state(before.get(domain)), support_state(after.get(domain)))] += 1
    matrix = TransitionMatrix(dict(cells))
    return matrix.filtered(min_cell) if min_cell else matrix


# -- rescaling ---------------------------------------------------------------


@dataclass
class RescaleResult:
    counts: Counter
    missing: list[str]


def rescale_by_domain_ratio(ip_results: Mapping[str, MirrorClass], domains_per_ip: Mapping[str, int]) -> RescaleResult:
    """Weight each IP's class by the domains behind it; unmapped IPs count once and are listed."""
    counts: Counter = Counter()
    missing = []
    for ip, cls in ip_results.items():
        weight = domains_per_ip.get(ip)
        if weight is None:
            missing.append(ip)
            weight = 1
        counts[cls] += weight
    return RescaleResult(counts, sorted(missing))


# -- input loading -----------------------------------------------------------


@dataclass
class ReportInput:
    """Either records or a pre-aggregated fixture (``kind`` in table1/table4/orgs)."""

    records: Optional[list[CampaignRecord]] = None
    fixture: Optional[dict] = None
    name: str = ""


def load_input(path: Union[str, Path]) -> ReportInput:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and "kind" in obj:
            return ReportInput(fixture=obj, name=path.stem)
    return ReportInput(records=list(iter_records(text.splitlines())), name=path.stem)


def table1_from_input(inp: ReportInput) -> list[tuple[str, SupportSummary]]:
    if inp.fixture is not None:
        if inp.fixture["kind"] != "table1":
            raise ValueError(f"fixture kind {inp.fixture['kind']!r} is not table1")
        return [(row["name"], SupportSummary.from_dict(row)) for row in inp.fixture["rows"]]
    return [(inp.name, aggregate(inp.records or []))]


def table4_from_input(inp: ReportInput) -> ValidationBreakdown:
    if inp.fixture is not None:
        if inp.fixture["kind"] != "table4":
            raise ValueError(f"fixture kind {inp.fixture['kind']!r} is not table4")
        return ValidationBreakdown.from_dict(inp.fixture["columns"])
    return validation_breakdown(inp.records or [])


def ranking_from_input(inp: ReportInput, prefix_map: Optional[PrefixMap], org_map: Mapping[int, str]) -> list[RankRow]:
    if inp.fixture is not None:
        if inp.fixture["kind"] != "orgs":
            raise ValueError(f"fixture kind {inp.fixture['kind']!r} is not orgs")
        return rank_orgs({org: OrgTotals(**v) for org, v in inp.fixture["orgs"].items()})
    if prefix_map is None:
        raise ValueError("as-rank over records needs a prefix map")
    return rank_by_as(inp.records or [], prefix_map, org_map)
