"""Campaign orchestration: domains in, one CampaignRecord per domain out.

Pipeline per domain: resolve (first DNS entry) -> validated QUIC probe ->
optional TCP probe -> path trace when the outcome is abnormal and the IP
wins the per-IP sampling draw. Probes run concurrently; records are written
by the calling thread in input order, so a fixed seed gives a fixed stream.
"""

from __future__ import annotations

import hashlib
import ipaddress
import json
import logging
import random
import socket
import sys
import threading
import time
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Callable, Optional, Protocol, Union

from .core import EcnCodepoint, MirrorClass, UsageClass
from .netsim import Scenario, load_scenario, simulate_probe, simulate_trace
from .pathtrace import PathTrace, localize_mutation
from .tcp import TcpEcnClass
from .validator import ValidatorConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


class NoAddress(LookupError):
    pass


class ResolverFailure(RuntimeError):
    pass


class StoreFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class CampaignConfig:
    request_timeout: float = 10.0
    initial_retransmissions: int = 1
    trace_probability: float = 0.20
    max_concurrency: int = 8
    rate_limit: float = 0.0  # probes per second, 0 disables pacing
    seed: int = 0
    ip_version: int = 4
    tcp: bool = False
    ce: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.trace_probability <= 1.0:
            raise ValueError("trace_probability must lie in [0, 1]")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.rate_limit < 0:
            raise ValueError("rate_limit must be >= 0")
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be positive")
        if self.initial_retransmissions < 0:
            raise ValueError("initial_retransmissions must be >= 0")
        if self.ip_version not in (4, 6):
            raise ValueError("ip_version must be 4 or 6")

    @property
    def mark(self) -> EcnCodepoint:
        return EcnCodepoint.CE if self.ce else EcnCodepoint.ECT0

    def validator_config(self) -> ValidatorConfig:
        return ValidatorConfig(request_timeout=self.request_timeout, mark=self.mark)

    @classmethod
    def from_mapping(cls, data: Mapping) -> CampaignConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> CampaignConfig:
        """Read a TOML (or, by ``.json`` suffix, JSON) config file."""
        path = Path(path)
        if path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            data = tomllib.loads(path.read_text())
        return cls.from_mapping(data.get("campaign", data))


@dataclass
class CampaignRecord:
    timestamp: str
    domain: str
    ip: Optional[str]
    ip_version: int
    quic_ok: bool
    quic_version: str
    mirror_class: MirrorClass
    usage: UsageClass
    tcp_class: Optional[TcpEcnClass] = None
    server_header: Optional[str] = None
    trace_ref: Optional[str] = None
    error: Optional[str] = None

    def __post_init__(self) -> None:
        if self.mirror_class is MirrorClass.UNREACHABLE and self.quic_ok:
            raise ValueError("an unreachable target cannot have completed QUIC")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mirror_class"] = self.mirror_class.value
        d["usage"] = self.usage.to_dict()
        d["tcp_class"] = None if self.tcp_class is None else self.tcp_class.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> CampaignRecord:
        return cls(
            timestamp=d["timestamp"],
            domain=d["domain"],
            ip=d.get("ip"),
            ip_version=int(d["ip_version"]),
            quic_ok=bool(d["quic_ok"]),
            quic_version=d.get("quic_version") or "",
            mirror_class=MirrorClass(d["mirror_class"]),
            usage=UsageClass.from_dict(d["usage"]),
            tcp_class=None if d.get("tcp_class") is None else TcpEcnClass.from_dict(d["tcp_class"]),
            server_header=d.get("server_header"),
            trace_ref=d.get("trace_ref"),
            error=d.get("error"),
        )

    def stable_dict(self) -> dict:
        d = self.to_dict()
        del d["timestamp"]
        return d


def read_records(path: Union[str, Path]) -> list[CampaignRecord]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_records(fh))


def iter_records(lines: Iterable[str]) -> Iterator[CampaignRecord]:
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            yield CampaignRecord.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"record line {lineno}: {exc}") from None


# -- ingestion and resolution ----------------------------------------------


@dataclass
class IngestResult:
    domains: list[str]
    skipped: int = 0


def _valid_hostname(name: str) -> bool:
    if not name or len(name) > 253 or "." not in name:
        return False
    for label in name.split("."):
        if not 1 <= len(label) <= 63 or label.startswith("-") or label.endswith("-"):
            return False
        if not all(c.isalnum() or c in "-_" for c in label):
            return False
    return True


def ingest_domains(source: Iterable[str], prefix: str = "www.") -> IngestResult:
    """Order-preserving unique list of lowercased ``www.`` domains.

    Lines hold either ``domain`` or ``rank,domain``; blank lines and ``#``
    comments are ignored, anything else unparseable is counted as skipped.
    """
    seen: dict[str, None] = {}
    skipped = 0
    for raw in source:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) == 2 and parts[0].isdigit():
            name = parts[1]
        elif len(parts) == 1:
            name = parts[0]
        else:
            skipped += 1
            continue
        name = name.lower().rstrip(".")
        if not _valid_hostname(name):
            skipped += 1
            continue
        if prefix and not name.startswith(prefix):
            name = prefix + name
        seen.setdefault(name, None)
    if skipped:
        log.info("skipped %d malformed domain lines", skipped)
    return IngestResult(list(seen), skipped)


class Resolver(Protocol):
    def resolve(self, domain: str) -> list[str]:
        """All addresses for ``domain`` in answer order."""


class StaticResolver:
    def __init__(self, mapping: Mapping[str, Iterable[str]]):
        self.mapping = {k.lower(): [str(ipaddress.ip_address(a)) for a in v] for k, v in mapping.items()}

    def resolve(self, domain: str) -> list[str]:
        return list(self.mapping.get(domain.lower(), []))

    @classmethod
    def load(cls, path: Union[str, Path]) -> StaticResolver:
        return cls(json.loads(Path(path).read_text()))


class SystemResolver:
    """Stub-resolver lookup through getaddrinfo (live campaigns only)."""

    def resolve(self, domain: str) -> list[str]:
        try:
            infos = socket.getaddrinfo(domain, 443, proto=socket.IPPROTO_UDP)
        except socket.gaierror as exc:
            if exc.errno in (socket.EAI_NONAME, getattr(socket, "EAI_NODATA", socket.EAI_NONAME)):
                return []
            raise ResolverFailure(f"{domain}: {exc}") from exc
        out: list[str] = []
        for info in infos:
            addr = info[4][0]
            if addr not in out:
                out.append(addr)
        return out


class HashResolver:
    """Deterministic fake DNS: every domain gets one IPv4 and one IPv6 address.

    ``pool`` bounds the number of distinct addresses so that domains collide
    on shared IPs the way hosted domains do.
    """

    def __init__(self, pool: int = 1 << 16):
        self.pool = pool

    def resolve(self, domain: str) -> list[str]:
        h = int.from_bytes(hashlib.sha256(domain.lower().encode()).digest()[:8], "big") % self.pool
        v4 = ipaddress.IPv4Address("198.18.0.0") + h % (1 << 17)
        v6 = ipaddress.IPv6Address("2001:db8:ec::") + h
        return [str(v4), str(v6)]


def resolve_first(domain: str, resolver: Resolver, family: int = 4) -> str:
    for addr in resolver.resolve(domain):
        if ipaddress.ip_address(addr).version == family:
            return addr
    raise NoAddress(f"{domain} has no IPv{family} address")


# -- dedup and sampling ------------------------------------------------------


def dedup_by_ip(rows: Iterable[tuple[str, Optional[str], bool]]) -> dict[str, str]:
    """ip -> first domain on that IP whose main-vantage probe succeeded."""
    chosen: dict[str, str] = {}
    for domain, ip, viable in rows:
        if viable and ip is not None and ip not in chosen:
            chosen[ip] = domain
    return chosen


def domains_per_ip(records: Iterable[CampaignRecord]) -> dict[str, int]:
    counts: Counter = Counter(r.ip for r in records if r.ip is not None)
    return dict(counts)


@dataclass
class TraceSampler:
    """Draws once per IP; an IP that lost (or won) its draw is never traced again."""

    probability: float
    rng: random.Random
    decided: set = field(default_factory=set)
    accepted: int = 0

    @classmethod
    def seeded(cls, probability: float, seed: int) -> TraceSampler:
        return cls(probability, random.Random(seed))

    def __call__(self, ip: str) -> bool:
        return should_trace(ip, self, self.rng)


def should_trace(ip: str, state: TraceSampler, rng: random.Random) -> bool:
    if ip in state.decided:
        return False
    state.decided.add(ip)
    if state.probability <= 0.0:
        return False
    take = rng.random() < state.probability
    state.accepted += take
    return take


def is_abnormal(mirror_class: MirrorClass) -> bool:
    return mirror_class not in (MirrorClass.CAPABLE, MirrorClass.UNREACHABLE)


# -- adapters ----------------------------------------------------------------


@dataclass
class ProbeOutcome:
    mirror_class: MirrorClass
    usage: UsageClass
    quic_ok: bool
    quic_version: str = ""
    server_header: Optional[str] = None
    tcp_class: Optional[TcpEcnClass] = None


class ProbeAdapter(Protocol):
    def probe(self, domain: str, ip: str, cfg: CampaignConfig) -> ProbeOutcome: ...

    def trace(self, ip: str, sent_cp: EcnCodepoint, domain: str = "") -> PathTrace: ...


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


class SimAdapter:
    """Runs probes against simulated scenarios chosen per IP.

    Scenario choice: explicit ``assignments`` (domain or IP -> scenario name)
    first, otherwise a stable hash of the IP over the sorted scenario names.
    """

    def __init__(self, scenarios: Mapping[str, Scenario], assignments: Optional[Mapping[str, str]] = None):
        if not scenarios:
            raise ValueError("no scenarios")
        self.scenarios = dict(scenarios)
        self.names = sorted(self.scenarios)
        self.assignments = dict(assignments or {})
        for target, name in self.assignments.items():
            if name not in self.scenarios:
                raise ValueError(f"assignment {target} -> unknown scenario {name!r}")
        self._lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0
        self.probes = 0
        self.traces = 0

    @classmethod
    def from_dir(cls, path: Union[str, Path]) -> SimAdapter:
        path = Path(path)
        scenarios = {p.stem: load_scenario(p.read_text(), p.stem) for p in sorted(path.glob("*.scn"))}
        assignments = {}
        assign = path / "assign.txt"
        if assign.exists():
            for lineno, raw in enumerate(assign.read_text().splitlines(), 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise ValueError(f"{assign}:{lineno}: expected '<domain-or-ip> <scenario>'")
                assignments[parts[0].lower()] = parts[1]
        return cls(scenarios, assignments)

    def scenario_name(self, domain: str, ip: str) -> str:
        name = self.assignments.get(domain.lower()) or self.assignments.get(ip)
        return name or self.names[_stable_hash(ip) % len(self.names)]

    def scenario_for(self, domain: str, ip: str) -> Scenario:
        return self.scenarios[self.scenario_name(domain, ip)]

    def _enter(self) -> None:
        with self._lock:
            self.in_flight += 1
            self.probes += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def _leave(self) -> None:
        with self._lock:
            self.in_flight -= 1

    def probe(self, domain: str, ip: str, cfg: CampaignConfig) -> ProbeOutcome:
        self._enter()
        try:
            s = self.scenario_for(domain, ip)
            s = replace(s, seed=_stable_hash(f"{cfg.seed}/{ip}") ^ s.seed)
            r = simulate_probe(s, cfg.validator_config(), tcp=cfg.tcp, tcp_mode="ce" if cfg.ce else "ect0")
            return ProbeOutcome(r.mirror_class, r.usage, r.quic_ok, r.quic_version, r.server_header, r.tcp_class)
        finally:
            self._leave()

    def trace(self, ip: str, sent_cp: EcnCodepoint, domain: str = "") -> PathTrace:
        with self._lock:
            self.traces += 1
        return simulate_trace(self.scenario_for(domain, ip), sent_cp, target=ip)


class RateLimiter:
    """Spaces successive acquisitions at least ``1/rate`` seconds apart."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / rate if rate > 0 else 0.0
        self.clock = clock
        self.sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self.clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self.sleep(slot - now)


# -- storage -----------------------------------------------------------------


class RecordStore(Protocol):
    def append(self, record: CampaignRecord) -> None: ...

    def append_trace(self, ref: str, domain: str, trace: PathTrace) -> None: ...


class MemoryStore:
    def __init__(self) -> None:
        self.records: list[CampaignRecord] = []
        self.traces: dict[str, PathTrace] = {}

    def append(self, record: CampaignRecord) -> None:
        self.records.append(record)

    def append_trace(self, ref: str, domain: str, trace: PathTrace) -> None:
        self.traces[ref] = trace


class JsonlStore:
    """Line-delimited JSON records; traces go to a sibling ``.traces.jsonl`` file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.trace_path = self.path.with_name(self.path.stem + ".traces.jsonl")
        self._fh: Optional[IO[str]] = None
        self._trace_fh: Optional[IO[str]] = None

    def __enter__(self) -> JsonlStore:
        try:
            self._fh = open(self.path, "w", encoding="utf-8")
            self._trace_fh = open(self.trace_path, "w", encoding="utf-8")
        except OSError as exc:
            raise StoreFailure(f"cannot open record store: {exc}") from exc
        return self

    def __exit__(self, *exc) -> None:
        for fh in (self._fh, self._trace_fh):
            if fh is not None:
                fh.close()

    def _write(self, fh: Optional[IO[str]], line: str) -> None:
        if fh is None:
            raise StoreFailure("store is not open")
        try:
            fh.write(line + "\n")
        except OSError as exc:
            raise StoreFailure(f"write failed: {exc}") from exc

    def append(self, record: CampaignRecord) -> None:
        self._write(self._fh, record.to_json())

    def append_trace(self, ref: str, domain: str, trace: PathTrace) -> None:
        entry = {"trace_ref": ref, "domain": domain, **trace.to_dict()}
        entry["finding"] = localize_mutation(trace).to_dict() if trace.hops else None
        self._write(self._trace_fh, json.dumps(entry, separators=(",", ":")))


# -- orchestration -----------------------------------------------------------


@dataclass
class CampaignSummary:
    domains: int = 0
    records: int = 0
    probes: int = 0
    traces: int = 0
    errors: int = 0
    by_class: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["by_class"] = {k.value if isinstance(k, MirrorClass) else k: v for k, v in sorted(self.by_class.items(), key=lambda kv: str(kv[0]))}
        return d


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _probe_one(
    domain: str,
    cfg: CampaignConfig,
    adapter: ProbeAdapter,
    resolver: Resolver,
    limiter: RateLimiter,
    clock: Callable[[], str],
    ip: Optional[str] = None,
) -> CampaignRecord:
    unreachable = dict(mirror_class=MirrorClass.UNREACHABLE, usage=UsageClass(), quic_ok=False, quic_version="")
    try:
        if ip is None:
            ip = resolve_first(domain, resolver, cfg.ip_version)
    except (NoAddress, ResolverFailure) as exc:
        return CampaignRecord(clock(), domain, None, cfg.ip_version, error=f"{type(exc).__name__}: {exc}", **unreachable)
    limiter.acquire()
    try:
        out = adapter.probe(domain, ip, cfg)
    except StoreFailure:
        raise
    except Exception as exc:  # one broken target must not stop the campaign
        log.warning("probe %s (%s) failed: %s", domain, ip, exc)
        return CampaignRecord(clock(), domain, ip, cfg.ip_version, error=f"{type(exc).__name__}: {exc}", **unreachable)
    return CampaignRecord(
        timestamp=clock(),
        domain=domain,
        ip=ip,
        ip_version=cfg.ip_version,
        quic_ok=out.quic_ok,
        quic_version=out.quic_version,
        mirror_class=out.mirror_class,
        usage=out.usage,
        tcp_class=out.tcp_class,
        server_header=out.server_header,
    )


def probe_domain(
    domain: str,
    cfg: CampaignConfig,
    adapter: ProbeAdapter,
    resolver: Resolver,
    clock: Callable[[], str] = _utc_now,
    ip: Optional[str] = None,
) -> CampaignRecord:
    """A single probe outside a campaign; failures become error records, as in a campaign."""
    return _probe_one(domain, cfg, adapter, resolver, RateLimiter(0), clock, ip)


def trace_ref_for(ip: str, cp: EcnCodepoint) -> str:
    return f"tr-{hashlib.sha256(f'{ip}/{cp.name}'.encode()).hexdigest()[:12]}"


def _execute(
    targets: list[tuple[str, Optional[str]]],
    cfg: CampaignConfig,
    adapter: ProbeAdapter,
    resolver: Resolver,
    store: RecordStore,
    clock: Callable[[], str],
    sampler: Optional[TraceSampler],
) -> CampaignSummary:
    summary = CampaignSummary(domains=len(targets))
    limiter = RateLimiter(cfg.rate_limit)
    with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
        results = pool.map(lambda t: _probe_one(t[0], cfg, adapter, resolver, limiter, clock, t[1]), targets)
        pending = []
        for record in results:
            if record.ip is not None and record.error is None:
                summary.probes += 1
            if sampler is not None and record.ip is not None and is_abnormal(record.mirror_class) and sampler(record.ip):
                record.trace_ref = trace_ref_for(record.ip, cfg.mark)
                pending.append((record.trace_ref, record.domain, pool.submit(adapter.trace, record.ip, cfg.mark, record.domain)))
            store.append(record)
            summary.records += 1
            summary.errors += record.error is not None
            summary.by_class[record.mirror_class] += 1
        for ref, domain, fut in pending:
            try:
                store.append_trace(ref, domain, fut.result())
                summary.traces += 1
            except StoreFailure:
                raise
            except Exception as exc:
                log.warning("trace %s failed: %s", ref, exc)
    return summary


def run_campaign(
    cfg: CampaignConfig,
    domains: Iterable[str],
    adapter: ProbeAdapter,
    resolver: Resolver,
    store: RecordStore,
    clock: Callable[[], str] = _utc_now,
) -> CampaignSummary:
    """Probe every domain once; one record per domain, in input order."""
    sampler = TraceSampler.seeded(cfg.trace_probability, cfg.seed)
    return _execute([(d, None) for d in domains], cfg, adapter, resolver, store, clock, sampler)


def run_distributed(
    cfg: CampaignConfig,
    main_records: Iterable[CampaignRecord],
    adapter: ProbeAdapter,
    store: RecordStore,
    clock: Callable[[], str] = _utc_now,
) -> CampaignSummary:
    """Re-probe from another vantage point: one probe per viable IP, first viable domain."""
    plan = dedup_by_ip((r.domain, r.ip, r.quic_ok) for r in main_records)
    targets = [(domain, ip) for ip, domain in plan.items()]
    return _execute(targets, cfg, adapter, StaticResolver({}), store, clock, sampler=None)
