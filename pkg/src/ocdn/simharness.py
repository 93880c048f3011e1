"""Deterministic in-process testbed.

Spins up every role over the in-process transport with an injected
virtual clock, replays a workload, and produces per-request and
per-operation metrics plus the adversary's view of the run (cache logs,
stored bytes, and optionally what a compromised exit proxy saw).

Timing has two sources.  In ``virtual`` mode, per-request times are folded
from the actual transmission trace with a deterministic latency/cost
model, so identical (scenario, seed) pairs give byte-identical metrics;
cryptographic operations are additionally timed natively and reported in
a separate column of ops.csv.  In ``native`` mode the wall clock is used
end to end (non-deterministic, for smoke runs).

The latency knob ``alpha_ms`` sits on every client<->client and
client<->exit link, mirroring a setup where extra relay clients on the
path are modeled by growing that one latency.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import random
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

from . import core
from .cachenode import AccessLogRecord, CacheNode
from .clientproxy import ClientNode, ExitDirectory
from .exitproxy import ExitProxy, FlashcrowdGate
from .keydist import KeyDirectory, KeyFetcher
from .publisher import Origin, PublishPlan, choose_encoding_counts, plain_token
from .ring import Roster, RosterEntry, SelfCertifyingId
from .transport import HopEvent, InProcNet, OpsRecorder, SystemClock, VirtualClock

# Ops whose virtual cost lands after the response reaches the originator.
_COMPLETION_OPS = {"client_decrypt"}


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass
class ObjectSpec:
    url: str
    size: int | None = None
    content: bytes | None = None

    def resolve(self, rng) -> bytes:
        if self.content is not None:
            return self.content
        return rng.randbytes(self.size or 0)


@dataclass
class WorkloadItem:
    url: str
    mode: str = "direct"
    count: int = 1


@dataclass
class ZipfSpec:
    s: float = 1.0
    requests: int = 1000
    mode: str = "direct"


@dataclass
class CostModel:
    """Deterministic virtual-time model used to fold traces.

    Latencies are one-way per transmission; op costs are fixed + per-byte.
    Defaults approximate commodity AES throughput and LAN-ish links.
    """

    alpha_ms: float = 0.0
    cache_link_ms: float = 2.0
    keydist_link_ms: float = 2.0
    bandwidth_bytes_per_ms: float = 50_000.0
    op_costs: dict[str, tuple[float, float]] = field(
        default_factory=lambda: {
            "exit_lookup": (0.01, 0.0),
            "hmac_derive": (0.01, 0.0),
            "session_key_unseal": (0.6, 0.0),
            "url_decrypt": (0.02, 0.0),
            "shared_key_decrypt": (0.03, 2e-6),
            "session_key_encrypt": (0.03, 2e-6),
            "client_decrypt": (0.03, 2e-6),
        }
    )

    def op_ms(self, op: str, nbytes: int) -> float:
        fixed, per_byte = self.op_costs.get(op, (0.01, 0.0))
        return fixed + per_byte * nbytes

    def latency_ms(self, src_role: str, dst_role: str) -> float:
        if "cache" in (src_role, dst_role):
            return self.cache_link_ms
        if "keydist" in (src_role, dst_role):
            return self.keydist_link_ms
        return self.alpha_ms


@dataclass
class Scenario:
    seed: int = 7
    clients: int = 3
    exits: int = 2
    caches: int = 1
    virtual_points: int = 64
    replication: int = 1
    timing: str = "virtual"  # "virtual" | "native"
    alpha_ms: float = 0.0
    cache_link_ms: float = 2.0
    keydist_link_ms: float = 2.0
    bandwidth_bytes_per_ms: float = 50_000.0
    objects: list[ObjectSpec] = field(default_factory=list)
    encodings: dict[str, int] = field(default_factory=dict)
    flatten_cap: int | None = None
    participation: dict[str, str] = field(default_factory=dict)
    workload: list[WorkloadItem] = field(default_factory=list)
    zipf: ZipfSpec | None = None
    request_gap_ms: float = 1.0
    adversarial_exit: bool = False
    lightweight: bool = False
    verify: bool = True
    key_ttl_s: float = 86_400.0
    fetch_ttl_s: float = 300.0
    timeout_s: float = 30.0
    flash_threshold_rps: float = 50.0
    flash_window_s: float = 10.0
    flash_ttl_s: float = 30.0

    def __post_init__(self):
        if self.timing not in ("virtual", "native"):
            raise ValueError(f"unknown timing source {self.timing!r}")
        if self.clients < 1 or self.exits < 1 or self.caches < 1:
            raise ValueError("need at least one client, exit and cache")

    def cost_model(self) -> CostModel:
        return CostModel(
            alpha_ms=self.alpha_ms,
            cache_link_ms=self.cache_link_ms,
            keydist_link_ms=self.keydist_link_ms,
            bandwidth_bytes_per_ms=self.bandwidth_bytes_per_ms,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for spec in d["objects"]:
            if spec["content"] is not None:
                spec["content"] = base64.b64encode(spec["content"]).decode()
        if d["zipf"] is None:
            del d["zipf"]
        if d["flatten_cap"] is None:
            del d["flatten_cap"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        known = set(cls.__dataclass_fields__) | {"corpus"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        corpus = d.pop("corpus", None)
        objects = []
        for spec in d.pop("objects", []):
            content = spec.get("content")
            objects.append(
                ObjectSpec(
                    spec["url"],
                    spec.get("size"),
                    base64.b64decode(content) if content is not None else None,
                )
            )
        workload = [WorkloadItem(**w) for w in d.pop("workload", [])]
        zipf = d.pop("zipf", None)
        scenario = cls(
            objects=objects,
            workload=workload,
            zipf=ZipfSpec(**zipf) if zipf else None,
            **d,
        )
        if corpus:
            rng = random.Random(scenario.seed ^ 0x5EED)
            scenario.objects = surge_corpus(rng, **corpus)
        return scenario


def surge_corpus(rng, count: int, base_url: str = "http://corpus.test/obj") -> list[ObjectSpec]:
    """Heavy-tailed web-object corpus: 80% small lognormal bodies capped at
    64 KiB, 20% Pareto tail."""
    out = []
    for i in range(count):
        if rng.random() < 0.8:
            size = int(rng.lognormvariate(math.log(8192), 1.2))
            size = max(64, min(size, 64 * 1024))
        else:
            size = min(int(64 * 1024 * rng.paretovariate(1.2)), 4 * 1024 * 1024)
        out.append(ObjectSpec(f"{base_url}{i}", size=size))
    return out


def zipf_popularity(urls: list[str], s: float) -> dict[str, float]:
    weights = [1.0 / (r + 1) ** s for r in range(len(urls))]
    total = sum(weights)
    return {u: w / total for u, w in zip(urls, weights)}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class RequestMetric:
    request_id: str
    url: str
    size: int
    mode: str
    ttfb_ms: float
    completion_ms: float
    ok: bool
    status: int


@dataclass
class OpMetric:
    request_id: str
    op: str
    nbytes: int
    virtual_ms: float
    native_ms: float


@dataclass
class Metrics:
    requests: list[RequestMetric] = field(default_factory=list)
    ops: list[OpMetric] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    def metrics_csv(self) -> str:
        lines = ["request_id,url,size,mode,ttfb_ms,completion_ms"]
        for r in self.requests:
            lines.append(
                f"{r.request_id},{r.url},{r.size},{r.mode},{r.ttfb_ms:.3f},{r.completion_ms:.3f}"
            )
        return "\n".join(lines) + "\n"

    def ops_csv(self) -> str:
        lines = ["request_id,op,bytes,virtual_ms,native_ms"]
        for o in self.ops:
            lines.append(
                f"{o.request_id},{o.op},{o.nbytes},{o.virtual_ms:.4f},{o.native_ms:.4f}"
            )
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        by_mode: dict[str, list[RequestMetric]] = {}
        for r in self.requests:
            by_mode.setdefault(r.mode, []).append(r)
        out = {
            "requests": len(self.requests),
            "ok": sum(r.ok for r in self.requests),
            "counters": dict(sorted(self.counters.items())),
            "by_mode": {
                m: {
                    "count": len(rs),
                    "ttfb_ms_mean": round(sum(r.ttfb_ms for r in rs) / len(rs), 4),
                    "completion_ms_mean": round(
                        sum(r.completion_ms for r in rs) / len(rs), 4
                    ),
                }
                for m, rs in sorted(by_mode.items())
            },
            "native": {
                "op_ms_mean": {
                    op: round(sum(o.native_ms for o in evs) / len(evs), 4)
                    for op, evs in sorted(_group(self.ops, key=lambda o: o.op).items())
                }
            },
        }
        return out


def _group(items, key):
    out: dict = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


# ---------------------------------------------------------------------------
# Adversary view and analyses
# ---------------------------------------------------------------------------


@dataclass
class AdversaryView:
    """Exactly what a log-and-storage adversary holds: every cache node's
    access log and stored bytes, plus (only when the scenario marks the
    exits compromised) the exits' request observations."""

    logs: list[tuple[str, AccessLogRecord]]
    entries: list[tuple[str, str, bytes]]
    plain: list[tuple[str, str, bytes]]
    exit_observations: list[dict] | None = None

    def chunks(self):
        for node, rec in self.logs:
            yield json.dumps(rec.as_dict(), sort_keys=True).encode() + node.encode()
        for node, id_hex, data in self.entries:
            yield id_hex.encode()
            yield data
        for node, token, data in self.plain:
            yield token.encode()
            yield data

    def occurrences(self, needle: bytes) -> int:
        return sum(chunk.count(needle) for chunk in self.chunks())

    def get_counts(self) -> Counter:
        """GET frequency per obfuscated identifier (the popularity signal)."""
        return Counter(
            rec.id_hex
            for _, rec in self.logs
            if rec.verb == "GET" and not rec.id_hex.startswith("plain:")
        )

    def to_json(self) -> dict:
        return {
            "logs": [
                {"node": node, **rec.as_dict()} for node, rec in self.logs
            ],
            "entries": [
                {
                    "node": node,
                    "id": id_hex,
                    "size": len(data),
                    "sha256": hashlib.sha256(data).hexdigest(),
                }
                for node, id_hex, data in self.entries
            ],
            "plain": [
                {"node": node, "token": token, "size": len(data)}
                for node, token, data in self.plain
            ],
            "exit_observations": self.exit_observations,
        }


@dataclass
class PopularityResult:
    counts: dict[str, int]
    shares: dict[str, float]
    flatness_ratio: float


def popularity_analysis(view: AdversaryView) -> PopularityResult:
    """Per-identifier request share and the max/min share ratio.

    Operates purely on the adversary's log view; identifiers never
    requested are invisible to it and excluded by construction.
    """
    counts = view.get_counts()
    if not counts:
        raise ValueError("adversary view holds no requests")
    total = sum(counts.values())
    shares = {k: v / total for k, v in counts.items()}
    return PopularityResult(
        dict(counts), shares, max(shares.values()) / min(shares.values())
    )


@dataclass
class LinkabilityResult:
    identified_rate: float
    candidates: dict[str, tuple[str, ...]]  # request id -> candidate originators


def linkability_analysis(view: AdversaryView, ground_truth: dict[str, str]) -> LinkabilityResult:
    """Fraction of requests whose true originator the adversary pins down.

    Cache logs attribute every fetch to an exit proxy, so with logs alone
    no request yields any client candidate.  With compromised exits the
    candidate set is the route membership, which collapses to a single
    client only for direct-mode requests.
    """
    if not ground_truth:
        return LinkabilityResult(0.0, {})
    candidates: dict[str, tuple[str, ...]] = {rid: () for rid in ground_truth}
    if view.exit_observations:
        for obs in view.exit_observations:
            rid = obs["request_id"]
            if rid in candidates:
                candidates[rid] = tuple(obs["route"][:-1])
    hits = sum(
        1
        for rid, cands in candidates.items()
        if len(cands) == 1 and cands[0] == ground_truth[rid]
    )
    return LinkabilityResult(hits / len(ground_truth), candidates)


# ---------------------------------------------------------------------------
# Trace folding (virtual timing)
# ---------------------------------------------------------------------------


def fold_trace(
    trace: list[HopEvent],
    op_events,
    cost: CostModel,
    roles: dict[str, str],
    originator: str,
) -> tuple[float, float]:
    """Turn one request's transmissions + operations into (ttfb, completion).

    Serial accumulation over the request path; deliveries fan out in
    parallel, so only the originator's delivery sets the arrival time.
    The response body transfer and the client-side decrypt land after the
    first byte.
    """
    bw = cost.bandwidth_bytes_per_ms
    pre_ms = 0.0
    post_ms = 0.0
    for ev in op_events:
        c = cost.op_ms(ev.op, ev.nbytes)
        if ev.op in _COMPLETION_OPS:
            post_ms += c
        else:
            pre_ms += c
    t = pre_ms
    for hop in trace:
        lat = cost.latency_ms(roles.get(hop.src, "client"), roles.get(hop.dst, "client"))
        is_delivery = hop.path == "/ocdn/deliver" or hop.path.endswith(":resp")
        if is_delivery and hop.dst == originator:
            ttfb = t + lat
            return ttfb, ttfb + hop.nbytes / bw + post_ms
        if hop.path.startswith("/ocdn/deliver"):
            continue  # parallel fan-out (or its ack): no serial time
        if hop.path.endswith(":resp") and hop.verb == "POST":
            continue  # relay acks cascade back after delivery
        t += lat + hop.nbytes / bw
    return t, t + post_ms  # no delivery seen (lightweight / failed requests)


# ---------------------------------------------------------------------------
# Key pool (reused across testbeds: RSA generation is the slow part and
# per-run key freshness is irrelevant to what the harness measures)
# ---------------------------------------------------------------------------


class _KeyPool:
    def __init__(self):
        self._rsa: list[core.KeyPair] = []
        self._lock = threading.Lock()

    def rsa(self, index: int) -> core.KeyPair:
        with self._lock:
            while len(self._rsa) <= index:
                self._rsa.append(core.KeyPair.generate())
            return self._rsa[index]


KEYPOOL = _KeyPool()


# ---------------------------------------------------------------------------
# Testbed
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    metrics: Metrics
    adversary: AdversaryView
    ground_truth: dict[str, str]  # request id hex -> originator address


class Testbed:
    """All roles wired over the in-process fabric for one scenario."""

    def __init__(self, scenario: Scenario, keypool: _KeyPool = KEYPOOL):
        self.scenario = scenario
        self.cost = scenario.cost_model()
        self.rng = random.Random(scenario.seed)
        self.clock = VirtualClock() if scenario.timing == "virtual" else SystemClock()
        self.net = InProcNet()
        self.ops = OpsRecorder()
        self.ground_truth: dict[str, str] = {}
        self.truth_modes: dict[str, str] = {}
        self.exit_observations: list[dict] = []
        self.roles: dict[str, str] = {}

        self.cache_addrs = [f"10.0.2.{i + 1}:8080" for i in range(scenario.caches)]
        self.caches = []
        for addr in self.cache_addrs:
            node = CacheNode(self.clock)
            self.net.register(addr, node)
            self.caches.append(node)
            self.roles[addr] = "cache"

        self.keydist_addr = "10.0.3.1:5353"
        self.directory = KeyDirectory()
        self.net.register_line(self.keydist_addr, self.directory.handle_line)
        self.roles[self.keydist_addr] = "keydist"

        origin_kp = keypool.rsa(0)
        self.origin_addr = "10.0.4.1:80"
        self.roles[self.origin_addr] = "origin"
        self.origin = Origin(
            origin_kp, self.directory, self.net, self.rng, self.clock,
            key_ttl_s=scenario.key_ttl_s, addr=self.origin_addr,
        )

        entries = []
        self.exits = []
        self.exit_addrs = []
        for i in range(scenario.exits):
            kp = keypool.rsa(2 + i)
            ip = f"10.0.1.{i + 1}"
            addr = f"{ip}:9000"
            member = SelfCertifyingId.from_public_key(ip, kp.public_key)
            entries.append(RosterEntry(member, kp.public_der, addr))
            self.exit_addrs.append(addr)
            self.roles[addr] = "exit"
            fetcher = KeyFetcher(
                member, kp, self.keydist_addr, self.net, self.clock,
                fetch_ttl_s=scenario.fetch_ttl_s, src_addr=addr,
            )
            observer = self._make_observer(addr) if scenario.adversarial_exit else None
            gate = FlashcrowdGate(
                self.clock, scenario.flash_window_s,
                scenario.flash_threshold_rps, scenario.flash_ttl_s,
            )
            proxy = ExitProxy(
                addr, member, kp, fetcher, self.cache_addrs, self.net,
                rng=self.rng, clock=self.clock, ops=self.ops, observer=observer,
                flash_gate=gate,
            )
            self.net.register(addr, proxy)
            self.exits.append(proxy)

        self.roster = Roster(1, tuple(entries))
        self.ring = self.roster.ring(scenario.virtual_points, scenario.replication)
        self.directory.ring = self.ring

        self.exit_directory = ExitDirectory(self.ring, self.roster, {})
        self.clients = []
        self.client_addrs = []
        for i in range(scenario.clients):
            addr = f"10.0.0.{i + 1}:7000"
            node = ClientNode(
                addr, self.exit_directory, self.net, rng=self.rng,
                clock=self.clock, ops=self.ops,
            )
            self.net.register(addr, node)
            self.clients.append(node)
            self.client_addrs.append(addr)
            self.roles[addr] = "client"

        announcements = [c.announce("join") for c in self.clients]
        for c in self.clients:
            c.peer_table.merge(announcements)

        self.objects: dict[str, bytes] = {}
        self.plan: PublishPlan | None = None

    def _make_observer(self, exit_addr: str):
        def observer(req_hex, route, peer):
            self.exit_observations.append(
                {"request_id": req_hex, "route": list(route), "peer": peer, "exit": exit_addr}
            )
        return observer

    # -- publishing -----------------------------------------------------------

    def build_plan(self) -> PublishPlan:
        sc = self.scenario
        objs = []
        for spec in sc.objects:
            url = core.CanonicalUrl.parse(spec.url)
            data = spec.resolve(self.rng)
            self.objects[url.text] = data
            objs.append((url, data))
        encodings = dict(sc.encodings)
        if sc.flatten_cap is not None and sc.zipf is not None:
            pop = zipf_popularity([u.text for u, _ in objs], sc.zipf.s)
            encodings.update(choose_encoding_counts(pop, sc.flatten_cap))
        plan = PublishPlan(objs, list(self.cache_addrs), encodings, dict(sc.participation))
        return plan

    def publish(self) -> None:
        self.plan = self.build_plan()
        report = self.origin.publish(self.plan)
        if not report.ok:
            raise core.OcdnError(f"publish failed: {report.failures}")
        self.exit_directory.encodings = {
            u.text: self.plan.n_for(u) for u, _ in self.plan.objects
        }

    # -- workload --------------------------------------------------------------

    def expand_workload(self) -> list[tuple[str, str]]:
        sc = self.scenario
        out: list[tuple[str, str]] = []
        for item in sc.workload:
            out.extend((item.url, item.mode) for _ in range(item.count))
        if sc.zipf is not None:
            urls = [spec.url for spec in sc.objects]
            weights = [1.0 / (r + 1) ** sc.zipf.s for r in range(len(urls))]
            draws = self.rng.choices(range(len(urls)), weights=weights, k=sc.zipf.requests)
            out.extend((urls[i], sc.zipf.mode) for i in draws)
        return out

    def run_workload(self, requests: list[tuple[str, str]] | None = None) -> Metrics:
        sc = self.scenario
        if requests is None:
            requests = self.expand_workload()
        metrics = Metrics()
        for url_text, mode in requests:
            self._one_request(metrics, url_text, mode)
        metrics.counters = self._counters(metrics)
        return metrics

    def _one_request(self, metrics: Metrics, url_text: str, mode: str) -> None:
        sc = self.scenario
        url = core.CanonicalUrl.parse(url_text)
        expected = self.objects.get(url.text)
        size = len(expected) if expected is not None else 0
        self.clock_advance(sc.request_gap_ms / 1000.0)
        self.net.trace = trace = []
        self.ops.reset()

        if sc.lightweight:
            self._lightweight_request(metrics, url, mode, trace, size, expected)
            return

        client = self.clients[self.rng.randrange(len(self.clients))]
        t0 = time.perf_counter()
        req_hex, entry = client.fetch(url, mode, timeout_s=sc.timeout_s)
        self.ground_truth[req_hex] = client.addr
        self.truth_modes[req_hex] = mode
        status = entry.result[0] if entry and entry.result else -1
        payload = entry.result[1] if entry and entry.result else None
        ok = status == core.STATUS_OK and (not sc.verify or payload == expected)

        op_events = self.ops.reset()
        if sc.timing == "virtual":
            ttfb, completion = fold_trace(trace, op_events, self.cost, self.roles, client.addr)
        elif entry and entry.t_first is not None:
            ttfb = (entry.t_first - t0) * 1000.0
            completion = (entry.t_done - t0) * 1000.0
        else:
            ttfb = completion = 0.0
        metrics.requests.append(
            RequestMetric(req_hex, url.text, size, mode, ttfb, completion, ok, status)
        )
        for ev in op_events:
            metrics.ops.append(
                OpMetric(req_hex, ev.op, ev.nbytes,
                         self.cost.op_ms(ev.op, ev.nbytes), ev.native_s * 1000.0)
            )

    def _lightweight_request(self, metrics, url, mode, trace, size, expected) -> None:
        """Cache-path-only request: key fetch, id derivation, cache GET and
        envelope open at the owning exit, with no client-side session
        crypto.  Used for high-volume distribution experiments where the
        signal lives entirely in the cache logs."""
        req_hex = self.rng.randbytes(16).hex()
        n = self.exit_directory.n_for(url)
        j = self.rng.randrange(n) if n > 1 else 0
        exit_addr = self.exit_directory.lookup(url, j)
        proxy = self.exits[self.exit_addrs.index(exit_addr)]
        status = core.STATUS_OK
        payload = None
        try:
            payload = proxy.fetch_for(url)
        except FileNotFoundError:
            status = core.STATUS_NOT_FOUND
        except Exception:
            status = core.STATUS_UPSTREAM_ERROR
        ok = status == core.STATUS_OK and (not self.scenario.verify or payload == expected)
        op_events = self.ops.reset()
        ttfb, completion = fold_trace(trace, op_events, self.cost, self.roles, "none")
        metrics.requests.append(
            RequestMetric(req_hex, url.text, size, "cache_only", ttfb, completion, ok, status)
        )

    def clock_advance(self, dt_s: float) -> None:
        if isinstance(self.clock, VirtualClock):
            self.clock.advance(dt_s)

    def _counters(self, metrics: Metrics) -> dict[str, int]:
        gets = puts = 0
        for node in self.caches:
            for rec in node.dump_log():
                if rec.verb == "GET":
                    gets += 1
                elif rec.verb == "PUT":
                    puts += 1
        return {
            "cache_gets": gets,
            "cache_puts": puts,
            "key_queries": self.directory.queries_answered,
            "requests": len(metrics.requests),
            "failures": sum(not r.ok for r in metrics.requests),
        }

    # -- adversary -----------------------------------------------------------------

    def adversary_view(self) -> AdversaryView:
        logs = []
        entries = []
        plain = []
        for addr, node in zip(self.cache_addrs, self.caches):
            for rec in node.dump_log():
                logs.append((addr, rec))
            for entry in node.entries_snapshot():
                entries.append((addr, entry.id_hex, entry.envelope_bytes))
            for token, data in node.plain_snapshot():
                plain.append((addr, token, data))
        return AdversaryView(
            logs, entries, plain,
            list(self.exit_observations) if self.scenario.adversarial_exit else None,
        )


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def run(scenario: Scenario) -> RunResult:
    """Publish per the scenario, replay its workload, collect everything."""
    bed = Testbed(scenario)
    bed.publish()
    metrics = bed.run_workload()
    return RunResult(metrics, bed.adversary_view(), dict(bed.ground_truth))


def baseline_run(scenario: Scenario) -> RunResult:
    """The traditional-CDN comparator: same objects stored in plaintext,
    clients fetch them straight from a cache node."""
    bed = Testbed(scenario)
    sc = bed.scenario
    plan = bed.build_plan()
    plan.participation = {u.text: "plaintext" for u, _ in plan.objects}
    report = bed.origin.publish(plan)
    if not report.ok:
        raise core.OcdnError(f"baseline publish failed: {report.failures}")
    metrics = Metrics()
    for url_text, _mode in bed.expand_workload():
        url = core.CanonicalUrl.parse(url_text)
        expected = bed.objects.get(url.text)
        bed.clock_advance(sc.request_gap_ms / 1000.0)
        bed.net.trace = trace = []
        bed.ops.reset()
        client_addr = bed.client_addrs[bed.rng.randrange(len(bed.client_addrs))]
        cache_addr = bed.cache_addrs[bed.rng.randrange(len(bed.cache_addrs))]
        req_hex = bed.rng.randbytes(16).hex()
        t0 = time.perf_counter()
        resp = bed.net.request(
            cache_addr, "GET", f"/plain/{plain_token(url)}", {}, b"", src=client_addr
        )
        t1 = time.perf_counter()
        ok = resp.status == 200 and (not sc.verify or resp.body == expected)
        if sc.timing == "virtual":
            ttfb, completion = fold_trace(trace, [], bed.cost, bed.roles, client_addr)
        else:
            ttfb = completion = (t1 - t0) * 1000.0
        metrics.requests.append(
            RequestMetric(
                req_hex, url.text, len(expected or b""), "baseline", ttfb, completion,
                ok, 0 if resp.status == 200 else resp.status,
            )
        )
    metrics.counters = bed._counters(metrics)
    return RunResult(metrics, bed.adversary_view(), {})


def write_outputs(result: RunResult, out_dir) -> None:
    """Standard output bundle: metrics.csv, ops.csv, summary.json,
    adversary.json."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.metrics.metrics_csv())
    (out / "ops.csv").write_text(result.metrics.ops_csv())
    (out / "summary.json").write_text(
        json.dumps(result.metrics.summary(), indent=2, sort_keys=True) + "\n"
    )
    (out / "adversary.json").write_text(
        json.dumps(result.adversary.to_json(), indent=2, sort_keys=True) + "\n"
    )
