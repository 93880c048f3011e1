"""Acceptance suite: one test per criterion, each printing a PASS line at
its stated tolerance.  Run with ``pytest tests/test_acceptance.py -v -s``
(or ``-rA`` to see the lines from captured output)."""

from __future__ import annotations

import hashlib
import random
import statistics
import time

import pytest

from ocdn import core, ring
from ocdn import simharness as sh
from ocdn.keydist import BAD_ID, NOT_OWNER, KeyDirectory, KeyQuery, Refusal

KIB = 1024
MIB = 1024 * 1024
SIZES = [KIB, 100 * KIB, MIB]


def ok(n: int, text: str) -> None:
    print(f"ACCEPTANCE PASS criterion {n}: {text}")


# ---------------------------------------------------------------------------
# Criteria 1 & 2 & 7a share one workload: 100 objects, n in {1,4}, 2 cache
# nodes, all three modes.
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fidelity_run():
    rng = random.Random(0xAC01)
    objects = []
    sentinels = {}
    sizes = [1, MIB] + [
        int(2 ** rng.uniform(0.0, 20.0)) for _ in range(98)
    ]  # 1 B .. 1 MiB, log-uniform, extremes pinned
    for i, size in enumerate(sizes):
        url = f"http://host{i:03d}.test/asset/{i}"
        if size >= 32:
            sentinel = rng.randbytes(32)
            body = sentinel + rng.randbytes(size - 32)
            sentinels[url] = sentinel
        else:
            body = rng.randbytes(size)
            sentinels[url] = None
        objects.append(sh.ObjectSpec(url, content=body))
    encodings = {o.url: (4 if i % 2 else 1) for i, o in enumerate(objects)}
    workload = [
        sh.WorkloadItem(o.url, mode, 1)
        for o in objects
        for mode in ("direct", "routed:2", "spoofed_direct:2")
    ]
    scenario = sh.Scenario(
        seed=0xAC02, clients=4, exits=3, caches=2,
        objects=objects, encodings=encodings, workload=workload,
    )
    t0 = time.perf_counter()
    result = sh.run(scenario)
    elapsed = time.perf_counter() - t0
    return result, elapsed, sentinels


def test_criterion_1_end_to_end_fidelity(fidelity_run):
    result, elapsed, _ = fidelity_run
    requests = result.metrics.requests
    assert len(requests) == 300
    assert {r.mode for r in requests} == {"direct", "routed:2", "spoofed_direct:2"}
    bad = [r for r in requests if not r.ok]
    assert bad == [], f"non-byte-exact retrievals: {bad[:3]}"
    assert elapsed < 60.0, f"workload took {elapsed:.1f}s"
    ok(1, f"300/300 byte-exact over 3 modes, 2 cache nodes, in {elapsed:.1f}s")


def test_criterion_2_obliviousness(fidelity_run):
    result, _, sentinels = fidelity_run
    view = result.adversary
    blob = b"\x00".join(view.chunks())
    url_hits = sum(blob.count(url.encode()) for url in sentinels)
    sentinel_hits = sum(
        blob.count(s) for s in sentinels.values() if s is not None
    )
    assert url_hits == 0
    assert sentinel_hits == 0
    ok(2, f"0 URL / 0 sentinel occurrences in {len(blob)} adversary-view bytes")


def test_criterion_7a_logs_alone_identify_nobody(fidelity_run):
    result, _, _ = fidelity_run
    out = sh.linkability_analysis(result.adversary, result.ground_truth)
    assert out.identified_rate == 0.0
    ok(7, f"(a) cache logs alone: unique-identification rate 0 over "
          f"{len(result.ground_truth)} requests")


# ---------------------------------------------------------------------------
# Criterion 3: ring balance and movement
# ---------------------------------------------------------------------------


def _member(tag: str) -> ring.SelfCertifyingId:
    digest = core.sha256(b"acc3:" + tag.encode())
    return ring.SelfCertifyingId(f"10.3.{digest[0]}.{digest[1]}", digest)


def test_criterion_3_ring_balance_and_movement():
    members = [_member(f"m{i}") for i in range(10)]
    before = ring.Ring(members, virtual_points=64)
    urls = [core.CanonicalUrl.parse(f"http://w{i}.test/") for i in range(10_000)]
    positions = [ring.position_of_url(u) for u in urls]
    loads = {m: 0 for m in members}
    owner_before = {}
    for p in positions:
        o = before.owner_of(p)
        owner_before[p] = o
        loads[o] += 1
    ratio = max(loads.values()) / (len(urls) / len(members))
    assert ratio <= 2.0, f"max/mean load {ratio:.2f}"

    after = before.with_member(_member("m-new"))
    moved = sum(1 for p in positions if after.owner_of(p) != owner_before[p])
    lo, hi = 0.3 * len(urls) / 11, 2.0 * len(urls) / 11
    assert lo <= moved <= hi, f"moved {moved}, band [{lo:.0f}, {hi:.0f}]"
    ok(3, f"max/mean load {ratio:.2f} <= 2.0; 11th member moved {moved} of "
          f"10000 URLs (band [{lo:.0f}, {hi:.0f}])")


# ---------------------------------------------------------------------------
# Criterion 4: self-certification soundness, exhaustive at small scale
# ---------------------------------------------------------------------------


def test_criterion_4_self_certification_exhaustive(keypool):
    keypairs = [keypool.rsa(2 + i) for i in range(5)]
    members = [
        ring.SelfCertifyingId.from_public_key(f"10.4.0.{i}", kp.public_key)
        for i, kp in enumerate(keypairs)
    ]
    urls = [core.CanonicalUrl.parse(f"http://acc4-{i}.test/") for i in range(50)]
    checks = misclassified = 0
    for size in range(1, 6):
        directory = KeyDirectory(ring.Ring(members[:size], virtual_points=1))
        for u in urls:
            directory.keys[u.prefix] = core.SharedKey(b"\x42" * 32, 4_000_000_000.0)
            directory.published[u.text] = 1
        for u in urls:
            owner = directory.ring.owner_of(ring.position_of_url(u, 0))
            for m, kp in zip(members[:size], keypairs[:size]):
                checks += 1
                try:
                    directory.answer_key_query(KeyQuery(u, m, kp.public_der))
                    accepted = True
                except Refusal as r:
                    accepted = False
                    if m != owner and r.code != NOT_OWNER:
                        misclassified += 1
                if accepted != (m == owner):
                    misclassified += 1
            # every id/key substitution must be refused as BAD_ID
            for j, kp in enumerate(keypairs[:size]):
                if members[j] == owner:
                    continue
                checks += 1
                try:
                    directory.answer_key_query(KeyQuery(u, owner, kp.public_der))
                    misclassified += 1
                except Refusal as r:
                    if r.code != BAD_ID:
                        misclassified += 1
    assert misclassified == 0
    ok(4, f"{checks} accept/reject decisions over rings of 1..5 members x 50 "
          f"URLs, 0 misclassifications")


# ---------------------------------------------------------------------------
# Criterion 5: key rotation mid-workload
# ---------------------------------------------------------------------------


def test_criterion_5_key_rotation():
    urls = [f"http://rot{i}.test/obj" for i in range(5)]
    objects = [sh.ObjectSpec(u, size=4000) for u in urls]
    scenario = sh.Scenario(
        seed=0xAC05, clients=2, exits=1, caches=1,
        objects=objects, encodings={u: 2 for u in urls},
        key_ttl_s=600.0, fetch_ttl_s=300.0,
    )
    bed = sh.Testbed(scenario)
    bed.publish()
    proxy = bed.exits[0]
    requests = [(u, "direct") for u in urls]
    metrics = sh.Metrics()
    for u, mode in requests:
        bed._one_request(metrics, u, mode)
    assert all(r.ok for r in metrics.requests)
    old_ids = {oid.hex for oid in bed.origin.index.values()}
    for u in urls:
        assert proxy.fetcher.wire_queries[u] == 1

    bed.clock.advance(700.0)  # past the 600 s key lifetime
    t_rotate = bed.clock.now()
    for u in urls:
        bed.origin.rotate_key(core.CanonicalUrl.parse(u).prefix)
    new_ids = {oid.hex for oid in bed.origin.index.values()}
    assert new_ids.isdisjoint(old_ids)

    for _ in range(3):  # several passes: still exactly one refetch per url
        for u, mode in requests:
            bed._one_request(metrics, u, mode)
    post = metrics.requests[len(urls):]
    assert all(r.ok for r in post)
    for u in urls:
        assert proxy.fetcher.wire_queries[u] == 2, f"{u}: != 1 coalesced refetch"

    post_rotation_gets = {
        rec.id_hex
        for node in bed.caches
        for rec in node.dump_log()
        if rec.verb == "GET" and rec.time > t_rotate
    }
    assert post_rotation_gets <= new_ids
    assert post_rotation_gets.isdisjoint(old_ids)
    ok(5, f"1 coalesced refetch per (proxy, url) across {len(urls)} urls; "
          f"{len(post)} post-rotation requests ok; old ids never derived again")


# ---------------------------------------------------------------------------
# Criterion 6: popularity flattening
# ---------------------------------------------------------------------------


def _zipf_scenario(flatten: bool) -> sh.Scenario:
    objects = [sh.ObjectSpec(f"http://pop{i}.test/obj", size=64) for i in range(100)]
    return sh.Scenario(
        seed=0xAC06, clients=2, exits=3, caches=1, lightweight=True,
        request_gap_ms=25.0, flash_threshold_rps=1e9,
        objects=objects, zipf=sh.ZipfSpec(s=1.0, requests=50_000, mode="direct"),
        flatten_cap=16 if flatten else None,
    )


def test_criterion_6_popularity_flattening():
    plain = sh.popularity_analysis(sh.run(_zipf_scenario(False)).adversary)
    flat = sh.popularity_analysis(sh.run(_zipf_scenario(True)).adversary)
    assert len(plain.counts) == 100
    assert flat.flatness_ratio <= 0.25 * plain.flatness_ratio, (
        f"flattened {flat.flatness_ratio:.1f} vs unflattened "
        f"{plain.flatness_ratio:.1f}"
    )
    ok(6, f"flatness ratio {plain.flatness_ratio:.1f} -> {flat.flatness_ratio:.1f} "
          f"({flat.flatness_ratio / plain.flatness_ratio:.1%} of unflattened, "
          f"cap 16, 50000 requests)")


# ---------------------------------------------------------------------------
# Criterion 7b: adversarial exit
# ---------------------------------------------------------------------------


def test_criterion_7b_adversarial_exit():
    def run_mode(mode):
        sc = sh.Scenario(
            seed=0xAC07, clients=4, exits=2, caches=1, adversarial_exit=True,
            objects=[sh.ObjectSpec("http://adv7.test/obj", size=500)],
            workload=[sh.WorkloadItem("http://adv7.test/obj", mode, 15)],
        )
        return sh.run(sc)

    direct = run_mode("direct")
    out = sh.linkability_analysis(direct.adversary, direct.ground_truth)
    assert out.identified_rate == 1.0

    spoofed = run_mode("spoofed_direct:2")
    out2 = sh.linkability_analysis(spoofed.adversary, spoofed.ground_truth)
    sizes = {len(c) for c in out2.candidates.values()}
    assert sizes == {3}
    for rid, cands in out2.candidates.items():
        assert spoofed.ground_truth[rid] in cands
    assert out2.identified_rate == 0.0
    ok(7, "(b) compromised exit: direct-mode rate 1.0; spoofed_direct(2) "
          "candidate set size exactly 3, true originator inside")


# ---------------------------------------------------------------------------
# Criteria 8 & 9: performance trends and per-operation overhead
# ---------------------------------------------------------------------------


def _trend_scenario(alpha_ms: float, timing: str = "virtual",
                    repeats: int = 8) -> sh.Scenario:
    objects = [sh.ObjectSpec(f"http://t{s}.test/obj", size=s) for s in SIZES]
    workload = [sh.WorkloadItem(o.url, "direct", repeats) for o in objects]
    return sh.Scenario(seed=0xAC08, clients=2, exits=2, caches=1,
                       alpha_ms=alpha_ms, timing=timing,
                       objects=objects, workload=workload)


def _by_size(requests, field):
    acc = {}
    for r in requests:
        acc.setdefault(r.size, []).append(getattr(r, field))
    return {s: statistics.mean(v) for s, v in acc.items()}


@pytest.fixture(scope="module")
def trend_runs():
    scenario = _trend_scenario(alpha_ms=10.0)
    return sh.run(scenario), sh.baseline_run(scenario)


def test_criterion_8_performance_trends(trend_runs):
    ocdn_res, base_res = trend_runs
    o_comp = _by_size(ocdn_res.metrics.requests, "completion_ms")
    b_comp = _by_size(base_res.metrics.requests, "completion_ms")
    o_ttfb = _by_size(ocdn_res.metrics.requests, "ttfb_ms")
    b_ttfb = _by_size(base_res.metrics.requests, "ttfb_ms")
    assert o_comp[SIZES[0]] < o_comp[SIZES[1]] < o_comp[SIZES[2]]
    for s in SIZES:
        assert o_comp[s] >= b_comp[s]
    gaps = [o_ttfb[s] - b_ttfb[s] for s in SIZES]
    assert gaps[0] < gaps[1] < gaps[2]

    zero = sh.run(_trend_scenario(alpha_ms=0.0)).metrics.requests
    for alpha in (10.0, 50.0, 100.0):
        with_alpha = sh.run(_trend_scenario(alpha_ms=alpha)).metrics.requests
        for r0, r1 in zip(zero, with_alpha):
            assert r1.ttfb_ms - r0.ttfb_ms >= alpha

    native = sh.run(_trend_scenario(alpha_ms=0.0, timing="native")).metrics.requests
    assert all(r.ok for r in native)
    n_comp = {
        s: statistics.median([r.completion_ms for r in native if r.size == s])
        for s in SIZES
    }
    assert n_comp[SIZES[0]] < n_comp[SIZES[1]] < n_comp[SIZES[2]]
    ok(8, "completion strictly increasing and >= baseline per size; TTFB gap "
          f"grows {gaps[0]:.1f} -> {gaps[1]:.1f} -> {gaps[2]:.1f} ms; "
          "alpha in {10,50,100} adds >= alpha to every TTFB; native smoke "
          f"medians {n_comp[SIZES[0]]:.2f} / {n_comp[SIZES[1]]:.2f} / "
          f"{n_comp[SIZES[2]]:.2f} ms increasing")


SIZE_DEPENDENT_OPS = ("shared_key_decrypt", "session_key_encrypt", "client_decrypt")
FIXED_OPS = ("exit_lookup", "hmac_derive")


def test_criterion_9_per_operation_overhead(trend_runs):
    ocdn_res, _ = trend_runs
    metrics = ocdn_res.metrics
    csv = metrics.ops_csv()
    for op in SIZE_DEPENDENT_OPS + FIXED_OPS:
        assert op in csv
    size_of = {r.request_id: r.size for r in metrics.requests}
    native: dict[tuple[str, int], list[float]] = {}
    virtual: dict[tuple[str, int], list[float]] = {}
    for o in metrics.ops:
        key = (o.op, size_of.get(o.request_id, 0))
        native.setdefault(key, []).append(o.native_ms)
        virtual.setdefault(key, []).append(o.virtual_ms)
    med = {k: statistics.median(v) for k, v in native.items()}
    vmed = {k: statistics.median(v) for k, v in virtual.items()}
    for op in SIZE_DEPENDENT_OPS:
        assert med[(op, SIZES[0])] < med[(op, SIZES[1])] < med[(op, SIZES[2])], op
        assert vmed[(op, SIZES[0])] < vmed[(op, SIZES[1])] < vmed[(op, SIZES[2])], op
    top = SIZES[2]
    floor = min(med[(op, top)] for op in SIZE_DEPENDENT_OPS)
    ceil_fixed = max(med[(op, s)] for op in FIXED_OPS for s in SIZES)
    assert floor > ceil_fixed, (
        f"size-dependent ops ({floor:.4f} ms) must dominate fixed ops "
        f"({ceil_fixed:.4f} ms) at {top} bytes"
    )
    ok(9, "ops.csv holds all five named operations; the three content-size-"
          f"dependent ones scale with size and dominate at 1 MiB "
          f"({floor:.3f} ms vs {ceil_fixed:.3f} ms fixed-cost ceiling)")


# ---------------------------------------------------------------------------
# Criterion 10: crypto conformance
# ---------------------------------------------------------------------------


def _hmac_reference(key: bytes, msg: bytes) -> bytes:
    block = 64
    if len(key) > block:
        key = hashlib.sha256(key).digest()
    key = key + b"\x00" * (block - len(key))
    inner = hashlib.sha256(bytes(k ^ 0x36 for k in key) + msg).digest()
    return hashlib.sha256(bytes(k ^ 0x5C for k in key) + inner).digest()


RFC4231 = [
    (b"\x0b" * 20, b"Hi There",
     "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
    (b"Jefe", b"what do ya want for nothing?",
     "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
    (b"\xaa" * 20, b"\xdd" * 50,
     "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
    (bytes(range(1, 26)), b"\xcd" * 50,
     "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b"),
]


def test_criterion_10_crypto_conformance():
    for key, msg, digest in RFC4231:
        assert _hmac_reference(key, msg).hex() == digest
    key = core.SharedKey(b"\x0b" * 32, 4e9)
    for i in range(4):
        url = core.CanonicalUrl.parse("http://conform.test/x")
        oid = core.derive_obfuscated_id(key, url, i)
        assert oid.mac_bytes == _hmac_reference(
            key.key_bytes, core.encode_url(url, i)
        )

    rng = random.Random(0xAC10)
    caught = 0
    trials = 1000
    envs = [
        core.seal_content(key, rng.randbytes(rng.randrange(1, 3000)), rng)
        for _ in range(10)
    ]
    raws = [e.to_bytes() for e in envs]
    for t in range(trials):
        raw = bytearray(raws[t % len(raws)])
        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        try:
            core.open_content(key, core.ContentEnvelope.from_bytes(bytes(raw)))
        except (core.TamperError, core.MalformedError):
            caught += 1
    assert caught == trials, f"only {caught}/{trials} flips detected"
    ok(10, f"identifier MAC matches the independent RFC 4231-anchored "
           f"reference; {caught}/{trials} single-bit envelope flips detected")
