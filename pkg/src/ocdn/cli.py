"""``ocdn`` command line: every role and tool behind one binary.

Subcommands: ``publish``, ``serve-cache``, ``serve-exit``, ``serve-keydist``,
``client``, ``sim``, ``roster``, ``keys``.

Node configuration is a flat ``key = value`` file (``#`` comments); the
``--config`` flag names it, with the ``OCDN_CONFIG`` environment variable
as fallback.  Unknown keys are rejected.  Exit codes: 0 clean, 1
configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import base64
import json
import os
import random
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import core, simharness
from .cachenode import CacheNode
from .clientproxy import ClientNode, ExitDirectory
from .exitproxy import ExitProxy, FlashcrowdGate
from .keydist import KeyDirectory, KeyFetcher
from .netserve import HttpNodeServer, LineServer, SocketTransport
from .publisher import Origin, PublishPlan, choose_encoding_counts
from .ring import Roster, RosterEntry, SelfCertifyingId, parse_roster
from .transport import SystemClock


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config file handling
# ---------------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip().strip('"')
    return out


def serialize_config(values: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in sorted(values.items()))


@dataclass
class NodeConfig:
    """Per-node settings; field names map 1:1 to config file keys."""

    role: str
    listen: str = "127.0.0.1:0"
    ip: str = ""
    roster: str = ""
    authority_pub: str = ""
    key_file: str = ""
    keys_dir: str = ""
    keydist: str = ""
    cache_targets: str = ""
    capacity: int = 0
    trusted_origins: str = ""
    v: int = 64
    r: int = 1
    fetch_ttl_s: float = 300.0
    key_ttl_s: float = 86400.0
    flash_threshold_rps: float = 50.0
    flash_window_s: float = 10.0
    flash_ttl_s: float = 30.0
    pad_min_rung: int = 1024
    pad_step: int = 65536

    @classmethod
    def from_text(cls, text: str) -> "NodeConfig":
        values = parse_config_text(text)
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "role" not in values:
            raise ConfigError("config must set 'role'")
        if values["role"] not in ("cache", "exit", "keydist"):
            raise ConfigError(f"unknown role {values['role']!r}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            try:
                if f.type in ("int", int):
                    kwargs[f.name] = int(raw)
                elif f.type in ("float", float):
                    kwargs[f.name] = float(raw)
                else:
                    kwargs[f.name] = raw
            except ValueError as exc:
                raise ConfigError(f"bad value for {f.name}: {raw!r}") from exc
        return cls(**kwargs)

    def targets(self) -> list[str]:
        return [t.strip() for t in self.cache_targets.split(",") if t.strip()]


def _load_config(args) -> NodeConfig:
    path = getattr(args, "config", None) or os.environ.get("OCDN_CONFIG")
    if not path:
        raise ConfigError("no config: pass --config or set OCDN_CONFIG")
    try:
        return NodeConfig.from_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Origin state on disk
# ---------------------------------------------------------------------------


def _restrict(path: Path) -> None:
    try:
        os.chmod(path, 0o600)
    except OSError:
        pass


def save_origin_state(keys_dir: Path, origin: Origin) -> None:
    keys_dir.mkdir(parents=True, exist_ok=True)
    pem = keys_dir / "origin_rsa.pem"
    if not pem.exists():
        pem.write_bytes(core.private_key_pem(origin.keypair.private_key))
        _restrict(pem)
    shared = {
        prefix: {
            "key_b64": base64.b64encode(k.key_bytes).decode(),
            "expires_at": k.expires_at,
        }
        for prefix, k in origin.directory.keys.items()
    }
    keys_path = keys_dir / "shared_keys.json"
    keys_path.write_text(json.dumps(shared, indent=2, sort_keys=True))
    _restrict(keys_path)
    published = {
        "encodings": dict(origin.directory.published),
        "participation": dict(origin.participation),
    }
    (keys_dir / "published.json").write_text(json.dumps(published, indent=2, sort_keys=True))


def load_origin_state(keys_dir: Path, transport, rng=None, clock=None,
                      key_ttl_s: float = 86400.0) -> Origin:
    pem = keys_dir / "origin_rsa.pem"
    if pem.exists():
        keypair = core.load_private_key_pem(pem.read_bytes())
    else:
        keypair = core.KeyPair.generate()
    directory = KeyDirectory()
    keys_path = keys_dir / "shared_keys.json"
    if keys_path.exists():
        for prefix, rec in json.loads(keys_path.read_text()).items():
            directory.keys[prefix] = core.SharedKey(
                base64.b64decode(rec["key_b64"]), rec["expires_at"]
            )
    pub_path = keys_dir / "published.json"
    origin = Origin(keypair, directory, transport, rng, clock, key_ttl_s=key_ttl_s)
    if pub_path.exists():
        meta = json.loads(pub_path.read_text())
        directory.published.update(meta.get("encodings", {}))
        origin.participation.update(meta.get("participation", {}))
    return origin


def load_plan(path: Path, rng) -> PublishPlan:
    try:
        spec = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from exc
    objects = []
    for obj in spec.get("objects", []):
        url = core.CanonicalUrl.parse(obj["url"])
        if "content_b64" in obj:
            data = base64.b64decode(obj["content_b64"])
        elif "content_file" in obj:
            data = Path(obj["content_file"]).read_bytes()
        elif "size" in obj:
            data = rng.randbytes(int(obj["size"]))
        else:
            raise ConfigError(f"object {obj['url']}: need content_b64, content_file or size")
        objects.append((url, data))
    encodings = {u: int(n) for u, n in spec.get("encodings", {}).items()}
    if "flatten" in spec:
        flat = spec["flatten"]
        encodings.update(
            choose_encoding_counts(flat["popularity"], int(flat.get("cap", core.MAX_ENCODINGS)))
        )
    try:
        return PublishPlan(objects, ["<set later>"], encodings, spec.get("participation", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _read_targets(path: str) -> list[str]:
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    if not out:
        raise ConfigError(f"no cache targets in {path}")
    return out


def _write_port_file(args, address: str) -> None:
    if getattr(args, "port_file", None):
        Path(args.port_file).write_text(address + "\n")


def _make_rng(args):
    return random.Random(args.seed) if args.seed is not None else core.SystemRng()


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def cmd_roster(args) -> int:
    if args.action == "new":
        auth_path = Path(args.authority_key)
        if auth_path.exists():
            authority = core.load_private_key_pem(auth_path.read_bytes())
        else:
            authority = core.KeyPair.generate()
            auth_path.write_bytes(core.private_key_pem(authority.private_key))
            _restrict(auth_path)
        roster = Roster(1, ())
        Path(args.roster).write_text(roster.signed_text(authority.private_key))
        print(f"created {args.roster} (authority key: {auth_path})", file=sys.stderr)
        return 0
    if args.action == "add":
        authority = core.load_private_key_pem(Path(args.authority_key).read_bytes())
        roster = parse_roster(Path(args.roster).read_text(), authority.public_key)
        if args.generate_key:
            kp = core.KeyPair.generate()
            Path(args.generate_key).write_bytes(core.private_key_pem(kp.private_key))
            _restrict(Path(args.generate_key))
        elif args.key_file:
            kp = core.load_private_key_pem(Path(args.key_file).read_bytes())
        else:
            raise ConfigError("roster add needs --generate-key or --key-file")
        member = SelfCertifyingId.from_public_key(args.ip, kp.public_key)
        roster = roster.with_entry(RosterEntry(member, kp.public_der, args.address))
        Path(args.roster).write_text(roster.signed_text(authority.private_key))
        print(member.display, file=sys.stderr)
        return 0
    # show
    roster = parse_roster(Path(args.roster).read_text())
    for e in roster.entries:
        print(f"{e.member.display} {e.address}")
    return 0


def cmd_publish(args) -> int:
    rng = _make_rng(args)
    transport = SocketTransport()
    keys_dir = Path(args.keys)
    origin = load_origin_state(keys_dir, transport, rng, key_ttl_s=args.key_ttl)
    plan = load_plan(Path(args.plan), rng)
    plan.cache_targets = _read_targets(args.targets)
    report = origin.publish(plan)
    save_origin_state(keys_dir, origin)
    for rec in report.records:
        print(f"{rec.url} enc={rec.encoding_index} id={rec.id_hex[:16]}.. "
              f"targets={len(rec.targets_ok)}")
    if report.failures:
        for url, target, reason in report.failures:
            print(f"FAILED {url} -> {target}: {reason}", file=sys.stderr)
    if not report.ok:
        return 2
    return 0


def cmd_keys(args) -> int:
    if args.action != "rotate":
        raise ConfigError(f"unknown keys action {args.action!r}")
    rng = _make_rng(args)
    transport = SocketTransport()
    keys_dir = Path(args.keys)
    origin = load_origin_state(keys_dir, transport, rng, key_ttl_s=args.key_ttl)
    plan = load_plan(Path(args.plan), rng)
    origin.cache_targets = _read_targets(args.targets)
    for url, data in plan.objects:
        origin.content[url.text] = data
    new_key = origin.rotate_key(args.prefix, force=args.force)
    save_origin_state(keys_dir, origin)
    print(f"rotated {args.prefix}: key id {new_key.key_id.hex()}", file=sys.stderr)
    return 0


def cmd_serve_cache(args) -> int:
    cfg = _load_config(args)
    if cfg.role != "cache":
        raise ConfigError(f"config role is {cfg.role!r}, expected cache")
    trusted = None
    if cfg.trusted_origins:
        trusted = [
            core.key_fingerprint(base64.b64decode(line))
            for line in Path(cfg.trusted_origins).read_text().split()
            if line
        ]
    node = CacheNode(SystemClock(), capacity=cfg.capacity or None, trusted_origins=trusted)
    host, _, port = cfg.listen.rpartition(":")
    server = HttpNodeServer(node, host, int(port))
    _write_port_file(args, server.address)
    print(f"cache node on {server.address}", file=sys.stderr)
    server.serve_forever()
    return 0


def cmd_serve_keydist(args) -> int:
    cfg = _load_config(args)
    if cfg.role != "keydist":
        raise ConfigError(f"config role is {cfg.role!r}, expected keydist")
    if not cfg.keys_dir or not cfg.roster:
        raise ConfigError("keydist config needs keys_dir and roster")
    origin = load_origin_state(Path(cfg.keys_dir), SocketTransport())
    authority_pub = None
    if cfg.authority_pub:
        authority_pub = core.load_public_key(Path(cfg.authority_pub).read_bytes())
    roster = parse_roster(Path(cfg.roster).read_text(), authority_pub)
    origin.directory.ring = roster.ring(cfg.v, cfg.r)
    host, _, port = cfg.listen.rpartition(":")
    server = LineServer(origin.directory.handle_line, host, int(port))
    _write_port_file(args, server.address)
    print(f"key directory on {server.address}", file=sys.stderr)
    server.serve_forever()
    return 0


def cmd_serve_exit(args) -> int:
    cfg = _load_config(args)
    if cfg.role != "exit":
        raise ConfigError(f"config role is {cfg.role!r}, expected exit")
    if not cfg.key_file or not cfg.keydist or not cfg.cache_targets:
        raise ConfigError("exit config needs key_file, keydist and cache_targets")
    keypair = core.load_private_key_pem(Path(cfg.key_file).read_bytes())
    host, _, port = cfg.listen.rpartition(":")
    ip = cfg.ip or host
    member = SelfCertifyingId.from_public_key(ip, keypair.public_key)
    transport = SocketTransport()
    clock = SystemClock()
    server = HttpNodeServer(None, host, int(port))  # address known only after bind
    addr = server.address
    fetcher = KeyFetcher(member, keypair, cfg.keydist, transport, clock,
                         fetch_ttl_s=cfg.fetch_ttl_s, src_addr=addr)
    gate = FlashcrowdGate(clock, cfg.flash_window_s, cfg.flash_threshold_rps, cfg.flash_ttl_s)
    proxy = ExitProxy(addr, member, keypair, fetcher, cfg.targets(), transport,
                      clock=clock, flash_gate=gate)
    server.node = proxy
    _write_port_file(args, server.address)
    print(f"exit proxy {member.display} on {server.address}", file=sys.stderr)
    server.serve_forever()
    return 0


def cmd_client(args) -> int:
    if args.action != "get":
        raise ConfigError(f"unknown client action {args.action!r}")
    rng = _make_rng(args)
    authority_pub = None
    if args.authority_pub:
        authority_pub = core.load_public_key(Path(args.authority_pub).read_bytes())
    roster = parse_roster(Path(args.roster).read_text(), authority_pub)
    if not roster.entries:
        raise ConfigError("roster lists no exit proxies")
    encodings = {}
    if args.encodings:
        encodings = {u: int(n) for u, n in json.loads(Path(args.encodings).read_text()).items()}
    directory = ExitDirectory(roster.ring(args.v, args.r), roster, encodings)
    transport = SocketTransport()
    host, _, port = args.listen.rpartition(":")
    node = ClientNode("pending", directory, transport, rng=rng)
    server = HttpNodeServer(node, host, int(port)).start()
    node.addr = server.address
    node.peer_table.self_addr = server.address
    if args.peers:
        node.peer_table.add_static(
            [ln.strip() for ln in Path(args.peers).read_text().splitlines()
             if ln.strip() and not ln.strip().startswith("#")]
        )
    try:
        url = core.CanonicalUrl.parse(args.url)
        data = node.get(url, args.mode, timeout_s=args.timeout)
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
        return 0
    finally:
        server.shutdown()


def cmd_sim(args) -> int:
    if args.action == "plotdata":
        return _sim_plotdata(args)
    if not args.scenario:
        raise ConfigError("sim needs --scenario")
    try:
        spec = json.loads(Path(args.scenario).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from exc
    try:
        scenario = simharness.Scenario.from_dict(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario: {exc}") from exc
    if args.seed is not None:
        scenario.seed = args.seed
    result = simharness.run(scenario)
    out = Path(args.out)
    simharness.write_outputs(result, out)
    summary = result.metrics.summary()
    print(json.dumps(summary["by_mode"], indent=2, sort_keys=True))
    print(f"wrote metrics.csv, ops.csv, summary.json, adversary.json to {out}",
          file=sys.stderr)
    return 0


_PLOT_SIZES = [1024, 100 * 1024, 1024 * 1024]
_PLOT_ALPHAS = [0.0, 10.0, 50.0, 100.0]


def _trend_scenario(seed: int, sizes, alpha_ms: float, repeats: int = 5) -> simharness.Scenario:
    objects = [simharness.ObjectSpec(f"http://size{s}.test/obj", size=s) for s in sizes]
    workload = [
        simharness.WorkloadItem(o.url, "direct", repeats) for o in objects
    ]
    return simharness.Scenario(
        seed=seed, clients=2, exits=2, caches=1, alpha_ms=alpha_ms,
        objects=objects, workload=workload,
    )


def _mean_by_size(metrics: simharness.Metrics):
    ttfb: dict[int, list[float]] = {}
    comp: dict[int, list[float]] = {}
    for r in metrics.requests:
        ttfb.setdefault(r.size, []).append(r.ttfb_ms)
        comp.setdefault(r.size, []).append(r.completion_ms)
    return (
        {s: sum(v) / len(v) for s, v in ttfb.items()},
        {s: sum(v) / len(v) for s, v in comp.items()},
    )


def _sim_plotdata(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 7

    scenario = _trend_scenario(seed, _PLOT_SIZES, alpha_ms=10.0)
    ocdn_res = simharness.run(scenario)
    base_res = simharness.baseline_run(scenario)
    o_ttfb, o_comp = _mean_by_size(ocdn_res.metrics)
    b_ttfb, b_comp = _mean_by_size(base_res.metrics)

    lines = ["size_bytes,ocdn_ttfb_ms,baseline_ttfb_ms"]
    lines += [f"{s},{o_ttfb[s]:.3f},{b_ttfb[s]:.3f}" for s in _PLOT_SIZES]
    (out / "fig_ttfb.csv").write_text("\n".join(lines) + "\n")

    lines = ["size_bytes,ocdn_completion_ms,baseline_completion_ms"]
    lines += [f"{s},{o_comp[s]:.3f},{b_comp[s]:.3f}" for s in _PLOT_SIZES]
    (out / "fig_completion.csv").write_text("\n".join(lines) + "\n")

    lines = ["alpha_ms,size_bytes,ttfb_ms,completion_ms"]
    for alpha in _PLOT_ALPHAS:
        res = simharness.run(_trend_scenario(seed, _PLOT_SIZES, alpha_ms=alpha))
        t, c = _mean_by_size(res.metrics)
        lines += [f"{alpha},{s},{t[s]:.3f},{c[s]:.3f}" for s in _PLOT_SIZES]
    (out / "fig_latency.csv").write_text("\n".join(lines) + "\n")

    lines = ["op,size_bytes,native_ms_mean,virtual_ms_mean"]
    size_of = {r.request_id: r.size for r in ocdn_res.metrics.requests}
    per: dict[tuple[str, int], list[simharness.OpMetric]] = {}
    for o in ocdn_res.metrics.ops:
        per.setdefault((o.op, size_of.get(o.request_id, 0)), []).append(o)
    for (op, size), evs in sorted(per.items()):
        native = sum(e.native_ms for e in evs) / len(evs)
        virtual = sum(e.virtual_ms for e in evs) / len(evs)
        lines.append(f"{op},{size},{native:.4f},{virtual:.4f}")
    (out / "fig_overhead.csv").write_text("\n".join(lines) + "\n")

    print(f"wrote fig_ttfb.csv, fig_completion.csv, fig_latency.csv, "
          f"fig_overhead.csv to {out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocdn", description=__doc__)
    p.add_argument("--seed", type=int, default=None,
                   help="seed randomness for deterministic runs")
    # accepted both before and after the subcommand
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[seed_parent], **kw)

    roster = add("roster", help="manage the signed exit-proxy roster")
    roster.add_argument("action", choices=["new", "add", "show"])
    roster.add_argument("--roster", required=True)
    roster.add_argument("--authority-key", default="roster_authority.pem")
    roster.add_argument("--ip", default="127.0.0.1")
    roster.add_argument("--address", default="")
    roster.add_argument("--generate-key", default="")
    roster.add_argument("--key-file", default="")
    roster.set_defaults(func=cmd_roster)

    pub = add("publish", help="obfuscate and push content to cache nodes")
    pub.add_argument("--plan", required=True)
    pub.add_argument("--targets", required=True)
    pub.add_argument("--keys", required=True)
    pub.add_argument("--key-ttl", type=float, default=86400.0)
    pub.set_defaults(func=cmd_publish)

    keys = add("keys", help="shared-key maintenance")
    keys.add_argument("action", choices=["rotate"])
    keys.add_argument("--keys", required=True)
    keys.add_argument("--plan", required=True)
    keys.add_argument("--targets", required=True)
    keys.add_argument("--prefix", required=True)
    keys.add_argument("--force", action="store_true")
    keys.add_argument("--key-ttl", type=float, default=86400.0)
    keys.set_defaults(func=cmd_keys)

    for name, fn in (
        ("serve-cache", cmd_serve_cache),
        ("serve-exit", cmd_serve_exit),
        ("serve-keydist", cmd_serve_keydist),
    ):
        sp = add(name, help=f"run a {name.split('-')[1]} node")
        sp.add_argument("--config", default=None)
        sp.add_argument("--port-file", default=None,
                        help="write the bound host:port here after startup")
        sp.set_defaults(func=fn)

    client = add("client", help="fetch a URL through the network")
    client.add_argument("--roster", required=True)
    client.add_argument("--authority-pub", default="")
    client.add_argument("--peers", default="")
    client.add_argument("--mode", default="direct")
    client.add_argument("--listen", default="127.0.0.1:0")
    client.add_argument("--encodings", default="")
    client.add_argument("--timeout", type=float, default=10.0)
    client.add_argument("--v", type=int, default=64)
    client.add_argument("--r", type=int, default=1)
    client.add_argument("action", choices=["get"])
    client.add_argument("url")
    client.set_defaults(func=cmd_client)

    sim = add("sim", help="run the deterministic testbed")
    sim.add_argument("action", nargs="?", default="run", choices=["run", "plotdata"])
    sim.add_argument("--scenario", default="")
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_sim)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
