"""Command-line front end. Every command delegates to a library operation.

Exit codes: 0 success, 1 operational error (reason on stderr), 2 usage error.
``--format records`` switches stdout to one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from . import access, bench, simnet
from .agents import AuditLog, Frame, FrameKind, SpController, UserController
from .core import ComputationRequest, DataSelector, OperationKind, PdecoError, content_hash, decode_as, encode
from .enclave import EnclaveInstance, OverheadModel, make_bundle
from .identity import AgentIdentity, DidDocument, generate_identity
from .store import FileDropPlug, PersonalDataStore, read_jsonl
from .synth import synthetic_posts, synthetic_titles

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class CliError(Exception):
    pass


class Output:
    def __init__(self, fmt: str):
        self.records = fmt == "records"

    def emit(self, record: dict, text: Optional[str] = None) -> None:
        if self.records:
            print(json.dumps(record, sort_keys=True))
        else:
            print(text if text is not None else " ".join(f"{k}={v}" for k, v in record.items()))


# -- identity files ----------------------------------------------------------------


def write_identity(prefix: Path, seed: bytes) -> AgentIdentity:
    ident = generate_identity(seed)
    key_path = prefix.with_suffix(".key")
    key_path.write_text(json.dumps({"did": ident.did, "seed": seed.hex()}) + "\n", encoding="utf-8")
    os.chmod(key_path, 0o600)
    doc = ident.document().to_bytes()
    prefix.with_suffix(".diddoc").write_bytes(doc)
    prefix.with_suffix(".diddoc.hex").write_text(doc.hex() + "\n", encoding="utf-8")
    return ident


def load_identity(path: Path) -> tuple[AgentIdentity, bytes]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        seed = bytes.fromhex(doc["seed"])
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read identity {path}: {exc}") from None
    return generate_identity(seed), seed


def load_diddoc(path: Path) -> DidDocument:
    """Read a DID document from ``.diddoc``, ``.hex`` or a hello ``.frame`` file."""
    data = path.read_bytes()
    if path.suffix == ".hex":
        data = bytes.fromhex(data.decode().strip())
    elif path.suffix == ".frame":
        frame = decode_as(data, Frame)
        if frame.kind is not FrameKind.HELLO:
            raise CliError(f"{path} is not a hello frame")
        data = frame.body
    return DidDocument.from_bytes(data)


def cmd_keygen(args, out: Output) -> int:
    if args.seed is not None:
        try:
            seed = bytes.fromhex(args.seed)
        except ValueError:
            raise CliError("--seed must be hex") from None
        if len(seed) != 32:
            raise CliError("--seed must be 32 bytes (64 hex digits)")
    else:
        seed = os.urandom(32)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    ident = write_identity(prefix, seed)
    out.emit({"did": ident.did, "diddoc": str(prefix.with_suffix(".diddoc")),
              "key": str(prefix.with_suffix(".key"))}, ident.did)
    return 0


# -- policy ------------------------------------------------------------------------------


def _load_or_new_policy(path: Path, owner: Optional[str]) -> access.AccessPolicy:
    if path.exists():
        return access.load_policy(path)
    if not owner:
        raise CliError(f"{path} does not exist; pass --owner to create it")
    return access.AccessPolicy(owner_did=owner)


def cmd_policy(args, out: Output) -> int:
    path = Path(args.policy)
    if args.action == "show":
        policy = access.load_policy(path)
        for g in policy.grants:
            out.emit({"type": "grant", "sp": g.sp_did, "source": g.source_id, "op": g.operation.label,
                      "granted_at": g.granted_at, "expires_at": g.expires_at})
        for src, cp in sorted(policy.policies.items()):
            out.emit({"type": "policy", "source": src, "functions": sorted(cp.allowed_function_ids),
                      "max_records": cp.max_records, "max_requests_per_day": cp.max_requests_per_day})
        return 0
    policy = _load_or_new_policy(path, args.owner)
    op = OperationKind.parse(args.op)
    if args.action == "grant":
        policy = access.grant(policy, args.sp, args.source, op, args.expires_at)
    else:
        policy = access.revoke(policy, args.sp, args.source, op)
    access.save_policy(policy, path)
    out.emit({"action": args.action, "sp": args.sp, "source": args.source, "op": op.label})
    return 0


# -- plugs ---------------------------------------------------------------------------------


def open_store(root: Path, owner: Optional[str] = None) -> PersonalDataStore:
    meta = root / "sources.json"
    if meta.exists():
        owner = json.loads(meta.read_text(encoding="utf-8"))["owner_did"]
    elif not owner:
        raise CliError(f"{root} holds no store yet; pass --owner")
    return PersonalDataStore(owner, root=root)


def cmd_plug(args, out: Output) -> int:
    vault = open_store(Path(args.store), getattr(args, "owner", None))
    if args.action == "add":
        functions = frozenset(f for f in args.functions.split(",") if f) if args.functions else frozenset()
        cp = access.ComputationPolicy(functions, args.max_records, args.max_requests_per_day)
        desc = vault.add_source(args.source, args.schema, args.credential, cp, plug=FileDropPlug())
        out.emit({"source": desc.source_id, "schema": desc.schema_tag,
                  "source_key": desc.source_signing_key.hex()})
        return 0
    if args.file:
        items = read_jsonl(args.file)
    elif args.synthetic == "posts":
        items = synthetic_posts(args.count, args.data_seed)
    elif args.synthetic == "titles":
        items = synthetic_titles(args.count, args.data_seed)
    else:
        raise CliError("give --file or --synthetic")
    report = vault.ingest(args.source, items, access.now_ms())
    out.emit({"source": args.source, "accepted": report.accepted, "rejected": report.rejected})
    return 0 if report.rejected == 0 or args.allow_rejects else 1


# -- agents -------------------------------------------------------------------------------


class AgentConfig:
    """Parsed agent config file; relative paths resolve against the file's directory."""

    def __init__(self, path: Path):
        try:
            doc = tomllib.loads(path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise CliError(f"{path}: {exc}") from None
        base = path.parent
        self.role = doc.get("role", "user")
        if self.role not in ("user", "sp"):
            raise CliError(f"{path}: role must be 'user' or 'sp'")
        if "identity" not in doc:
            raise CliError(f"{path}: missing 'identity'")
        self.identity, self.seed = load_identity(base / doc["identity"])
        self.store = base / doc["store"] if "store" in doc else None
        self.policy = base / doc["policy"] if "policy" in doc else None
        self.peers = [load_diddoc(base / p) for p in doc.get("peers", [])]
        default_provider = self.identity.did if self.role == "sp" else (self.peers[0].did if self.peers else "")
        self.bundles = []
        for b in doc.get("bundle", []):
            params = {k: v for k, v in b.items() if k not in ("id", "family", "provided_by")}
            self.bundles.append(make_bundle(b["id"], b["family"], b.get("provided_by", default_provider), **params))
        if self.role == "user" and self.store is None:
            raise CliError(f"{path}: a user agent needs 'store'")


def _user_agent(cfg: AgentConfig) -> UserController:
    vault = open_store(cfg.store, cfg.identity.did)
    if cfg.policy is not None and cfg.policy.exists():
        vault.policy = access.load_policy(cfg.policy)
    enclave = EnclaveInstance(seed=content_hash(b"pdeco/cli-enclave\x00" + cfg.seed))
    for b in cfg.bundles:
        enclave.load_bundle(b)
    uc = UserController(cfg.identity, vault, enclave, audit_path=cfg.store / "audit.jsonl")
    replay_path = cfg.store / "replay.json"
    if replay_path.exists():
        for did, rid, issued in json.loads(replay_path.read_text(encoding="utf-8")):
            uc.seen_request_ids[(did, bytes.fromhex(rid))] = issued
    for peer in cfg.peers:
        uc.connect(peer)
    return uc


def _save_replay(uc: UserController, store: Path) -> None:
    rows = sorted([did, rid.hex(), issued] for (did, rid), issued in uc.seen_request_ids.items())
    (store / "replay.json").write_text(json.dumps(rows) + "\n", encoding="utf-8")


def _frames(directory: Path) -> list[Path]:
    return sorted(directory.glob("*.frame"))


def cmd_agent(args, out: Output) -> int:
    cfg = AgentConfig(Path(args.config))
    if args.action == "audit":
        if cfg.store is None:
            raise CliError("audit needs a user agent config with 'store'")
        log = AuditLog(cfg.store / "audit.jsonl")
        for e in log.entries:
            out.emit(e.to_json(), f"{e.seq}\t{e.timestamp}\t{e.request_id.hex()}\t{e.requester_did}\t"
                                  f"{e.decision}\t{e.reason}")
        bad = log.first_invalid()
        if bad is not None:
            print(f"audit chain broken at entry {bad}", file=sys.stderr)
            return 1
        return 0
    outbox = Path(args.outbox) if args.outbox else None
    if outbox is not None:
        outbox.mkdir(parents=True, exist_ok=True)
    if cfg.role == "user":
        return _run_user(cfg, args, outbox, out)
    return _run_sp(cfg, args, outbox, out)


def _run_user(cfg: AgentConfig, args, outbox: Optional[Path], out: Output) -> int:
    uc = _user_agent(cfg)
    if outbox is not None:
        (outbox / "hello.frame").write_bytes(uc.hello())
    if args.inbox:
        for path in _frames(Path(args.inbox)):
            delivery = uc.receive(path.read_bytes())
            for k, reply in enumerate(delivery.replies):
                if outbox is not None:
                    (outbox / f"{path.stem}.reply{k}.frame").write_bytes(reply)
            out.emit({"frame": path.name, "accepted": delivery.accepted, "error": delivery.error or "",
                      "replies": len(delivery.replies)})
    _save_replay(uc, cfg.store)
    return 0


def _run_sp(cfg: AgentConfig, args, outbox: Optional[Path], out: Output) -> int:
    sp = SpController(cfg.identity, cfg.bundles)
    for peer in cfg.peers:
        sp.connect(peer)
    pending_path = Path(args.pending)
    if args.requests:
        if outbox is None:
            raise CliError("--requests needs --outbox")
        doc = tomllib.loads(Path(args.requests).read_text(encoding="utf-8"))
        pending = {}
        for i, r in enumerate(doc.get("request", [])):
            selector = DataSelector(r["source"], r.get("schema", "post.v1"), r.get("max_records", 100))
            req, frame = sp.issue(r["target"], r["function"], selector, r.get("params", {}))
            (outbox / f"req{i:04d}.frame").write_bytes(frame)
            pending[req.request_id.hex()] = {"target": r["target"], "request": encode(req).hex()}
            out.emit({"issued": req.request_id.hex(), "target": r["target"], "function": r["function"]})
        pending_path.write_text(json.dumps(pending, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.inbox:
        pending = json.loads(pending_path.read_text(encoding="utf-8"))
        for rid, p in sorted(pending.items()):
            sp.track(p["target"], decode_as(bytes.fromhex(p["request"]), ComputationRequest))
        for path in _frames(Path(args.inbox)):
            sp.receive(path.read_bytes())
        status = 0
        for rid in sorted(pending):
            outcome = sp.outcomes.get(bytes.fromhex(rid)) or sp.expire(bytes.fromhex(rid))
            record = {"request_id": rid, "status": outcome.status,
                      "reason": outcome.reason.label if outcome.reason else ""}
            if outcome.result is not None:
                record["output"] = _plain(outcome.result.output())
                record["record_count"] = outcome.result.record_count
            out.emit(record)
            if outcome.status == "attestation_invalid":
                status = 1
        return status
    return 0


def _plain(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


# -- scenarios and bench --------------------------------------------------------------


def cmd_scenario(args, out: Output) -> int:
    if args.action == "run":
        config, scenario = simnet.load_scenario(args.file)
        result = simnet.run_sim(config, scenario)
        simnet.write_trace(args.trace, result.trace)
        if args.metrics:
            Path(args.metrics).write_text(json.dumps(result.metrics, sort_keys=True) + "\n", encoding="utf-8")
        summary = {"events": len(result.trace), "trace": args.trace}
        gm = result.global_model
        if gm is not None:
            summary["rounds"] = gm.round
            summary["mean_loss"] = gm.history[-1].mean_loss if gm.history else None
        out.emit(summary)
        for m in (gm.history if gm is not None else ()):
            out.emit(json.loads(m.to_record()))
        return 0
    trace = simnet.read_trace(args.trace)
    check = simnet.assert_security(trace, args.property)
    out.emit({"property": check.property, "holds": check.holds, "checked": check.checked,
              "counterexamples": len(check.counterexamples)})
    for e in check.counterexamples:
        print(e.to_json(), file=sys.stderr)
    return 0 if check.holds else 1


def cmd_bench(args, out: Output) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    modes = [m for m in args.modes.split(",") if m]
    overhead = OverheadModel(args.setup_ms, args.per_record_us)
    report = bench.run_bench(sizes, modes, args.trials, overhead, args.seed)
    report.write(args.out)
    report.write_plot_data(args.plot)
    for r in report.rows:
        out.emit({"record_count": r.record_count, "mode": r.mode, "runtime_ms": r.runtime_ms,
                  "trials": r.trials})
    for mode, fit in report.fits.items():
        out.emit({"mode": mode, "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2})
    return 0


# -- parser --------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdeco", description="Personal data agents, policies and simulations.")
    p.add_argument("--format", choices=("text", "records"), default="text")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", help="create an identity and its DID document")
    k.add_argument("--seed", help="32-byte hex seed for a reproducible identity")
    k.add_argument("--out", default="agent", help="output path prefix (default: agent)")
    k.set_defaults(func=cmd_keygen)

    pol = sub.add_parser("policy", help="edit or inspect a policy file")
    psub = pol.add_subparsers(dest="action", required=True)
    for action in ("grant", "revoke"):
        a = psub.add_parser(action)
        a.add_argument("--policy", required=True)
        a.add_argument("--owner", help="owner DID when creating a new policy file")
        a.add_argument("--sp", required=True, help="service provider DID")
        a.add_argument("--source", required=True)
        a.add_argument("--op", default="Compute", choices=("Compute", "Train"))
        if action == "grant":
            a.add_argument("--expires-at", type=int, help="expiry, ms since epoch")
        a.set_defaults(func=cmd_policy)
    show = psub.add_parser("show")
    show.add_argument("--policy", required=True)
    show.set_defaults(func=cmd_policy)

    plug = sub.add_parser("plug", help="register data sources and ingest items")
    plsub = plug.add_subparsers(dest="action", required=True)
    add = plsub.add_parser("add")
    add.add_argument("--store", required=True)
    add.add_argument("--owner", help="owner DID when creating a new store")
    add.add_argument("--source", required=True)
    add.add_argument("--schema", required=True)
    add.add_argument("--credential", required=True)
    add.add_argument("--functions", default="", help="comma-separated allowed function ids")
    add.add_argument("--max-records", type=int, default=1000)
    add.add_argument("--max-requests-per-day", type=int, default=100)
    add.set_defaults(func=cmd_plug)
    ing = plsub.add_parser("ingest")
    ing.add_argument("--store", required=True)
    ing.add_argument("--source", required=True)
    ing.add_argument("--file", help="JSONL file of items")
    ing.add_argument("--synthetic", choices=("posts", "titles"))
    ing.add_argument("--count", type=int, default=100)
    ing.add_argument("--data-seed", type=int, default=0)
    ing.add_argument("--allow-rejects", action="store_true", help="exit 0 even if some items were rejected")
    ing.set_defaults(func=cmd_plug)

    ag = sub.add_parser("agent", help="run an agent over frame files, or dump its audit log")
    asub = ag.add_subparsers(dest="action", required=True)
    run = asub.add_parser("run")
    run.add_argument("--config", required=True)
    run.add_argument("--inbox", help="directory of *.frame files to process")
    run.add_argument("--outbox", help="directory for outbound frames")
    run.add_argument("--requests", help="(sp) TOML file of requests to issue")
    run.add_argument("--pending", default="pending.json", help="(sp) pending-request state file")
    run.set_defaults(func=cmd_agent)
    aud = asub.add_parser("audit")
    aud.add_argument("--config", required=True)
    aud.set_defaults(func=cmd_agent)

    sc = sub.add_parser("scenario", help="run simulated scenarios and check security properties")
    ssub = sc.add_subparsers(dest="action", required=True)
    srun = ssub.add_parser("run")
    srun.add_argument("file")
    srun.add_argument("--trace", default="trace.jsonl")
    srun.add_argument("--metrics")
    srun.set_defaults(func=cmd_scenario)
    sas = ssub.add_parser("assert")
    sas.add_argument("property", choices=simnet.PROPERTIES)
    sas.add_argument("--trace", default="trace.jsonl")
    sas.set_defaults(func=cmd_scenario)

    b = sub.add_parser("bench", help="runtime scaling benchmark")
    b.add_argument("--sizes", default=",".join(map(str, bench.DEFAULT_SIZES)))
    b.add_argument("--modes", default=",".join(bench.MODES))
    b.add_argument("--trials", type=int, default=7)
    b.add_argument("--setup-ms", type=float, default=bench.DEFAULT_OVERHEAD.setup_ms)
    b.add_argument("--per-record-us", type=float, default=bench.DEFAULT_OVERHEAD.per_record_us)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="bench.json")
    b.add_argument("--plot", default="bench.tsv")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, Output(args.format))
    except (CliError, PdecoError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
