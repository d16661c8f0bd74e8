"""Command-line front end.

Exit codes: 0 success / accepted, 1 verification rejected, 2 tamper detected
at the binding layer, 3 I/O, protocol or usage error.
"""

import argparse
import fcntl
import hashlib
import json
import os
import socket
import sys
from contextlib import contextmanager
from pathlib import Path

from . import crypto, perf
from .attest import MalformedBundle, ProtocolError, Scheme, challenge, parse_addr, serve
from .host import CapacityExhausted, Host, StateDir, TamperDetected, UnknownVtpm, load_trusted
from .treebind import HeightOutOfRange

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_TAMPERED = 2
EXIT_ERROR = 3

DEFAULT_STATE_DIR = ".vpcrbind"

CONFIG_KEYS = {"scheme", "height", "modulus", "pcrs", "vtpms", "state_dir"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # keep exit status 2 reserved for tamper detection
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    cfg = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if not sep or key not in CONFIG_KEYS:
            raise CliError(f"{path}:{lineno}: expected one of {sorted(CONFIG_KEYS)} as 'key = value'")
        cfg[key] = value.strip()
    return cfg


def _pcr_list(text: str) -> list[int]:
    return [int(x) for x in text.replace(",", " ").split()]


def _hex_digest(text: str, what: str) -> bytes:
    try:
        d = bytes.fromhex(text)
    except ValueError:
        raise CliError(f"{what} is not valid hex") from None
    if len(d) != crypto.SHA1_SIZE:
        raise CliError(f"{what} must be {crypto.SHA1_SIZE} bytes")
    return d


@contextmanager
def locked(state: StateDir):
    state.root.mkdir(parents=True, exist_ok=True)
    with open(state.lock_file, "a") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise CliError(f"state directory {state.root} is in use by another process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _load(state: StateDir) -> Host:
    if not state.exists():
        raise CliError(f"no state in {state.root}; run 'init' first")
    return state.load()


# subcommands -------------------------------------------------------------------------


def cmd_init(args, cfg) -> int:
    state = StateDir(args.state_dir)
    scheme = Scheme[(args.scheme or cfg.get("scheme", "tree")).upper()]
    height = int(args.height or cfg.get("height", 4))
    modulus = crypto.parse_modulus(args.modulus or cfg.get("modulus", "m521"))
    pcrs = _pcr_list(args.pcrs or cfg.get("pcrs", "10"))
    n = int(args.vtpms if args.vtpms is not None else cfg.get("vtpms", 0))
    with locked(state):
        if state.exists() and not args.force:
            raise CliError(f"{state.root} already holds a platform; use --force to replace it")
        if args.force and state.keys.exists():
            for f in state.keys.glob("*.seed"):
                f.unlink()
        host = Host(scheme, pcrs, height, modulus, aik=state.aik())
        if n:
            host.create_vtpms(n, vaik_for=state.vaik)
        state.save(host)
    print(f"initialised {scheme.name.lower()} platform in {state.root} (PCRs {', '.join(map(str, host.pcrs))})")
    return EXIT_OK


def cmd_vtpm_create(args, cfg) -> int:
    state = StateDir(args.state_dir)
    with locked(state):
        host = _load(state)
        k = args.id if args.id is not None else max(host.vtpms, default=0) + 1
        if k in host.vtpms:
            raise CliError(f"vTPM {k} already exists")
        host.create_vtpm(k, state.vaik(k))
        state.save(host)
    print(f"created vTPM {k}")
    return EXIT_OK


def cmd_extend(args, cfg) -> int:
    state = StateDir(args.state_dir)
    if args.file:
        measurement = hashlib.sha1(Path(args.file).read_bytes()).digest()
        description = args.description or os.path.basename(args.file)
    else:
        measurement = _hex_digest(args.measurement, "measurement")
        description = args.description or ""
    with locked(state):
        host = _load(state)
        try:
            old, new = host.measure(args.vtpm, args.pcr, measurement, description.encode())
        except TamperDetected as e:
            print(f"TAMPERED: {e}", file=sys.stderr)
            return EXIT_TAMPERED
        state.save(host)
    print(f"vTPM {args.vtpm} vPCR {args.pcr}: {old.hex()} -> {new.hex()}")
    return EXIT_OK


def cmd_tamper(args, cfg) -> int:
    state = StateDir(args.state_dir)
    forged = _hex_digest(args.value, "forged value")
    with locked(state):
        host = _load(state)
        host.tamper(args.vtpm, args.pcr, forged)
        state.save(host)
    print(f"vTPM {args.vtpm} vPCR {args.pcr} overwritten with {forged.hex()}")
    return EXIT_OK


def status_dict(host: Host) -> dict:
    out = {"scheme": host.scheme.name.lower(), "pcrs": {}, "vtpms": {}}
    for i in host.pcrs:
        entry = {}
        try:
            value = host.device.pcr_read(i)
        except Exception:
            value = None
        if isinstance(value, bytes):
            entry["hw_pcr"] = value.hex()
            entry["tree_root"] = host.trees[i].root.hex()
            entry["height"] = host.trees[i].height
        elif value is not None:
            entry["hw_pcr"] = hex(value)
            entry["log_entries"] = len(host.accs[i].log)
        else:
            entry["hw_pcr"] = None
        out["pcrs"][str(i)] = entry
    for k, v in sorted(host.vtpms.items()):
        out["vtpms"][str(k)] = {
            "vpcrs": {str(i): v.vpcrs[i].hex() for i in host.pcrs},
            "sml_entries": len(v.sml),
        }
    return out


def cmd_status(args, cfg) -> int:
    state = StateDir(args.state_dir)
    host = _load(state)
    st = status_dict(host)
    if args.json:
        print(json.dumps(st, indent=1))
        return EXIT_OK
    print(f"scheme: {st['scheme']}")
    for i, e in st["pcrs"].items():
        extra = f" (tree height {e['height']})" if "height" in e else ""
        print(f"PCR {i}: {e['hw_pcr']}{extra}")
    for k, v in st["vtpms"].items():
        for i, val in v["vpcrs"].items():
            print(f"vTPM {k} vPCR {i}: {val}")
    return EXIT_OK


def cmd_attest_serve(args, cfg) -> int:
    state = StateDir(args.state_dir)
    with locked(state):
        host = _load(state)
        host_addr, port = parse_addr(args.addr)
        listener = socket.create_server((host_addr, port))
        with listener:
            bound = listener.getsockname()
            print(f"listening on {bound[0]}:{bound[1]}", flush=True)

            def provide(req):
                if req.scheme is not host.scheme:
                    raise ValueError(f"platform uses the {host.scheme.name.lower()} scheme")
                return host.attest(req.vtpm_id, req.pcr_index, req.nonce)

            serve(listener, provide, once=args.once, timeout=args.timeout)
    return EXIT_OK


def cmd_challenge(args, cfg) -> int:
    trusted_path = args.trusted or StateDir(args.state_dir).trusted_file
    trusted = load_trusted(trusted_path)
    rml = None
    if args.rml:
        rml = {bytes.fromhex(line.split()[0]) for line in Path(args.rml).read_text().splitlines() if line.strip()}
    nonce = os.urandom(20)
    expected = os.urandom(20) if args.stale_nonce_test else nonce
    modulus = crypto.parse_modulus(args.modulus or cfg.get("modulus", "m521"))
    try:
        verdict = challenge(
            args.addr,
            Scheme[args.scheme.upper()],
            args.vtpm,
            args.pcr,
            trusted,
            nonce=nonce,
            expected_nonce=expected,
            rml=rml,
            modulus=modulus,
            timeout=args.timeout,
        )
    except MalformedBundle as e:
        print(f"REJECTED MalformedBundle: {e}")
        return EXIT_REJECTED
    print(verdict)
    return EXIT_OK if verdict.accepted else EXIT_REJECTED


def cmd_bench(args, cfg) -> int:
    if args.mode == "tables":
        sys.stdout.write(perf.emit_tables(args.format))
    else:
        ns = tuple(n for n in (2, 4, 8, 16, 32, 64) if n <= args.max_n)
        sys.stdout.write(perf.emit_scaling(args.format, ns=ns, us=range(1, args.max_u + 1)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vpcrbind", description="Bind vTPM PCRs to a simulated hardware TPM.")
    p.add_argument("--state-dir", default=None, help=f"state directory (default {DEFAULT_STATE_DIR})")
    p.add_argument("--config", help="key = value configuration file")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="create a platform")
    s.add_argument("--scheme", choices=["tree", "incremental"])
    s.add_argument("--height", type=int, help="hash tree height")
    s.add_argument("--modulus", help="m521 or a hex prime")
    s.add_argument("--pcrs", help="bound PCR indices, e.g. 10,11")
    s.add_argument("--vtpms", type=int, help="vTPMs created at setup")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("vtpm-create", help="add a vTPM")
    s.add_argument("--id", type=int)
    s.set_defaults(func=cmd_vtpm_create)

    s = sub.add_parser("extend", help="measure into a vPCR and bind it")
    s.add_argument("--vtpm", type=int, required=True)
    s.add_argument("--pcr", type=int, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--measurement", help="20-byte digest in hex")
    g.add_argument("--file", help="hash this file with SHA-1")
    s.add_argument("--description", default="")
    s.set_defaults(func=cmd_extend)

    s = sub.add_parser("tamper", help="overwrite a vPCR behind the binding layer")
    s.add_argument("--vtpm", type=int, required=True)
    s.add_argument("--pcr", type=int, required=True)
    s.add_argument("--value", required=True, help="forged 20-byte value in hex")
    s.set_defaults(func=cmd_tamper)

    s = sub.add_parser("status", help="show PCR and vPCR values")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_status)

    s = sub.add_parser("attest-serve", help="answer attestation challenges")
    s.add_argument("--addr", default="127.0.0.1:7654")
    s.add_argument("--once", action="store_true", help="exit after one connection")
    s.add_argument("--timeout", type=float, default=10.0)
    s.set_defaults(func=cmd_attest_serve)

    s = sub.add_parser("challenge", help="request and verify a quote bundle")
    s.add_argument("--addr", default="127.0.0.1:7654")
    s.add_argument("--scheme", choices=["tree", "incremental"], required=True)
    s.add_argument("--vtpm", type=int, default=1)
    s.add_argument("--pcr", type=int, default=10)
    s.add_argument("--trusted", help="trusted key file (default: <state-dir>/trusted.json)")
    s.add_argument("--rml", help="allow-list of measurement digests, one hex digest per line")
    s.add_argument("--modulus", help="m521 or a hex prime")
    s.add_argument("--timeout", type=float, default=10.0)
    s.add_argument("--stale-nonce-test", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_challenge)

    s = sub.add_parser("bench", help="emit cost-model tables or operation-count scaling")
    s.add_argument("--mode", choices=["tables", "scaling"], default="tables")
    s.add_argument("--format", choices=["text", "csv"], default="text")
    s.add_argument("--max-n", type=int, default=16)
    s.add_argument("--max-u", type=int, default=16)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = read_config(args.config) if args.config else {}
        if args.state_dir is None:
            args.state_dir = cfg.get("state_dir", DEFAULT_STATE_DIR)
        return args.func(args, cfg)
    except (CliError, UnknownVtpm, CapacityExhausted, HeightOutOfRange) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except (ProtocolError, TimeoutError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
