"""Command-line entry points.

Exit codes: 0 success, 2 usage/configuration error, 3 verification
failure (audit chain or attestation), 4 runtime failure.
"""

from __future__ import annotations

import json
import os
import signal
import socket
import sys
import threading

import click

from memtrust.canonical import encode_frame, read_frame
from memtrust.config import Config, ConfigError
from memtrust.errors import MemtrustError
from memtrust.governance import verify_chain
from memtrust.service import ServiceCore, UmpServer

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VERIFY = 3
EXIT_RUNTIME = 4


@click.group()
def main():
    """Zero-trust personal memory service."""


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="Path to a key=value config file.")
@click.option("--pin-log", type=click.Path(), default=None,
              help="Append this build's measurement to a transparency-log file.")
def serve(config_path, pin_log):
    """Run the memory service until interrupted."""
    try:
        cfg = Config.load(config_path) if config_path else Config()
    except (ConfigError, OSError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    try:
        core = ServiceCore(cfg)
        if pin_log:
            core.write_release_pin(pin_log)
        server = UmpServer(core).start()
    except MemtrustError as exc:
        click.echo(f"startup failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"listening on {server.address[0]}:{server.address[1]} "
               f"measurement={core.measurement.hex}")
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    server.stop()
    sys.exit(EXIT_OK)


@main.command("verify-log")
@click.argument("log_path", type=click.Path(exists=True))
@click.argument("anchor_path", type=click.Path(exists=True))
@click.option("--pubkey", "pubkey_hex", required=True,
              help="Hex service identity public key (32 bytes).")
def verify_log(log_path, anchor_path, pubkey_hex):
    """Recompute an audit chain and check its anchors."""
    try:
        pubkey = bytes.fromhex(pubkey_hex)
        if len(pubkey) != 32:
            raise ValueError("want 32 bytes")
    except ValueError as exc:
        click.echo(f"bad --pubkey: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    report = verify_chain(log_path, anchor_path, pubkey)
    click.echo(f"entries={report.entries} ok={report.ok}")
    for e in report.errors:
        click.echo(f"  {e}")
    sys.exit(EXIT_OK if report.ok else EXIT_VERIFY)


@main.command()
@click.argument("op", type=click.Choice(["remember", "recall", "forget"]))
@click.argument("payload_json")
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=7431, type=int)
@click.option("--client", default="cli")
def client(op, payload_json, host, port, client):
    """Send one operation to a running service and print the reply."""
    try:
        payload = json.loads(payload_json)
    except json.JSONDecodeError as exc:
        click.echo(f"bad payload: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    try:
        with socket.create_connection((host, port), timeout=10) as sock:
            stream = sock.makefile("rwb")

            def call(frame):
                stream.write(encode_frame(frame))
                stream.flush()
                return read_frame(stream)

            from cryptography.hazmat.primitives.asymmetric import x25519

            eph = x25519.X25519PrivateKey.generate()
            hello = call({"op": "handshake", "id": "h", "payload": {
                "nonce": os.urandom(32).hex(),
                "client_ephemeral_pubkey":
                    eph.public_key().public_bytes_raw().hex(),
                "client": client,
            }})
            if not hello.get("ok"):
                click.echo(f"handshake failed: {hello.get('error')}", err=True)
                sys.exit(EXIT_VERIFY)
            ticket = hello["payload"]["ticket"]
            resp = call({"op": op, "id": "1", "payload": payload,
                         "ticket": ticket})
    except OSError as exc:
        click.echo(f"connection failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(json.dumps(resp, indent=2, sort_keys=True))
    sys.exit(EXIT_OK if resp.get("ok") else EXIT_RUNTIME)


if __name__ == "__main__":
    main()
