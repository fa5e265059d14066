"""Remote logit protocol: newline-delimited JSON over TCP or a stdio subprocess.

Requests (one JSON object per line, answered in order, one response each):

    {"op": "logits", "prefix": [ids]}      -> {"ok": true, "logits": [..]}
    {"op": "encode", "text": "..."}        -> {"ok": true, "ids": [..]}
    {"op": "decode", "ids": [..]}          -> {"ok": true, "text": "..."}
    {"op": "vocab"}                        -> {"ok": true, "symbols": [..], "eos_id": k}

Any request may carry a "config" object, forwarded verbatim (servers use it
for things like checkpoint selection); failures come back as
{"ok": false, "error": "..."}. The client retries a transport failure once
after reconnecting. This module also ships a reference server that exposes
any in-process provider over the same wire (whitespace tokenization), which
is handy for tests and for chaining engines.
"""

from __future__ import annotations

import argparse
import json
import socket
import socketserver
import subprocess
import sys
import threading
from collections import OrderedDict
from typing import Mapping, Sequence

import numpy as np

from .models import ModelError, Provider, Vocabulary

__all__ = ["RemoteError", "RemoteProvider", "ProviderServer", "serve_stdio"]

DEFAULT_TIMEOUT = 30.0


class RemoteError(ModelError):
    """Transport failure (after retry) or an error response from the server."""


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        self.host, self.port, self.timeout = host, port, timeout
        self._sock = None
        self._file = None
        self.connect()

    def connect(self):
        self.close()
        self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        self._file = self._sock.makefile("rwb")

    def close(self):
        for obj in (self._file, self._sock):
            if obj is not None:
                try:
                    obj.close()
                except OSError:
                    pass
        self._file = self._sock = None

    def round_trip(self, line: bytes) -> bytes:
        self._file.write(line)
        self._file.flush()
        reply = self._file.readline()
        if not reply:
            raise ConnectionError("server closed the connection")
        return reply


class _StdioTransport:
    """Runs the server as a child process and speaks over its stdin/stdout."""

    def __init__(self, argv: Sequence[str], timeout: float):
        self.argv = list(argv)
        self.timeout = timeout
        self._proc = None
        self.connect()

    def connect(self):
        self.close()
        self._proc = subprocess.Popen(
            self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.terminate()
            self._proc.wait()
        self._proc = None

    def round_trip(self, line: bytes) -> bytes:
        self._proc.stdin.write(line)
        self._proc.stdin.flush()
        reply = self._proc.stdout.readline()
        if not reply:
            raise ConnectionError("server process closed its stdout")
        return reply


class RemoteProvider(Provider):
    """Client-side provider backed by a protocol endpoint.

    ``address`` is ``host:port`` or ``stdio:<command line>``. The vocabulary
    is fetched once at construction. Logit responses are cached per prefix
    (the wire contract requires determinism, caching just avoids repeat
    round trips during hindsight inference).
    """

    def __init__(
        self,
        address: str,
        config: Mapping[str, object] | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        cache_size: int = 8192,
        _shared_transport=None,
    ):
        self.address = address
        self.config = dict(config or {})
        self.timeout = timeout
        self.cache_size = cache_size
        if _shared_transport is not None:
            self._transport = _shared_transport
        elif address.startswith("stdio:"):
            self._transport = _StdioTransport(address[len("stdio:"):].split(), timeout)
        else:
            host, _, port = address.rpartition(":")
            if not host or not port.isdigit():
                raise RemoteError(f"remote address must be host:port or stdio:cmd, got {address!r}")
            self._transport = _TcpTransport(host, int(port), timeout)
        self._lock = threading.Lock()
        self._cache: OrderedDict[tuple, np.ndarray] = OrderedDict()
        suffix = f"+{json.dumps(self.config, sort_keys=True)}" if self.config else ""
        self.descriptor = f"remote:{address}{suffix}"
        vocab = self._request({"op": "vocab"})
        self.vocabulary = Vocabulary(tuple(vocab["symbols"]), int(vocab["eos_id"]))

    def _request(self, payload: dict) -> dict:
        if self.config:
            payload = dict(payload, config=self.config)
        line = (json.dumps(payload) + "\n").encode("utf-8")
        with self._lock:
            try:
                reply = self._transport.round_trip(line)
            except (OSError, ValueError):
                # one reconnect + resend, then give up
                try:
                    self._transport.connect()
                    reply = self._transport.round_trip(line)
                except (OSError, ValueError) as exc:
                    raise RemoteError(f"transport failure talking to {self.address}: {exc}") from exc
        try:
            obj = json.loads(reply.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise RemoteError(f"malformed response line from {self.address}: {exc}") from exc
        if not obj.get("ok"):
            raise RemoteError(f"server error: {obj.get('error', 'unknown')}")
        return obj

    def next_logits(self, prefix: Sequence[int]) -> np.ndarray:
        self.vocabulary.check_ids(prefix)
        key = tuple(int(t) for t in prefix)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        obj = self._request({"op": "logits", "prefix": list(key)})
        logits = np.asarray(obj["logits"], dtype=np.float64)
        if logits.shape != (len(self.vocabulary),):
            raise RemoteError(
                f"logits width {logits.shape} does not match vocabulary {len(self.vocabulary)}"
            )
        logits.setflags(write=False)
        self._cache[key] = logits
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return logits

    def encode(self, text: str) -> list[int]:
        return [int(t) for t in self._request({"op": "encode", "text": text})["ids"]]

    def decode(self, ids: Sequence[int]) -> str:
        return str(self._request({"op": "decode", "ids": [int(t) for t in ids]})["text"])

    def with_config(self, extra: Mapping[str, object]) -> "RemoteProvider":
        """New provider over the same connection with merged request config."""
        merged = dict(self.config)
        merged.update(extra)
        return RemoteProvider(
            self.address,
            config=merged,
            timeout=self.timeout,
            cache_size=self.cache_size,
            _shared_transport=self._transport,
        )

    def close(self):
        self._transport.close()


# --- reference server -------------------------------------------------------


def _handle_request(provider: Provider, obj) -> dict:
    if not isinstance(obj, dict) or "op" not in obj:
        return {"ok": False, "error": "request must be an object with an 'op' field"}
    vocab = provider.vocabulary
    op = obj["op"]
    try:
        if op == "logits":
            row = provider.next_logits([int(t) for t in obj["prefix"]])
            return {"ok": True, "logits": [float(x) for x in row]}
        if op == "encode":
            ids = [vocab.id_of(tok) for tok in str(obj["text"]).split()]
            return {"ok": True, "ids": ids}
        if op == "decode":
            text = " ".join(vocab.symbol_of(int(t)) for t in obj["ids"])
            return {"ok": True, "text": text}
        if op == "vocab":
            return {"ok": True, "symbols": list(vocab.symbols), "eos_id": vocab.eos_id}
        return {"ok": False, "error": f"unknown op {op!r}"}
    except (ModelError, KeyError, TypeError, ValueError) as exc:
        return {"ok": False, "error": str(exc)}


class ProviderServer:
    """Threaded TCP server exposing one provider over the wire protocol."""

    def __init__(self, provider: Provider, host: str = "127.0.0.1", port: int = 0):
        handler_provider = provider

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    line = self.rfile.readline()
                    if not line:
                        return
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        reply = _handle_request(handler_provider, json.loads(line))
                    except json.JSONDecodeError as exc:
                        reply = {"ok": False, "error": f"malformed JSON: {exc}"}
                    self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()


def serve_stdio(provider: Provider, stdin=None, stdout=None) -> None:
    """Serve one session over stdio (for subprocess transports)."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            reply = _handle_request(provider, json.loads(line))
        except json.JSONDecodeError as exc:
            reply = {"ok": False, "error": f"malformed JSON: {exc}"}
        stdout.write((json.dumps(reply) + "\n").encode("utf-8"))
        stdout.flush()


def main(argv=None) -> int:
    """Reference server entry point: expose a table LM over TCP or stdio."""
    from .models import load_table_lm

    parser = argparse.ArgumentParser(prog="gumbelcf-serve", description=serve_stdio.__doc__)
    parser.add_argument("--table", required=True, help="table-LM JSON file to serve")
    parser.add_argument("--listen", default=None, help="host:port (port 0 picks one)")
    parser.add_argument("--stdio", action="store_true", help="serve one session over stdio")
    args = parser.parse_args(argv)
    provider = load_table_lm(args.table)
    if args.stdio:
        serve_stdio(provider)
        return 0
    if not args.listen:
        parser.error("need --listen or --stdio")
    host, _, port = args.listen.rpartition(":")
    server = ProviderServer(provider, host or "127.0.0.1", int(port or 0))
    print(f"serving {args.table} on {server.address}", file=sys.stderr, flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
