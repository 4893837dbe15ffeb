"""Threaded TCP front end for a Registry."""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading

from .protocol import MAX_LINE, PROTOCOL_VERSION, REQUESTS, ProtocolError, decode, encode, error
from .registry import FusionPolicy, Registry, RegistryError
from .serialization import FormatError, doc_to_model

log = logging.getLogger(__name__)

POLL_S = 0.2


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = str(addr).rpartition(":")
    if not sep:
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


class _Handler(socketserver.BaseRequestHandler):
    server: "CloudServer"

    def setup(self) -> None:
        self.request.settimeout(POLL_S)
        self.robot_id = "anonymous"
        self._buf = b""

    def _readline(self) -> bytes | None:
        """Next complete line, or None once the peer or the server is done.

        A trailing partial line from a peer that disconnects is discarded,
        so a half-sent upload never reaches the registry.
        """
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line, self._buf = self._buf[:nl + 1], self._buf[nl + 1:]
                return line
            if len(self._buf) > MAX_LINE:
                line, self._buf = self._buf, b""
                return line
            try:
                chunk = self.request.recv(1 << 16)
            except socket.timeout:
                if self.server.stopping.is_set() and not self._buf:
                    return None
                continue
            except OSError:
                return None
            if not chunk:
                return None
            self._buf += chunk

    def handle(self) -> None:
        while not self.server.stopping.is_set():
            line = self._readline()
            if line is None:
                return
            if len(line) > MAX_LINE:
                self._send(error("too_large", f"message exceeds {MAX_LINE} bytes"))
                return
            if not line.strip():
                continue
            try:
                reply = self.dispatch(decode(line))
            except ProtocolError as exc:
                reply = error(exc.code, exc.detail)
            if not self._send(reply):
                return

    def _send(self, msg: dict) -> bool:
        self.request.settimeout(None)
        try:
            self.request.sendall(encode(msg))
            return True
        except OSError:
            return False
        finally:
            self.request.settimeout(POLL_S)

    def dispatch(self, msg: dict) -> dict:
        kind = msg["type"]
        reg = self.server.registry
        if kind not in REQUESTS:
            raise ProtocolError(f"{kind} is a response type, not a request", "not_a_request")
        if kind == "HELLO":
            self.robot_id = str(msg["robot_id"])
            return {"type": "HELLO", "robot_id": "cloud", "protocol_version": PROTOCOL_VERSION,
                    "generation": reg.generation}
        if kind == "DOWNLOAD_SHARED":
            rec = reg.current()
            return {"type": "SHARED_MODEL", "generation": rec.generation, "params": json.loads(rec.payload)}
        if kind == "STATUS":
            st = reg.status()
            return {"type": "STATUS_REPLY", **st}
        # UPLOAD_PRIVATE
        try:
            params = doc_to_model(_as_doc(msg["params"]))
            upload_id = reg.upload(params, self.robot_id, str(msg["env_tag"]))
        except FormatError as exc:
            return error("bad_model", str(exc))
        except RegistryError as exc:
            return error(exc.code, str(exc))
        self.server.notify_upload()
        return {"type": "ACK", "upload_id": upload_id, "pending": reg.status()["pending"]}


def _as_doc(params):
    if isinstance(params, str):
        try:
            return json.loads(params)
        except json.JSONDecodeError as exc:
            raise FormatError(f"params is not a JSON model document: {exc}") from exc
    return params


class CloudServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = False
    block_on_close = True

    def __init__(self, address, registry: Registry, policy: FusionPolicy | None = None):
        self.registry = registry
        self.policy = policy or registry.policy
        registry.policy = self.policy
        self.stopping = threading.Event()
        self._wake = threading.Event()
        super().__init__(address, _Handler)
        self._fusion_thread = threading.Thread(target=self._fusion_loop, name="fusion", daemon=True)
        self._serve_thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def notify_upload(self) -> None:
        if self.registry.fusion_due():
            self._wake.set()

    def _fusion_loop(self) -> None:
        while not self.stopping.is_set():
            timed_out = not self._wake.wait(self.policy.interval_s or POLL_S)
            self._wake.clear()
            if self.stopping.is_set():
                return
            st = self.registry.status()
            timer_fired = timed_out and self.policy.interval_s is not None
            if st["pending"] and (self.registry.fusion_due() or timer_fired):
                try:
                    rec = self.registry.trigger_fusion()
                    log.info("installed shared generation %d", rec.generation)
                except RegistryError as exc:
                    log.error("fusion failed: %s", exc)

    def start(self) -> "CloudServer":
        self._fusion_thread.start()
        self._serve_thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": POLL_S},
                                              name="cloud-accept", daemon=True)
        self._serve_thread.start()
        return self

    def close(self) -> None:
        """Stop accepting, let in-flight requests and any running fusion finish."""
        self.stopping.set()
        self._wake.set()
        self.shutdown()
        self.server_close()  # joins handler threads
        if self._fusion_thread.is_alive():
            self._fusion_thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(bind: str, registry: Registry, policy: FusionPolicy | None = None) -> CloudServer:
    """Start a cloud server on ``bind`` ("host:port", port 0 picks one) in background threads."""
    return CloudServer(parse_address(bind), registry, policy).start()
