"""Synchronous client for the cloud protocol."""
from __future__ import annotations

import json
import socket
import time

from ..nn import NetworkParameters
from .protocol import MAX_LINE, ProtocolError, decode, encode
from .serialization import FormatError, canonical_json, doc_to_model, model_to_doc
from .server import parse_address


class CloudClientError(RuntimeError):
    pass


class CloudTransportError(CloudClientError):
    """Connection refused, dropped or timed out; safe to retry reads."""


class CloudServerError(CloudClientError):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class CloudClient:
    def __init__(self, address: str, robot_id: str = "robot", timeout: float = 60.0, retries: int = 3,
                 backoff: float = 0.2):
        self.address = parse_address(address)
        self.robot_id = robot_id
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sock: socket.socket | None = None
        self._rfile = None

    def connect(self) -> None:
        last = None
        for attempt in range(self.retries):
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
                self._rfile = self._sock.makefile("rb")
                break
            except OSError as exc:
                last = exc
                time.sleep(self.backoff * (attempt + 1))
        else:
            raise CloudTransportError(f"cannot reach cloud at {self.address}: {last}")
        self._request({"type": "HELLO", "robot_id": self.robot_id})

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._rfile.close()
                self._sock.close()
            finally:
                self._sock = None
                self._rfile = None

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()

    def _request(self, msg: dict) -> dict:
        if self._sock is None:
            raise CloudTransportError("not connected")
        try:
            self._sock.sendall(encode(msg))
            line = self._rfile.readline(MAX_LINE + 1)
        except OSError as exc:
            self.close()
            raise CloudTransportError(f"transport failure: {exc}") from exc
        if not line or not line.endswith(b"\n"):
            self.close()
            raise CloudTransportError("connection closed before a full reply arrived")
        reply = decode(line)  # unknown fields -> ProtocolError
        if reply["type"] == "ERROR":
            raise CloudServerError(reply["code"], reply["detail"])
        return reply

    def _expect(self, reply: dict, kind: str) -> dict:
        if reply["type"] != kind:
            raise ProtocolError(f"expected {kind}, got {reply['type']}")
        return reply

    def download_payload(self) -> tuple[int, bytes]:
        reply = self._expect(self._request({"type": "DOWNLOAD_SHARED"}), "SHARED_MODEL")
        params = reply["params"]
        if isinstance(params, str):
            params = json.loads(params)
        return int(reply["generation"]), canonical_json(params)

    def download(self) -> tuple[int, NetworkParameters]:
        g, payload = self.download_payload()
        try:
            return g, doc_to_model(json.loads(payload))
        except (FormatError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"server sent an unreadable model: {exc}") from exc

    def upload(self, params: NetworkParameters, env_tag: str = "") -> str:
        doc = model_to_doc(params)
        reply = self._request({"type": "UPLOAD_PRIVATE", "params": doc, "env_tag": env_tag})
        return self._expect(reply, "ACK")["upload_id"]

    def status(self) -> dict:
        reply = self._expect(self._request({"type": "STATUS"}), "STATUS_REPLY")
        return {k: v for k, v in reply.items() if k != "type"}

    def wait_for_generation(self, generation: int, timeout: float = 600.0, poll: float = 0.05) -> dict:
        deadline = time.monotonic() + timeout
        while True:
            st = self.status()
            if st["generation"] >= generation:
                return st
            if time.monotonic() > deadline:
                raise CloudTransportError(f"timed out waiting for generation {generation}: {st}")
            time.sleep(poll)


def client_download(address: str, robot_id: str = "robot") -> tuple[int, NetworkParameters]:
    with CloudClient(address, robot_id) as c:
        return c.download()


def client_upload(address: str, params: NetworkParameters, env_tag: str = "", robot_id: str = "robot") -> str:
    with CloudClient(address, robot_id) as c:
        return c.upload(params, env_tag)
