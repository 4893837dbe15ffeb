"""Newline-delimited JSON messages exchanged between robots and the cloud.

Each line is one object with a ``type`` and exactly the fields that type
allows. Unknown types or fields are rejected, so a peer speaking a newer
dialect fails loudly instead of being half understood.
"""
from __future__ import annotations

import json

PROTOCOL_VERSION = 1
MAX_LINE = 64 * 1024 * 1024

# type -> (required fields, optional fields)
SCHEMA: dict[str, tuple[frozenset, frozenset]] = {
    "HELLO": (frozenset({"robot_id"}), frozenset({"protocol_version", "generation"})),
    "DOWNLOAD_SHARED": (frozenset(), frozenset()),
    "SHARED_MODEL": (frozenset({"generation", "params"}), frozenset()),
    "UPLOAD_PRIVATE": (frozenset({"params", "env_tag"}), frozenset()),
    "ACK": (frozenset({"upload_id"}), frozenset({"pending"})),
    "ERROR": (frozenset({"code", "detail"}), frozenset()),
    "STATUS": (frozenset(), frozenset()),
    "STATUS_REPLY": (frozenset({"generation", "pending", "fusing", "checksum"}), frozenset({"last_error"})),
}
REQUESTS = {"HELLO", "DOWNLOAD_SHARED", "UPLOAD_PRIVATE", "STATUS"}


class ProtocolError(ValueError):
    def __init__(self, detail: str, code: str = "protocol"):
        super().__init__(detail)
        self.code = code
        self.detail = detail


def validate(msg) -> dict:
    if not isinstance(msg, dict):
        raise ProtocolError("message must be a JSON object", "malformed")
    kind = msg.get("type")
    if kind not in SCHEMA:
        raise ProtocolError(f"unknown message type {kind!r}", "unknown_type")
    required, optional = SCHEMA[kind]
    fields = set(msg) - {"type"}
    missing = required - fields
    if missing:
        raise ProtocolError(f"{kind} is missing fields {sorted(missing)}", "missing_field")
    unknown = fields - required - optional
    if unknown:
        raise ProtocolError(f"{kind} has unknown fields {sorted(unknown)}", "unknown_field")
    return msg


def encode(msg: dict) -> bytes:
    validate(msg)
    return json.dumps(msg, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8") + b"\n"


def decode(line: bytes | str) -> dict:
    try:
        msg = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"not valid JSON: {exc}", "malformed") from exc
    return validate(msg)


def error(code: str, detail: str) -> dict:
    return {"type": "ERROR", "code": code, "detail": detail}
