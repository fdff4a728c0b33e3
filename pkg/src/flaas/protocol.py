"""Wire-level contract shared by coordinator, devices, CLI and dashboard.

Control-plane messages are JSON dicts (each type has to_wire/from_wire);
model parameters travel as a binary blob of little-endian float32 behind a
12-byte shape header. Times are UTC unix seconds as JSON numbers.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import secrets
import struct
import threading
from base64 import urlsafe_b64decode, urlsafe_b64encode
from dataclasses import dataclass, field

import numpy as np

from .errors import AuthExpired, AuthInvalid, DecodeError, InvalidInput
from .flmath import DpConfig, ModelParams, weight_count

TRAINING_MODES = ("SA", "JS", "JM")
STAGES = ("join", "load_samples", "train", "merge", "report")

ACCESS_TOKEN_TTL = 600.0  # 10 minutes
REFRESH_TOKEN_TTL = 86400.0  # 1 day, renewed on every rotation


@dataclass(frozen=True)
class DeviceStatus:
    """Heartbeat record driving scheduler eligibility."""

    device_id: str
    battery_pct: int
    charging: bool
    memory_available_mb: int
    timestamp: float

    def __post_init__(self):
        if not 0 <= self.battery_pct <= 100:
            raise InvalidInput(f"battery_pct {self.battery_pct} outside [0, 100]")
        if self.memory_available_mb < 0:
            raise InvalidInput("memory_available_mb must be >= 0")

    def to_wire(self) -> dict:
        return {
            "device_id": self.device_id,
            "battery_pct": self.battery_pct,
            "charging": self.charging,
            "memory_available_mb": self.memory_available_mb,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "DeviceStatus":
        try:
            return cls(
                device_id=str(d["device_id"]),
                battery_pct=int(d["battery_pct"]),
                charging=bool(d["charging"]),
                memory_available_mb=int(d["memory_available_mb"]),
                timestamp=float(d["timestamp"]),
            )
        except KeyError as exc:
            raise InvalidInput(f"device status missing field {exc}") from exc


@dataclass(frozen=True)
class TrainingRequest:
    """The wake-up message that asks a device to run one round."""

    request_id: str
    expiration_date: float
    project_id: str
    fl_round: int
    training_mode: str

    def __post_init__(self):
        if self.training_mode not in TRAINING_MODES:
            raise InvalidInput(f"unknown training mode {self.training_mode!r}")
        if self.fl_round < 0:
            raise InvalidInput("fl_round must be >= 0")

    def to_wire(self) -> dict:
        return {
            "request_id": self.request_id,
            "expiration_date": self.expiration_date,
            "project_id": self.project_id,
            "fl_round": self.fl_round,
            "training_mode": self.training_mode,
        }

    @classmethod
    def from_wire(cls, d: dict) -> "TrainingRequest":
        return cls(
            request_id=str(d["request_id"]),
            expiration_date=float(d["expiration_date"]),
            project_id=str(d["project_id"]),
            fl_round=int(d["fl_round"]),
            training_mode=str(d["training_mode"]),
        )


@dataclass(frozen=True)
class TrainingResults:
    """Per-device round telemetry: loss plus per-stage durations in ms."""

    project_id: str
    fl_round: int
    device_id: str
    final_loss: float
    sample_count: int
    durations_ms: dict[str, int]

    def __post_init__(self):
        if self.sample_count <= 0:
            raise InvalidInput("sample_count must be > 0 for a valid submission")
        missing = [s for s in STAGES if s not in self.durations_ms]
        if missing:
            raise InvalidInput(f"durations_ms missing stages {missing}")
        for stage, ms in self.durations_ms.items():
            if int(ms) < 0:
                raise InvalidInput(f"duration for {stage} must be >= 0")
        object.__setattr__(
            self, "durations_ms", {s: int(self.durations_ms[s]) for s in STAGES}
        )

    def to_wire(self) -> dict:
        return {
            "project_id": self.project_id,
            "fl_round": self.fl_round,
            "device_id": self.device_id,
            "final_loss": self.final_loss,
            "sample_count": self.sample_count,
            "durations_ms": dict(self.durations_ms),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "TrainingResults":
        return cls(
            project_id=str(d["project_id"]),
            fl_round=int(d["fl_round"]),
            device_id=str(d["device_id"]),
            final_loss=float(d["final_loss"]),
            sample_count=int(d["sample_count"]),
            durations_ms={k: int(v) for k, v in dict(d["durations_ms"]).items()},
        )


@dataclass(frozen=True)
class SharingLimit:
    """How often an app may share data/models: once, n times, until a deadline,
    or without limit."""

    kind: str = "unlimited"  # once | n_times | until | unlimited
    n: int | None = None
    until: float | None = None

    def __post_init__(self):
        if self.kind not in ("once", "n_times", "until", "unlimited"):
            raise InvalidInput(f"unknown sharing limit kind {self.kind!r}")
        if self.kind == "n_times" and (self.n is None or self.n < 0):
            raise InvalidInput("n_times limit needs n >= 0")
        if self.kind == "until" and self.until is None:
            raise InvalidInput("until limit needs a deadline")

    def permits(self, shares_done: int, now: float) -> bool:
        if self.kind == "once":
            return shares_done < 1
        if self.kind == "n_times":
            return shares_done < self.n
        if self.kind == "until":
            return now < self.until
        return True

    def to_wire(self) -> dict:
        return {"kind": self.kind, "n": self.n, "until": self.until}

    @classmethod
    def from_wire(cls, d: dict) -> "SharingLimit":
        return cls(
            kind=str(d.get("kind", "unlimited")),
            n=None if d.get("n") is None else int(d["n"]),
            until=None if d.get("until") is None else float(d["until"]),
        )


@dataclass(frozen=True)
class PolicySpec:
    """Per-app sharing policy enforced by the on-device library."""

    share_kind: str = "samples"  # what the app will hand to Local: samples | model
    dp_local: DpConfig = field(default_factory=DpConfig)
    sharing_limit: SharingLimit = field(default_factory=SharingLimit)
    min_local_loss: float | None = None  # JM: exclude app models above this loss
    allowed_receivers: tuple[str, ...] = ("local",)

    def __post_init__(self):
        if self.share_kind not in ("samples", "model"):
            raise InvalidInput("share_kind must be 'samples' or 'model'")
        object.__setattr__(self, "allowed_receivers", tuple(self.allowed_receivers))

    def to_wire(self) -> dict:
        return {
            "share_kind": self.share_kind,
            "dp_local": self.dp_local.to_dict(),
            "sharing_limit": self.sharing_limit.to_wire(),
            "min_local_loss": self.min_local_loss,
            "allowed_receivers": list(self.allowed_receivers),
        }

    @classmethod
    def from_wire(cls, d: dict) -> "PolicySpec":
        return cls(
            share_kind=str(d.get("share_kind", "samples")),
            dp_local=DpConfig.from_dict(d.get("dp_local", {})),
            sharing_limit=SharingLimit.from_wire(d.get("sharing_limit", {})),
            min_local_loss=None
            if d.get("min_local_loss") is None
            else float(d["min_local_loss"]),
            allowed_receivers=tuple(d.get("allowed_receivers", ("local",))),
        )


# --- model blob -------------------------------------------------------------

_HEADER = struct.Struct("<III")


@dataclass(frozen=True)
class ModelBlob:
    """Shape header plus little-endian float32 payload, layout as ModelParams."""

    input_dim: int
    hidden_dim: int
    num_classes: int
    payload: bytes

    def __post_init__(self):
        expected = 4 * weight_count(self.input_dim, self.hidden_dim, self.num_classes)
        if len(self.payload) < expected:
            raise DecodeError("truncated payload")
        if len(self.payload) > expected:
            raise DecodeError(
                f"payload is {len(self.payload)} bytes, header implies {expected}"
            )

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.input_dim, self.hidden_dim, self.num_classes) + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelBlob":
        if len(raw) < _HEADER.size:
            raise DecodeError("truncated header")
        d, h, c = _HEADER.unpack_from(raw)
        if min(d, h, c) < 1:
            raise DecodeError(f"invalid shape header ({d}, {h}, {c})")
        return cls(d, h, c, raw[_HEADER.size :])


def encode_model(params: ModelParams) -> ModelBlob:
    payload = params.weights.astype("<f4").tobytes()
    return ModelBlob(*params.shape, payload)


def decode_model(blob: ModelBlob) -> ModelParams:
    w = np.frombuffer(blob.payload, dtype="<f4").astype(np.float64)
    return ModelParams(blob.input_dim, blob.hidden_dim, blob.num_classes, w)


# --- token lifecycle ----------------------------------------------------------


@dataclass(frozen=True)
class TokenPair:
    access_token: str
    refresh_token: str

    def to_wire(self) -> dict:
        return {"access_token": self.access_token, "refresh_token": self.refresh_token}

    @classmethod
    def from_wire(cls, d: dict) -> "TokenPair":
        return cls(str(d["access_token"]), str(d["refresh_token"]))


class TokenStore:
    """HMAC-signed opaque tokens with embedded expiry.

    Access tokens live 10 minutes and verify statelessly. Refresh tokens live
    1 day, validate at most once, and every refresh rotates in a new pair;
    rotation is serialized so a concurrently reused token loses cleanly.
    """

    def __init__(self, secret: bytes | None = None):
        self._secret = secret if secret is not None else secrets.token_bytes(32)
        self._lock = threading.Lock()
        self._live_refresh: dict[str, str] = {}  # token -> device_id
        self._revoked: set[str] = set()

    def _sign(self, payload: bytes) -> str:
        return hmac.new(self._secret, payload, hashlib.sha256).hexdigest()[:32]

    def _mint(self, device_id: str, kind: str, expires: float) -> str:
        body = json.dumps(
            {"dev": device_id, "kind": kind, "exp": expires, "nonce": secrets.token_hex(8)},
            separators=(",", ":"),
        ).encode()
        b64 = urlsafe_b64encode(body).decode().rstrip("=")
        return f"{b64}.{self._sign(b64.encode())}"

    def _open(self, token: str, kind: str, now: float) -> dict:
        try:
            b64, sig = token.split(".")
        except ValueError:
            raise AuthInvalid("malformed token") from None
        if not hmac.compare_digest(sig, self._sign(b64.encode())):
            raise AuthInvalid("bad token signature")
        pad = "=" * (-len(b64) % 4)
        claims = json.loads(urlsafe_b64decode(b64 + pad))
        if claims.get("kind") != kind:
            raise AuthInvalid(f"token is not a {kind} token")
        return claims

    def issue(self, device_id: str, now: float) -> TokenPair:
        access = self._mint(device_id, "access", now + ACCESS_TOKEN_TTL)
        refresh = self._mint(device_id, "refresh", now + REFRESH_TOKEN_TTL)
        with self._lock:
            self._live_refresh[refresh] = device_id
        return TokenPair(access, refresh)

    def validate(self, access_token: str, now: float) -> str:
        """Return the device id iff the token is unexpired and unrevoked."""
        claims = self._open(access_token, "access", now)
        if access_token in self._revoked:
            raise AuthInvalid("token revoked")
        if now >= claims["exp"]:
            raise AuthExpired("access token expired")
        return claims["dev"]

    def refresh(self, refresh_token: str, now: float) -> TokenPair:
        claims = self._open(refresh_token, "refresh", now)
        with self._lock:
            if refresh_token not in self._live_refresh:
                raise AuthInvalid("refresh token already used or unknown")
            if now >= claims["exp"]:
                del self._live_refresh[refresh_token]
                raise AuthInvalid("refresh token expired")
            del self._live_refresh[refresh_token]
        return self.issue(claims["dev"], now)

    def revoke_access(self, access_token: str) -> None:
        self._revoked.add(access_token)
