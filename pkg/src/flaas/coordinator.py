"""Coordinator: project store, per-project round state machine, aggregator.

One process owns all projects. Every state transition for a project happens
under that project's lock, so scheduler ticks, submissions and termination
are linearizable per project; reads take the same lock briefly and return
plain snapshots. Time comes from an injected clock so the whole coordinator
runs unchanged on virtual time in simulation and wall time in service mode.

Round bookkeeping: every opened round gets a new sequence number (these are
the round ids devices see and history records carry). `rounds_completed`
counts only valid rounds and is what the stopping rule compares against
num_rounds; invalid rounds do not consume the budget unless the project is
configured with invalid_rounds_consume_budget.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import flmath
from .errors import (
    AlreadyFinal,
    Conflict,
    DuplicateSubmission,
    InvalidInput,
    NotFound,
    NotInvited,
    NotJoined,
    RoundClosed,
)
from .flmath import DpConfig, Hyperparams, ModelParams, WeightedModel
from .protocol import (
    DeviceStatus,
    ModelBlob,
    PolicySpec,
    TrainingRequest,
    TrainingResults,
    decode_model,
    encode_model,
)
from .seeds import derive_seed

logger = logging.getLogger(__name__)

WAITING = "waiting"
TRAINING = "training"
COMPLETED = "completed"
TERMINATED = "terminated"


class Clock(Protocol):
    def now(self) -> float: ...


class SystemClock:
    def now(self) -> float:
        return time.time()


@dataclass(frozen=True)
class PowerRule:
    """Which device power states qualify for scheduling."""

    kind: str = "either"  # plugged_only | battery_min | either
    min_battery: int = 0

    def __post_init__(self):
        if self.kind not in ("plugged_only", "battery_min", "either"):
            raise InvalidInput(f"unknown power rule {self.kind!r}")
        if not 0 <= self.min_battery <= 100:
            raise InvalidInput("min_battery must be in [0, 100]")

    def admits(self, status: DeviceStatus) -> bool:
        if self.kind == "plugged_only":
            return status.charging
        if self.kind == "battery_min":
            return status.battery_pct > self.min_battery
        return status.charging or status.battery_pct > self.min_battery

    def to_wire(self) -> dict:
        return {"kind": self.kind, "min_battery": self.min_battery}

    @classmethod
    def from_wire(cls, d: dict) -> "PowerRule":
        return cls(kind=str(d.get("kind", "either")), min_battery=int(d.get("min_battery", 0)))


@dataclass(frozen=True)
class ProjectConfig:
    project_id: str
    input_dim: int
    hidden_dim: int = flmath.DEFAULT_HIDDEN_DIM
    num_classes: int = flmath.DEFAULT_NUM_CLASSES
    training_mode: str = "JS"
    apps: tuple[str, ...] = ("Red", "Green", "Blue")
    epochs: int = 20
    policy: PolicySpec | None = None  # None: derive share_kind from the mode
    num_rounds: int | None = 10
    round_duration: float = 3600.0
    target_loss: float | None = None
    power_rule: PowerRule = field(default_factory=PowerRule)
    min_available_devices: int = 1
    min_models_received: int = 1
    wait_full_duration: bool = False
    dp: DpConfig = field(default_factory=DpConfig)
    uniform_fedavg: bool = False
    invalid_rounds_consume_budget: bool = False
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "apps", tuple(self.apps))
        if not self.project_id:
            raise InvalidInput("project_id must be nonempty")
        if self.training_mode not in ("SA", "JS", "JM"):
            raise InvalidInput(f"unknown training mode {self.training_mode!r}")
        if self.training_mode == "SA" and len(self.apps) != 1:
            raise InvalidInput("SA projects target exactly one app (one project per app)")
        if not self.apps:
            raise InvalidInput("apps must be nonempty")
        if self.policy is None:
            kind = "model" if self.training_mode == "JM" else "samples"
            object.__setattr__(self, "policy", PolicySpec(share_kind=kind))
        elif self.training_mode == "JS" and self.policy.share_kind != "samples":
            raise InvalidInput("JS projects need a policy with share_kind='samples'")
        elif self.training_mode == "JM" and self.policy.share_kind != "model":
            raise InvalidInput("JM projects need a policy with share_kind='model'")
        if self.min_models_received < 1:
            raise InvalidInput("min_models_received must be >= 1")
        if self.min_models_received > self.min_available_devices:
            raise InvalidInput(
                "min_models_received must not exceed min_available_devices"
            )
        if self.num_rounds is None and self.target_loss is None:
            raise InvalidInput("set num_rounds >= 1 or a target_loss")
        if self.num_rounds is not None and self.num_rounds < 1:
            raise InvalidInput("num_rounds must be >= 1")
        if self.round_duration <= 0:
            raise InvalidInput("round_duration must be > 0")
        if self.epochs < 1:
            raise InvalidInput("epochs must be >= 1")

    @property
    def model_shape(self) -> tuple[int, int, int]:
        return (self.input_dim, self.hidden_dim, self.num_classes)

    def to_dict(self) -> dict:
        return {
            "project_id": self.project_id,
            "model_shape": list(self.model_shape),
            "training_mode": self.training_mode,
            "apps": list(self.apps),
            "epochs": self.epochs,
            "policy": self.policy.to_wire(),
            "num_rounds": self.num_rounds,
            "round_duration": self.round_duration,
            "target_loss": self.target_loss,
            "power_rule": self.power_rule.to_wire(),
            "min_available_devices": self.min_available_devices,
            "min_models_received": self.min_models_received,
            "wait_full_duration": self.wait_full_duration,
            "dp": self.dp.to_dict(),
            "uniform_fedavg": self.uniform_fedavg,
            "invalid_rounds_consume_budget": self.invalid_rounds_consume_budget,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectConfig":
        if "model_shape" in d:
            shape = d["model_shape"]
        elif "input_dim" in d:
            shape = [d["input_dim"], d.get("hidden_dim", 32), d.get("num_classes", 10)]
        else:
            raise InvalidInput("config needs model_shape [d, h, C]")
        if len(shape) != 3:
            raise InvalidInput("model_shape must be [d, h, C]")
        return cls(
            project_id=str(d["project_id"]),
            input_dim=int(shape[0]),
            hidden_dim=int(shape[1]),
            num_classes=int(shape[2]),
            training_mode=str(d.get("training_mode", "JS")),
            apps=tuple(d.get("apps", ("Red", "Green", "Blue"))),
            epochs=int(d.get("epochs", 20)),
            policy=PolicySpec.from_wire(d["policy"]) if "policy" in d else None,
            num_rounds=None if d.get("num_rounds") is None else int(d["num_rounds"]),
            round_duration=float(d.get("round_duration", 3600.0)),
            target_loss=None if d.get("target_loss") is None else float(d["target_loss"]),
            power_rule=PowerRule.from_wire(d.get("power_rule", {})),
            min_available_devices=int(d.get("min_available_devices", 1)),
            min_models_received=int(d.get("min_models_received", 1)),
            wait_full_duration=bool(d.get("wait_full_duration", False)),
            dp=DpConfig.from_dict(d.get("dp", {})),
            uniform_fedavg=bool(d.get("uniform_fedavg", False)),
            invalid_rounds_consume_budget=bool(d.get("invalid_rounds_consume_budget", False)),
            init_seed=int(d.get("init_seed", 0)),
        )


@dataclass
class RoundRecord:
    round: int
    requested_devices: list[str]
    joined_devices: list[str]
    received_models: list[tuple[str, int]]
    outcome: str  # completed | invalid
    aggregate_loss: float | None = None
    test_accuracy: float | None = None
    started_at: float = 0.0
    closed_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "requested_devices": list(self.requested_devices),
            "joined_devices": list(self.joined_devices),
            "received_models": [[d, n] for d, n in self.received_models],
            "outcome": self.outcome,
            "aggregate_loss": self.aggregate_loss,
            "test_accuracy": self.test_accuracy,
            "started_at": self.started_at,
            "closed_at": self.closed_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            round=int(d["round"]),
            requested_devices=list(d["requested_devices"]),
            joined_devices=list(d["joined_devices"]),
            received_models=[(str(x[0]), int(x[1])) for x in d["received_models"]],
            outcome=str(d["outcome"]),
            aggregate_loss=d.get("aggregate_loss"),
            test_accuracy=d.get("test_accuracy"),
            started_at=float(d.get("started_at", 0.0)),
            closed_at=float(d.get("closed_at", 0.0)),
        )


@dataclass
class _OpenRound:
    seq: int
    started_at: float
    deadline: float
    requested: list[str]
    joined: list[str] = field(default_factory=list)
    submissions: dict[str, WeightedModel] = field(default_factory=dict)
    device_losses: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "started_at": self.started_at,
            "deadline": self.deadline,
            "requested": list(self.requested),
        }


@dataclass
class _Project:
    cfg: ProjectConfig
    status: str
    rounds_completed: int
    round_seq: int
    global_model: ModelParams
    history: list[RoundRecord] = field(default_factory=list)
    open_round: _OpenRound | None = None
    results_log: list[TrainingResults] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock)


# --- persistence ----------------------------------------------------------------

_M64 = struct.Struct("<III")


def model_to_bytes64(params: ModelParams) -> bytes:
    """Lossless float64 serialization used only by the persistence layer."""
    return _M64.pack(*params.shape) + params.weights.astype("<f8").tobytes()


def model_from_bytes64(raw: bytes) -> ModelParams:
    d, h, c = _M64.unpack_from(raw)
    w = np.frombuffer(raw[_M64.size :], dtype="<f8")
    return ModelParams(d, h, c, w)


class Store(Protocol):
    """Durable record of project lifecycles; the coordinator is write-through."""

    def save_config(self, pid: str, cfg: dict) -> None: ...
    def save_state(self, pid: str, state: dict) -> None: ...
    def save_model(self, pid: str, raw: bytes) -> None: ...
    def append_history(self, pid: str, record: dict) -> None: ...
    def mark_round_open(self, pid: str, info: dict) -> None: ...
    def clear_round_open(self, pid: str) -> None: ...
    def append_results(self, pid: str, results: dict) -> None: ...
    def load_all(self) -> dict: ...


class MemoryStore:
    """Dict-backed store; state survives only within the process."""

    def __init__(self):
        self.projects: dict[str, dict] = {}

    def _p(self, pid: str) -> dict:
        return self.projects.setdefault(
            pid, {"config": None, "state": None, "model": None, "history": [], "round_open": None, "results": []}
        )

    def save_config(self, pid, cfg):
        self._p(pid)["config"] = cfg

    def save_state(self, pid, state):
        self._p(pid)["state"] = state

    def save_model(self, pid, raw):
        self._p(pid)["model"] = raw

    def append_history(self, pid, record):
        self._p(pid)["history"].append(record)

    def mark_round_open(self, pid, info):
        self._p(pid)["round_open"] = info

    def clear_round_open(self, pid):
        self._p(pid)["round_open"] = None

    def append_results(self, pid, results):
        self._p(pid)["results"].append(results)

    def load_all(self):
        return {pid: dict(p) for pid, p in self.projects.items()}


class FileStore:
    """One directory per project under state_dir; writes are atomic."""

    def __init__(self, state_dir):
        self.root = Path(state_dir)
        (self.root / "projects").mkdir(parents=True, exist_ok=True)

    def _dir(self, pid: str) -> Path:
        d = self.root / "projects" / pid
        d.mkdir(parents=True, exist_ok=True)
        return d

    @staticmethod
    def _write_atomic(path: Path, data: bytes) -> None:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def save_config(self, pid, cfg):
        self._write_atomic(self._dir(pid) / "config.json", json.dumps(cfg, indent=1).encode())

    def save_state(self, pid, state):
        self._write_atomic(self._dir(pid) / "state.json", json.dumps(state).encode())

    def save_model(self, pid, raw):
        self._write_atomic(self._dir(pid) / "model.f64", raw)

    def append_history(self, pid, record):
        with open(self._dir(pid) / "history.jsonl", "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")

    def mark_round_open(self, pid, info):
        self._write_atomic(self._dir(pid) / "round_open.json", json.dumps(info).encode())

    def clear_round_open(self, pid):
        marker = self._dir(pid) / "round_open.json"
        if marker.exists():
            marker.unlink()

    def append_results(self, pid, results):
        with open(self._dir(pid) / "results.jsonl", "a", encoding="utf-8") as f:
            f.write(json.dumps(results) + "\n")

    def load_all(self):
        out = {}
        projects = self.root / "projects"
        for d in sorted(projects.iterdir()) if projects.exists() else []:
            if not (d / "config.json").exists():
                continue
            entry = {
                "config": json.loads((d / "config.json").read_text()),
                "state": json.loads((d / "state.json").read_text())
                if (d / "state.json").exists()
                else None,
                "model": (d / "model.f64").read_bytes() if (d / "model.f64").exists() else None,
                "history": [],
                "round_open": None,
                "results": [],
            }
            if (d / "history.jsonl").exists():
                entry["history"] = [
                    json.loads(line)
                    for line in (d / "history.jsonl").read_text().splitlines()
                    if line.strip()
                ]
            if (d / "round_open.json").exists():
                entry["round_open"] = json.loads((d / "round_open.json").read_text())
            out[d.name] = entry
        return out


# --- notification dispatch ----------------------------------------------------


class Notifier(Protocol):
    def send(self, device_id: str, request: TrainingRequest) -> None: ...


class QueueNotifier:
    """Per-device FIFO queues with a blocking poll, for service mode."""

    def __init__(self):
        self._queues: dict[str, deque] = {}
        self._cond = threading.Condition()

    def send(self, device_id: str, request: TrainingRequest) -> None:
        with self._cond:
            self._queues.setdefault(device_id, deque()).append(request)
            self._cond.notify_all()

    def poll(self, device_id: str, timeout: float = 0.0) -> list[TrainingRequest]:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                q = self._queues.setdefault(device_id, deque())
                if q:
                    out = list(q)
                    q.clear()
                    return out
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)


class CallbackNotifier:
    """Adapter used by the simulator: delivery is a caller-supplied hook."""

    def __init__(self, deliver: Callable[[str, TrainingRequest], None]):
        self._deliver = deliver

    def send(self, device_id: str, request: TrainingRequest) -> None:
        self._deliver(device_id, request)


# --- the coordinator ------------------------------------------------------------


class Coordinator:
    def __init__(
        self,
        clock: Clock,
        store: Store | None = None,
        notifier: Notifier | None = None,
        eval_set=None,
        eval_hp: Hyperparams | None = None,
        scheduler_period: float = 10.0,
        staleness_factor: float = 2.0,
    ):
        self.clock = clock
        self.store = store if store is not None else MemoryStore()
        self.notifier = notifier
        self.eval_set = eval_set
        self.eval_hp = eval_hp if eval_hp is not None else Hyperparams()
        self.scheduler_period = scheduler_period
        self.staleness_window = staleness_factor * scheduler_period
        self._projects: dict[str, _Project] = {}
        self._registry_lock = threading.Lock()
        self._statuses: dict[str, tuple[DeviceStatus, float]] = {}
        self._status_lock = threading.Lock()

    # -- restore ---------------------------------------------------------------

    @classmethod
    def restore(cls, clock: Clock, store: Store, **kwargs) -> "Coordinator":
        """Rebuild from a store. Any round open at shutdown is recorded invalid
        and the project resumes from waiting with its pre-round model."""
        co = cls(clock, store=store, **kwargs)
        for pid, entry in store.load_all().items():
            cfg = ProjectConfig.from_dict(entry["config"])
            state = entry["state"] or {}
            model = (
                model_from_bytes64(entry["model"])
                if entry["model"] is not None
                else flmath.init_model(*cfg.model_shape, seed=cfg.init_seed)
            )
            proj = _Project(
                cfg=cfg,
                status=state.get("status", WAITING),
                rounds_completed=int(state.get("rounds_completed", 0)),
                round_seq=int(state.get("round_seq", 0)),
                global_model=model,
                history=[RoundRecord.from_dict(r) for r in entry["history"]],
            )
            marker = entry["round_open"]
            if proj.status == TRAINING or marker is not None:
                seq = int(marker["seq"]) if marker else proj.round_seq
                record = RoundRecord(
                    round=seq,
                    requested_devices=list(marker["requested"]) if marker else [],
                    joined_devices=[],
                    received_models=[],
                    outcome="invalid",
                    started_at=float(marker["started_at"]) if marker else 0.0,
                    closed_at=clock.now(),
                )
                proj.history.append(record)
                proj.status = WAITING
                proj.round_seq = max(proj.round_seq, seq)
                store.append_history(pid, record.to_dict())
                store.clear_round_open(pid)
                store.save_state(pid, co._state_dict(proj))
                logger.warning(
                    "project %s: round %d was open at shutdown, recorded invalid", pid, seq
                )
            co._projects[pid] = proj
        return co

    # -- helpers ---------------------------------------------------------------

    def _get(self, project_id: str) -> _Project:
        with self._registry_lock:
            proj = self._projects.get(project_id)
        if proj is None:
            raise NotFound(f"project {project_id!r} does not exist")
        return proj

    @staticmethod
    def _state_dict(proj: _Project) -> dict:
        return {
            "status": proj.status,
            "rounds_completed": proj.rounds_completed,
            "round_seq": proj.round_seq,
        }

    def _persist_state(self, proj: _Project) -> None:
        self.store.save_state(proj.cfg.project_id, self._state_dict(proj))

    def _now(self, now: float | None) -> float:
        return self.clock.now() if now is None else now

    # -- operations --------------------------------------------------------------

    def create_project(self, cfg: ProjectConfig) -> str:
        model = flmath.init_model(*cfg.model_shape, seed=cfg.init_seed)
        with self._registry_lock:
            if cfg.project_id in self._projects:
                raise Conflict(f"project {cfg.project_id!r} already exists")
            self._projects[cfg.project_id] = _Project(
                cfg=cfg,
                status=WAITING,
                rounds_completed=0,
                round_seq=0,
                global_model=model,
            )
        self.store.save_config(cfg.project_id, cfg.to_dict())
        self.store.save_model(cfg.project_id, model_to_bytes64(model))
        self.store.save_state(cfg.project_id, self._state_dict(self._projects[cfg.project_id]))
        logger.info("project %s created (mode=%s)", cfg.project_id, cfg.training_mode)
        return cfg.project_id

    def record_status(self, status: DeviceStatus, now: float | None = None) -> None:
        received_at = self._now(now)
        with self._status_lock:
            self._statuses[status.device_id] = (status, received_at)

    def eligible_devices(self, cfg: ProjectConfig, now: float | None = None) -> list[str]:
        now = self._now(now)
        cutoff = now - self.staleness_window
        with self._status_lock:
            pairs = list(self._statuses.items())
        return sorted(
            dev
            for dev, (status, received_at) in pairs
            if received_at >= cutoff and cfg.power_rule.admits(status)
        )

    def scheduler_tick(self, project_id: str, now: float | None = None) -> list[TrainingRequest]:
        proj = self._get(project_id)
        now = self._now(now)
        with proj.lock:
            if proj.status == WAITING:
                return self._maybe_start_round(proj, now)
            if proj.status == TRAINING:
                r = proj.open_round
                enough = len(r.submissions) >= proj.cfg.min_models_received
                if not proj.cfg.wait_full_duration and enough:
                    self._close_round_locked(proj, "completed", now)
                elif now >= r.deadline:
                    self._close_round_locked(proj, "completed" if enough else "invalid", now)
            return []

    def _maybe_start_round(self, proj: _Project, now: float) -> list[TrainingRequest]:
        eligible = self.eligible_devices(proj.cfg, now)
        if len(eligible) < proj.cfg.min_available_devices:
            return []
        proj.round_seq += 1
        seq = proj.round_seq
        deadline = now + proj.cfg.round_duration
        proj.open_round = _OpenRound(
            seq=seq, started_at=now, deadline=deadline, requested=list(eligible)
        )
        proj.status = TRAINING
        pid = proj.cfg.project_id
        self.store.mark_round_open(pid, proj.open_round.to_dict())
        self._persist_state(proj)
        requests = [
            TrainingRequest(
                request_id=f"{pid}:{seq}:{dev}",
                expiration_date=deadline,
                project_id=pid,
                fl_round=seq,
                training_mode=proj.cfg.training_mode,
            )
            for dev in eligible
        ]
        if self.notifier is not None:
            for dev, req in zip(eligible, requests):
                self.notifier.send(dev, req)
        logger.info("project %s: round %d started, %d devices invited", pid, seq, len(eligible))
        return requests

    def close_round(self, project_id: str, outcome: str, now: float | None = None) -> RoundRecord:
        proj = self._get(project_id)
        now = self._now(now)
        with proj.lock:
            if proj.status != TRAINING:
                raise Conflict(f"project {project_id!r} has no open round")
            return self._close_round_locked(proj, outcome, now)

    def _close_round_locked(self, proj: _Project, outcome: str, now: float) -> RoundRecord:
        if outcome not in ("completed", "invalid"):
            raise InvalidInput(f"unknown round outcome {outcome!r}")
        r = proj.open_round
        cfg = proj.cfg
        pid = cfg.project_id
        if outcome == "completed" and len(r.submissions) < cfg.min_models_received:
            raise Conflict(
                f"round {r.seq} has {len(r.submissions)} models, needs {cfg.min_models_received}"
            )
        aggregate_loss = None
        test_accuracy = None
        if outcome == "completed":
            models = list(r.submissions.values())
            aggregate = flmath.fedavg(models, uniform=cfg.uniform_fedavg)
            if cfg.dp.enabled:
                delta = aggregate.weights - proj.global_model.weights
                noised = flmath.dp_noise(
                    delta, replace(cfg.dp, seed=derive_seed(cfg.dp.seed, r.seq))
                )
                aggregate = flmath.clone_with_weights(
                    aggregate, proj.global_model.weights + noised
                )
            proj.global_model = aggregate
            if self.eval_set:
                metrics = flmath.evaluate(aggregate, self.eval_set, self.eval_hp)
                aggregate_loss = metrics.loss
                test_accuracy = metrics.accuracy
            elif r.device_losses:
                weights = [r.submissions[d].sample_count for d in r.device_losses]
                losses = list(r.device_losses.values())
                aggregate_loss = float(np.average(losses, weights=weights))
        record = RoundRecord(
            round=r.seq,
            requested_devices=list(r.requested),
            joined_devices=list(r.joined),
            received_models=[(d, wm.sample_count) for d, wm in r.submissions.items()],
            outcome=outcome,
            aggregate_loss=aggregate_loss,
            test_accuracy=test_accuracy,
            started_at=r.started_at,
            closed_at=now,
        )
        proj.history.append(record)
        proj.open_round = None
        if outcome == "completed" or cfg.invalid_rounds_consume_budget:
            proj.rounds_completed += 1
        reached_rounds = cfg.num_rounds is not None and proj.rounds_completed >= cfg.num_rounds
        reached_loss = (
            outcome == "completed"
            and cfg.target_loss is not None
            and aggregate_loss is not None
            and aggregate_loss <= cfg.target_loss
        )
        proj.status = COMPLETED if (reached_rounds or reached_loss) else WAITING
        self.store.append_history(pid, record.to_dict())
        if outcome == "completed":
            self.store.save_model(pid, model_to_bytes64(proj.global_model))
        self.store.clear_round_open(pid)
        self._persist_state(proj)
        logger.info(
            "project %s: round %d closed %s (%d/%d models), status=%s",
            pid, r.seq, outcome, len(r.submissions), len(r.requested), proj.status,
        )
        return record

    def join_round(self, project_id: str, fl_round: int, device_id: str, now: float | None = None) -> None:
        proj = self._get(project_id)
        now = self._now(now)
        with proj.lock:
            r = proj.open_round
            if proj.status != TRAINING or r is None or r.seq != fl_round or now >= r.deadline:
                raise RoundClosed(f"round {fl_round} of {project_id!r} is not open")
            if device_id not in r.requested:
                raise NotInvited(f"device {device_id!r} was not invited to round {fl_round}")
            if device_id not in r.joined:
                r.joined.append(device_id)

    def get_model_blob(self, project_id: str, fl_round: int) -> bytes:
        proj = self._get(project_id)
        with proj.lock:
            r = proj.open_round
            if proj.status != TRAINING or r is None or r.seq != fl_round:
                raise RoundClosed(f"round {fl_round} of {project_id!r} is not open")
            return encode_model(proj.global_model).to_bytes()

    def current_model(self, project_id: str) -> ModelParams:
        proj = self._get(project_id)
        with proj.lock:
            return proj.global_model

    def submit_model(
        self,
        project_id: str,
        fl_round: int,
        device_id: str,
        blob: ModelBlob | bytes,
        sample_count: int,
        now: float | None = None,
    ) -> None:
        proj = self._get(project_id)
        now = self._now(now)
        if isinstance(blob, (bytes, bytearray)):
            blob = ModelBlob.from_bytes(bytes(blob))
        params = decode_model(blob)
        with proj.lock:
            r = proj.open_round
            if proj.status != TRAINING or r is None or r.seq != fl_round or now >= r.deadline:
                raise RoundClosed(f"round {fl_round} of {project_id!r} is closed")
            if device_id not in r.joined:
                raise NotJoined(f"device {device_id!r} did not join round {fl_round}")
            if device_id in r.submissions:
                raise DuplicateSubmission(
                    f"device {device_id!r} already submitted for round {fl_round}"
                )
            if params.shape != proj.cfg.model_shape:
                raise InvalidInput(
                    f"model shape {params.shape} does not match project {proj.cfg.model_shape}"
                )
            if sample_count <= 0:
                raise InvalidInput("sample_count must be > 0")
            r.submissions[device_id] = WeightedModel(params, int(sample_count))

    def submit_results(self, results: TrainingResults, now: float | None = None) -> None:
        proj = self._get(results.project_id)
        with proj.lock:
            proj.results_log.append(results)
            r = proj.open_round
            if r is not None and r.seq == results.fl_round:
                r.device_losses[results.device_id] = results.final_loss
        self.store.append_results(results.project_id, results.to_wire())

    def terminate_project(self, project_id: str, now: float | None = None) -> None:
        proj = self._get(project_id)
        now = self._now(now)
        with proj.lock:
            if proj.status in (COMPLETED, TERMINATED):
                raise AlreadyFinal(f"project {project_id!r} is already {proj.status}")
            if proj.status == TRAINING:
                r = proj.open_round
                record = RoundRecord(
                    round=r.seq,
                    requested_devices=list(r.requested),
                    joined_devices=list(r.joined),
                    received_models=[(d, wm.sample_count) for d, wm in r.submissions.items()],
                    outcome="invalid",
                    started_at=r.started_at,
                    closed_at=now,
                )
                proj.history.append(record)
                proj.open_round = None
                self.store.append_history(project_id, record.to_dict())
                self.store.clear_round_open(project_id)
            proj.status = TERMINATED
            self._persist_state(proj)
        logger.info("project %s terminated", project_id)

    def admin_query(self, project_id: str, now: float | None = None) -> dict:
        proj = self._get(project_id)
        now = self._now(now)
        with proj.lock:
            live = None
            if proj.open_round is not None:
                r = proj.open_round
                live = {
                    "round": r.seq,
                    "deadline": r.deadline,
                    "requested": len(r.requested),
                    "joined": len(r.joined),
                    "received": len(r.submissions),
                }
            snapshot = {
                "config": proj.cfg.to_dict(),
                "state": {
                    "status": proj.status,
                    "rounds_completed": proj.rounds_completed,
                    "round_seq": proj.round_seq,
                    "live": live,
                },
                "history": [rec.to_dict() for rec in proj.history],
            }
        snapshot["availability"] = {
            "eligible": len(self.eligible_devices(proj.cfg, now)),
            "devices_known": len(self._statuses),
        }
        return snapshot

    def list_projects(self) -> list[dict]:
        with self._registry_lock:
            projects = list(self._projects.values())
        out = []
        for proj in projects:
            with proj.lock:
                out.append(
                    {
                        "project_id": proj.cfg.project_id,
                        "status": proj.status,
                        "rounds_completed": proj.rounds_completed,
                        "num_rounds": proj.cfg.num_rounds,
                        "training_mode": proj.cfg.training_mode,
                    }
                )
        return out

    def latest_statuses(self) -> list[dict]:
        with self._status_lock:
            return [
                {"status": status.to_wire(), "received_at": received_at}
                for status, received_at in self._statuses.values()
            ]

    def active_project_ids(self) -> list[str]:
        with self._registry_lock:
            return [
                pid
                for pid, p in self._projects.items()
                if p.status in (WAITING, TRAINING)
            ]

    def project_status(self, project_id: str) -> str:
        proj = self._get(project_id)
        with proj.lock:
            return proj.status

    def results_log(self, project_id: str) -> list[TrainingResults]:
        proj = self._get(project_id)
        with proj.lock:
            return list(proj.results_log)

    def project_info(self, project_id: str) -> dict:
        """Device-facing provisioning payload: what a device needs to train."""
        proj = self._get(project_id)
        with proj.lock:
            cfg = proj.cfg
            return {
                "project_id": cfg.project_id,
                "model_shape": list(cfg.model_shape),
                "training_mode": cfg.training_mode,
                "apps": list(cfg.apps),
                "epochs": cfg.epochs,
                "policy": cfg.policy.to_wire(),
            }


class InProcessAPI:
    """Device-facing adapter over a coordinator instance (simulation path).

    Mirrors the HTTP surface one-to-one so device code cannot tell the
    difference between this and the real client.
    """

    def __init__(self, coordinator: Coordinator):
        self._co = coordinator

    def report_availability(self, status: DeviceStatus) -> None:
        self._co.record_status(status)

    def get_model(self, project_id: str, fl_round: int) -> bytes:
        return self._co.get_model_blob(project_id, fl_round)

    def join_round(self, project_id: str, fl_round: int, device_id: str) -> None:
        self._co.join_round(project_id, fl_round, device_id)

    def submit_model(
        self, project_id: str, fl_round: int, device_id: str, blob: bytes, sample_count: int
    ) -> None:
        self._co.submit_model(project_id, fl_round, device_id, blob, sample_count)

    def submit_results(self, results: TrainingResults) -> None:
        self._co.submit_results(results)

    def project_info(self, project_id: str) -> dict:
        return self._co.project_info(project_id)
