"""Fleet simulator: discrete-event engine on virtual time.

An experiment wires one coordinator and K simulated devices to a shared
virtual clock. Device round pipelines run as generator processes; between
stages the engine advances the clock by a sampled waiting time (log-normal
per stage) and may drop the device for the rest of the round, reproducing
the joined-but-never-replied gap and straggler tails. Everything is seeded
from the experiment's master seed, so a spec reproduces its report
byte-for-byte.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as datamod
from . import flmath
from .coordinator import (
    CallbackNotifier,
    Coordinator,
    InProcessAPI,
    MemoryStore,
    ProjectConfig,
)
from .data import Dataset, PartitionSpec
from .device import AppRuntime, DeviceLocal
from .errors import InvalidInput, ParseError
from .flmath import Hyperparams
from .protocol import STAGES, TrainingRequest
from .seeds import derive_seed

logger = logging.getLogger(__name__)

# Diurnal availability: a dip in the early morning, peak in the evening.
DEFAULT_HOURLY_FRACTION = (
    0.52, 0.46, 0.42, 0.39, 0.37, 0.38, 0.42, 0.50,
    0.60, 0.68, 0.73, 0.76, 0.77, 0.76, 0.74, 0.73,
    0.74, 0.76, 0.79, 0.82, 0.81, 0.75, 0.66, 0.58,
)

DELAY_STAGES = STAGES + ("notify",)


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"virtual time cannot go backwards ({t} < {self._now})")
        self._now = t


class Engine:
    """Minimal event queue; ties broken by insertion order for determinism."""

    def __init__(self, clock: VirtualClock):
        self.clock = clock
        self._heap: list[tuple[float, int, object]] = []
        self._seq = 0

    def at(self, t: float, action) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, action))

    def after(self, dt: float, action) -> None:
        self.at(self.clock.now() + dt, action)

    def run(self, until: float | None = None, stop_when=None) -> None:
        while self._heap:
            if stop_when is not None and stop_when():
                return
            t, _, action = self._heap[0]
            if until is not None and t > until:
                self.clock.advance_to(until)
                return
            heapq.heappop(self._heap)
            self.clock.advance_to(t)
            action()


@dataclass(frozen=True)
class AvailabilityModel:
    """Per-hour Bernoulli availability; draws are independent across
    (device, absolute hour) given the seed."""

    hourly_fraction: tuple[float, ...] = DEFAULT_HOURLY_FRACTION
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hourly_fraction", tuple(float(x) for x in self.hourly_fraction))
        if len(self.hourly_fraction) != 24:
            raise InvalidInput("hourly_fraction needs exactly 24 values")
        if any(not 0.0 <= x <= 1.0 for x in self.hourly_fraction):
            raise InvalidInput("hourly fractions must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"hourly_fraction": list(self.hourly_fraction), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AvailabilityModel":
        return cls(
            hourly_fraction=tuple(d.get("hourly_fraction", DEFAULT_HOURLY_FRACTION)),
            seed=int(d.get("seed", 0)),
        )

    @classmethod
    def always(cls) -> "AvailabilityModel":
        return cls(hourly_fraction=(1.0,) * 24)

    @classmethod
    def never(cls) -> "AvailabilityModel":
        return cls(hourly_fraction=(0.0,) * 24)


def availability_trace(model: AvailabilityModel, device: str, hour: int) -> bool:
    """Seeded Bernoulli draw: is `device` available during absolute hour index
    `hour`? The success probability follows the hour-of-day curve."""
    if hour < 0:
        raise InvalidInput("hour must be >= 0")
    p = model.hourly_fraction[hour % 24]
    if p >= 1.0:
        return True
    if p <= 0.0:
        return False
    rng = np.random.default_rng(derive_seed(model.seed, device, hour))
    return bool(rng.random() < p)


_DEFAULT_MEDIANS = {
    "notify": 1.0,
    "join": 5.0,
    "load_samples": 60.0,
    "train": 20.0,
    "merge": 2.0,
    "report": 5.0,
}
_DEFAULT_SIGMAS = {s: 0.5 for s in DELAY_STAGES}


@dataclass(frozen=True)
class DelayModel:
    """Log-normal per-stage waiting times plus a dropout probability per stage."""

    medians: dict = field(default_factory=lambda: dict(_DEFAULT_MEDIANS))
    sigmas: dict = field(default_factory=lambda: dict(_DEFAULT_SIGMAS))
    dropout: dict = field(default_factory=dict)

    def __post_init__(self):
        med = {s: float(dict(self.medians).get(s, _DEFAULT_MEDIANS[s])) for s in DELAY_STAGES}
        sig = {s: float(dict(self.sigmas).get(s, 0.5)) for s in DELAY_STAGES}
        drop = {s: float(dict(self.dropout).get(s, 0.0)) for s in DELAY_STAGES}
        if any(v < 0 for v in med.values()):
            raise InvalidInput("delay medians must be >= 0")
        if any(not 0.0 <= v <= 1.0 for v in drop.values()):
            raise InvalidInput("dropout probabilities must lie in [0, 1]")
        object.__setattr__(self, "medians", med)
        object.__setattr__(self, "sigmas", sig)
        object.__setattr__(self, "dropout", drop)

    @classmethod
    def none(cls) -> "DelayModel":
        return cls(medians={s: 0.0 for s in DELAY_STAGES})

    def sample(self, stage: str, rng: np.random.Generator) -> float:
        median = self.medians[stage]
        if median <= 0.0:
            return 0.0
        return float(median * math.exp(self.sigmas[stage] * rng.standard_normal()))

    def drops(self, stage: str, rng: np.random.Generator) -> bool:
        p = self.dropout[stage]
        return p > 0.0 and bool(rng.random() < p)

    def to_dict(self) -> dict:
        return {"medians": dict(self.medians), "sigmas": dict(self.sigmas), "dropout": dict(self.dropout)}

    @classmethod
    def from_dict(cls, d: dict) -> "DelayModel":
        return cls(
            medians=d.get("medians", {}),
            sigmas=d.get("sigmas", {}),
            dropout=d.get("dropout", {}),
        )


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | file
    d: int = 32
    num_classes: int = 10
    n_train: int = 50000
    n_test: int = 1000
    class_sep: float = 6.0
    path: str | None = None

    def build(self, seed: int) -> Dataset:
        if self.kind == "file":
            if not self.path:
                raise InvalidInput("dataset kind 'file' needs a path")
            return datamod.load_features(self.path)
        return datamod.generate_synthetic(
            self.d, self.num_classes, self.n_train, self.n_test, self.class_sep, seed
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "C": self.num_classes,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "class_sep": self.class_sep,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            kind=str(d.get("kind", "synthetic")),
            d=int(d.get("d", 32)),
            num_classes=int(d.get("C", d.get("num_classes", 10))),
            n_train=int(d.get("n_train", 50000)),
            n_test=int(d.get("n_test", 1000)),
            class_sep=float(d.get("class_sep", 6.0)),
            path=d.get("path"),
        )


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: DatasetSpec
    partition: PartitionSpec
    project: ProjectConfig
    fleet_size: int
    availability: AvailabilityModel = field(default_factory=AvailabilityModel.always)
    delays: DelayModel = field(default_factory=DelayModel.none)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    master_seed: int = 0
    scheduler_period: float = 10.0
    heartbeat_period: float = 10.0
    give_up_after_s: float = 7 * 24 * 3600.0

    def __post_init__(self):
        if self.fleet_size != self.partition.num_users:
            raise InvalidInput(
                f"fleet_size {self.fleet_size} != partition.num_users {self.partition.num_users}"
            )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "partition": {
                "distribution": self.partition.distribution.value,
                "num_users": self.partition.num_users,
                "apps": list(self.partition.apps),
                "samples_per_app": self.partition.samples_per_app,
            },
            "project": self.project.to_dict(),
            "fleet": {"size": self.fleet_size, "heartbeat_period": self.heartbeat_period},
            "availability": self.availability.to_dict(),
            "delays": self.delays.to_dict(),
            "hyperparams": {
                "learning_rate": self.hyperparams.learning_rate,
                "kernel_l2": self.hyperparams.kernel_l2,
                "bias_l2": self.hyperparams.bias_l2,
                "batch_size": self.hyperparams.batch_size,
                "epochs": self.hyperparams.epochs,
            },
            "master_seed": self.master_seed,
            "scheduler_period": self.scheduler_period,
            "give_up_after_s": self.give_up_after_s,
        }

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentSpec":
        try:
            dataset = DatasetSpec.from_dict(cfg.get("dataset", {}))
            part = cfg["partition"]
            fleet = cfg.get("fleet", {})
            num_users = int(part.get("num_users", fleet.get("size", 0)))
            partition = PartitionSpec(
                distribution=datamod.Distribution(part["distribution"]),
                num_users=num_users,
                apps=tuple(part.get("apps", datamod.DEFAULT_APPS)),
                samples_per_app=int(part.get("samples_per_app", 150)),
                seed=derive_seed(int(cfg.get("master_seed", 0)), "partition"),
            )
            project_cfg = dict(cfg["project"])
            project_cfg.setdefault("model_shape", [dataset.d, 32, dataset.num_classes])
            project_cfg.setdefault("apps", list(partition.apps))
            project_cfg.setdefault("init_seed", derive_seed(int(cfg.get("master_seed", 0)), "init"))
            project = ProjectConfig.from_dict(project_cfg)
            hp_cfg = cfg.get("hyperparams", {})
            hyperparams = Hyperparams(
                learning_rate=float(hp_cfg.get("learning_rate", 0.001)),
                kernel_l2=float(hp_cfg.get("kernel_l2", 0.0001)),
                bias_l2=float(hp_cfg.get("bias_l2", 0.0001)),
                batch_size=int(hp_cfg.get("batch_size", 20)),
                epochs=project.epochs,
            )
            availability = cfg.get("availability", "always")
            if availability == "always":
                avail = AvailabilityModel.always()
            elif availability == "default":
                avail = AvailabilityModel(seed=derive_seed(int(cfg.get("master_seed", 0)), "avail"))
            else:
                avail = AvailabilityModel.from_dict(availability)
            delays_cfg = cfg.get("delays", "none")
            delays = DelayModel.none() if delays_cfg == "none" else DelayModel.from_dict(delays_cfg)
            return cls(
                dataset=dataset,
                partition=partition,
                project=project,
                fleet_size=int(fleet.get("size", num_users)),
                availability=avail,
                delays=delays,
                hyperparams=hyperparams,
                master_seed=int(cfg.get("master_seed", 0)),
                scheduler_period=float(cfg.get("scheduler_period", 10.0)),
                heartbeat_period=float(fleet.get("heartbeat_period", 10.0)),
                give_up_after_s=float(cfg.get("give_up_after_s", 7 * 24 * 3600.0)),
            )
        except KeyError as exc:
            raise ParseError(f"experiment config missing key {exc}") from exc

    @classmethod
    def from_json_file(cls, path) -> "ExperimentSpec | list[ExperimentSpec]":
        """Load a config file; a `compare` section expands into a spec grid."""
        try:
            cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        base = cls.from_dict(cfg)
        compare = cfg.get("compare")
        if not compare:
            return base
        modes = list(compare.get("modes", ["JS", "JM"]))
        dists = [datamod.Distribution(x) for x in compare.get("distributions", ["IID"])]
        return [
            base.with_cell(mode, dist)
            for mode in modes
            for dist in dists
        ]

    def with_cell(self, mode: str, dist: datamod.Distribution) -> "ExperimentSpec":
        """Same spec (and master seed) with training mode / distribution swapped."""
        policy = replace(
            self.project.policy, share_kind="model" if mode == "JM" else "samples"
        )
        return replace(
            self,
            partition=replace(self.partition, distribution=dist),
            project=replace(
                self.project,
                project_id=f"{self.project.project_id}-{mode}-{dist.value}",
                training_mode=mode,
                policy=policy,
            ),
        )


@dataclass
class RoundSummary:
    round: int
    outcome: str
    accuracy: float | None
    loss: float | None
    requested: int
    joined: int
    received: int
    duration_s: float


@dataclass
class ExperimentReport:
    spec_id: str
    status: str
    rounds: list[RoundSummary]  # completed (valid) rounds only
    all_rounds: list[RoundSummary]
    stage_durations_ms: dict[str, list[int]]
    final_accuracy: float | None
    final_loss: float | None
    virtual_seconds: float

    def summary(self) -> dict:
        return {
            "spec_id": self.spec_id,
            "status": self.status,
            "completed_rounds": len(self.rounds),
            "invalid_rounds": len(self.all_rounds) - len(self.rounds),
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "virtual_seconds": self.virtual_seconds,
        }

    def to_csv(self) -> str:
        lines = ["round,accuracy,loss,requested,joined,received"]
        for r in self.rounds:
            lines.append(
                f"{r.round},{_fmt(r.accuracy)},{_fmt(r.loss)},{r.requested},{r.joined},{r.received}"
            )
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        lines = []
        for r in self.all_rounds:
            lines.append(
                json.dumps(
                    {
                        "round": r.round,
                        "outcome": r.outcome,
                        "accuracy": r.accuracy,
                        "loss": r.loss,
                        "requested": r.requested,
                        "joined": r.joined,
                        "received": r.received,
                        "duration_s": r.duration_s,
                    },
                    sort_keys=True,
                )
            )
        lines.append(json.dumps({"summary": self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


class SimDevice:
    """One simulated device: availability-gated heartbeats plus staged round
    pipelines with injected waiting times and dropouts."""

    def __init__(self, local: DeviceLocal, engine: Engine, spec: ExperimentSpec):
        self.local = local
        self.engine = engine
        self.spec = spec
        self.rng = np.random.default_rng(derive_seed(spec.master_seed, "delays", local.device_id))
        self.dropped_rounds = 0

    def start(self) -> None:
        self.engine.at(0.0, self.heartbeat)

    def heartbeat(self) -> None:
        hour = int(self.engine.clock.now() // 3600.0)
        if availability_trace(self.spec.availability, self.local.device_id, hour):
            self.local.heartbeat()
        self.engine.after(self.spec.heartbeat_period, self.heartbeat)

    def on_request(self, req: TrainingRequest) -> None:
        pipeline = self.local.handle_training_request(req)
        if pipeline is None:
            return
        self._step(pipeline)

    def _step(self, pipeline) -> None:
        try:
            stage = next(pipeline)
        except StopIteration:
            return
        if self.spec.delays.drops(stage, self.rng):
            self.dropped_rounds += 1
            self.local.log(f"dropped out at stage {stage}")
            return
        self.engine.after(self.spec.delays.sample(stage, self.rng), lambda: self._step(pipeline))


def build_fleet(spec: ExperimentSpec, coordinator: Coordinator, engine: Engine, assignment) -> list[SimDevice]:
    api = InProcessAPI(coordinator)
    fleet = []
    info = coordinator.project_info(spec.project.project_id)
    for u in range(spec.fleet_size):
        device_id = f"dev{u:04d}"
        apps = {
            app: AppRuntime(app_id=app, samples=assignment.cells[(u, app)], policy=spec.project.policy)
            for app in spec.partition.apps
        }
        local = DeviceLocal(
            device_id,
            engine.clock,
            api,
            apps,
            seed_root=derive_seed(spec.master_seed, "device", u),
        )
        local.register_project(info, hp=spec.hyperparams)
        fleet.append(SimDevice(local, engine, spec))
    return fleet


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Build dataset and fleet, run the project to completion on virtual time."""
    dataset = spec.dataset.build(derive_seed(spec.master_seed, "dataset"))
    if dataset.d != spec.project.input_dim or dataset.num_classes != spec.project.num_classes:
        raise InvalidInput("project model shape does not match the dataset")
    assignment = datamod.partition(dataset, spec.partition)
    clock = VirtualClock(0.0)
    engine = Engine(clock)
    fleet_by_id: dict[str, SimDevice] = {}

    def deliver(device_id: str, req: TrainingRequest) -> None:
        dev = fleet_by_id.get(device_id)
        if dev is None:
            return
        delay = spec.delays.sample("notify", dev.rng)
        if spec.delays.drops("notify", dev.rng):
            return
        engine.after(delay, lambda: dev.on_request(req))

    coordinator = Coordinator(
        clock,
        store=MemoryStore(),
        notifier=CallbackNotifier(deliver),
        eval_set=dataset.test,
        eval_hp=spec.hyperparams,
        scheduler_period=spec.scheduler_period,
    )
    pid = coordinator.create_project(spec.project)
    fleet = build_fleet(spec, coordinator, engine, assignment)
    fleet_by_id = {d.local.device_id: d for d in fleet}
    for dev in fleet:
        dev.start()

    def tick() -> None:
        coordinator.scheduler_tick(pid)
        engine.after(spec.scheduler_period, tick)

    engine.after(spec.scheduler_period, tick)

    def finished() -> bool:
        return coordinator.project_status(pid) in ("completed", "terminated")

    engine.run(until=spec.give_up_after_s, stop_when=finished)

    snapshot = coordinator.admin_query(pid)
    all_rounds = [
        RoundSummary(
            round=r["round"],
            outcome=r["outcome"],
            accuracy=r["test_accuracy"],
            loss=r["aggregate_loss"],
            requested=len(r["requested_devices"]),
            joined=len(r["joined_devices"]),
            received=len(r["received_models"]),
            duration_s=r["closed_at"] - r["started_at"],
        )
        for r in snapshot["history"]
    ]
    completed = [r for r in all_rounds if r.outcome == "completed"]
    stage_durations: dict[str, list[int]] = {s: [] for s in STAGES}
    for res in coordinator.results_log(pid):
        for s in STAGES:
            stage_durations[s].append(res.durations_ms[s])
    return ExperimentReport(
        spec_id=pid,
        status=snapshot["state"]["status"],
        rounds=completed,
        all_rounds=all_rounds,
        stage_durations_ms=stage_durations,
        final_accuracy=completed[-1].accuracy if completed else None,
        final_loss=completed[-1].loss if completed else None,
        virtual_seconds=clock.now(),
    )


@dataclass
class ComparisonResult:
    cells: dict[tuple[str, str], ExperimentReport]

    def table_csv(self) -> str:
        lines = ["mode,distribution,completed_rounds,final_accuracy,final_loss"]
        for (mode, dist), report in self.cells.items():
            lines.append(
                f"{mode},{dist},{len(report.rounds)},{_fmt(report.final_accuracy)},{_fmt(report.final_loss)}"
            )
        return "\n".join(lines) + "\n"

    def accuracy(self, mode: str, dist: str) -> float | None:
        return self.cells[(mode, dist)].final_accuracy


def compare_modes(
    base_spec: ExperimentSpec,
    modes: list[str],
    distributions: list[datamod.Distribution],
) -> ComparisonResult:
    """One run per (mode, distribution) cell, all sharing the base master seed."""
    cells = {}
    for mode in modes:
        for dist in distributions:
            dist = datamod.Distribution(dist)
            cell_spec = base_spec.with_cell(mode, dist)
            logger.info("compare cell: mode=%s dist=%s", mode, dist.value)
            cells[(mode, dist.value)] = run_experiment(cell_spec)
    return ComparisonResult(cells)


def pooled_centralized_baseline(spec: ExperimentSpec) -> float:
    """Train one model centrally on the union of all assigned cells; returns
    test accuracy. Used as the non-federated reference point."""
    dataset = spec.dataset.build(derive_seed(spec.master_seed, "dataset"))
    assignment = datamod.partition(dataset, spec.partition)
    pooled = []
    for cell in assignment.cells.values():
        pooled.extend(cell)
    model = flmath.init_model(*spec.project.model_shape, seed=spec.project.init_seed)
    hp = replace(spec.hyperparams, seed=derive_seed(spec.master_seed, "baseline"))
    trained, _ = flmath.train(model, pooled, hp)
    return flmath.evaluate(trained, dataset.test, hp).accuracy
