"""Client side: the Local service plus the per-app library.

Apps never expose their samples directly; everything an app hands over
(samples in JS, trained models in JM/SA) flows through the device message
bus, which records a trace so isolation can be audited after a run. The
Local service drives one training pipeline per request through five stages
(join, load_samples, train, merge, report), measuring each stage's duration
with the injected clock.

The pipeline is a generator that yields the next stage name before running
its body, so a driver (discrete-event simulator or a thread with real
sleeps) controls pacing and can inject per-stage delays or dropouts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Protocol

import numpy as np

from . import flmath
from .data import LabeledSample
from .errors import FlaasError, InvalidInput
from .flmath import DpConfig, Hyperparams, ModelParams, WeightedModel
from .protocol import (
    STAGES,
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


class ServerAPI(Protocol):
    """What a device needs from the backend; HTTP client and the in-process
    simulation adapter both satisfy it."""

    def report_availability(self, status: DeviceStatus) -> None: ...
    def get_model(self, project_id: str, fl_round: int) -> bytes: ...
    def join_round(self, project_id: str, fl_round: int, device_id: str) -> None: ...
    def submit_model(
        self, project_id: str, fl_round: int, device_id: str, blob: bytes, sample_count: int
    ) -> None: ...
    def submit_results(self, results: TrainingResults) -> None: ...


@dataclass(frozen=True)
class BusRecord:
    seq: int
    time: float
    sender: str
    receiver: str
    kind: str
    meta: dict

    def line(self) -> str:
        meta = " ".join(f"{k}={v}" for k, v in sorted(self.meta.items()))
        return f"{self.seq}\t{self.time:.3f}\t{self.sender}->{self.receiver}\t{self.kind}\t{meta}"


class MessageBus:
    """In-process authenticated channel between apps and Local; every message
    leaves a trace record."""

    def __init__(self, clock):
        self._clock = clock
        self.trace: list[BusRecord] = []

    def record(self, sender: str, receiver: str, kind: str, **meta) -> None:
        self.trace.append(
            BusRecord(len(self.trace), self._clock.now(), sender, receiver, kind, meta)
        )

    def dump_lines(self) -> list[str]:
        return [r.line() for r in self.trace]


class LocalDataStore:
    """Expiring key/value store of Local: entries carry the event name that
    deletes them (e.g. the trained model being sent)."""

    def __init__(self):
        self._items: dict[str, tuple[object, str]] = {}

    def put(self, key: str, value, expires_when: str) -> None:
        self._items[key] = (value, expires_when)

    def get(self, key: str):
        return self._items[key][0]

    def keys(self) -> list[str]:
        return list(self._items)

    def expire(self, condition: str, prefix: str = "") -> int:
        doomed = [
            k
            for k, (_, cond) in self._items.items()
            if cond == condition and k.startswith(prefix)
        ]
        for k in doomed:
            del self._items[k]
        return len(doomed)


class PipelineAborted(FlaasError):
    """Round pipeline stopped locally; nothing was submitted."""


@dataclass
class AppRuntime:
    """A third-party app: its assigned samples, policy and library state."""

    app_id: str
    samples: list[LabeledSample]
    policy: PolicySpec = field(default_factory=PolicySpec)
    cached_global: ModelParams | None = None
    pending: TrainingRequest | None = None
    shares_done: int = 0

    def _may_share(self, kind: str, now: float) -> bool:
        return self.policy.share_kind == kind and self.policy.sharing_limit.permits(
            self.shares_done, now
        )

    def share_samples(self, fl_round: int, now: float, bus: MessageBus, dp_seed: int):
        """Hand samples to Local for joint training, or None if policy refuses."""
        if not self._may_share("samples", now):
            return None
        samples = self.samples
        if self.policy.dp_local.enabled:
            samples = noise_features(samples, self.policy.dp_local, dp_seed)
        self.shares_done += 1
        bus.record(self.app_id, "local", "samples", round=fl_round, count=len(samples))
        return samples

    def share_model(
        self, fl_round: int, now: float, bus: MessageBus, wm: WeightedModel, final_loss: float
    ) -> bool:
        """Release a locally trained model to Local; False if policy refuses."""
        if not self._may_share("model", now):
            return False
        self.shares_done += 1
        bus.record(
            self.app_id,
            "local",
            "model",
            round=fl_round,
            sample_count=wm.sample_count,
            final_loss=round(final_loss, 6),
        )
        return True


def noise_features(samples, dp: DpConfig, seed: int) -> list[LabeledSample]:
    """Per-sample Gaussian mechanism on feature vectors (JS pre-training DP)."""
    rng = np.random.default_rng(seed)
    sigma = dp.noise_sigma * dp.clip_norm
    out = []
    for s in samples:
        f = np.asarray(s.features, dtype=np.float64)
        norm = float(np.linalg.norm(f))
        scale = min(1.0, dp.clip_norm / norm) if norm > 0 else 1.0
        f = f * scale
        if sigma > 0:
            f = f + rng.normal(0.0, sigma, size=f.shape)
        out.append(LabeledSample(f, s.label))
    return out


@dataclass
class PipelineOutcome:
    model: WeightedModel
    final_loss: float
    included: list[str]
    excluded: list[tuple[str, str]] = field(default_factory=list)


def run_single_app(app: AppRuntime, global_model: ModelParams, hp: Hyperparams) -> PipelineOutcome:
    """Train on one app's own samples only."""
    if not app.samples:
        raise PipelineAborted(f"app {app.app_id} has no samples")
    trained, final_loss = flmath.train(global_model, app.samples, hp)
    if app.policy.dp_local.enabled:
        delta = trained.weights - global_model.weights
        noised = flmath.dp_noise(
            delta,
            flmath.DpConfig(
                enabled=True,
                clip_norm=app.policy.dp_local.clip_norm,
                noise_sigma=app.policy.dp_local.noise_sigma,
                seed=derive_seed(app.policy.dp_local.seed, hp.seed, app.app_id),
            ),
        )
        trained = flmath.clone_with_weights(trained, global_model.weights + noised)
    return PipelineOutcome(
        model=WeightedModel(trained, len(app.samples)),
        final_loss=final_loss,
        included=[app.app_id],
    )


def collect_shared_samples(
    apps: list[AppRuntime], fl_round: int, now: float, bus: MessageBus, hp: Hyperparams
):
    """JS phase 1: each app releases its samples subject to its policy."""
    shares: list[tuple[str, list[LabeledSample]]] = []
    excluded: list[tuple[str, str]] = []
    for app in apps:
        if not app.samples:
            excluded.append((app.app_id, "no-data"))
            continue
        dp_seed = derive_seed(app.policy.dp_local.seed, hp.seed, app.app_id)
        samples = app.share_samples(fl_round, now, bus, dp_seed)
        if samples is None:
            excluded.append((app.app_id, "policy-exhausted"))
            continue
        shares.append((app.app_id, samples))
    return shares, excluded


def _check_formats(shares, d: int, num_classes: int) -> None:
    for app_id, samples in shares:
        for s in samples:
            if s.features.shape != (d,) or not 0 <= s.label < num_classes:
                raise InvalidInput(
                    f"app {app_id} shared a sample with incompatible format "
                    f"(dim {s.features.shape}, label {s.label})"
                )


def run_joint_samples(
    apps: list[AppRuntime],
    global_model: ModelParams,
    hp: Hyperparams,
    *,
    now: float = 0.0,
    fl_round: int = 0,
    bus: MessageBus | None = None,
    store: LocalDataStore | None = None,
    store_prefix: str = "",
) -> PipelineOutcome:
    """Merge every permitted app's samples and run one training pass on the union."""
    bus = bus if bus is not None else MessageBus(_ZeroClock())
    shares, excluded = collect_shared_samples(apps, fl_round, now, bus, hp)
    if not shares:
        raise PipelineAborted("all apps excluded from sample sharing")
    _check_formats(shares, global_model.input_dim, global_model.num_classes)
    if store is not None:
        for app_id, samples in shares:
            store.put(f"{store_prefix}{app_id}:samples", samples, "model_sent")
    merged: list[LabeledSample] = []
    for _, samples in shares:
        merged.extend(samples)
    trained, final_loss = flmath.train(global_model, merged, hp)
    return PipelineOutcome(
        model=WeightedModel(trained, len(merged)),
        final_loss=final_loss,
        included=[a for a, _ in shares],
        excluded=excluded,
    )


def train_per_app(
    apps: list[AppRuntime],
    global_model: ModelParams,
    hp: Hyperparams,
    *,
    now: float = 0.0,
    fl_round: int = 0,
    bus: MessageBus | None = None,
    executor=None,
):
    """JM phase 1: every permitted app trains independently on its own data."""
    bus = bus if bus is not None else MessageBus(_ZeroClock())
    candidates: list[AppRuntime] = []
    excluded: list[tuple[str, str]] = []
    for app in apps:
        if not app.samples:
            excluded.append((app.app_id, "no-data"))
        elif not app._may_share("model", now):
            excluded.append((app.app_id, "policy-exhausted"))
        else:
            candidates.append(app)
    if executor is not None:
        futures = [executor.submit(run_single_app, app, global_model, hp) for app in candidates]
        outcomes = [f.result() for f in futures]
    else:
        outcomes = [run_single_app(app, global_model, hp) for app in candidates]
    trained: list[tuple[str, WeightedModel, float]] = []
    for app, outcome in zip(candidates, outcomes):
        app.share_model(fl_round, now, bus, outcome.model, outcome.final_loss)
        trained.append((app.app_id, outcome.model, outcome.final_loss))
    return trained, excluded


def merge_app_models(
    trained: list[tuple[str, WeightedModel, float]],
    per_app_min_loss: dict[str, float | None],
) -> PipelineOutcome:
    """JM phase 2: FedAvg over the per-app models that pass the loss gate."""
    kept = []
    excluded = []
    for app_id, wm, loss in trained:
        gate = per_app_min_loss.get(app_id)
        if gate is not None and loss > gate:
            excluded.append((app_id, "loss-above-threshold"))
        else:
            kept.append((app_id, wm, loss))
    if not kept:
        raise PipelineAborted("all app models excluded from the merge")
    merged = flmath.fedavg([wm for _, wm, _ in kept])
    total = sum(wm.sample_count for _, wm, _ in kept)
    final_loss = float(
        np.average([l for _, _, l in kept], weights=[wm.sample_count for _, wm, _ in kept])
    )
    return PipelineOutcome(
        model=WeightedModel(merged, total),
        final_loss=final_loss,
        included=[a for a, _, _ in kept],
        excluded=excluded,
    )


def run_joint_models(
    apps: list[AppRuntime],
    global_model: ModelParams,
    hp: Hyperparams,
    *,
    now: float = 0.0,
    fl_round: int = 0,
    bus: MessageBus | None = None,
    executor=None,
    store: LocalDataStore | None = None,
    store_prefix: str = "",
) -> PipelineOutcome:
    """Each app trains on its own data; Local merges the models with FedAvg."""
    trained, excluded = train_per_app(
        apps, global_model, hp, now=now, fl_round=fl_round, bus=bus, executor=executor
    )
    if not trained:
        raise PipelineAborted("all apps excluded from model sharing")
    if store is not None:
        for app_id, wm, _ in trained:
            store.put(f"{store_prefix}{app_id}:model", wm, "model_sent")
    outcome = merge_app_models(trained, {a.app_id: a.policy.min_local_loss for a in apps})
    outcome.excluded = excluded + outcome.excluded
    return outcome


class _ZeroClock:
    def now(self) -> float:
        return 0.0


@dataclass
class DeviceProject:
    """Provisioned project: shape, mode and training settings for this device."""

    project_id: str
    model_shape: tuple[int, int, int]
    training_mode: str
    apps: tuple[str, ...]
    hp: Hyperparams


class DeviceLocal:
    """The on-device service: talks to the server, coordinates apps, enforces
    single in-flight task per project."""

    def __init__(self, device_id: str, clock, api: ServerAPI, apps: dict[str, AppRuntime], seed_root: int = 0):
        self.device_id = device_id
        self.clock = clock
        self.api = api
        self.apps = apps
        self.seed_root = seed_root
        self.bus = MessageBus(clock)
        self.store = LocalDataStore()
        self.projects: dict[str, DeviceProject] = {}
        self.active_round: dict[str, int] = {}
        self.events: list[str] = []
        self.executor = None  # optional: lets JM app trainings run in parallel

    def register_project(self, info: dict, hp: Hyperparams | None = None) -> None:
        shape = tuple(int(x) for x in info["model_shape"])
        base = hp if hp is not None else Hyperparams()
        self.projects[info["project_id"]] = DeviceProject(
            project_id=str(info["project_id"]),
            model_shape=shape,
            training_mode=str(info["training_mode"]),
            apps=tuple(info["apps"]),
            hp=Hyperparams(
                learning_rate=base.learning_rate,
                kernel_l2=base.kernel_l2,
                bias_l2=base.bias_l2,
                batch_size=base.batch_size,
                epochs=int(info.get("epochs", base.epochs)),
                seed=base.seed,
            ),
        )
        policy = PolicySpec.from_wire(info["policy"]) if "policy" in info else None
        if policy is not None:
            for app_id in info["apps"]:
                if app_id in self.apps:
                    self.apps[app_id].policy = policy

    def log(self, message: str) -> None:
        self.events.append(f"{self.clock.now():.3f} {message}")

    def heartbeat(self, battery_pct: int = 100, charging: bool = True, memory_mb: int = 2048) -> None:
        self.api.report_availability(
            DeviceStatus(
                device_id=self.device_id,
                battery_pct=battery_pct,
                charging=charging,
                memory_available_mb=memory_mb,
                timestamp=self.clock.now(),
            )
        )

    def handle_training_request(self, req: TrainingRequest) -> Iterator[str] | None:
        """Validate a request and return the staged round pipeline, or None
        when the request is expired/unknown (dropped silently)."""
        now = self.clock.now()
        if req.expiration_date <= now:
            self.log(f"request {req.request_id} expired, dropped")
            return None
        project = self.projects.get(req.project_id)
        if project is None:
            self.log(f"request {req.request_id} for unknown project, dropped")
            return None
        # A newer request for the same project supersedes the older task.
        self.active_round[req.project_id] = req.fl_round
        return self._pipeline(project, req)

    def _superseded(self, project_id: str, fl_round: int) -> bool:
        return self.active_round.get(project_id) != fl_round

    def _pipeline(self, project: DeviceProject, req: TrainingRequest) -> Iterator[str]:
        pid = project.project_id
        fl_round = req.fl_round
        durations: dict[str, int] = {}
        hp = Hyperparams(
            learning_rate=project.hp.learning_rate,
            kernel_l2=project.hp.kernel_l2,
            bias_l2=project.hp.bias_l2,
            batch_size=project.hp.batch_size,
            epochs=project.hp.epochs,
            seed=derive_seed(self.seed_root, self.device_id, pid, fl_round),
        )
        apps = [self.apps[a] for a in project.apps if a in self.apps]
        prefix = f"{pid}:{fl_round}:"

        def mark(stage: str, t0: float) -> float:
            t1 = self.clock.now()
            durations[stage] = max(0, int(round((t1 - t0) * 1000.0)))
            return t1

        t0 = self.clock.now()
        yield "join"
        if self._superseded(pid, fl_round):
            return
        try:
            self.api.join_round(pid, fl_round, self.device_id)
            global_model = decode_model(ModelBlob.from_bytes(self.api.get_model(pid, fl_round)))
        except FlaasError as exc:
            self.log(f"round {fl_round} of {pid}: join aborted ({exc})")
            return
        for app in apps:
            app.cached_global = global_model
            app.pending = req
            self.bus.record("local", app.app_id, "global_model", round=fl_round)
        t0 = mark("join", t0)

        yield "load_samples"
        if self._superseded(pid, fl_round):
            return
        now = self.clock.now()
        shares = None
        try:
            if project.training_mode == "JS":
                shares, js_excluded = collect_shared_samples(apps, fl_round, now, self.bus, hp)
                if not shares:
                    raise PipelineAborted("all apps excluded from sample sharing")
                _check_formats(shares, global_model.input_dim, global_model.num_classes)
                for app_id, samples in shares:
                    self.store.put(f"{prefix}{app_id}:samples", samples, "model_sent")
            else:
                for app in apps:
                    if not app.samples:
                        raise PipelineAborted(f"app {app.app_id} has no samples")
        except (PipelineAborted, InvalidInput) as exc:
            self.log(f"round {fl_round} of {pid}: aborted at load_samples ({exc})")
            return
        t0 = mark("load_samples", t0)

        yield "train"
        if self._superseded(pid, fl_round):
            return
        now = self.clock.now()
        trained_apps = None
        try:
            if project.training_mode == "JS":
                merged: list[LabeledSample] = []
                for _, samples in shares:
                    merged.extend(samples)
                params, final_loss = flmath.train(global_model, merged, hp)
                outcome = PipelineOutcome(
                    model=WeightedModel(params, len(merged)),
                    final_loss=final_loss,
                    included=[a for a, _ in shares],
                    excluded=js_excluded,
                )
            elif project.training_mode == "JM":
                trained_apps, jm_excluded = train_per_app(
                    apps, global_model, hp, now=now, fl_round=fl_round, bus=self.bus,
                    executor=self.executor,
                )
                if not trained_apps:
                    raise PipelineAborted("all apps excluded from model sharing")
                for app_id, wm, _ in trained_apps:
                    self.store.put(f"{prefix}{app_id}:model", wm, "model_sent")
                outcome = None
            else:  # SA: exactly one app
                single = run_single_app(apps[0], global_model, hp)
                apps[0].share_model(fl_round, now, self.bus, single.model, single.final_loss)
                outcome = single
        except (PipelineAborted, InvalidInput) as exc:
            self.log(f"round {fl_round} of {pid}: aborted at train ({exc})")
            return
        t0 = mark("train", t0)

        yield "merge"
        if self._superseded(pid, fl_round):
            return
        if project.training_mode == "JM":
            try:
                outcome = merge_app_models(
                    trained_apps, {a.app_id: a.policy.min_local_loss for a in apps}
                )
                outcome.excluded = jm_excluded + outcome.excluded
            except PipelineAborted as exc:
                self.log(f"round {fl_round} of {pid}: aborted at merge ({exc})")
                return
        t0 = mark("merge", t0)

        yield "report"
        if self._superseded(pid, fl_round):
            return
        self._report(pid, fl_round, outcome, durations, t0)

    def _report(self, pid: str, fl_round: int, outcome: PipelineOutcome, durations: dict, t0: float) -> None:
        """Submit the round's model and telemetry, then expire round state."""
        blob = encode_model(outcome.model.params).to_bytes()
        try:
            self.api.submit_model(pid, fl_round, self.device_id, blob, outcome.model.sample_count)
            durations["report"] = max(0, int(round((self.clock.now() - t0) * 1000.0)))
            for stage in STAGES:
                durations.setdefault(stage, 0)
            self.api.submit_results(
                TrainingResults(
                    project_id=pid,
                    fl_round=fl_round,
                    device_id=self.device_id,
                    final_loss=outcome.final_loss,
                    sample_count=outcome.model.sample_count,
                    durations_ms=durations,
                )
            )
            self.log(f"round {fl_round} of {pid}: submitted ({outcome.model.sample_count} samples)")
        except FlaasError as exc:
            self.log(f"round {fl_round} of {pid}: report rejected ({exc})")
        finally:
            self.store.expire("model_sent", prefix=f"{pid}:{fl_round}:")
            self.active_round.pop(pid, None)
