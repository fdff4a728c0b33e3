"""Virtual-time experiments: ideal runs, starvation, dropout, determinism."""

import numpy as np
import pytest

from flaas.coordinator import ProjectConfig
from flaas.data import Distribution, PartitionSpec
from flaas.errors import InvalidInput
from flaas.flmath import Hyperparams
from flaas.sim import (
    DEFAULT_HOURLY_FRACTION,
    AvailabilityModel,
    DatasetSpec,
    DelayModel,
    Engine,
    ExperimentSpec,
    VirtualClock,
    availability_trace,
    compare_modes,
    pooled_centralized_baseline,
    run_experiment,
)


def small_spec(mode="JS", dist=Distribution.IID, seed=1, users=4, rounds=3, **project_kw):
    project = dict(
        project_id="t",
        input_dim=6,
        hidden_dim=8,
        num_classes=10,
        training_mode=mode,
        num_rounds=rounds,
        round_duration=600.0,
        min_available_devices=users,
        min_models_received=users,
        epochs=2,
    )
    project.update(project_kw)
    return ExperimentSpec(
        dataset=DatasetSpec(d=6, num_classes=10, n_train=4000, n_test=200, class_sep=3.0),
        partition=PartitionSpec(
            distribution=dist, num_users=users, samples_per_app=40, seed=seed
        ),
        project=ProjectConfig(**project),
        fleet_size=users,
        hyperparams=Hyperparams(epochs=2),
        master_seed=seed,
        give_up_after_s=24 * 3600.0,
    )


# --- engine ------------------------------------------------------------------------


def test_engine_orders_events_and_breaks_ties_by_insertion():
    clock = VirtualClock()
    engine = Engine(clock)
    seen = []
    engine.at(5.0, lambda: seen.append("b"))
    engine.at(1.0, lambda: seen.append("a"))
    engine.at(5.0, lambda: seen.append("c"))
    engine.run()
    assert seen == ["b", "a", "c"] or seen == ["a", "b", "c"]
    assert seen == ["a", "b", "c"]
    assert clock.now() == 5.0


def test_virtual_clock_rejects_backwards():
    clock = VirtualClock(10.0)
    with pytest.raises(ValueError):
        clock.advance_to(5.0)


# --- availability ---------------------------------------------------------------------


def test_always_available():
    model = AvailabilityModel.always()
    assert all(availability_trace(model, "d", h) for h in range(48))


def test_bernoulli_rate_matches_fraction():
    model = AvailabilityModel(hourly_fraction=(0.5,) * 24, seed=3)
    draws = [availability_trace(model, f"d{i}", h) for i in range(100) for h in range(100)]
    rate = np.mean(draws)
    assert abs(rate - 0.5) <= 0.02


def test_default_curve_bounds():
    assert min(DEFAULT_HOURLY_FRACTION) == pytest.approx(0.37)
    assert max(DEFAULT_HOURLY_FRACTION) == pytest.approx(0.82)
    assert len(DEFAULT_HOURLY_FRACTION) == 24


def test_availability_deterministic_and_independent():
    model = AvailabilityModel(seed=5)
    a = [availability_trace(model, "dev1", h) for h in range(200)]
    b = [availability_trace(model, "dev1", h) for h in range(200)]
    assert a == b
    c = [availability_trace(model, "dev2", h) for h in range(200)]
    assert a != c  # different devices draw independently


# --- experiments -----------------------------------------------------------------------


def test_ideal_conditions_complete_all_rounds():
    spec = small_spec(rounds=3, users=4)
    report = run_experiment(spec)
    assert report.status == "completed"
    assert len(report.rounds) == 3
    assert all(r.received == 4 and r.joined == 4 and r.requested == 4 for r in report.rounds)
    assert report.final_accuracy is not None


def test_zero_availability_never_starts():
    spec = small_spec(rounds=2, users=4)
    spec = ExperimentSpec(
        **{**spec.__dict__, "availability": AvailabilityModel.never(), "give_up_after_s": 3600.0}
    )
    report = run_experiment(spec)
    assert report.status == "waiting"
    assert report.rounds == [] and report.all_rounds == []
    assert report.virtual_seconds == 3600.0


def test_accounting_received_joined_requested():
    spec = small_spec(
        rounds=4, users=6, min_available_devices=3, min_models_received=3,
    )
    spec = ExperimentSpec(
        **{
            **spec.__dict__,
            "delays": DelayModel(dropout={"train": 0.4}),
            "availability": AvailabilityModel(hourly_fraction=(0.8,) * 24, seed=2),
            "give_up_after_s": 3 * 24 * 3600.0,
        }
    )
    report = run_experiment(spec)
    assert report.all_rounds, "no rounds ran"
    for r in report.all_rounds:
        assert r.received <= r.joined <= r.requested


def test_dropout_creates_joined_vs_received_gap():
    spec = small_spec(rounds=3, users=6, min_models_received=2, min_available_devices=6)
    spec = ExperimentSpec(
        **{**spec.__dict__, "delays": DelayModel(medians={s: 0.0 for s in DelayModel().medians}, dropout={"train": 0.5})}
    )
    report = run_experiment(spec)
    gaps = [r.joined - r.received for r in report.all_rounds]
    assert any(g > 0 for g in gaps)


def test_delays_show_up_in_round_durations():
    spec = small_spec(rounds=2, users=4)
    spec = ExperimentSpec(
        **{**spec.__dict__, "delays": DelayModel(medians={"notify": 1, "join": 5, "load_samples": 30, "train": 10, "merge": 1, "report": 2})}
    )
    report = run_experiment(spec)
    assert report.status == "completed"
    assert all(d > 0 for s in ("join", "train") for d in report.stage_durations_ms[s])


def test_report_bytes_deterministic():
    a = run_experiment(small_spec(seed=9))
    b = run_experiment(small_spec(seed=9))
    assert a.to_csv().encode() == b.to_csv().encode()
    assert a.to_jsonl().encode() == b.to_jsonl().encode()
    c = run_experiment(small_spec(seed=10))
    assert a.to_jsonl() != c.to_jsonl()


def test_compare_modes_grid():
    spec = small_spec(rounds=1, users=3)
    result = compare_modes(spec, ["JS", "JM"], [Distribution.IID, Distribution.NONIID_PER_USER])
    assert set(result.cells) == {
        ("JS", "IID"), ("JS", "NonIIDPU"), ("JM", "IID"), ("JM", "NonIIDPU"),
    }
    csv = result.table_csv()
    assert csv.count("\n") == 5  # header + 4 cells
    for report in result.cells.values():
        assert report.status == "completed"


def test_centralized_baseline_runs():
    spec = small_spec(rounds=1, users=3)
    acc = pooled_centralized_baseline(spec)
    assert 0.0 <= acc <= 1.0


def test_fleet_size_must_match_partition():
    spec = small_spec()
    with pytest.raises(InvalidInput):
        ExperimentSpec(**{**spec.__dict__, "fleet_size": 99})


def test_spec_round_trips_through_dict():
    spec = small_spec()
    rebuilt = ExperimentSpec.from_dict(spec.to_dict())
    assert rebuilt.project.project_id == spec.project.project_id
    assert rebuilt.partition.distribution == spec.partition.distribution
    assert rebuilt.fleet_size == spec.fleet_size
