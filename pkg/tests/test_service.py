"""HTTP surface tests against a live in-process server."""

import socket
import threading
import time

import numpy as np
import pytest
import requests
import uvicorn

from flaas.coordinator import Coordinator, QueueNotifier, SystemClock
from flaas.data import LabeledSample
from flaas.device import AppRuntime, DeviceLocal
from flaas.errors import NotJoined, RoundClosed
from flaas.flmath import Hyperparams, init_model
from flaas.protocol import (
    DeviceStatus,
    ModelBlob,
    PolicySpec,
    TokenStore,
    TrainingResults,
    decode_model,
    encode_model,
)
from flaas.service import HttpServerAPI, create_app


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture()
def live_server():
    notifier = QueueNotifier()
    coordinator = Coordinator(SystemClock(), notifier=notifier, scheduler_period=0.1)
    app = create_app(coordinator, TokenStore(), notifier, scheduler_period=0.1)
    port = free_port()
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{port}"
    for _ in range(200):
        try:
            requests.get(f"{base}/api/admin/projects", timeout=1)
            break
        except requests.RequestException:
            time.sleep(0.05)
    else:
        raise RuntimeError("server did not come up")
    yield base, coordinator
    server.should_exit = True
    thread.join(timeout=5)


def project_body(**kw):
    body = {
        "project_id": "svc",
        "model_shape": [4, 4, 3],
        "training_mode": "JS",
        "apps": ["Red", "Green", "Blue"],
        "epochs": 1,
        "num_rounds": 1,
        "round_duration": 30.0,
        "min_available_devices": 1,
        "min_models_received": 1,
    }
    body.update(kw)
    return body


def wait_until(pred, timeout=10.0, step=0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(step)
    return False


def test_admin_endpoints(live_server):
    base, _ = live_server
    assert requests.get(f"{base}/api/admin/projects").json() == {"projects": []}
    created = requests.post(f"{base}/api/admin/projects", json=project_body())
    assert created.status_code == 201 and created.json() == {"project_id": "svc"}
    dup = requests.post(f"{base}/api/admin/projects", json=project_body())
    assert dup.status_code == 409 and dup.json()["error"] == "conflict"
    bad = requests.post(
        f"{base}/api/admin/projects",
        json=project_body(project_id="bad", min_models_received=5, min_available_devices=1),
    )
    assert bad.status_code == 400 and bad.json()["error"] == "invalid-input"
    detail = requests.get(f"{base}/api/admin/projects/svc").json()
    assert detail["state"]["status"] == "waiting"
    assert requests.get(f"{base}/api/admin/projects/ghost").status_code == 404


def test_device_auth_required(live_server):
    base, _ = live_server
    resp = requests.post(f"{base}/api/report-availability", json={"battery_pct": 50})
    assert resp.status_code == 401
    resp = requests.post(
        f"{base}/api/report-availability",
        json={"battery_pct": 50},
        headers={"Authorization": "Bearer bogus"},
    )
    assert resp.status_code == 401 and resp.json()["error"] == "auth-invalid"


def test_register_and_refresh_flow(live_server):
    base, _ = live_server
    pair = requests.post(f"{base}/api/register", json={"device_id": "d1"}).json()
    rotated = requests.post(
        f"{base}/api/token/refresh", json={"refresh_token": pair["refresh_token"]}
    ).json()
    assert rotated["access_token"] != pair["access_token"]
    again = requests.post(
        f"{base}/api/token/refresh", json={"refresh_token": pair["refresh_token"]}
    )
    assert again.status_code == 401 and again.json()["error"] == "auth-invalid"


def test_full_round_over_http(live_server):
    base, coordinator = live_server
    requests.post(f"{base}/api/admin/projects", json=project_body()).raise_for_status()
    api = HttpServerAPI(base, "dev1")
    api.report_availability(DeviceStatus("dev1", 95, True, 2048, time.time()))
    # the scheduler thread (0.1 s period) starts the round once dev1 is eligible
    reqs = []
    assert wait_until(lambda: bool(reqs := api.poll_notifications(wait=0.5)) or reqs)
    reqs = reqs or api.poll_notifications(wait=2.0)
    assert reqs and reqs[0].training_mode == "JS"
    fl_round = reqs[0].fl_round

    raw = api.get_model("svc", fl_round)
    params = decode_model(ModelBlob.from_bytes(raw))
    assert params.shape == (4, 4, 3)

    with pytest.raises(NotJoined):
        api.submit_model("svc", fl_round, "dev1", raw, 150)
    api.join_round("svc", fl_round, "dev1")
    api.submit_model("svc", fl_round, "dev1", raw, 150)
    api.submit_results(
        TrainingResults(
            "svc", fl_round, "dev1", 1.0, 150,
            {"join": 1, "load_samples": 2, "train": 3, "merge": 0, "report": 1},
        )
    )
    assert wait_until(
        lambda: requests.get(f"{base}/api/admin/projects/svc").json()["state"]["status"]
        == "completed"
    )
    detail = requests.get(f"{base}/api/admin/projects/svc").json()
    assert detail["history"][0]["outcome"] == "completed"
    assert detail["history"][0]["received_models"] == [["dev1", 150]]
    devices = requests.get(f"{base}/api/admin/devices").json()["devices"]
    assert devices[0]["status"]["device_id"] == "dev1"


def test_http_device_pipeline_end_to_end(live_server):
    """A DeviceLocal driving the real HTTP client completes a JS round."""
    base, _ = live_server
    requests.post(
        f"{base}/api/admin/projects", json=project_body(project_id="e2e")
    ).raise_for_status()
    rng = np.random.default_rng(0)
    api = HttpServerAPI(base, "devX")
    samples = [LabeledSample(rng.normal(size=4), int(rng.integers(0, 3))) for _ in range(60)]
    apps = {
        a: AppRuntime(a, list(samples), PolicySpec(share_kind="samples"))
        for a in ("Red", "Green", "Blue")
    }
    local = DeviceLocal("devX", SystemClock(), api, apps, seed_root=1)
    local.register_project(api.project_info("e2e"), hp=Hyperparams(epochs=1))
    local.heartbeat()
    got = []
    assert wait_until(lambda: bool(got.extend(api.poll_notifications(wait=0.5)) or got))
    pipeline = local.handle_training_request(got[0])
    for _stage in pipeline:
        pass
    assert wait_until(
        lambda: requests.get(f"{base}/api/admin/projects/e2e").json()["state"]["status"]
        == "completed"
    )
    detail = requests.get(f"{base}/api/admin/projects/e2e").json()
    assert detail["history"][0]["received_models"] == [["devX", 180]]


def test_terminate_over_http(live_server):
    base, _ = live_server
    requests.post(
        f"{base}/api/admin/projects", json=project_body(project_id="kill", num_rounds=5)
    ).raise_for_status()
    assert requests.delete(f"{base}/api/admin/projects/kill").status_code == 200
    detail = requests.get(f"{base}/api/admin/projects/kill").json()
    assert detail["state"]["status"] == "terminated"
    second = requests.delete(f"{base}/api/admin/projects/kill")
    assert second.status_code == 409 and second.json()["error"] == "already-final"


def test_submit_model_requires_sample_count_header(live_server):
    base, _ = live_server
    requests.post(
        f"{base}/api/admin/projects", json=project_body(project_id="hdr")
    ).raise_for_status()
    pair = requests.post(f"{base}/api/register", json={"device_id": "d9"}).json()
    blob = encode_model(init_model(4, 4, 3, seed=0)).to_bytes()
    resp = requests.post(
        f"{base}/api/submit-model?project_id=hdr&round=1",
        data=blob,
        headers={"Authorization": f"Bearer {pair['access_token']}"},
    )
    assert resp.status_code == 400
