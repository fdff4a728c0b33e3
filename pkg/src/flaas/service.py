"""HTTP surface over the coordinator plus the matching client.

Device-facing endpoints are bearer-authenticated (access tokens from
/api/register or /api/token/refresh); admin endpoints are open. Model
payloads travel as raw binary bodies; everything else is JSON.
"""

from __future__ import annotations

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import anyio
import requests
from fastapi import FastAPI, Header, Query, Request, Response
from fastapi.responses import JSONResponse

from .coordinator import Coordinator, ProjectConfig, QueueNotifier
from .errors import (
    AuthExpired,
    AuthInvalid,
    FlaasError,
    InvalidInput,
    NotFound,
    WIRE_ERRORS,
)
from .protocol import (
    DeviceStatus,
    TokenPair,
    TokenStore,
    TrainingRequest,
    TrainingResults,
)

logger = logging.getLogger(__name__)

_STATUS_CODES = {
    "invalid-input": 400,
    "decode-error": 400,
    "parse-error": 400,
    "capacity-error": 400,
    "aggregation-impossible": 500,
    "numerical-divergence": 500,
    "auth-expired": 401,
    "auth-invalid": 401,
    "not-found": 404,
    "conflict": 409,
    "already-final": 409,
    "round-closed": 409,
    "not-invited": 409,
    "not-joined": 409,
    "duplicate-submission": 409,
}


def create_app(
    coordinator: Coordinator,
    tokens: TokenStore,
    notifier: QueueNotifier,
    scheduler_period: float | None = None,
) -> FastAPI:
    ticker = _SchedulerThread(coordinator, scheduler_period or coordinator.scheduler_period)
    app = FastAPI(title="flaas coordinator", docs_url=None, redoc_url=None)
    app.state.coordinator = coordinator
    app.state.tokens = tokens
    app.state.notifier = notifier
    app.state.ticker = ticker

    @app.on_event("startup")
    def _start_ticker():
        ticker.start()

    @app.on_event("shutdown")
    def _stop_ticker():
        ticker.stop()

    @app.exception_handler(FlaasError)
    async def _flaas_error(_request: Request, exc: FlaasError):
        status = _STATUS_CODES.get(exc.code, 400)
        return JSONResponse(status_code=status, content={"error": exc.code, "detail": str(exc)})

    @app.middleware("http")
    async def _cors(request: Request, call_next):
        if request.method == "OPTIONS":
            response = Response(status_code=204)
        else:
            response = await call_next(request)
        response.headers["Access-Control-Allow-Origin"] = "*"
        response.headers["Access-Control-Allow-Methods"] = "GET, POST, DELETE, OPTIONS"
        response.headers["Access-Control-Allow-Headers"] = "Authorization, Content-Type, X-Sample-Count"
        return response

    def _device(authorization: str | None) -> str:
        if not authorization or not authorization.startswith("Bearer "):
            raise AuthInvalid("missing bearer token")
        return tokens.validate(authorization[len("Bearer ") :], coordinator.clock.now())

    # ---- device-facing -------------------------------------------------------

    @app.post("/api/register")
    async def register(body: dict):
        device_id = str(body.get("device_id", "")).strip()
        if not device_id:
            raise InvalidInput("device_id is required")
        return tokens.issue(device_id, coordinator.clock.now()).to_wire()

    @app.post("/api/token/refresh")
    async def refresh(body: dict):
        token = str(body.get("refresh_token", ""))
        return tokens.refresh(token, coordinator.clock.now()).to_wire()

    @app.post("/api/report-availability", status_code=204)
    async def report_availability(body: dict, authorization: str | None = Header(default=None)):
        device_id = _device(authorization)
        status = DeviceStatus.from_wire({**body, "device_id": device_id})
        coordinator.record_status(status)
        return Response(status_code=204)

    @app.get("/api/model")
    async def get_model(
        project_id: str = Query(...),
        round: int = Query(...),
        authorization: str | None = Header(default=None),
    ):
        _device(authorization)
        raw = coordinator.get_model_blob(project_id, round)
        return Response(content=raw, media_type="application/octet-stream")

    @app.post("/api/join-round")
    async def join_round(body: dict, authorization: str | None = Header(default=None)):
        device_id = _device(authorization)
        coordinator.join_round(str(body["project_id"]), int(body["round"]), device_id)
        return {"joined": True}

    @app.post("/api/submit-model", status_code=201)
    async def submit_model(
        request: Request,
        project_id: str = Query(...),
        round: int = Query(...),
        authorization: str | None = Header(default=None),
        x_sample_count: int | None = Header(default=None),
    ):
        device_id = _device(authorization)
        if x_sample_count is None:
            raise InvalidInput("X-Sample-Count header is required")
        raw = await request.body()
        coordinator.submit_model(project_id, round, device_id, raw, int(x_sample_count))
        return {"accepted": True}

    @app.post("/api/submit-results", status_code=201)
    async def submit_results(body: dict, authorization: str | None = Header(default=None)):
        device_id = _device(authorization)
        results = TrainingResults.from_wire({**body, "device_id": device_id})
        coordinator.submit_results(results)
        return {"accepted": True}

    @app.get("/api/notifications")
    async def notifications(
        device_id: str = Query(...),
        wait: float = Query(default=0.0),
        authorization: str | None = Header(default=None),
    ):
        auth_device = _device(authorization)
        if auth_device != device_id:
            raise AuthInvalid("token does not match device_id")
        requests_out = await anyio.to_thread.run_sync(
            lambda: notifier.poll(device_id, min(wait, 30.0))
        )
        return {"requests": [r.to_wire() for r in requests_out]}

    @app.get("/api/project-info")
    async def project_info(
        project_id: str = Query(...), authorization: str | None = Header(default=None)
    ):
        _device(authorization)
        return coordinator.project_info(project_id)

    # ---- admin ---------------------------------------------------------------

    @app.post("/api/admin/projects", status_code=201)
    async def create_project(body: dict):
        cfg = ProjectConfig.from_dict(body)
        return {"project_id": coordinator.create_project(cfg)}

    @app.get("/api/admin/projects")
    async def list_projects():
        return {"projects": coordinator.list_projects()}

    @app.get("/api/admin/projects/{project_id}")
    async def project_detail(project_id: str):
        return coordinator.admin_query(project_id)

    @app.delete("/api/admin/projects/{project_id}")
    async def terminate(project_id: str):
        coordinator.terminate_project(project_id)
        return {"terminated": True}

    @app.get("/api/admin/devices")
    async def devices():
        return {"devices": coordinator.latest_statuses()}

    return app


class _SchedulerThread:
    """Ticks every active project on a fixed wall-clock period."""

    def __init__(self, coordinator: Coordinator, period: float):
        self.coordinator = coordinator
        self.period = period
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, name="scheduler", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.wait(self.period):
            for pid in self.coordinator.active_project_ids():
                try:
                    self.coordinator.scheduler_tick(pid)
                except FlaasError as exc:
                    logger.warning("tick failed for %s: %s", pid, exc)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None


# --- client -------------------------------------------------------------------


def _raise_for_error(resp: requests.Response) -> None:
    if resp.status_code < 400:
        return
    try:
        payload = resp.json()
    except ValueError:
        payload = {}
    code = payload.get("error", "")
    detail = payload.get("detail", resp.text)
    exc_cls = WIRE_ERRORS.get(code, FlaasError)
    raise exc_cls(detail)


class HttpServerAPI:
    """Device-side client; registers on construction and refreshes its access
    token automatically when the server reports it expired."""

    def __init__(self, base_url: str, device_id: str, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.device_id = device_id
        self.session = session or requests.Session()
        resp = self.session.post(
            f"{self.base_url}/api/register", json={"device_id": device_id}, timeout=30
        )
        _raise_for_error(resp)
        self._tokens = TokenPair.from_wire(resp.json())

    def _auth(self) -> dict:
        return {"Authorization": f"Bearer {self._tokens.access_token}"}

    def _refresh(self) -> None:
        resp = self.session.post(
            f"{self.base_url}/api/token/refresh",
            json={"refresh_token": self._tokens.refresh_token},
            timeout=30,
        )
        _raise_for_error(resp)
        self._tokens = TokenPair.from_wire(resp.json())

    def _request(self, method: str, path: str, **kwargs) -> requests.Response:
        resp = self.session.request(
            method, f"{self.base_url}{path}", headers={**self._auth(), **kwargs.pop("headers", {})},
            timeout=kwargs.pop("timeout", 60), **kwargs,
        )
        if resp.status_code == 401:
            try:
                code = resp.json().get("error")
            except ValueError:
                code = None
            if code == "auth-expired":
                self._refresh()
                resp = self.session.request(
                    method,
                    f"{self.base_url}{path}",
                    headers={**self._auth(), **kwargs.pop("headers", {})},
                    timeout=60,
                    **kwargs,
                )
        _raise_for_error(resp)
        return resp

    def report_availability(self, status: DeviceStatus) -> None:
        self._request("POST", "/api/report-availability", json=status.to_wire())

    def get_model(self, project_id: str, fl_round: int) -> bytes:
        resp = self._request(
            "GET", f"/api/model?project_id={project_id}&round={fl_round}"
        )
        return resp.content

    def join_round(self, project_id: str, fl_round: int, device_id: str) -> None:
        self._request(
            "POST", "/api/join-round", json={"project_id": project_id, "round": fl_round, "device_id": device_id}
        )

    def submit_model(
        self, project_id: str, fl_round: int, device_id: str, blob: bytes, sample_count: int
    ) -> None:
        self._request(
            "POST",
            f"/api/submit-model?project_id={project_id}&round={fl_round}",
            data=blob,
            headers={"X-Sample-Count": str(sample_count), "Content-Type": "application/octet-stream"},
        )

    def submit_results(self, results: TrainingResults) -> None:
        self._request("POST", "/api/submit-results", json=results.to_wire())

    def poll_notifications(self, wait: float = 0.0) -> list[TrainingRequest]:
        resp = self._request(
            "GET", f"/api/notifications?device_id={self.device_id}&wait={wait}"
        )
        return [TrainingRequest.from_wire(r) for r in resp.json()["requests"]]

    def project_info(self, project_id: str) -> dict:
        return self._request("GET", f"/api/project-info?project_id={project_id}").json()


class HttpFleet:
    """Threaded device fleet for service mode: every device heartbeats,
    long-polls for training requests and runs its pipeline with real time."""

    def __init__(
        self,
        base_url: str,
        devices: list,
        heartbeat_period: float = 1.0,
        poll_wait: float = 1.0,
    ):
        self.base_url = base_url
        self.devices = devices  # list[DeviceLocal] with HttpServerAPI inside
        self.heartbeat_period = heartbeat_period
        self.poll_wait = poll_wait
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> None:
        for local in self.devices:
            t = threading.Thread(target=self._run_device, args=(local,), daemon=True)
            t.start()
            self._threads.append(t)

    def _run_device(self, local) -> None:
        # JM app trainings are allowed to run in parallel on a real device.
        local.executor = ThreadPoolExecutor(max_workers=4)
        last_beat = 0.0
        while not self._stop.is_set():
            now = time.monotonic()
            if now - last_beat >= self.heartbeat_period:
                try:
                    local.heartbeat()
                except FlaasError as exc:
                    logger.warning("%s heartbeat failed: %s", local.device_id, exc)
                except requests.RequestException:
                    pass
                last_beat = now
            try:
                for req in local.api.poll_notifications(wait=self.poll_wait):
                    pipeline = local.handle_training_request(req)
                    if pipeline is None:
                        continue
                    for _stage in pipeline:
                        pass
            except FlaasError as exc:
                logger.warning("%s poll failed: %s", local.device_id, exc)
            except requests.RequestException:
                time.sleep(self.poll_wait)
        local.executor.shutdown(wait=False)

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5.0)
        self._threads.clear()
