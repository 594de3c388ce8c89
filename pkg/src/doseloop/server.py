"""HTTP service for the annotation UI and operators: rules, patients,
what-if dose curves, annotation submission, agreement, and loop control.

JSON bodies mirror the library serializations exactly; every response
carries the model_version it was computed from. Rule edits are staged in
the advice pool and only take effect at POST /loop/iterate, which holds
the single iterate lock (a second call gets 409).
"""

from __future__ import annotations

import datetime
import math
import threading

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .agreement import AgreementError, agreement_result, reliability_gate
from .dataset import Dataset
from .loop import (
    AdvicePool,
    AdviceRecord,
    LoopConfig,
    LoopError,
    LoopState,
    RulePredictor,
    _derive_ranges,
    _ratings_from_pool,
    init_state,
    iterate,
    save_snapshot,
    snapshot_versions,
)
from .rules import (
    RuleEdit,
    RuleError,
    RuleSet,
    UnknownRuleError,
    UnsatisfiableRuleError,
    apply_edit,
    encode,
    rule_to_text,
    sample_from_rule,
)

__all__ = ["NotFoundError", "LoopBusyError", "LoopService", "create_app", "serve"]

HB_BAND = (10.5, 11.5)
DEFAULT_DOSE_GRID = (0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0)


class NotFoundError(KeyError):
    pass


class LoopBusyError(RuntimeError):
    pass


def _clean(value):
    """JSON-safe scalars: non-finite floats become null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class LoopService:
    """Owns the loop state, the advice pool, and the data tables.

    Reads see a consistent snapshot per version; annotation and edit
    writes are serialized through one append lock; iterate holds its own
    non-blocking lock so concurrent loop turns are refused, not queued.
    """

    def __init__(
        self,
        train: Dataset,
        test: Dataset | None = None,
        config: LoopConfig | None = None,
        state: LoopState | None = None,
        pool: AdvicePool | None = None,
        snapshot_dir=None,
    ):
        self.train = train
        self.test = test
        if state is None:
            state = init_state(train, config or LoopConfig(), test=test)
        self.state = state
        self.pool = pool if pool is not None else AdvicePool()
        self.snapshot_dir = snapshot_dir
        self._append_lock = threading.Lock()
        self._iterate_lock = threading.Lock()
        if snapshot_dir is not None and state.version not in snapshot_versions(snapshot_dir):
            save_snapshot(snapshot_dir, self.state, self.pool)

    # -- views ------------------------------------------------------------
    @property
    def version(self) -> int:
        return self.state.version

    def predictor(self) -> RulePredictor:
        return RulePredictor(
            self.state.rule_set,
            self.state.sigma2,
            self.state.sigma_b2,
            self.state.b_hat,
            feature_names=self.train.schema,
        )

    def rule(self, rule_id: int):
        try:
            return self.state.rule_set.rule(rule_id)
        except UnknownRuleError:
            raise NotFoundError(f"no rule with id {rule_id}") from None

    def patient_rows(self, patient_id: str):
        idx = self.train.patient_index(patient_id)
        if len(idx) == 0:
            raise NotFoundError(f"no patient with id {patient_id}")
        return idx

    def patients(self, rule_id=None) -> list:
        """(patient_id, n_visits) pairs, optionally those with at least one
        visit satisfying the rule."""
        if rule_id is None:
            keep = None
        else:
            self.rule(rule_id)
            M, _ = encode(self.state.rule_set, self.train.X, self.train.schema)
            col = [r.id for r in self.state.rule_set.rules].index(int(rule_id))
            keep = M[:, col].astype(bool)
        out = []
        for pid, start, stop in self.train.groups():
            if keep is None or keep[start:stop].any():
                n = stop - start if keep is None else int(keep[start:stop].sum())
                out.append((pid, n))
        return out

    def trajectory(self, patient_id: str) -> list:
        idx = self.patient_rows(patient_id)
        predictor = self.predictor()
        pred = predictor.predict(
            self.train.X[idx], clusters=self.train.patient_ids[idx], mode="conditional"
        )
        visits = []
        for k, i in enumerate(idx):
            feats = {
                f: _clean(float(self.train.X[i, j])) for j, f in enumerate(self.train.schema)
            }
            visits.append(
                {
                    "care_date": self.train.care_dates[i].isoformat(),
                    "features": feats,
                    "target": _clean(float(self.train.target[i])),
                    "prediction": float(pred[k]),
                }
            )
        return visits

    def dose_response(self, patient_id: str, grid, current_hb: float, visit=None) -> list:
        idx = self.patient_rows(patient_id)
        row_i = int(idx[-1])
        if visit is not None:
            wanted = datetime.date.fromisoformat(visit)
            hits = [int(i) for i in idx if self.train.care_dates[i] == wanted]
            if not hits:
                raise NotFoundError(f"patient {patient_id} has no visit on {visit}")
            row_i = hits[0]
        points = self.predictor().dose_response(
            self.train.X[row_i],
            current_hb,
            grid,
            cluster=patient_id,
            mode="conditional",
        )
        return [p.to_json_dict() for p in points]

    # -- writes -----------------------------------------------------------
    def add_annotation(self, payload: dict) -> int:
        record = AdviceRecord.from_json_dict(payload)
        with self._append_lock:
            self.pool.add(record)
            return len(self.pool.records) - 1

    def stage_edit(self, rule_id: int, payload: dict, dry_run: bool = False) -> dict:
        body_rule_id = payload.get("rule_id", rule_id)
        if int(body_rule_id) != int(rule_id):
            raise LoopError(f"body rule_id {body_rule_id} does not match path rule id {rule_id}")
        self.rule(rule_id)
        edit = RuleEdit.from_json_dict(
            {
                "rule_id": rule_id,
                "operations": payload.get("operations", []),
                "author": payload.get("author", ""),
                "timestamp": payload.get("timestamp", ""),
            }
        )
        # Validate against the live rules before anything is stored.
        outcome = apply_edit(self.state.rule_set, edit, feature_names=self.train.schema)
        edited = outcome.report.rule
        one = RuleSet(rules=(edited,), version=0, regressors=self.state.rule_set.regressors)
        M, _ = encode(one, self.train.X, self.train.schema)
        member_count = int(M[:, 0].sum())
        preview_rows = sample_from_rule(
            edited,
            _derive_ranges(self.train, self.state.config.policy),
            n=20,
            seed=self.state.config.policy.seed,
            regressors=self.state.rule_set.regressors,
            target_name=self.train.target_name,
        )
        preview = {
            "rule": edited.to_json_dict(),
            "text": rule_to_text(edited, self.state.rule_set.regressors, self.train.target_name),
            "satisfiable": outcome.report.satisfiable,
            "member_count": member_count,
            "sampled_points": [
                {f: _clean(v) for f, v in r.features.items()} for r in preview_rows
            ],
            "dry_run": dry_run,
            "staged": False,
        }
        if not dry_run:
            with self._append_lock:
                preview["edit_ref"] = self.pool.add_edit(edit)
                preview["staged"] = True
        return preview

    def run_iterate(self) -> dict:
        if not self._iterate_lock.acquire(blocking=False):
            raise LoopBusyError("an iterate is already running")
        try:
            before = self.state.version
            new_state = iterate(self.state, self.pool, self.train, self.test)
            self.state = new_state
            rejected = new_state.version == before
            if not rejected and self.snapshot_dir is not None:
                save_snapshot(self.snapshot_dir, new_state, self.pool)
            out = {"rejected": rejected}
            if rejected:
                out["rejection"] = new_state.rejections[-1]
            else:
                out["metrics"] = new_state.history[-1].to_json_dict()
            return out
        finally:
            self._iterate_lock.release()

    def agreement(self, threshold: float | None = None) -> dict:
        m = _ratings_from_pool(self.pool)
        raters = sorted({r.rater for r in self.pool.numeric_records()})
        if m is None:
            return {
                "alpha": None,
                "ci": None,
                "gate": None,
                "reason": "no unit rated by two raters",
                "n_units": 0,
                "n_raters": len(raters),
                "raters": raters,
                "n_records": len(self.pool.records),
            }
        seed = self.state.config.policy.seed
        thr = self.state.config.policy.gate_threshold if threshold is None else float(threshold)
        res = agreement_result(m, seed=seed)
        gate = reliability_gate(m, threshold=thr, seed=seed)
        out = res.to_json_dict()
        out["gate"] = gate.to_json_dict()
        out["raters"] = list(m.rater_ids)
        out["units"] = list(m.unit_ids)
        out["n_records"] = len(self.pool.records)
        return out


def create_app(service: LoopService, token: str | None = None) -> FastAPI:
    app = FastAPI(title="doseloop", docs_url=None, redoc_url=None)

    def body(payload: dict, status: int = 200) -> JSONResponse:
        return JSONResponse({"model_version": service.version, **payload}, status_code=status)

    @app.middleware("http")
    async def auth(request: Request, call_next):
        if token is not None:
            got = request.headers.get("authorization", "")
            if got != f"Bearer {token}":
                return JSONResponse(
                    {"error": "unauthorized", "detail": "missing or bad bearer token"},
                    status_code=401,
                )
        return await call_next(request)

    def error(status: int, name: str, exc: Exception) -> JSONResponse:
        detail = str(exc)
        if isinstance(exc, KeyError) and detail.startswith("'") and detail.endswith("'"):
            detail = detail[1:-1]
        return JSONResponse({"error": name, "detail": detail}, status_code=status)

    @app.exception_handler(NotFoundError)
    async def _nf(request, exc):
        return error(404, "not-found", exc)

    @app.exception_handler(UnknownRuleError)
    async def _ur(request, exc):
        return error(404, "not-found", exc)

    @app.exception_handler(UnsatisfiableRuleError)
    async def _un(request, exc):
        return error(422, "unsatisfiable-rule", exc)

    @app.exception_handler(LoopBusyError)
    async def _busy(request, exc):
        return error(409, "iterate-running", exc)

    @app.exception_handler(AgreementError)
    async def _ag(request, exc):
        return error(400, "bad-request", exc)

    @app.exception_handler(RuleError)
    async def _re(request, exc):
        return error(400, "bad-request", exc)

    @app.exception_handler(LoopError)
    async def _le(request, exc):
        return error(400, "bad-request", exc)

    @app.exception_handler(ValueError)
    async def _ve(request, exc):
        return error(400, "bad-request", exc)

    # -- rules ------------------------------------------------------------
    @app.get("/api/v1/rules")
    def get_rules():
        return body(service.state.rule_set.to_json_dict())

    @app.get("/api/v1/rules/{rule_id}")
    def get_rule(rule_id: int):
        rule = service.rule(rule_id)
        return body(
            {
                "rule": rule.to_json_dict(),
                "text": rule_to_text(
                    rule, service.state.rule_set.regressors, service.train.target_name
                ),
            }
        )

    @app.post("/api/v1/rules/{rule_id}/edits")
    async def post_edit(rule_id: int, request: Request, dry_run: bool = False):
        payload = await request.json()
        preview = service.stage_edit(rule_id, payload, dry_run=dry_run)
        return body(preview, status=200 if dry_run else 201)

    # -- patients ---------------------------------------------------------
    @app.get("/api/v1/patients")
    def get_patients(rule: int | None = None):
        pairs = service.patients(rule)
        return body(
            {
                "rule": rule,
                "patients": [{"id": pid, "n_visits": n} for pid, n in pairs],
            }
        )

    @app.get("/api/v1/patients/{patient_id}/trajectory")
    def get_trajectory(patient_id: str):
        visits = service.trajectory(patient_id)
        return body(
            {
                "patient_id": patient_id,
                "target_name": service.train.target_name,
                "visits": visits,
            }
        )

    @app.get("/api/v1/patients/{patient_id}/dose-response")
    def get_dose_response(
        patient_id: str,
        grid: str | None = None,
        current_hb: float = 10.0,
        visit: str | None = None,
    ):
        if grid is None:
            parsed = DEFAULT_DOSE_GRID
        else:
            try:
                parsed = [float(v) for v in grid.split(",") if v.strip() != ""]
            except ValueError:
                raise LoopError(f"bad grid {grid!r}: must be comma-separated numbers") from None
            if not parsed:
                raise LoopError("grid is empty")
        points = service.dose_response(patient_id, parsed, current_hb, visit=visit)
        return body(
            {
                "patient_id": patient_id,
                "current_hb": current_hb,
                "band": list(HB_BAND),
                "points": points,
            }
        )

    # -- annotations and agreement -----------------------------------------
    @app.post("/api/v1/annotations")
    async def post_annotation(request: Request):
        payload = await request.json()
        index = service.add_annotation(payload)
        return body({"index": index, "record": service.pool.records[index].to_json_dict()}, 201)

    @app.get("/api/v1/annotations")
    def get_annotations(rater: str | None = None, version: str | None = None):
        records = service.pool.records
        if rater is not None:
            records = [r for r in records if r.rater == rater]
        return body(
            {
                "records": [r.to_json_dict() for r in records],
                "edits": [e.to_json_dict() for e in service.pool.edits],
            }
        )

    @app.get("/api/v1/agreement")
    def get_agreement(threshold: float | None = None):
        return body(service.agreement(threshold))

    # -- loop -------------------------------------------------------------
    @app.post("/api/v1/loop/iterate")
    def post_iterate():
        return body(service.run_iterate())

    @app.get("/api/v1/metrics")
    def get_metrics():
        return body({"history": [vm.to_json_dict() for vm in service.state.history]})

    @app.get("/api/v1/versions")
    def get_versions():
        stored = (
            snapshot_versions(service.snapshot_dir) if service.snapshot_dir is not None else []
        )
        return body(
            {
                "versions": [vm.version for vm in service.state.history],
                "snapshots": stored,
                "rejections": list(service.state.rejections),
            }
        )

    return app


def serve(service: LoopService, host: str = "127.0.0.1", port: int = 8000, token=None):
    """Run the service under uvicorn (blocking)."""
    import uvicorn

    uvicorn.run(create_app(service, token=token), host=host, port=port, log_level="warning")
