"""HTTP gateway: task submission and injection, status, results, feedback.

The gateway is the only HTTP surface of the system; the browser console and
the CLI both talk to it. It validates a submitted flow graph against the
module registry, assigns the task UUID, and injects one TaskData per source
node onto the owning module's input topic. Status and result queries are
answered purely from the metastore (plus the launcher for module health) —
never by asking live modules — so answers survive any module being down.

Stateless by construction: a gateway restart loses nothing.
"""

from __future__ import annotations

import base64
import time
import uuid

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from vpe.errors import VpeError
from vpe.flowgraph import (
    SOURCE_PRODUCER,
    FlowGraph,
    Payload,
    TaskData,
    ValidationReport,
    _Malformed,
    encode_taskdata,
    graph_from_json,
    graph_to_json,
    payload_from_json,
    predecessors,
    validate_graph,
)
from vpe.launcher import DEFAULT_LAUNCHER_PORT, LauncherClient
from vpe.metastore import DEFAULT_STORE_PORT, FeedbackRecord, StoreClient, now_ms
from vpe.msgbus import DEFAULT_BUS_PORT, BusClient
from vpe.processors import get_processor
from vpe.runtime import DEFAULT_TTL_MS, Registry, input_topic_name

DEFAULT_GATEWAY_PORT = 7610


def _report_response(status_code: int, errors: list[tuple[str, str]]) -> JSONResponse:
    report = ValidationReport.from_errors(errors)
    return JSONResponse(status_code=status_code, content={"error": "INVALID_GRAPH", "report": report.to_json()})


def _error_response(status_code: int, code: str, detail: str = "") -> JSONResponse:
    return JSONResponse(status_code=status_code, content={"error": code, "detail": detail})


def _source_payload(node, descriptor, provided: object) -> Payload | list[tuple[str, str]]:
    """The payload to inject for one source node, or validation errors."""
    if provided is None:
        if len(descriptor.input_datatypes) != 1:
            return [
                (
                    "AMBIGUOUS_SOURCE",
                    f"node {node.node_id}: module {descriptor.module_id} accepts "
                    f"{sorted(descriptor.input_datatypes)}; supply an explicit source payload",
                )
            ]
        (datatype,) = descriptor.input_datatypes
        return Payload(datatype=datatype, records=(b"{}",), producer_node=SOURCE_PRODUCER)
    payload = payload_from_json(provided)
    errors = []
    if payload.producer_node != SOURCE_PRODUCER:
        errors.append(("BAD_PRODUCER", f"node {node.node_id}: source payload producer must be -1"))
    if payload.datatype not in descriptor.input_datatypes:
        errors.append(
            (
                "SOURCE_MISMATCH",
                f"node {node.node_id}: module {descriptor.module_id} does not accept "
                f"datatype {payload.datatype!r}",
            )
        )
    return errors or payload


def _link_compat_errors(graph: FlowGraph, registry: Registry) -> list[tuple[str, str]]:
    """Route-compatibility: each link's head can produce something its tail accepts."""
    errors = []
    for link in graph.links:
        head = graph.find_node(link.from_node)
        tail = graph.find_node(link.to_node)
        tail_descriptor = registry.get(tail.module_id)
        try:
            produces = get_processor(registry.get(head.module_id).processor_id).produces
        except VpeError as e:
            errors.append(("UNKNOWN_PROCESSOR", f"node {head.node_id}: {e.detail}"))
            continue
        if not produces & tail_descriptor.input_datatypes:
            errors.append(
                (
                    "ROUTE_MISMATCH",
                    f"link {link.from_node}->{link.to_node}: {head.module_id} produces "
                    f"{sorted(produces)}, {tail.module_id} accepts "
                    f"{sorted(tail_descriptor.input_datatypes)}",
                )
            )
    return errors


def create_app(
    registry: Registry | str,
    bus_addr: str = f"127.0.0.1:{DEFAULT_BUS_PORT}",
    store_addr: str = f"127.0.0.1:{DEFAULT_STORE_PORT}",
    launcher_addr: str = f"127.0.0.1:{DEFAULT_LAUNCHER_PORT}",
    stall_after_ms: int = DEFAULT_TTL_MS,
) -> FastAPI:
    if isinstance(registry, str):
        registry = Registry.load(registry)
    app = FastAPI(title="vpe gateway", version="0.1.0")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    store = StoreClient(store_addr)
    bus = BusClient(bus_addr)

    @app.post("/tasks", status_code=201)
    async def submit_task(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error_response(400, "BAD_BODY", "request body is not JSON")
        if not isinstance(body, dict) or "graph" not in body:
            return _error_response(400, "BAD_BODY", "body must be an object with a 'graph' field")
        try:
            graph = graph_from_json(body["graph"])
        except _Malformed as e:
            return _error_response(400, "BAD_BODY", f"graph: {e}")

        report = validate_graph(graph, known_modules=[d.module_id for d in registry.modules()])
        if not report.ok:
            if report.codes() == {"UNKNOWN_MODULE"}:
                return _report_response(409, list(report.errors))
            return _report_response(400, list(report.errors))
        compat = _link_compat_errors(graph, registry)
        if compat:
            return _report_response(400, compat)

        raw_sources = body.get("source_payloads", {})
        if not isinstance(raw_sources, dict):
            return _error_response(400, "BAD_BODY", "source_payloads must map node id to payload")
        source_nodes = [n for n in graph.nodes if not predecessors(graph, n.node_id)]
        injections: list[tuple[str, Payload, int]] = []
        errors: list[tuple[str, str]] = []
        for node in source_nodes:
            descriptor = registry.get(node.module_id)
            try:
                outcome = _source_payload(node, descriptor, raw_sources.get(str(node.node_id)))
            except _Malformed as e:
                return _error_response(400, "BAD_BODY", f"source payload {node.node_id}: {e}")
            if isinstance(outcome, list):
                errors.extend(outcome)
            else:
                topic = input_topic_name(descriptor.module_id, outcome.datatype)
                injections.append((topic, outcome, node.node_id))
        if errors:
            return _report_response(400, errors)

        task_id = str(uuid.uuid4())
        store.save_task(task_id, graph_to_json(graph), now_ms())
        for topic, payload, node_id in injections:
            td = TaskData(task_id=task_id, nme=node_id, graph=graph, payload=payload)
            bus.ensure_topic(topic)
            bus.publish(topic, task_id, encode_taskdata(td))
        return {"task_id": task_id}

    @app.get("/tasks/{task_id}")
    def task_status(task_id: str):
        manifest = store.get_task(task_id)
        if manifest is None:
            return _error_response(404, "NOT_FOUND", f"no task {task_id}")
        graph = graph_from_json(manifest["graph"])
        done = {r.node_id: r for r in store.query_results(task_id)}
        all_done = all(n.node_id in done for n in graph.nodes)
        last_activity = max(
            [r.created_at for r in done.values()] + [manifest["created_at"]]
        )
        if all_done:
            overall = "COMPLETE"
        elif now_ms() - last_activity > stall_after_ms:
            overall = "STALLED"
        else:
            overall = "RUNNING"
        nodes = [
            {
                "node_id": n.node_id,
                "module_id": n.module_id,
                "state": "DONE" if n.node_id in done else ("STALLED" if overall == "STALLED" else "WAITING"),
            }
            for n in graph.nodes
        ]
        return {
            "task_id": task_id,
            "overall": overall,
            "nodes": nodes,
            "created_at": manifest["created_at"],
            "last_activity": last_activity,
        }

    @app.get("/tasks/{task_id}/results")
    def task_results(task_id: str, node: int | None = None, limit: int = 1000, offset: int = 0):
        if store.get_task(task_id) is None:
            return _error_response(404, "NOT_FOUND", f"no task {task_id}")
        out = []
        for r in store.query_results(task_id, node):
            window = r.records[offset : offset + max(0, limit)]
            out.append(
                {
                    "node_id": r.node_id,
                    "module_id": r.module_id,
                    "datatype": r.datatype,
                    "created_at": r.created_at,
                    "total_records": len(r.records),
                    "records": [base64.b64encode(rec).decode("ascii") for rec in window],
                }
            )
        return {"task_id": task_id, "results": out}

    @app.get("/modules")
    def modules():
        try:
            with LauncherClient(launcher_addr, timeout=5) as launcher:
                return {"modules": launcher.list_modules()}
        except (VpeError, OSError):
            return _error_response(503, "LAUNCHER_DOWN", f"no launcher at {launcher_addr}")

    @app.post("/feedback", status_code=201)
    async def submit_feedback(request: Request):
        try:
            body = await request.json()
        except Exception:
            return _error_response(400, "BAD_BODY", "request body is not JSON")
        if not isinstance(body, dict):
            return _error_response(400, "BAD_BODY", "body must be an object")
        try:
            indices = body.get("selected_record_indices")
            revision = body.get("revision_b64")
            record = FeedbackRecord(
                feedback_id=str(uuid.uuid4()),
                task_id=body.get("task_id", ""),
                node_id=body.get("node_id", -1),
                kind=body.get("kind", ""),
                created_at=now_ms(),
                satisfaction=body.get("satisfaction"),
                selected_record_indices=None if indices is None else tuple(indices),
                revision=None if revision is None else base64.b64decode(revision),
            )
        except Exception as e:
            return _error_response(400, "BAD_BODY", str(e))
        try:
            store.save_feedback(record)
        except VpeError as e:
            status = 404 if e.code == "NO_RESULT" else 422
            return _error_response(status, e.code, e.detail)
        return {"feedback_id": record.feedback_id}

    @app.get("/healthz")
    def healthz():
        return {"ok": True, "time": int(time.time() * 1000)}

    return app


def serve(
    registry_path: str,
    bus_addr: str,
    store_addr: str,
    launcher_addr: str,
    host: str = "127.0.0.1",
    port: int = DEFAULT_GATEWAY_PORT,
    stall_after_ms: int = DEFAULT_TTL_MS,
) -> None:
    """Run the gateway in the foreground until interrupted."""
    import uvicorn

    app = create_app(Registry.load(registry_path), bus_addr, store_addr, launcher_addr, stall_after_ms)
    print(f"vpe gateway listening on {host}:{port}", flush=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")
