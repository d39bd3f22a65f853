"""Gateway API tests over in-process bus, store and launcher services."""

from __future__ import annotations

import base64
import json
import uuid

import pytest
from fastapi.testclient import TestClient

from tests.conftest import wait_until
from tests.gen import linear_graph, pipeline_registry
from vpe.flowgraph import FlowGraph, FlowLink, FlowNode, decode_taskdata, graph_to_json
from vpe.launcher import Launcher, LauncherServer
from vpe.gateway import create_app
from vpe.metastore import FeedbackRecord, MetaStore, ResultRecord, StoreServer, now_ms
from vpe.msgbus import Broker, BusServer
from vpe.runtime import ModuleHost, input_topic_name


class Env:
    def __init__(self, tmp_path, stall_after_ms=3_600_000):
        self.broker = Broker(tmp_path / "bus", fsync=False)
        self.bus_server = BusServer(self.broker, port=0).start()
        self.store = MetaStore(tmp_path / "store", fsync=False)
        self.store_server = StoreServer(self.store, port=0).start()
        self.registry = pipeline_registry()
        registry_path = tmp_path / "registry.json"
        self.registry.save(registry_path)
        self.launcher = Launcher(
            registry_path,
            bus_addr=f"127.0.0.1:{self.bus_server.port}",
            store_addr=f"127.0.0.1:{self.store_server.port}",
            run_dir=tmp_path / "run",
        )
        self.launcher_server = LauncherServer(self.launcher, port=0).start()
        self.tmp_path = tmp_path
        self.hosts = []
        self.app = create_app(
            self.registry,
            bus_addr=f"127.0.0.1:{self.bus_server.port}",
            store_addr=f"127.0.0.1:{self.store_server.port}",
            launcher_addr=f"127.0.0.1:{self.launcher_server.port}",
            stall_after_ms=stall_after_ms,
        )
        self.client = TestClient(self.app)

    def start_host(self, module_id: str) -> ModuleHost:
        host = ModuleHost(
            self.registry.get(module_id),
            self.registry,
            f"127.0.0.1:{self.bus_server.port}",
            f"127.0.0.1:{self.store_server.port}",
            self.tmp_path / "modules" / module_id,
        ).start()
        self.hosts.append(host)
        return host

    def close(self):
        for host in self.hosts:
            host.stop(deadline_s=5)
        self.launcher_server.stop()
        self.bus_server.stop()
        self.store_server.stop()


@pytest.fixture
def env(tmp_path):
    e = Env(tmp_path)
    yield e
    e.close()


def pipeline_body(**overrides) -> dict:
    graph = linear_graph(stages=3, count=2, seed=6)
    body = {"graph": graph_to_json(graph)}
    body.update(overrides)
    return body


class TestSubmit:
    def test_valid_graph_accepted_and_injected(self, env):
        response = env.client.post("/tasks", json=pipeline_body())
        assert response.status_code == 201
        task_id = response.json()["task_id"]
        uuid.UUID(task_id)
        # one TaskData landed on the source module's topic, addressed to node 0
        topic = input_topic_name("Frame-Source", "Trigger")
        messages = env.broker.read_all(topic)
        assert len(messages) == 1 and messages[0].key == task_id
        td = decode_taskdata(messages[0].value)
        assert td.task_id == task_id and td.nme == 0
        assert td.payload.datatype == "Trigger" and td.payload.producer_node == -1

    def test_distinct_task_ids_for_identical_bodies(self, env):
        body = pipeline_body()
        first = env.client.post("/tasks", json=body).json()["task_id"]
        second = env.client.post("/tasks", json=body).json()["task_id"]
        assert first != second

    def test_cyclic_graph_400_with_cycle_code(self, env):
        graph = {
            "nodes": [
                {"id": 0, "module": "Frame-Source", "params": [], "extra": ""},
                {"id": 1, "module": "Pedestrian-Detector", "params": [], "extra": ""},
            ],
            "links": [{"from": 0, "to": 1}, {"from": 1, "to": 0}],
        }
        response = env.client.post("/tasks", json={"graph": graph})
        assert response.status_code == 400
        codes = {e["code"] for e in response.json()["report"]["errors"]}
        assert "CYCLE" in codes

    def test_unknown_module_409(self, env):
        graph = {
            "nodes": [{"id": 0, "module": "Nope", "params": [], "extra": ""}],
            "links": [],
        }
        response = env.client.post("/tasks", json={"graph": graph})
        assert response.status_code == 409
        codes = {e["code"] for e in response.json()["report"]["errors"]}
        assert codes == {"UNKNOWN_MODULE"}

    def test_malformed_graph_json_400(self, env):
        response = env.client.post("/tasks", json={"graph": {"nodes": "zap"}})
        assert response.status_code == 400
        assert response.json()["error"] == "BAD_BODY"
        response = env.client.post("/tasks", content=b"{nope", headers={"content-type": "application/json"})
        assert response.status_code == 400

    def test_route_incompatible_link_400(self, env):
        # tracker output (Pedestrian-Track) is not accepted by the detector
        graph = FlowGraph(
            nodes=(FlowNode(0, "Pedestrian-Tracker"), FlowNode(1, "Pedestrian-Detector")),
            links=(FlowLink(0, 1),),
        )
        response = env.client.post("/tasks", json={"graph": graph_to_json(graph)})
        assert response.status_code == 400
        codes = {e["code"] for e in response.json()["report"]["errors"]}
        assert codes == {"ROUTE_MISMATCH"}

    def test_explicit_source_payload_used(self, env):
        payload = {
            "datatype": "Trigger",
            "producer_node": -1,
            "records": [base64.b64encode(b'{"cam": 3}').decode()],
        }
        response = env.client.post("/tasks", json=pipeline_body(source_payloads={"0": payload}))
        assert response.status_code == 201
        topic = input_topic_name("Frame-Source", "Trigger")
        td = decode_taskdata(env.broker.read_all(topic)[-1].value)
        assert td.payload.records == (b'{"cam": 3}',)

    def test_source_payload_wrong_datatype_400(self, env):
        payload = {"datatype": "Frame", "producer_node": -1, "records": []}
        response = env.client.post("/tasks", json=pipeline_body(source_payloads={"0": payload}))
        assert response.status_code == 400
        codes = {e["code"] for e in response.json()["report"]["errors"]}
        assert codes == {"SOURCE_MISMATCH"}


class TestStatusAndResults:
    def test_unknown_task_404(self, env):
        assert env.client.get(f"/tasks/{uuid.uuid4()}").status_code == 404
        assert env.client.get(f"/tasks/{uuid.uuid4()}/results").status_code == 404

    def test_fresh_task_running_all_waiting(self, env):
        task_id = env.client.post("/tasks", json=pipeline_body()).json()["task_id"]
        status = env.client.get(f"/tasks/{task_id}").json()
        assert status["overall"] == "RUNNING"
        assert [n["state"] for n in status["nodes"]] == ["WAITING"] * 3
        assert [n["module_id"] for n in status["nodes"]] == [
            "Frame-Source",
            "Pedestrian-Detector",
            "Pedestrian-Tracker",
        ]

    def test_completed_task_status_and_results(self, env):
        for m in ("Frame-Source", "Pedestrian-Detector", "Pedestrian-Tracker"):
            env.start_host(m)
        task_id = env.client.post("/tasks", json=pipeline_body()).json()["task_id"]
        wait_until(
            lambda: env.client.get(f"/tasks/{task_id}").json()["overall"] == "COMPLETE",
            timeout=20,
            message="task completion",
        )
        status = env.client.get(f"/tasks/{task_id}").json()
        assert [n["state"] for n in status["nodes"]] == ["DONE"] * 3
        results = env.client.get(f"/tasks/{task_id}/results").json()["results"]
        assert [r["node_id"] for r in results] == [0, 1, 2]
        assert results[0]["datatype"] == "Frame" and results[0]["total_records"] == 2
        single = env.client.get(f"/tasks/{task_id}/results", params={"node": 2}).json()["results"]
        assert len(single) == 1 and single[0]["module_id"] == "Pedestrian-Tracker"
        # records are base64 of canonical JSON
        for encoded in results[0]["records"]:
            json.loads(base64.b64decode(encoded))

    def test_result_record_pagination(self, env):
        task_id = env.client.post("/tasks", json=pipeline_body()).json()["task_id"]
        env.store.save_result(
            ResultRecord(task_id, 0, "Frame-Source", "Frame", tuple(b"%d" % i for i in range(10)), now_ms())
        )
        page = env.client.get(
            f"/tasks/{task_id}/results", params={"node": 0, "limit": 3, "offset": 4}
        ).json()["results"][0]
        assert page["total_records"] == 10
        assert [base64.b64decode(r) for r in page["records"]] == [b"4", b"5", b"6"]

    def test_stalled_task_detected(self, tmp_path):
        env = Env(tmp_path, stall_after_ms=50)
        try:
            task_id = env.client.post("/tasks", json=pipeline_body()).json()["task_id"]
            wait_until(
                lambda: env.client.get(f"/tasks/{task_id}").json()["overall"] == "STALLED",
                timeout=10,
                message="stall detection",
            )
            status = env.client.get(f"/tasks/{task_id}").json()
            assert [n["state"] for n in status["nodes"]] == ["STALLED"] * 3
        finally:
            env.close()

    def test_status_answers_with_all_modules_down(self, env):
        host = env.start_host("Frame-Source")
        task_id = env.client.post("/tasks", json=pipeline_body()).json()["task_id"]
        wait_until(lambda: len(env.store.query_results(task_id)) >= 1, timeout=10)
        host.stop(deadline_s=5)
        env.hosts.remove(host)
        status = env.client.get(f"/tasks/{task_id}").json()
        assert status["overall"] == "RUNNING"
        assert status["nodes"][0]["state"] == "DONE"
        results = env.client.get(f"/tasks/{task_id}/results").json()["results"]
        assert len(results) == 1

    def test_modules_endpoint_proxies_launcher(self, env):
        response = env.client.get("/modules")
        assert response.status_code == 200
        rows = {m["module_id"]: m for m in response.json()["modules"]}
        assert set(rows) == {d.module_id for d in env.registry.modules()}
        assert all(r["running"] is False for r in rows.values())

    def test_modules_endpoint_503_when_launcher_down(self, env):
        env.launcher_server.stop()
        response = env.client.get("/modules")
        assert response.status_code == 503
        assert response.json()["error"] == "LAUNCHER_DOWN"


class TestFeedback:
    def seed_result(self, env, n_records=4) -> tuple[str, int]:
        task_id = env.client.post("/tasks", json=pipeline_body()).json()["task_id"]
        env.store.save_result(
            ResultRecord(
                task_id, 2, "Pedestrian-Tracker", "Pedestrian-Track",
                tuple(b"%d" % i for i in range(n_records)), now_ms(),
            )
        )
        return task_id, 2

    def test_selection_roundtrip_all_fields(self, env):
        task_id, node_id = self.seed_result(env)
        response = env.client.post(
            "/feedback",
            json={"task_id": task_id, "node_id": node_id, "kind": "SELECTION",
                  "selected_record_indices": [0, 2]},
        )
        assert response.status_code == 201
        feedback_id = response.json()["feedback_id"]
        exported = env.store.export_feedback()
        assert len(exported) == 1
        fb = exported[0]
        assert fb.feedback_id == feedback_id
        assert (fb.task_id, fb.node_id, fb.kind) == (task_id, node_id, "SELECTION")
        assert fb.selected_record_indices == (0, 2)
        assert fb.satisfaction is None and fb.revision is None

    def test_satisfaction_and_revision(self, env):
        task_id, node_id = self.seed_result(env)
        ok = env.client.post(
            "/feedback", json={"task_id": task_id, "node_id": node_id, "kind": "SATISFACTION", "satisfaction": 5}
        )
        assert ok.status_code == 201
        rev = env.client.post(
            "/feedback",
            json={"task_id": task_id, "node_id": node_id, "kind": "REVISION",
                  "revision_b64": base64.b64encode(b"\x00\x01fixed").decode()},
        )
        assert rev.status_code == 201
        kinds = {f.kind for f in env.store.export_feedback()}
        assert kinds == {"SATISFACTION", "REVISION"}
        revision = next(f for f in env.store.export_feedback() if f.kind == "REVISION")
        assert revision.revision == b"\x00\x01fixed"

    def test_nonexistent_result_404(self, env):
        response = env.client.post(
            "/feedback",
            json={"task_id": str(uuid.uuid4()), "node_id": 0, "kind": "SATISFACTION", "satisfaction": 3},
        )
        assert response.status_code == 404
        assert response.json()["error"] == "NO_RESULT"

    def test_satisfaction_out_of_range_422(self, env):
        task_id, node_id = self.seed_result(env)
        response = env.client.post(
            "/feedback", json={"task_id": task_id, "node_id": node_id, "kind": "SATISFACTION", "satisfaction": 9}
        )
        assert response.status_code == 422

    def test_selection_index_out_of_range_422(self, env):
        task_id, node_id = self.seed_result(env, n_records=2)
        response = env.client.post(
            "/feedback",
            json={"task_id": task_id, "node_id": node_id, "kind": "SELECTION", "selected_record_indices": [5]},
        )
        assert response.status_code == 422
        assert response.json()["error"] == "BAD_INDEX"

    def test_mispaired_kind_422(self, env):
        task_id, node_id = self.seed_result(env)
        response = env.client.post(
            "/feedback",
            json={"task_id": task_id, "node_id": node_id, "kind": "SELECTION", "satisfaction": 2},
        )
        assert response.status_code == 422
        assert response.json()["error"] == "BAD_KIND"


class TestOpenApiDocument:
    def test_shipped_document_matches_the_app(self):
        from pathlib import Path

        from vpe.runtime import Registry

        app = create_app(Registry([]), "127.0.0.1:1", "127.0.0.1:1", "127.0.0.1:1")
        shipped = json.loads((Path(__file__).parent.parent / "openapi.json").read_text("utf-8"))
        assert shipped == app.openapi(), "openapi.json is stale; regenerate it from create_app().openapi()"
