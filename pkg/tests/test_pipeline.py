"""End-to-end pipeline tests with in-process bus, store and module hosts."""

from __future__ import annotations

import json
import uuid
from dataclasses import dataclass, field

import pytest

from tests.conftest import wait_until
from tests.gen import linear_graph, pipeline_registry, trigger_taskdata
from vpe.flowgraph import FlowGraph, FlowLink, FlowNode, Payload, TaskData, encode_taskdata
from vpe.metastore import MetaStore, StoreServer
from vpe.msgbus import Broker, BusClient, BusServer
from vpe.processors import (
    ATTR_RECOGNIZER,
    DETECTOR,
    FRAME_SOURCE,
    REID_RANKER,
    TRACKER,
    ProcessorContract,
    register,
)
from vpe.runtime import ModuleDescriptor, ModuleHost, Registry, dead_letter_topic, input_topic_name


@dataclass
class Stack:
    broker: Broker
    store: MetaStore
    bus_addr: str
    store_addr: str
    registry: Registry
    run_dir: object
    hosts: list[ModuleHost] = field(default_factory=list)

    def start_host(self, module_id: str, **kw) -> ModuleHost:
        host = ModuleHost(
            self.registry.get(module_id) if isinstance(module_id, str) else module_id,
            self.registry,
            self.bus_addr,
            self.store_addr,
            self.run_dir / module_id,
            **kw,
        ).start()
        self.hosts.append(host)
        return host

    def submit(self, graph: FlowGraph, task_id: str | None = None) -> str:
        td = trigger_taskdata(graph, task_id)
        source = graph.find_node(td.nme)
        topic = input_topic_name(source.module_id, td.payload.datatype)
        with BusClient(self.bus_addr) as bus:
            bus.ensure_topic(topic)
            bus.publish(topic, td.task_id, encode_taskdata(td))
        return td.task_id

    def wait_results(self, task_id: str, n_nodes: int, timeout: float = 20.0) -> list:
        wait_until(
            lambda: len(self.store.query_results(task_id)) >= n_nodes,
            timeout=timeout,
            message=f"{n_nodes} results for task {task_id}",
        )
        return self.store.query_results(task_id)


@pytest.fixture
def stack(tmp_path):
    broker = Broker(tmp_path / "bus", fsync=False)
    bus_server = BusServer(broker, port=0).start()
    store = MetaStore(tmp_path / "store", fsync=False)
    store_server = StoreServer(store, port=0).start()
    st = Stack(
        broker=broker,
        store=store,
        bus_addr=f"127.0.0.1:{bus_server.port}",
        store_addr=f"127.0.0.1:{store_server.port}",
        registry=pipeline_registry(),
        run_dir=tmp_path / "modules",
    )
    yield st
    for host in st.hosts:
        host.stop(deadline_s=5)
    bus_server.stop()
    store_server.stop()


def start_all(stack: Stack) -> None:
    for descriptor in stack.registry.modules():
        stack.start_host(descriptor.module_id)


class TestLinearPipeline:
    def test_five_stage_task_completes_with_exact_results(self, stack):
        start_all(stack)
        graph = linear_graph(stages=5, count=6, seed=13, target="male|bag")
        task_id = stack.submit(graph)
        results = stack.wait_results(task_id, 5)
        by_node = {r.node_id: r for r in results}
        assert sorted(by_node) == [0, 1, 2, 3, 4]
        assert [by_node[i].datatype for i in range(5)] == [
            "Frame",
            "Pedestrian-BBox",
            "Pedestrian-Track",
            "Pedestrian-Attribute",
            "ReID-Rank",
        ]
        assert [by_node[i].module_id for i in range(5)] == [
            "Frame-Source",
            "Pedestrian-Detector",
            "Pedestrian-Tracker",
            "Attr-Recognizer",
            "ReID-Ranker",
        ]
        # stored records must equal a direct pure run of the same stages
        trig = {-1: Payload(datatype="Trigger", records=(b"{}",))}
        frames = FRAME_SOURCE({"count": "6", "seed": "13"}, b"", trig)[0]
        bboxes = DETECTOR({}, b"", {0: frames})[0]
        tracks = TRACKER({}, b"", {1: bboxes})[0]
        attrs = ATTR_RECOGNIZER({}, b"", {2: tracks})[0]
        ranks = REID_RANKER({"target": "male|bag"}, b"", {3: attrs})[0]
        for node_id, payload in enumerate([frames, bboxes, tracks, attrs, ranks]):
            assert by_node[node_id].records == payload.records

    def test_many_tasks_one_result_per_node(self, stack):
        start_all(stack)
        graph = linear_graph(stages=3, count=2, seed=5)
        task_ids = [stack.submit(graph) for _ in range(10)]
        for task_id in task_ids:
            results = stack.wait_results(task_id, 3)
            assert [r.node_id for r in results] == [0, 1, 2]

    def test_restart_host_no_duplicate_results(self, stack, tmp_path):
        graph = linear_graph(stages=2, count=3, seed=1)
        source = stack.start_host("Frame-Source")
        detector = stack.start_host("Pedestrian-Detector")
        first = stack.submit(graph)
        stack.wait_results(first, 2)
        detector.stop(deadline_s=5)
        stack.hosts.remove(detector)
        second = stack.submit(graph)
        wait_until(lambda: len(stack.store.query_results(second, 0)) == 1, timeout=10)
        stack.start_host("Pedestrian-Detector")
        stack.wait_results(second, 2)
        for task in (first, second):
            assert [r.node_id for r in stack.store.query_results(task)] == [0, 1]


class TestDeadLetters:
    def test_poison_pill_quarantined_and_pipeline_continues(self, stack):
        start_all(stack)
        topic = input_topic_name("Frame-Source", "Trigger")
        with BusClient(stack.bus_addr) as bus:
            bus.ensure_topic(topic)
            bus.publish(topic, str(uuid.uuid4()), b"\xff\xfenot json")
        dlq = dead_letter_topic("Frame-Source")
        wait_until(lambda: stack.broker.topic_length(dlq) == 1, timeout=10)
        note = json.loads(stack.broker.read_all(dlq)[0].value)
        assert note["error"] in ("DECODE_MALFORMED", "DECODE_INVALID")
        task_id = stack.submit(linear_graph(stages=2))
        stack.wait_results(task_id, 2)

    def test_misrouted_message_dead_lettered(self, stack):
        stack.start_host("Pedestrian-Detector")
        graph = linear_graph(stages=2)
        td = trigger_taskdata(graph)  # nme=0 binds Frame-Source, not the detector
        topic = input_topic_name("Pedestrian-Detector", "Frame")
        with BusClient(stack.bus_addr) as bus:
            bus.ensure_topic(topic)
            bus.publish(topic, td.task_id, encode_taskdata(td))
        dlq = dead_letter_topic("Pedestrian-Detector")
        wait_until(lambda: stack.broker.topic_length(dlq) == 1, timeout=10)
        note = json.loads(stack.broker.read_all(dlq)[0].value)
        assert note["error"] == "MISROUTED" and note["task_id"] == td.task_id

    def test_invalid_producer_on_wire_dead_lettered(self, stack):
        # the codec refuses to decode a producer that is not a predecessor, so
        # such a message lands in the dead-letter queue as a decode failure
        stack.start_host("Pedestrian-Detector")
        graph = linear_graph(stages=2)
        td = TaskData(
            task_id=str(uuid.uuid4()),
            nme=1,
            graph=graph,
            payload=Payload(datatype="Frame", records=(), producer_node=0),
        )
        wire = encode_taskdata(td).replace(b'"producer_node":0', b'"producer_node":1')
        topic = input_topic_name("Pedestrian-Detector", "Frame")
        with BusClient(stack.bus_addr) as bus:
            bus.ensure_topic(topic)
            bus.publish(topic, td.task_id, wire)
        dlq = dead_letter_topic("Pedestrian-Detector")
        wait_until(lambda: stack.broker.topic_length(dlq) == 1, timeout=10)
        assert json.loads(stack.broker.read_all(dlq)[0].value)["error"] == "DECODE_INVALID"

    def test_poison_execution_dead_letters_after_retry_cap(self, stack):
        stack.start_host("Frame-Source")
        stack.start_host("Pedestrian-Detector")
        stack.start_host("Pedestrian-Tracker")
        stack.start_host("Attr-Recognizer")
        stack.start_host("ReID-Ranker", max_attempts=2)
        graph = linear_graph(stages=5, target="")  # ranker requires a target param
        bad = FlowGraph(
            nodes=tuple(
                FlowNode(n.node_id, n.module_id, () if n.module_id == "ReID-Ranker" else n.params)
                for n in graph.nodes
            ),
            links=graph.links,
        )
        task_id = stack.submit(bad)
        stack.wait_results(task_id, 4)  # stages 0..3 still complete
        dlq = dead_letter_topic("ReID-Ranker")
        wait_until(lambda: stack.broker.topic_length(dlq) >= 1, timeout=20)
        note = json.loads(stack.broker.read_all(dlq)[0].value)
        assert note["error"] == "EXEC_FAIL" and "BAD_PARAM" in note["detail"]
        assert len(stack.store.query_results(task_id)) == 4


class TestBacklogReplay:
    def test_messages_wait_for_absent_module(self, stack):
        stack.start_host("Frame-Source")
        graph = linear_graph(stages=2, count=1, seed=2)
        frame_topic = input_topic_name("Pedestrian-Detector", "Frame")
        stack.broker.create_topic(frame_topic)
        task_ids = [stack.submit(graph) for _ in range(5)]
        wait_until(lambda: stack.broker.topic_length(frame_topic) == 5, timeout=10)
        late = stack.start_host("Pedestrian-Detector")
        for task_id in task_ids:
            stack.wait_results(task_id, 2)
        assert late.accumulator.adds == 5


class TestMultiTopicModule:
    def test_join_across_two_owned_topics(self, stack, tmp_path):
        register(
            ProcessorContract(
                "fusion",
                frozenset({"Pedestrian-Attribute", "Pedestrian-Track"}),
                frozenset({"ReID-Rank"}),
                lambda params, extra, inputs: [
                    Payload(
                        datatype="ReID-Rank",
                        records=tuple(r for k in sorted(inputs) for r in inputs[k].records),
                    )
                ],
            )
        )
        registry = Registry(
            stack.registry.modules()
            + [ModuleDescriptor("M1", frozenset({"Pedestrian-Attribute", "Pedestrian-Track"}), "fusion")]
        )
        stack.registry = registry
        graph = FlowGraph(
            nodes=(
                FlowNode(0, "Frame-Source", params=(("count", "4"), ("seed", "3"))),
                FlowNode(1, "Pedestrian-Detector"),
                FlowNode(2, "Pedestrian-Tracker"),
                FlowNode(3, "Attr-Recognizer"),
                FlowNode(4, "M1"),
            ),
            links=(FlowLink(0, 1), FlowLink(1, 2), FlowLink(2, 3), FlowLink(2, 4), FlowLink(3, 4)),
        )
        for module_id in ("Frame-Source", "Pedestrian-Detector", "Pedestrian-Tracker", "Attr-Recognizer", "M1"):
            stack.start_host(module_id)
        task_id = stack.submit(graph)
        results = stack.wait_results(task_id, 5)
        m1 = next(r for r in results if r.node_id == 4)
        tracker = next(r for r in results if r.node_id == 2)
        attrs = next(r for r in results if r.node_id == 3)
        # node 4 joined node 2's tracks (arriving on M1-Pedestrian-Track) with
        # node 3's attributes (arriving on M1-Pedestrian-Attribute)
        assert m1.records == tracker.records + attrs.records
