"""Processor plugin contract and deterministic toy vision stages.

A processor is the external algorithm a module runs on the data delivered to
it. Real models are out of scope here: each stage below is a small pure
function over synthetic data, so pipeline tests have exact expected outputs.
The five stages compose into a miniature person-search pipeline:

    Trigger -> Frame -> Pedestrian-BBox -> Pedestrian-Track
            -> Pedestrian-Attribute -> ReID-Rank

Records inside payloads are canonical JSON objects (sorted keys, compact
separators), one per record, so byte-identical output follows from value
equality. Processors register in an in-process registry keyed by
processor_id; hosts look them up by the id named in the module descriptor.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, replace
from typing import Callable

from vpe.errors import VpeError
from vpe.flowgraph import Payload

# Inputs arrive keyed by producer node_id (-1 for the injected source
# sentinel); params are the node's key=value pairs as a dict.
ProcessorFn = Callable[[dict[str, str], bytes, dict[int, Payload]], list[Payload]]

ATTRIBUTE_VOCAB = (
    "male",
    "longhair",
    "backpack",
    "hat",
    "glasses",
    "shorts",
    "skirt",
    "bag",
    "coat",
    "sneakers",
)

OBJECT_ID_POOL = range(1, 9)
LABELS = ("person", "car")


@dataclass(frozen=True)
class ProcessorContract:
    processor_id: str
    accepts: frozenset[str]
    produces: frozenset[str]
    fn: ProcessorFn
    pure: bool = True

    def __call__(self, params: dict[str, str], extra_data: bytes, inputs: dict[int, Payload]) -> list[Payload]:
        for payload in inputs.values():
            if payload.datatype not in self.accepts:
                raise VpeError(
                    "TYPE_MISMATCH",
                    f"{self.processor_id} accepts {sorted(self.accepts)}, got {payload.datatype!r}",
                )
        return self.fn(params, extra_data, inputs)


_REGISTRY: dict[str, ProcessorContract] = {}


def register(contract: ProcessorContract) -> ProcessorContract:
    _REGISTRY[contract.processor_id] = contract
    return contract


def get_processor(processor_id: str) -> ProcessorContract:
    try:
        return _REGISTRY[processor_id]
    except KeyError:
        raise VpeError("UNKNOWN_PROCESSOR", f"no processor registered as {processor_id!r}") from None


def all_processors() -> list[ProcessorContract]:
    return sorted(_REGISTRY.values(), key=lambda c: c.processor_id)


def record_bytes(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _int_param(params: dict[str, str], key: str, default: int) -> int:
    raw = params.get(key)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        raise VpeError("BAD_PARAM", f"{key}={raw!r} is not an integer") from None


def _merged_records(inputs: dict[int, Payload]) -> list[dict]:
    """All input records in producer order, parsed from canonical JSON."""
    out = []
    for producer in sorted(inputs):
        for raw in inputs[producer].records:
            try:
                out.append(json.loads(raw.decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise VpeError("BAD_RECORD", f"undecodable record from node {producer}: {e}") from None
    return out


# --- stage implementations -------------------------------------------------- #


def _frame_source(params: dict[str, str], extra_data: bytes, inputs: dict[int, Payload]) -> list[Payload]:
    count = _int_param(params, "count", 3)
    seed = _int_param(params, "seed", 0)
    if count < 0:
        raise VpeError("BAD_PARAM", f"count={count} must be >= 0")
    rng = random.Random(seed)
    records = []
    for frame_index in range(count):
        ids = sorted(rng.sample(OBJECT_ID_POOL, rng.randint(0, 4)))
        objects = [
            {
                "object_id": oid,
                "x": rng.randrange(256),
                "y": rng.randrange(256),
                "label": LABELS[0] if rng.random() < 0.8 else LABELS[1],
            }
            for oid in ids
        ]
        records.append(record_bytes({"frame_index": frame_index, "objects": objects}))
    return [Payload(datatype="Frame", records=tuple(records))]


def _detector(params: dict[str, str], extra_data: bytes, inputs: dict[int, Payload]) -> list[Payload]:
    records = []
    for frame in _merged_records(inputs):
        for obj in frame["objects"]:
            if obj["label"] == "person":
                records.append(
                    record_bytes(
                        {
                            "frame_index": frame["frame_index"],
                            "object_id": obj["object_id"],
                            "x": obj["x"],
                            "y": obj["y"],
                            "label": "person",
                        }
                    )
                )
    return [Payload(datatype="Pedestrian-BBox", records=tuple(records))]


def _tracker(params: dict[str, str], extra_data: bytes, inputs: dict[int, Payload]) -> list[Payload]:
    tracks: dict[int, list[dict]] = {}
    for bbox in _merged_records(inputs):
        tracks.setdefault(bbox["object_id"], []).append(
            {"frame_index": bbox["frame_index"], "x": bbox["x"], "y": bbox["y"]}
        )
    records = tuple(
        record_bytes(
            {
                "object_id": oid,
                "detections": sorted(tracks[oid], key=lambda d: d["frame_index"]),
            }
        )
        for oid in sorted(tracks)
    )
    return [Payload(datatype="Pedestrian-Track", records=records)]


def attributes_of(object_id: int) -> list[str]:
    """The i-th vocabulary word is present iff the i-th digest byte is odd."""
    digest = hashlib.sha256(str(object_id).encode("ascii")).digest()
    return [word for i, word in enumerate(ATTRIBUTE_VOCAB) if digest[i] % 2 == 1]


def _attr_recognizer(params: dict[str, str], extra_data: bytes, inputs: dict[int, Payload]) -> list[Payload]:
    records = tuple(
        record_bytes({"object_id": track["object_id"], "attributes": attributes_of(track["object_id"])})
        for track in _merged_records(inputs)
    )
    return [Payload(datatype="Pedestrian-Attribute", records=records)]


def parse_attribute_vector(raw: str) -> set[str]:
    attrs = set(raw.split("|")) - {""}
    unknown = attrs - set(ATTRIBUTE_VOCAB)
    if unknown:
        raise VpeError("BAD_PARAM", f"unknown attributes {sorted(unknown)}")
    return attrs


def _reid_ranker(params: dict[str, str], extra_data: bytes, inputs: dict[int, Payload]) -> list[Payload]:
    if "target" not in params:
        raise VpeError("BAD_PARAM", "reid-ranker requires a target attribute vector")
    target = parse_attribute_vector(params["target"])
    candidates = []
    for rec in _merged_records(inputs):
        candidates.append((rec["object_id"], set(rec["attributes"])))
    ordered = sorted(candidates, key=lambda c: (-len(c[1] & target), c[0]))
    records = tuple(
        record_bytes({"rank": rank, "object_id": oid, "score": len(attrs & target)})
        for rank, (oid, attrs) in enumerate(ordered)
    )
    return [Payload(datatype="ReID-Rank", records=records)]


FRAME_SOURCE = register(
    ProcessorContract("frame-source", frozenset({"Trigger"}), frozenset({"Frame"}), _frame_source)
)
DETECTOR = register(
    ProcessorContract("detector", frozenset({"Frame"}), frozenset({"Pedestrian-BBox"}), _detector)
)
TRACKER = register(
    ProcessorContract("tracker", frozenset({"Pedestrian-BBox"}), frozenset({"Pedestrian-Track"}), _tracker)
)
ATTR_RECOGNIZER = register(
    ProcessorContract(
        "attr-recognizer", frozenset({"Pedestrian-Track"}), frozenset({"Pedestrian-Attribute"}), _attr_recognizer
    )
)
REID_RANKER = register(
    ProcessorContract(
        "reid-ranker", frozenset({"Pedestrian-Attribute"}), frozenset({"ReID-Rank"}), _reid_ranker
    )
)

PIPELINE = (FRAME_SOURCE, DETECTOR, TRACKER, ATTR_RECOGNIZER, REID_RANKER)


def retag(outputs: list[Payload], producer_node: int) -> list[Payload]:
    """Stamp outputs with the node that produced them."""
    return [replace(p, producer_node=producer_node) for p in outputs]
