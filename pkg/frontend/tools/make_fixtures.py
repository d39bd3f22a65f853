"""Regenerate tests/fixtures.json from the platform's own encoder.

The console re-implements the canonical graph serialization in TypeScript;
these fixtures pin it byte-for-byte to the Python encoder. Run from this
directory after any codec change:

    PYTHONPATH=../../src python3 make_fixtures.py
"""
from __future__ import annotations

import json
import random
from pathlib import Path

from vpe.flowgraph import FlowGraph, FlowLink, FlowNode, graph_to_json


def canonical(graph: FlowGraph) -> str:
    return json.dumps(graph_to_json(graph), separators=(",", ":"), ensure_ascii=False)


def draft_json(graph: FlowGraph, rng: random.Random) -> dict:
    """The same graph as an *unsorted* editor draft, so the console must
    canonicalize rather than echo."""
    doc = graph_to_json(graph)
    rng.shuffle(doc["nodes"])
    rng.shuffle(doc["links"])
    return doc


def main() -> None:
    rng = random.Random(77)
    fixtures = []

    def add(name: str, graph: FlowGraph) -> None:
        fixtures.append({"name": name, "draft": draft_json(graph, rng), "canonical": canonical(graph)})

    add(
        "single-node",
        FlowGraph(nodes=(FlowNode(0, "Frame-Source", params=(("count", "2"), ("seed", "9"))),)),
    )
    add(
        "fanout-join",
        FlowGraph(
            nodes=(
                FlowNode(0, "Frame-Source", params=(("count", "1"), ("seed", "4"))),
                FlowNode(1, "Pedestrian-Detector"),
                FlowNode(2, "Pedestrian-Tracker"),
            ),
            links=(FlowLink(0, 1), FlowLink(1, 2), FlowLink(0, 2)),
        ),
    )
    add(
        "unicode-params",
        FlowGraph(
            nodes=(
                FlowNode(
                    3,
                    "Attr-Recognizer",
                    params=(
                        ("note", 'quotes " and \\ backslash'),
                        ("city", "東京 città ναι"),
                        ("emoji", "🙂 done"),
                        ("ctrl", "tab\there\nnewline\x01bell"),
                    ),
                ),
            ),
        ),
    )
    add(
        "extra-bytes",
        FlowGraph(
            nodes=(
                FlowNode(0, "Frame-Source", extra_data=bytes(range(0, 48))),
                FlowNode(1, "ReID-Ranker", params=(("target", "male|bag"),), extra_data=b"\xff\xfe\x00"),
            ),
            links=(FlowLink(0, 1),),
        ),
    )
    add(
        "pipeline",
        FlowGraph(
            nodes=(
                FlowNode(0, "Frame-Source", params=(("count", "3"), ("seed", "42"))),
                FlowNode(1, "Pedestrian-Detector"),
                FlowNode(2, "Pedestrian-Tracker"),
                FlowNode(3, "Attr-Recognizer"),
                FlowNode(4, "ReID-Ranker", params=(("target", "male|bag"),)),
            ),
            links=(FlowLink(0, 1), FlowLink(1, 2), FlowLink(2, 3), FlowLink(3, 4)),
        ),
    )

    grow = random.Random(1234)
    nodes = []
    links = []
    for i in range(10):
        params = tuple((f"k{j}", f"v{grow.randrange(1000)}") for j in range(grow.randrange(4)))
        extra = bytes(grow.randrange(256) for _ in range(grow.randrange(8)))
        nodes.append(FlowNode(i, grow.choice(["Frame-Source", "Pedestrian-Detector", "Mod-X"]), params, extra))
        for j in range(i):
            if grow.random() < 0.3:
                links.append(FlowLink(j, i))
    add("ten-node-random", FlowGraph(nodes=tuple(nodes), links=tuple(links)))

    out = Path(__file__).parent.parent / "tests" / "fixtures.json"
    out.write_text(json.dumps(fixtures, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"wrote {out} ({len(fixtures)} fixtures)")


if __name__ == "__main__":
    main()
