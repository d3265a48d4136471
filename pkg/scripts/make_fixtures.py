"""Regenerate the fixture scenes, episodes and RGB-D frames under fixtures/.

Deterministic: running it twice produces identical files.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from conav.scene import Scene, dump_scene, scene_from_dict

ROOT = Path(__file__).resolve().parents[1] / "fixtures"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def scene_dict(sid, positions, edges, extra=None):
    d = {
        "scene_id": sid,
        "viewpoints": [{"id": k, "position": list(map(float, v))} for k, v in positions.items()],
        "edges": [[u, v] for u, v in edges] + [[v, u] for u, v in edges],
    }
    if extra:
        d.update(extra)
    return d


def fixture8():
    # two rooms joined by a corridor; h0 is a hub of degree 4
    pos = {
        "a0": (0.0, 0.0, 0.0),
        "a1": (2.0, 0.0, 0.0),
        "a2": (0.0, 2.5, 0.0),
        "h0": (2.0, 2.5, 0.0),
        "c0": (5.0, 2.5, 0.2),
        "b0": (8.0, 2.5, 0.2),
        "b1": (8.0, 5.5, 0.2),
        "b2": (10.5, 5.5, 0.2),
    }
    edges = [
        ("a0", "a1"), ("a0", "a2"), ("a1", "h0"), ("a2", "h0"),
        ("h0", "c0"), ("h0", "b1"), ("c0", "b0"), ("b0", "b1"), ("b1", "b2"),
    ]
    return scene_dict("fixture8", pos, edges)


def line(sid, n, spacing):
    pos = {f"n{i}": (spacing * i, 0.0, 0.0) for i in range(n)}
    edges = [(f"n{i}", f"n{i + 1}") for i in range(n - 1)]
    return scene_dict(sid, pos, edges)


def detour_trap():
    # greedy picks b (closer to goal by geodesic) although a->c->g is shorter
    pos = {"a": (0.0, 0.0, 0.0), "c": (1.0, 0.0, 0.0), "b": (6.0, 8.0, 0.0), "g": (10.0, 0.0, 0.0)}
    edges = [("a", "c"), ("c", "g"), ("a", "b"), ("b", "g")]
    return scene_dict("detour_trap", pos, edges)


def random_scene(sid, n, rng):
    pts = rng.uniform(0, 12, size=(n, 2))
    pos = {f"{sid}_v{i}": (float(x), float(y), 0.0) for i, (x, y) in enumerate(pts)}
    ids = list(pos)
    edges = set()
    # random spanning tree then a few shortcut edges
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges.add((ids[j], ids[i]))
    for _ in range(n // 2):
        i, j = rng.choice(n, size=2, replace=False)
        u, v = ids[min(i, j)], ids[max(i, j)]
        edges.add((u, v))
    return scene_dict(sid, pos, sorted(edges))


def episode(eid, scene: Scene, start, goal, instruction, task_kind="VLN"):
    path = scene.shortest_path(start, goal)
    return {
        "id": eid,
        "scene_id": scene.id,
        "start": start,
        "goal": goal,
        "instruction": instruction,
        "gt_path": path,
        "gt_path_length": scene.path_length(path),
        "task_kind": task_kind,
    }


INSTRUCTIONS = [
    "Walk straight toward the bar with the chairs. Turn left and wait near the couch.",
    "Exit the bedroom, go down the hallway and stop at the top of the stairs.",
    "Go past the kitchen island and stop next to the fridge.",
    "Turn right at the sofa and walk into the bathroom with blue and white tiles.",
    "Head through the doorway and wait beside the dining table.",
]


def camera_pose(position, heading_rad, height=1.5):
    # camera axes: x right, y down, z forward; world z is up
    fwd = np.array([math.sin(heading_rad), math.cos(heading_rad), 0.0])
    right = np.array([math.cos(heading_rad), -math.sin(heading_rad), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2] = right, down, fwd
    pose[:3, 3] = np.asarray(position) + np.array([0.0, 0.0, height])
    return pose


def synth_frame(h, w, seed):
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:h, 0:w]
    depth = 3.0 + 0.01 * u + 0.005 * v
    box = (v > h // 3) & (v < 2 * h // 3) & (u > w // 4) & (u < w // 2)
    depth[box] = 1.6
    depth[:4, :] = 0.0  # missing readings along the top rows
    depth[rng.random((h, w)) < 0.02] = np.nan
    rgb = np.stack([(u * 255) // (w - 1), (v * 255) // (h - 1), np.full_like(u, 90)], axis=-1).astype(np.uint8)
    rgb[box] = (200, 40, 40)
    floor = v >= 2 * h // 3
    return rgb, depth.astype(np.float32), {"box": box, "floor": floor & ~box}


def rgbd_scene():
    h, w = 96, 128
    cam = {"fx": 100.0, "fy": 100.0, "cx": 64.0, "cy": 48.0, "width": w, "height": h}
    frames_dir = ROOT / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    positions = {"r0": (0.0, 0.0, 0.0), "r1": (2.5, 0.0, 0.0)}
    vps = []
    for k, (vid, p) in enumerate(positions.items()):
        frames = []
        for heading in (0, 6):
            rgb, depth, masks = synth_frame(h, w, seed=10 * k + heading)
            stem = f"{vid}_h{heading}"
            np.save(frames_dir / f"{stem}_rgb.npy", rgb)
            np.save(frames_dir / f"{stem}_depth.npy", depth)
            np.savez(frames_dir / f"{stem}_masks.npz", **masks)
            pose = camera_pose(p, heading * 2 * math.pi / 12)
            frames.append({
                "heading": heading,
                "rgb_path": f"../frames/{stem}_rgb.npy",
                "depth_path": f"../frames/{stem}_depth.npy",
                "camera": {**cam, "pose": pose.ravel().tolist()},
            })
        vps.append({"id": vid, "position": list(p), "frames": frames})
    return {"scene_id": "room_rgbd", "viewpoints": vps, "edges": [["r0", "r1"], ["r1", "r0"]]}


def external_ply(path: Path):
    """A binary PLY in a layout our writer never produces (normals, float64 xyz)."""
    rng = np.random.default_rng(7)
    n = 37
    xyz = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    col = rng.integers(0, 256, size=(n, 3))
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment exported by a mesh tool\n"
        f"element vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "element face 0\nproperty list uchar int vertex_indices\nend_header\n"
    )
    body = b"".join(
        struct.pack("<dddfffBBB", *xyz[i], *nrm[i], *map(int, col[i])) for i in range(n)
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header.encode("ascii") + body)


# answer templates with the action each one is written to mean:
# ("stop",), ("idx", i) for the i-th candidate (1-based), ("id",) for the
# substituted candidate id, ("fail",) for text that names nothing
ANSWER_TEMPLATES = [
    ("stop", ("stop",)),
    ("STOP", ("stop",)),
    ("I will stop here.", ("stop",)),
    ("Stop. The goal is reached.", ("stop",)),
    ("Don't stop, go to {id}", ("stop",)),
    ("{n}", ("idx",)),
    ("({L})", ("idx",)),
    ("{L}.", ("idx",)),
    ("I choose option {n}", ("idx",)),
    ("Candidate {n} looks right", ("idx",)),
    ("direction #{n}", ("idx",)),
    ("My choice {n}: it leads to the hallway", ("idx",)),
    ("Go to {id}", ("id",)),
    ("The answer is {id}.", ("id",)),
    ("goto:{id}", ("id",)),
    ("I'd head towards {ID} next", ("id",)),
    ("There is a stopwatch on the table", ("fail",)),
    ("Turn left at the sofa", ("fail",)),
    ("option 9", ("fail",)),
    ("", ("fail",)),
]

CANDIDATE_SETS = [
    ["vp1", "vp2", "vp12"],
    ["a3f9", "b771", "c002", "d5"],
    ["kitchen_1", "hall"],
    ["n0", "n2", "n4", "n6", "n8"],
    ["x"],
]


def parse_corpus(rng):
    rows = []
    while len(rows) < 200:
        text, label = ANSWER_TEMPLATES[len(rows) % len(ANSWER_TEMPLATES)]
        cands = CANDIDATE_SETS[int(rng.integers(len(CANDIDATE_SETS)))]
        i = int(rng.integers(1, len(cands) + 1))
        cid = cands[int(rng.integers(len(cands)))]
        raw = text.format(n=i, L="ABCDE"[i - 1], id=cid, ID=cid.upper())
        if label[0] == "stop":
            expected = "stop"
        elif label[0] == "idx":
            expected = f"goto:{cands[i - 1]}"
        elif label[0] == "id":
            expected = f"goto:{cid}"
        else:
            expected = None
        rows.append({"raw": raw, "candidates": cands, "expected": expected})
    return rows


def main():
    rng = np.random.default_rng(2024)
    scenes_dir = ROOT / "scenes"
    scenes = {}
    for d in [fixture8(), line("line3", 3, 1.0), line("line5", 5, 5.0), detour_trap()]:
        s = scene_from_dict(d)
        dump_scene(s, scenes_dir / f"{s.id}.json")
        scenes[s.id] = s

    pack_scenes = []
    for i, n in enumerate((6, 8, 9, 10)):
        s = scene_from_dict(random_scene(f"pack{i}", n, rng))
        dump_scene(s, scenes_dir / "pack" / f"{s.id}.json")
        pack_scenes.append(s)

    rgbd = scene_from_dict(rgbd_scene(), base_dir=scenes_dir)
    dump_scene(rgbd, scenes_dir / f"{rgbd.id}.json")

    eps = []
    for k in range(20):
        s = pack_scenes[k % len(pack_scenes)]
        ids = sorted(s.viewpoints)
        a, b = rng.choice(len(ids), size=2, replace=False)
        eps.append(episode(f"pack-{k:02d}", s, ids[a], ids[b], INSTRUCTIONS[k % len(INSTRUCTIONS)]))
    write_json(ROOT / "episodes" / "pack20.json", eps)

    f8 = scenes["fixture8"]
    write_json(ROOT / "episodes" / "fixture8.json", [
        episode("f8-corner", f8, "a0", "b2", INSTRUCTIONS[0]),
        episode("f8-short", f8, "a1", "c0", INSTRUCTIONS[1]),
        episode("f8-qa", f8, "a2", "b0", "In what part of the room is the long table located?", "SpatialQA"),
    ])
    write_json(ROOT / "episodes" / "misc.json", [
        episode("line5-walk", scenes["line5"], "n0", "n4", INSTRUCTIONS[2]),
        episode("trap", scenes["detour_trap"], "a", "g", INSTRUCTIONS[3]),
        episode("rgbd-hop", rgbd, "r0", "r1", INSTRUCTIONS[4]),
    ])
    write_json(ROOT / "beliefs" / "scripted.json", {
        "0": "A bathroom with blue and white tiles on the walls.",
        "1": "A hallway with a wooden floor leads to a bedroom on the left.",
        "3": "The couch is to the right of the dining table.",
    })
    external_ply(ROOT / "external" / "tool_export.ply")
    corpus = parse_corpus(np.random.default_rng(99))
    (ROOT / "parse_corpus.jsonl").write_text("".join(json.dumps(r) + "\n" for r in corpus))


if __name__ == "__main__":
    main()
