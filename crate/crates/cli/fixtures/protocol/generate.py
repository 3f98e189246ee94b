"""Regenerates the protocol conformance suite: requests.jsonl and expected.jsonl.

Eight well-formed requests of varying size, structure and prompt mix, then two malformed
ones: a truncated JSON line (no recoverable id) and a pixel buffer that does not match the
declared slice size (id 10).
"""
import base64
import json
import math
import struct
from pathlib import Path

HERE = Path(__file__).parent


def pixels(w, h, f):
    vals = [float(f(x, y)) for y in range(h) for x in range(w)]
    return base64.b64encode(struct.pack("<%df" % len(vals), *vals)).decode()


def point(x, y, pos=True):
    return {"x": x, "y": y, "polarity": "pos" if pos else "neg"}


def request(rid, structure, w, h, spacing, f, points):
    return {
        "request_id": rid,
        "structure": structure,
        "width": w,
        "height": h,
        "spacing": spacing,
        "pixels_b64": pixels(w, h, f),
        "points": points,
    }


def disk(cx, cy, r, inside, outside):
    return lambda x, y: inside if (x - cx) ** 2 + (y - cy) ** 2 <= r * r else outside


valid = [
    request(1, "femur", 3, 2, [1.0, 0.5], lambda x, y: [0.0, 1.5, -2.25, 100.0, 3000.0, 0.125][y * 3 + x],
            [point(1.0, 0.0), point(2.25, 1.0, False)]),
    request(2, "tibia", 8, 8, [1.0, 1.0], lambda x, y: 400.0, [point(4, 4)]),
    request(3, "femoral_cartilage", 16, 12, [0.5, 0.5], disk(8, 6, 4, 1500.0, 50.0),
            [point(8, 6), point(1, 1, False)]),
    request(4, "tibial_cartilage", 12, 16, [0.8, 0.8], lambda x, y: 1500.0 if y < 8 else 400.0,
            [point(3.4, 2.6), point(9.6, 5.1), point(6, 13, False)]),
    request(5, "femur", 1, 1, [1.0, 1.0], lambda x, y: 7.0, [point(0, 0)]),
    request(6, "tibia", 32, 4, [2.0, 2.0], lambda x, y: 100.0 * math.floor(x / 8), [point(0.49, 3.49)]),
    request(7, "femoral_cartilage", 10, 10, [1.0, 1.0], lambda x, y: (x * 37 + y * 11) % 97,
            [point(0, 0), point(9, 9)]),
    request(8, "tibia", 20, 20, [0.3, 0.3], disk(10, 10, 6, 400.0, 1200.0),
            [point(10, 10), point(10, 2, False), point(2, 10, False)]),
]

truncated = json.dumps(request(9, "femur", 4, 4, [1.0, 1.0], lambda x, y: 1.0, [point(1, 1)]))
truncated = truncated[: len(truncated) // 2]
mismatch = request(10, "femur", 4, 4, [1.0, 1.0], lambda x, y: 1.0, [point(1, 1)])
mismatch["pixels_b64"] = pixels(5, 1, lambda x, y: 1.0)

lines = [json.dumps(r, separators=(",", ":")) for r in valid]
lines += [truncated, json.dumps(mismatch, separators=(",", ":"))]
expected = [{"request_id": r["request_id"], "outcome": "mask", "pixels": r["width"] * r["height"]} for r in valid]
expected += [{"request_id": None, "outcome": "error"}, {"request_id": 10, "outcome": "error"}]

(HERE / "requests.jsonl").write_text("\n".join(lines) + "\n")
(HERE / "expected.jsonl").write_text("\n".join(json.dumps(e, separators=(",", ":")) for e in expected) + "\n")
