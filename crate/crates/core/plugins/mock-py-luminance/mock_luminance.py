#!/usr/bin/env python3
"""Luminance mock detector: one JSON object per line on stdin/stdout.

Scores each frame by its mean Rec.601 luma divided by 255. Needs only the
standard library.
"""
import json
import sys

PROTOCOL_VERSION = 1
THRESHOLD = 0.5


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        fields.append(data[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError("expected a binary PPM with maxval 255")
    width, height = int(fields[1]), int(fields[2])
    pixels = data[pos + 1:pos + 1 + 3 * width * height]
    if len(pixels) != 3 * width * height:
        raise ValueError("truncated pixel data")
    return width, height, pixels


def luminance(path):
    width, height, px = read_ppm(path)
    total = 0.0
    for i in range(0, len(px), 3):
        total += 0.299 * px[i] + 0.587 * px[i + 1] + 0.114 * px[i + 2]
    return round(total / (width * height) / 255.0, 6)


def reply(msg):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except ValueError:
            reply({"type": "error", "message": "malformed request"})
            continue
        kind = msg.get("type")
        if kind == "hello":
            reply({"type": "hello_ack", "protocol_version": PROTOCOL_VERSION})
        elif kind == "analyze_frame":
            index = msg.get("frame_index")
            try:
                soft = luminance(msg["frame_path"])
            except (OSError, ValueError, KeyError) as e:
                reply({"type": "error", "frame_index": index, "message": str(e)})
                continue
            reply({
                "type": "frame_score",
                "frame_index": index,
                "soft_label": soft,
                "hard_label": "fake" if soft < THRESHOLD else "real",
                "face_found": True,
            })
        elif kind == "shutdown":
            return 0
        else:
            reply({"type": "error", "message": "unknown message type %r" % kind})
    return 0


if __name__ == "__main__":
    sys.exit(main())
