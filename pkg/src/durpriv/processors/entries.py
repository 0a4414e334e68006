"""One row (class, color) per entity that enters the view during this chunk.

Entities already visible in the chunk's first frame are skipped, so a visit spanning several
chunks is counted once.
"""
import json
import sys


def main() -> None:
    header = sys.stdin.readline()
    if not header:
        return
    first_seen = {}
    start = None
    for line in sys.stdin:
        if not line.strip():
            continue
        frame = json.loads(line)
        if start is None:
            start = frame["index"]
        for det in frame["detections"]:
            first_seen.setdefault(det["id"], (frame["index"], det))
    for idx, det in first_seen.values():
        if idx != start:
            print(f"{det['class']}\t{det.get('attrs', {}).get('color', '')}")


if __name__ == "__main__":
    main()
