"""A single row: how many entities enter the view during this chunk."""
import json
import sys


def main() -> None:
    sys.stdin.readline()
    seen = set()
    entered = 0
    start = None
    for line in sys.stdin:
        if not line.strip():
            continue
        frame = json.loads(line)
        if start is None:
            start = frame["index"]
        for det in frame["detections"]:
            if det["id"] not in seen:
                seen.add(det["id"])
                entered += frame["index"] != start
    print(entered)


if __name__ == "__main__":
    main()
