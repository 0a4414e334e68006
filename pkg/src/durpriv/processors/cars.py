"""Plate, color and speed of every car seen in this chunk, one row per car."""
import json
import sys


def main() -> None:
    sys.stdin.readline()
    cars = {}
    for line in sys.stdin:
        if not line.strip():
            continue
        for det in json.loads(line)["detections"]:
            if det["class"] == "car" and det["id"] not in cars:
                cars[det["id"]] = det.get("attrs", {})
    for attrs in cars.values():
        print(f"{attrs.get('plate', '')}\t{attrs.get('color', '')}\t{attrs.get('speed', '0')}")


if __name__ == "__main__":
    main()
