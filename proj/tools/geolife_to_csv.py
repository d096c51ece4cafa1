#!/usr/bin/env python3
"""Convert the Geo-Life 1.3 release (Data/<user>/Trajectory/*.plt) to the
records CSV read by `geotok preprocess`: user_id,timestamp,lat,lon[,label].

PLT rows after the 6-line header are
    lat, lon, 0, altitude_ft, days_since_1899, date, time
and are taken as UTC. With --labels, users that ship a labels.txt get the
transport mode of the covering interval as the record label; records outside
any interval are left unlabeled.
"""

import argparse
import bisect
import csv
import sys
from datetime import datetime, timezone
from pathlib import Path

PLT_HEADER_LINES = 6


def utc_seconds(date: str, time: str) -> int:
    dt = datetime.strptime(f"{date} {time}", "%Y-%m-%d %H:%M:%S").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def read_labels(path: Path):
    """Sorted (start, end, mode) intervals from a user's labels.txt."""
    spans = []
    with path.open() as f:
        next(f, None)
        for line in f:
            parts = line.strip().split("\t")
            if len(parts) != 3:
                continue
            start = utc_seconds(*parts[0].replace("/", "-").split(" "))
            end = utc_seconds(*parts[1].replace("/", "-").split(" "))
            spans.append((start, end, parts[2]))
    spans.sort()
    return spans


def label_at(spans, starts, ts):
    i = bisect.bisect_right(starts, ts) - 1
    if i >= 0 and spans[i][0] <= ts <= spans[i][1]:
        return spans[i][2]
    return ""


def convert(root: Path, out, with_labels: bool, bbox):
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["user_id", "timestamp", "lat", "lon"] + (["label"] if with_labels else []))
    users = sorted(p for p in root.iterdir() if (p / "Trajectory").is_dir())
    written = skipped = 0
    for user in users:
        spans = read_labels(user / "labels.txt") if with_labels and (user / "labels.txt").exists() else []
        starts = [s[0] for s in spans]
        for plt in sorted((user / "Trajectory").glob("*.plt")):
            with plt.open() as f:
                for _ in range(PLT_HEADER_LINES):
                    next(f, None)
                for line in f:
                    parts = line.strip().split(",")
                    if len(parts) < 7:
                        skipped += 1
                        continue
                    try:
                        lat, lon = float(parts[0]), float(parts[1])
                        ts = utc_seconds(parts[5], parts[6])
                    except ValueError:
                        skipped += 1
                        continue
                    if not (-90 <= lat <= 90 and -180 <= lon <= 180) or ts <= 0:
                        skipped += 1
                        continue
                    if bbox and not (bbox[0] <= lat <= bbox[2] and bbox[1] <= lon <= bbox[3]):
                        skipped += 1
                        continue
                    row = [user.name, ts, f"{lat:.6f}", f"{lon:.6f}"]
                    if with_labels:
                        row.append(label_at(spans, starts, ts))
                    writer.writerow(row)
                    written += 1
    return len(users), written, skipped


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_dir", type=Path, help="the Geo-Life 'Data' directory")
    ap.add_argument("-o", "--output", type=Path, help="output CSV (default stdout)")
    ap.add_argument("--labels", action="store_true", help="attach transport-mode labels where available")
    ap.add_argument("--bbox", type=float, nargs=4, metavar=("LAT0", "LON0", "LAT1", "LON1"),
                    help="keep only records inside this box, e.g. 39.4 115.4 41.1 117.5 for Beijing")
    args = ap.parse_args()
    if not args.data_dir.is_dir():
        sys.exit(f"error: {args.data_dir} is not a directory")
    out = args.output.open("w", newline="") if args.output else sys.stdout
    try:
        users, written, skipped = convert(args.data_dir, out, args.labels, args.bbox)
    finally:
        if args.output:
            out.close()
    print(f"{users} users, {written} records written, {skipped} skipped", file=sys.stderr)


if __name__ == "__main__":
    main()
