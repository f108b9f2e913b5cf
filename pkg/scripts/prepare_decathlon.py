"""Convert the 1988 Olympic decathlon file ``olympic.dat`` to CSV.

The source is the whitespace-separated table of 34 decathletes from Hand et
al., *A Handbook of Small Data Sets* (1994), p. 304, distributed as
``olympic.dat`` (columns: 100 m, long jump, shot put, high jump, 400 m,
110 m hurdles, discus, pole vault, javelin, 1500 m, total score). It is not
redistributed here.

Usage::

    python3 scripts/prepare_decathlon.py olympic.dat tests/data/decathlon.csv
"""
import csv
import sys

COLUMNS = [
    "run100", "long_jump", "shot_put", "high_jump", "run400",
    "hurdles", "discus", "pole_vault", "javelin", "run1500", "score",
]


def convert(src, dst):
    rows = []
    with open(src, encoding="utf-8") as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            if len(fields) != len(COLUMNS):
                raise SystemExit(f"{src}: expected {len(COLUMNS)} fields, got {len(fields)}: {line!r}")
            rows.append([float(f) for f in fields])
    with open(dst, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        w.writerows(rows)
    return len(rows)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    print(f"wrote {convert(sys.argv[1], sys.argv[2])} rows")
