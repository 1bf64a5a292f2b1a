"""Append-only estimation-record log.

File format (versioned, line-delimited):

    line 1:  ``gridmesh/records v1``
    line 2+: one JSON object per record, ``\\n``-terminated, UTF-8

Records are immutable once written and keyed by (trigger timestamp,
sequence number). An in-memory index from trigger ``soc`` to byte offsets
is rebuilt by scanning on open, so a log survives process restarts
without sidecar files.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict

HEADER = b"gridmesh/records v1\n"


class RecordLogError(Exception):
    pass


class RecordLog:
    def __init__(self, path):
        self.path = os.fspath(path)
        self._index: dict[int, list[int]] = defaultdict(list)
        self._count = 0
        self._size = 0
        if os.path.exists(self.path) and os.path.getsize(self.path) > 0:
            self._scan()
            self._fh = open(self.path, "ab")
        else:
            self._fh = open(self.path, "wb")
            self._fh.write(HEADER)
            self._fh.flush()
            self._size = len(HEADER)

    def _scan(self) -> None:
        with open(self.path, "rb") as fh:
            header = fh.readline()
            if header != HEADER:
                raise RecordLogError(f"bad log header: {header!r}")
            offset = len(header)
            for line in fh:
                if line.strip():
                    record = json.loads(line)
                    self._index[record["trigger"]["soc"]].append(offset)
                    self._count += 1
                offset += len(line)
            self._size = offset

    def append(self, record: dict) -> None:
        if "trigger" not in record or "soc" not in record["trigger"]:
            raise RecordLogError("record missing trigger.soc")
        line = json.dumps(record, separators=(",", ":")).encode("utf-8") + b"\n"
        self._fh.write(line)
        self._fh.flush()
        self._index[record["trigger"]["soc"]].append(self._size)
        self._size += len(line)
        self._count += 1

    def __len__(self) -> int:
        return self._count

    @staticmethod
    def _load_at(fh, offset: int) -> dict:
        fh.seek(offset)
        return json.loads(fh.readline())

    def records(self) -> list[dict]:
        out = []
        with open(self.path, "rb") as fh:
            for soc in sorted(self._index):
                for offset in self._index[soc]:
                    out.append(self._load_at(fh, offset))
        out.sort(key=lambda r: (r["trigger"]["soc"], r["trigger"]["frac"],
                                r.get("seq", 0)))
        return out

    def query(self, t0: float, t1: float,
              nodes: list[int] | None = None) -> list[dict]:
        """Records with trigger time in [t0, t1), node voltages projected.

        A reversed or empty range yields an empty list.
        """
        if t1 <= t0:
            return []
        wanted = None if nodes is None else {str(n) for n in nodes}
        out = []
        with open(self.path, "rb") as fh:
            for soc in sorted(self._index):
                if soc + 1 <= t0 or soc >= t1:
                    continue
                for offset in self._index[soc]:
                    record = self._load_at(fh, offset)
                    t = record["trigger"]["soc"] + record["trigger"]["frac"] / 1e6
                    if not t0 <= t < t1:
                        continue
                    if wanted is not None and "node_voltages" in record:
                        record = dict(record)
                        record["node_voltages"] = {
                            k: v for k, v in record["node_voltages"].items()
                            if k in wanted
                        }
                    out.append(record)
        out.sort(key=lambda r: (r["trigger"]["soc"], r["trigger"]["frac"],
                                r.get("seq", 0)))
        return out

    def close(self) -> None:
        if self._fh:
            self._fh.flush()
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def records_to_csv(records: list[dict], path) -> None:
    """Flatten node-voltage projections to the delimited export format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("trigger_s,seq,node,vmag_pu,vangle_rad,residual\n")
        for record in records:
            if "node_voltages" not in record:
                continue
            t = record["trigger"]["soc"] + record["trigger"]["frac"] / 1e6
            for node, (re, im) in sorted(record["node_voltages"].items(),
                                         key=lambda kv: int(kv[0])):
                fh.write(f"{t:.6f},{record['seq']},{node},{math.hypot(re, im):.15g},"
                         f"{math.atan2(im, re):.15g},{record['residual']:.15g}\n")
