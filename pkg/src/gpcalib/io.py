"""File formats: observation CSV, posterior-band CSV, result JSON, and
the flat key=value run configuration.

Observation CSV, one row per (channel, profile) observation:
    channel_id,position,profile_id,value,mask
mask is 0 or 1; masked-out rows are retained (manually flagged outliers)
but excluded from inference. Positions must agree across profiles for a
given channel_id. Numbers are serialized with 17 significant digits so a
round trip is lossless.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import ProfileSet, validate

__all__ = [
    "FORMAT_VERSION",
    "IngestError",
    "emit_csv",
    "ingest",
    "write_band_csv",
    "write_json",
    "read_config_file",
]

FORMAT_VERSION = "1"
CSV_HEADER = ["channel_id", "position", "profile_id", "value", "mask"]


class IngestError(Exception):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def emit_csv(ps: ProfileSet, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for i, cid in enumerate(ps.channel_ids):
            for j, pid in enumerate(ps.profile_ids):
                w.writerow([cid, _fmt(ps.positions[i]), pid,
                            _fmt(ps.data[i, j]), int(ps.mask[i, j])])


def ingest(path) -> ProfileSet:
    """Parse an observation CSV into a ProfileSet, sorted by position.

    Malformed rows raise IngestError with the line number; an invalid
    resulting ProfileSet raises IngestError listing the violations.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"input file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise IngestError(
                f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise IngestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            cid, pos_s, pid, val_s, mask_s = (f.strip() for f in row)
            try:
                pos = float(pos_s)
                val = float(val_s)
            except ValueError:
                raise IngestError(f"{path}:{lineno}: non-numeric position or value") from None
            if mask_s not in ("0", "1"):
                raise IngestError(f"{path}:{lineno}: mask must be 0 or 1, got {mask_s!r}")
            rows.append((lineno, cid, pos, pid, val, mask_s == "1"))
    if not rows:
        raise IngestError(f"{path}: no observations")

    chan_pos: dict[str, float] = {}
    chan_line: dict[str, int] = {}
    profile_order: list[str] = []
    for lineno, cid, pos, pid, _, _ in rows:
        if cid in chan_pos:
            if chan_pos[cid] != pos:
                raise IngestError(
                    f"{path}:{lineno}: channel {cid} position {pos!r} disagrees "
                    f"with line {chan_line[cid]} ({chan_pos[cid]!r})")
        else:
            chan_pos[cid] = pos
            chan_line[cid] = lineno
        if pid not in profile_order:
            profile_order.append(pid)

    channels = sorted(chan_pos, key=lambda c: chan_pos[c])
    ci = {c: i for i, c in enumerate(channels)}
    pj = {p: j for j, p in enumerate(profile_order)}
    n, m = len(channels), len(profile_order)
    data = np.full((n, m), np.nan)
    mask = np.zeros((n, m), dtype=bool)
    seen = np.zeros((n, m), dtype=bool)
    for lineno, cid, _, pid, val, mk in rows:
        i, j = ci[cid], pj[pid]
        if seen[i, j]:
            raise IngestError(f"{path}:{lineno}: duplicate observation for "
                              f"channel {cid}, profile {pid}")
        seen[i, j] = True
        data[i, j] = val
        mask[i, j] = mk
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise IngestError(f"{path}: missing observation for channel "
                          f"{channels[i]}, profile {profile_order[j]}")
    ps = ProfileSet(
        positions=np.array([chan_pos[c] for c in channels]),
        data=data, mask=mask,
        channel_ids=channels, profile_ids=profile_order,
    )
    violations = validate(ps)
    if violations:
        raise IngestError(f"{path}: invalid profile set: " + "; ".join(violations))
    return ps


def write_band_csv(path, grid, profile_ids, median, lower, upper) -> None:
    """Posterior band CSV: position plus median/lower95/upper95 per profile."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        header = ["position"]
        for pid in profile_ids:
            header += [f"{pid}_median", f"{pid}_lower95", f"{pid}_upper95"]
        w.writerow(["# format_version", FORMAT_VERSION])
        w.writerow(header)
        for g in range(len(grid)):
            row = [_fmt(grid[g])]
            for j in range(len(profile_ids)):
                row += [_fmt(median[j, g]), _fmt(lower[j, g]), _fmt(upper[j, g])]
            w.writerow(row)


def write_json(path, payload: dict) -> None:
    payload = {"format_version": FORMAT_VERSION, **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_config_file(path) -> dict[str, str]:
    """Flat key=value configuration file; '#' starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out
