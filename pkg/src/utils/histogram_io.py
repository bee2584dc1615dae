#!/usr/bin/env python3
"""
Histogram I/O - text formats exchanged between commands

Every file starts with `# key = value` header lines stating units, followed by
tab-separated columns. Floats are written with full precision so files
round-trip exactly.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from src.core.errors import InvalidParamsError, ParseError
from src.core.pair_simulator import EventStream, Histogram

logger = logging.getLogger(__name__)

HISTOGRAM_FORMAT = "opo-pairs histogram v1"
SPACING_TOLERANCE = 1e-9


def _header_lines(header: Mapping[str, object]) -> str:
    return "".join(f"# {key} = {value}\n" for key, value in header.items())


def _ensure_dir(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def parse_header_line(line: str) -> Optional[Tuple[str, str]]:
    """('key', 'value') for a `# key = value` line, None for a plain comment"""
    body = line.lstrip("#").strip()
    if "=" not in body:
        return None
    key, value = body.split("=", 1)
    return key.strip(), value.strip()


@dataclass
class HistogramFile:
    """A coincidence histogram with its provenance header

    Columns are bin_center_ns and counts. Bins must be uniform.
    """

    histogram: Histogram
    header: Dict[str, str] = field(default_factory=dict)

    def dumps(self) -> str:
        h = self.histogram
        if not h.is_integral:
            raise InvalidParamsError("histogram files hold integer counts only", field="counts")
        header = {
            "format": HISTOGRAM_FORMAT,
            "columns": "bin_center_ns counts",
            "bin_width_ps": repr(h.bin_width * 1e12),
            "n_bins": len(h.counts),
            "total_counts": h.total,
        }
        header.update({k: v for k, v in self.header.items() if k not in header})
        rows = "".join(f"{c!r}\t{n}\n" for c, n in zip((h.centers * 1e9).tolist(), h.counts.tolist()))
        return _header_lines(header) + rows

    def write(self, path: str) -> None:
        _ensure_dir(path)
        with open(path, "w") as f:
            f.write(self.dumps())
        logger.info("wrote %d bins to %s", len(self.histogram.counts), path)

    @classmethod
    def loads(cls, text: str) -> "HistogramFile":
        header: Dict[str, str] = {}
        centers, counts, lines = [], [], []
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                item = parse_header_line(line)
                if item:
                    header[item[0]] = item[1]
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 2 columns, found {len(parts)}", line=number)
            try:
                center = float(parts[0])
            except ValueError:
                raise ParseError(f"bad bin center '{parts[0]}'", line=number, field="bin_center_ns")
            try:
                count = int(parts[1])
            except ValueError:
                raise ParseError(f"counts must be integers, got '{parts[1]}'", line=number, field="counts")
            if count < 0:
                raise ParseError(f"negative count {count}", line=number, field="counts")
            centers.append(center)
            counts.append(count)
            lines.append(number)

        if len(centers) < 2:
            raise ParseError("histogram needs at least two bins")
        centers_ns = np.array(centers)
        steps = np.diff(centers_ns)
        bad = np.flatnonzero(steps <= 0)
        if bad.size:
            raise ParseError("non-monotone bins", line=lines[bad[0] + 1], field="bin_center_ns")
        width = (centers_ns[-1] - centers_ns[0]) / (len(centers_ns) - 1)
        uneven = np.flatnonzero(np.abs(steps - width) > SPACING_TOLERANCE * width)
        if uneven.size:
            raise ParseError("bins are not uniformly spaced", line=lines[uneven[0] + 1], field="bin_center_ns")

        edges_ns = centers_ns[0] - 0.5 * width + width * np.arange(len(centers_ns) + 1)
        histogram = Histogram(edges_ns * 1e-9, np.array(counts, dtype=np.int64), dict(header))
        return cls(histogram=histogram, header=header)

    @classmethod
    def read(cls, path: str) -> "HistogramFile":
        with open(path) as f:
            result = cls.loads(f.read())
        logger.debug("read %d bins from %s", len(result.histogram.counts), path)
        return result


def write_curve(path: str, tau: np.ndarray, values: np.ndarray,
                header: Optional[Mapping[str, object]] = None, value_name: str = "value") -> None:
    """Two-column tau_ns<TAB>value file, tau given in seconds"""
    _ensure_dir(path)
    lines = {"columns": f"tau_ns {value_name}"}
    lines.update(header or {})
    with open(path, "w") as f:
        f.write(_header_lines(lines))
        for t, v in zip((np.asarray(tau) * 1e9).tolist(), np.asarray(values, dtype=float).tolist()):
            f.write(f"{t!r}\t{v!r}\n")
    logger.info("wrote %d curve samples to %s", len(tau), path)


def read_curve(path: str) -> Tuple[np.ndarray, np.ndarray, Dict[str, str]]:
    """Inverse of write_curve; returns tau in seconds"""
    header: Dict[str, str] = {}
    tau, values = [], []
    with open(path) as f:
        for number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                item = parse_header_line(line)
                if item:
                    header[item[0]] = item[1]
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 2 columns, found {len(parts)}", line=number)
            try:
                tau.append(float(parts[0]))
                values.append(float(parts[1]))
            except ValueError:
                raise ParseError(f"bad number in '{line}'", line=number)
    return np.array(tau) * 1e-9, np.array(values), header


def write_events(path: str, events: EventStream, header: Optional[Mapping[str, object]] = None) -> None:
    """Raw event dump: detector_id<TAB>timestamp_ns"""
    _ensure_dir(path)
    lines = {"columns": "detector_id timestamp_ns", "n_events": len(events)}
    lines.update(header or {})
    data = np.column_stack((events.detector_ids, events.timestamps * 1e9))
    np.savetxt(path, data, fmt=("%d", "%.17g"), delimiter="\t",
               header=_header_lines(lines).rstrip("\n"), comments="")
    logger.info("wrote %d events to %s", len(events), path)


def read_events(path: str) -> EventStream:
    header: Dict[str, str] = {}
    with open(path) as f:
        for raw in f:
            if not raw.startswith("#"):
                break
            item = parse_header_line(raw)
            if item:
                header[item[0]] = item[1]
    try:
        data = np.loadtxt(path, comments="#", delimiter="\t", ndmin=2)
    except ValueError as e:
        raise ParseError(f"malformed event dump {path}: {e}")
    if data.size == 0:
        return EventStream(np.zeros(0, dtype=np.int64), np.zeros(0), header)
    if data.shape[1] != 2:
        raise ParseError(f"expected 2 columns, found {data.shape[1]}")
    ids = data[:, 0]
    if not np.all(ids == np.round(ids)):
        raise ParseError("detector ids must be integers", field="detector_id")
    return EventStream(ids.astype(np.int64), data[:, 1] * 1e-9, header)


def write_report(path: str, values: Mapping[str, object]) -> None:
    """Flat machine-readable `key = value` report"""
    _ensure_dir(path)
    with open(path, "w") as f:
        for key, value in values.items():
            f.write(f"{key} = {value!r}\n" if isinstance(value, float) else f"{key} = {value}\n")


def read_report(path: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    with open(path) as f:
        for number, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            item = parse_header_line(line)
            if item is None:
                raise ParseError("expected 'key = value'", line=number)
            values[item[0]] = item[1]
    return values


def config_header(config_text: str, extra: Optional[Mapping[str, object]] = None) -> Dict[str, str]:
    """Header entries embedding a serialized RunConfig"""
    header: Dict[str, str] = {}
    for line in config_text.splitlines():
        item = parse_header_line(line)
        if item:
            header[item[0]] = item[1]
    for key, value in (extra or {}).items():
        header[key] = repr(value) if isinstance(value, float) else str(value)
    return header


def header_config_text(header: Mapping[str, str], keys: Iterable[str]) -> str:
    """Pick the RunConfig keys back out of a file header"""
    return "".join(f"{k} = {header[k]}\n" for k in keys if k in header)
