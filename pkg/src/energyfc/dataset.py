"""Trace ingestion and the feature pipeline.

Raw traces are 100 kHz current samples (10 us pitch).  They are
downsampled a hundredfold to 1 kHz rows holding the sum and the maximum
of each 100-sample block: the sum is proportional to charge per
millisecond, the max keeps short peaks visible.  Rows plus the node's
static features are z-scored into 10-dimensional input vectors, split
70/15/15 in time order per node, and cut into sliding windows.

Targets stay in raw microampere-sum scale; normalization applies to
model inputs only and is always fitted on the training split.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence, TextIO

import numpy as np

from .errors import ConfigError, DataError, ParseError

log = logging.getLogger(__name__)

NODES = ("central", "hr", "bt", "os")
ROLES = ("master", "slave")

RAW_SAMPLE_PERIOD_US = 10
DOWNSAMPLE_FACTOR = 100
ROW_PERIOD_US = RAW_SAMPLE_PERIOD_US * DOWNSAMPLE_FACTOR  # 1 ms rows

RAW_CSV_HEADER = "timestamp_us,current_ua"
DOWNSAMPLED_CSV_HEADER = (
    "timestamp_us,sum_current_ua,max_current_ua,role,nr_connections,"
    "transmission_rate_pps,packet_size_b,node"
)

# Input feature layout (h_in = 10):
#   [z(sum), z(max), role_bit, scaled nr_connections, z(rate), z(packet),
#    one-hot node: central, hr, bt, os]
FEATURE_SIZE = 10


@dataclass(frozen=True)
class NodeMeta:
    """Static per-node features: identity, role, and traffic shape."""

    node: str
    role: str
    nr_connections: int
    transmission_rate_pps: float
    packet_size_b: float

    def __post_init__(self):
        if self.node not in NODES:
            raise ConfigError(f"unknown node {self.node!r}, expected one of {NODES}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}, expected one of {ROLES}")
        if self.node == "central":
            if self.role != "master" or self.nr_connections != 3:
                raise ConfigError("central node must be a master with 3 connections")
        else:
            if self.role != "slave" or self.nr_connections != 1:
                raise ConfigError(f"{self.node} must be a slave with 1 connection")
        if self.transmission_rate_pps < 0 or self.packet_size_b < 0:
            raise ConfigError("transmission rate and packet size must be >= 0")

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "role": self.role,
            "nr_connections": self.nr_connections,
            "transmission_rate_pps": self.transmission_rate_pps,
            "packet_size_b": self.packet_size_b,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeMeta":
        try:
            return cls(
                node=d["node"],
                role=d["role"],
                nr_connections=int(d["nr_connections"]),
                transmission_rate_pps=float(d["transmission_rate_pps"]),
                packet_size_b=float(d["packet_size_b"]),
            )
        except KeyError as e:
            raise DataError(f"node metadata: missing field {e.args[0]!r}") from None


class TraceRow(NamedTuple):
    timestamp_us: int
    sum_current_ua: float
    max_current_ua: float


@dataclass
class RawTrace:
    """100 kHz current samples with implicit timestamps t0 + k * 10 us."""

    meta: NodeMeta
    currents: np.ndarray
    t0_us: int = 0
    sample_period_us: int = RAW_SAMPLE_PERIOD_US
    n_dropped_lines: int = 0

    def __len__(self) -> int:
        return len(self.currents)

    @property
    def duration_s(self) -> float:
        return len(self.currents) * self.sample_period_us / 1e6


@dataclass
class DownsampledTrace:
    """1 kHz rows of (timestamp, per-ms current sum, per-ms current max)."""

    meta: NodeMeta
    timestamps_us: np.ndarray
    sums: np.ndarray
    maxs: np.ndarray

    def __len__(self) -> int:
        return len(self.sums)

    def row(self, k: int) -> TraceRow:
        return TraceRow(int(self.timestamps_us[k]), float(self.sums[k]), float(self.maxs[k]))

    def slice(self, start: int, stop: int) -> "DownsampledTrace":
        return DownsampledTrace(
            self.meta,
            self.timestamps_us[start:stop],
            self.sums[start:stop],
            self.maxs[start:stop],
        )


def parse_raw_trace(source: TextIO | Iterable[str], meta: NodeMeta) -> RawTrace:
    """Parse a raw-trace CSV into a validated RawTrace.

    Expects the exact header and rows of ``timestamp_us,current_ua`` on a
    strict 10 us pitch.  A malformed final line (a partial write) is
    dropped and counted; anything else malformed raises with its line
    number.
    """
    lines = iter(source)
    try:
        header = next(lines).strip()
    except StopIteration:
        raise ParseError("empty file, expected header", line=1) from None
    if header != RAW_CSV_HEADER:
        raise ParseError(f"bad header {header!r}, expected {RAW_CSV_HEADER!r}", line=1)

    currents: list[float] = []
    t0 = 0
    prev_ts = None
    pending: tuple[int, str] | None = None  # (line_no, message) for the previous line
    line_no = 1
    for line_no, line in enumerate(lines, start=2):
        line = line.strip()
        if not line:
            continue
        if pending is not None:
            # The malformed line was not the last one after all.
            raise ParseError(pending[1], line=pending[0])
        parts = line.split(",")
        if len(parts) != 2:
            pending = (line_no, f"expected 2 fields, got {len(parts)}")
            continue
        try:
            ts = int(parts[0])
            cur = float(parts[1])
        except ValueError:
            pending = (line_no, f"malformed row {line!r}")
            continue
        if not np.isfinite(cur):
            raise ParseError(f"non-finite current {parts[1]!r}", line=line_no)
        if cur < 0:
            raise ParseError(f"negative current {cur}", line=line_no)
        if prev_ts is None:
            t0 = ts
        elif ts != prev_ts + RAW_SAMPLE_PERIOD_US:
            raise ParseError(
                f"timestamp {ts} breaks the {RAW_SAMPLE_PERIOD_US} us pitch "
                f"(previous {prev_ts})",
                line=line_no,
            )
        prev_ts = ts
        currents.append(cur)

    dropped = 0
    if pending is not None:
        log.warning("dropped trailing partial line %d: %s", pending[0], pending[1])
        dropped = 1
    return RawTrace(
        meta=meta,
        currents=np.asarray(currents, dtype=np.float64),
        t0_us=t0,
        n_dropped_lines=dropped,
    )


def downsample(raw: RawTrace, factor: int = DOWNSAMPLE_FACTOR) -> DownsampledTrace:
    """Aggregate blocks of ``factor`` raw samples into sum/max rows.

    Row k covers raw samples [k*factor, (k+1)*factor); its timestamp is
    the first raw timestamp of the block.  A trailing remainder shorter
    than ``factor`` is dropped.
    """
    if factor < 1:
        raise ConfigError(f"downsample factor must be >= 1, got {factor}")
    n = len(raw.currents) // factor
    if n == 0:
        empty = np.empty(0, dtype=np.float64)
        return DownsampledTrace(raw.meta, np.empty(0, dtype=np.int64), empty.copy(), empty.copy())
    blocks = raw.currents[: n * factor].reshape(n, factor)
    sums = blocks.sum(axis=1)
    maxs = blocks.max(axis=1)
    step = factor * raw.sample_period_us
    timestamps = raw.t0_us + step * np.arange(n, dtype=np.int64)
    return DownsampledTrace(raw.meta, timestamps, sums, maxs)


# ---------------------------------------------------------------------------
# Normalization and encoding


@dataclass(frozen=True)
class FeatureStat:
    mean: float
    std: float

    @property
    def is_constant(self) -> bool:
        return self.std == 0.0

    def z(self, x):
        """Z-score; a constant feature encodes as 0 after centering."""
        if self.is_constant:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class NormStats:
    """Input normalization fitted on the training split of all nodes."""

    sum_current: FeatureStat
    max_current: FeatureStat
    transmission_rate: FeatureStat
    packet_size: FeatureStat
    nr_connections_max: float

    def to_dict(self) -> dict:
        return {
            "sum_current": {"mean": self.sum_current.mean, "std": self.sum_current.std},
            "max_current": {"mean": self.max_current.mean, "std": self.max_current.std},
            "transmission_rate": {
                "mean": self.transmission_rate.mean,
                "std": self.transmission_rate.std,
            },
            "packet_size": {"mean": self.packet_size.mean, "std": self.packet_size.std},
            "nr_connections_max": self.nr_connections_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        try:
            return cls(
                sum_current=FeatureStat(**d["sum_current"]),
                max_current=FeatureStat(**d["max_current"]),
                transmission_rate=FeatureStat(**d["transmission_rate"]),
                packet_size=FeatureStat(**d["packet_size"]),
                nr_connections_max=float(d["nr_connections_max"]),
            )
        except KeyError as e:
            raise DataError(f"norm_stats: missing field {e.args[0]!r}") from None

    def denormalize_sum(self, z):
        if self.sum_current.is_constant:
            return np.full_like(np.asarray(z, dtype=np.float64), self.sum_current.mean)
        return np.asarray(z, dtype=np.float64) * self.sum_current.std + self.sum_current.mean

    def normalize_sum(self, x):
        return self.sum_current.z(x)


def _population_stat(values: np.ndarray) -> FeatureStat:
    mean = float(np.mean(values))
    std = float(np.std(values))  # population convention, n divisor
    return FeatureStat(mean=mean, std=std)


def fit_normalizer(training_traces: Sequence[DownsampledTrace]) -> NormStats:
    """Global statistics over the training rows of every node.

    Statistics are deliberately not per node: one model serves all nodes,
    so inputs must live on one shared scale.
    """
    traces = list(training_traces)
    if not traces or all(len(t) == 0 for t in traces):
        raise DataError("cannot fit normalizer on an empty training split")
    sums = np.concatenate([t.sums for t in traces])
    maxs = np.concatenate([t.maxs for t in traces])
    # Static features are constant per node; weight them by row count.
    rates = np.concatenate(
        [np.full(len(t), t.meta.transmission_rate_pps) for t in traces]
    )
    packets = np.concatenate([np.full(len(t), t.meta.packet_size_b) for t in traces])
    conn_max = float(max(t.meta.nr_connections for t in traces))
    return NormStats(
        sum_current=_population_stat(sums),
        max_current=_population_stat(maxs),
        transmission_rate=_population_stat(rates),
        packet_size=_population_stat(packets),
        nr_connections_max=conn_max,
    )


def _static_features(meta: NodeMeta, stats: NormStats) -> np.ndarray:
    role_bit = 1.0 if meta.role == "master" else 0.0
    conn = 0.0 if stats.nr_connections_max == 0 else meta.nr_connections / stats.nr_connections_max
    one_hot = [1.0 if meta.node == n else 0.0 for n in NODES]
    return np.array(
        [
            role_bit,
            conn,
            float(stats.transmission_rate.z(meta.transmission_rate_pps)),
            float(stats.packet_size.z(meta.packet_size_b)),
            *one_hot,
        ]
    )


def encode_row(row: TraceRow, meta: NodeMeta, stats: NormStats) -> np.ndarray:
    """One 1 ms row to the fixed 10-feature input vector."""
    out = np.empty(FEATURE_SIZE)
    out[0] = stats.sum_current.z(row.sum_current_ua)
    out[1] = stats.max_current.z(row.max_current_ua)
    out[2:] = _static_features(meta, stats)
    return out


def encode_trace(trace: DownsampledTrace, stats: NormStats) -> np.ndarray:
    """Vectorized :func:`encode_row` over a whole trace: (L, 10)."""
    out = np.empty((len(trace), FEATURE_SIZE))
    out[:, 0] = stats.sum_current.z(trace.sums)
    out[:, 1] = stats.max_current.z(trace.maxs)
    out[:, 2:] = _static_features(trace.meta, stats)
    return out


# ---------------------------------------------------------------------------
# Splitting and windowing


def split_70_15_15(
    trace: DownsampledTrace,
) -> tuple[DownsampledTrace, DownsampledTrace, DownsampledTrace]:
    """Contiguous, order-preserving 70/15/15 split of one node's rows.

    Boundaries are floor(0.70 L) and floor(0.85 L), computed in integer
    arithmetic so no float rounding can shift them.
    """
    n = len(trace)
    i1 = (70 * n) // 100
    i2 = (85 * n) // 100
    return trace.slice(0, i1), trace.slice(i1, i2), trace.slice(i2, n)


@dataclass(frozen=True)
class Sample:
    """One training window: T input rows and the next h_out raw sums."""

    input: np.ndarray     # (t_steps, FEATURE_SIZE)
    target: np.ndarray    # (h_out,), raw microampere sums
    node: str
    t0_us: int            # timestamp of the first target row


class _Segment(NamedTuple):
    node: str
    node_index: int
    encoded: np.ndarray
    raw_sums: np.ndarray
    timestamps: np.ndarray
    n_windows: int


class WindowSet:
    """Sliding windows over one or more contiguous per-node row ranges.

    Windows are materialized lazily: the set stores encoded rows once and
    gathers (input, target) pairs on demand, so stride-1 windowing over
    hundreds of thousands of rows stays cheap.
    """

    def __init__(self, t_steps: int, h_out: int):
        if t_steps < 1 or h_out < 1:
            raise ConfigError("t_steps and h_out must be >= 1")
        self.t_steps = t_steps
        self.h_out = h_out
        self._segments: list[_Segment] = []
        self._offsets = np.zeros(1, dtype=np.int64)

    @classmethod
    def from_traces(
        cls,
        traces: Sequence[DownsampledTrace],
        stats: NormStats,
        t_steps: int,
        h_out: int,
    ) -> "WindowSet":
        ws = cls(t_steps, h_out)
        for trace in traces:
            ws.add_trace(trace, stats)
        return ws

    def add_trace(self, trace: DownsampledTrace, stats: NormStats) -> None:
        n_windows = len(trace) - self.t_steps - self.h_out + 1
        if n_windows < 1:
            log.warning(
                "trace for node %s has %d rows, too short for T=%d + h_out=%d windows",
                trace.meta.node, len(trace), self.t_steps, self.h_out,
            )
            return
        seg = _Segment(
            node=trace.meta.node,
            node_index=NODES.index(trace.meta.node),
            encoded=encode_trace(trace, stats),
            raw_sums=np.asarray(trace.sums, dtype=np.float64),
            timestamps=np.asarray(trace.timestamps_us, dtype=np.int64),
            n_windows=n_windows,
        )
        self._segments.append(seg)
        self._offsets = np.append(self._offsets, self._offsets[-1] + n_windows)

    def __len__(self) -> int:
        return int(self._offsets[-1])

    def _locate(self, index: int) -> tuple[_Segment, int]:
        if index < 0 or index >= len(self):
            raise IndexError(index)
        seg_idx = int(np.searchsorted(self._offsets, index, side="right") - 1)
        return self._segments[seg_idx], index - int(self._offsets[seg_idx])

    def sample(self, index: int) -> Sample:
        seg, local = self._locate(index)
        t = self.t_steps
        return Sample(
            input=seg.encoded[local:local + t].copy(),
            target=seg.raw_sums[local + t:local + t + self.h_out].copy(),
            node=seg.node,
            t0_us=int(seg.timestamps[local + t]),
        )

    def __iter__(self):
        return (self.sample(i) for i in range(len(self)))

    def gather(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batch lookup: inputs (B, T, 10), raw targets (B, h_out), node ids (B,)."""
        indices = np.asarray(indices, dtype=np.int64)
        n = indices.size
        t, h = self.t_steps, self.h_out
        xs = np.empty((n, t, FEATURE_SIZE))
        ys = np.empty((n, h))
        nodes = np.empty(n, dtype=np.int64)
        seg_of = np.searchsorted(self._offsets, indices, side="right") - 1
        if np.any(indices < 0) or np.any(indices >= len(self)):
            raise IndexError("window index out of range")
        t_off = np.arange(t)
        h_off = np.arange(h)
        for s_idx in np.unique(seg_of):
            seg = self._segments[s_idx]
            mask = seg_of == s_idx
            starts = indices[mask] - int(self._offsets[s_idx])
            xs[mask] = seg.encoded[starts[:, None] + t_off]
            ys[mask] = seg.raw_sums[starts[:, None] + t + h_off]
            nodes[mask] = seg.node_index
        return xs, ys, nodes

    @property
    def node_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for seg in self._segments:
            counts[seg.node] = counts.get(seg.node, 0) + seg.n_windows
        return counts


def make_windows(
    trace: DownsampledTrace, stats: NormStats, t_steps: int = 50, h_out: int = 1
) -> WindowSet:
    """Stride-1 sliding windows over one node's contiguous rows.

    Window i uses rows [i, i+T) as input and the sums of rows
    [i+T, i+T+h_out) as its raw-scale target; the count is
    len - T - h_out + 1 (an empty set, with a warning, if negative).
    """
    ws = WindowSet(t_steps, h_out)
    ws.add_trace(trace, stats)
    return ws


# ---------------------------------------------------------------------------
# CSV and sidecar files


def write_raw_csv(trace: RawTrace, path) -> None:
    step = trace.sample_period_us
    with open(path, "w") as fh:
        fh.write(RAW_CSV_HEADER + "\n")
        chunk = 100_000
        for start in range(0, len(trace.currents), chunk):
            block = trace.currents[start:start + chunk]
            ts0 = trace.t0_us + start * step
            lines = [
                f"{ts0 + k * step},{v!r}" for k, v in enumerate(block.tolist())
            ]
            fh.write("\n".join(lines) + "\n")


def write_meta_sidecar(meta: NodeMeta, path) -> None:
    with open(path, "w") as fh:
        json.dump(meta.to_dict(), fh, indent=2)
        fh.write("\n")


def read_meta_sidecar(path) -> NodeMeta:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON: {e}") from None
    try:
        return NodeMeta.from_dict(doc)
    except ConfigError as e:
        raise DataError(f"{path}: {e}") from None


def write_downsampled_csv(trace: DownsampledTrace, path) -> None:
    m = trace.meta
    static = f"{m.role},{m.nr_connections},{m.transmission_rate_pps!r},{m.packet_size_b!r},{m.node}"
    with open(path, "w") as fh:
        fh.write(DOWNSAMPLED_CSV_HEADER + "\n")
        chunk = 100_000
        n = len(trace)
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            ts = trace.timestamps_us[start:stop].tolist()
            sums = trace.sums[start:stop].tolist()
            maxs = trace.maxs[start:stop].tolist()
            lines = [
                f"{t},{s!r},{mx!r},{static}" for t, s, mx in zip(ts, sums, maxs)
            ]
            fh.write("\n".join(lines) + "\n")


def read_downsampled_csv(source, path_label: str = "<stream>") -> list[DownsampledTrace]:
    """Read a downsampled CSV, possibly holding several nodes' rows.

    Returns one trace per node in first-appearance order.  Rows of one
    node must be contiguous in time (strict 1 ms stride) and carry
    constant static features.
    """
    close = False
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        path_label = str(source)
        source = open(source)
        close = True
    try:
        lines = iter(source)
        try:
            header = next(lines).strip()
        except StopIteration:
            raise ParseError(f"{path_label}: empty file", line=1) from None
        if header != DOWNSAMPLED_CSV_HEADER:
            raise ParseError(
                f"{path_label}: bad header, expected {DOWNSAMPLED_CSV_HEADER!r}", line=1
            )
        per_node: dict[str, dict] = {}
        for line_no, line in enumerate(lines, start=2):
            line = line.strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 8:
                raise ParseError(f"{path_label}: expected 8 fields, got {len(parts)}", line=line_no)
            try:
                ts = int(parts[0])
                s = float(parts[1])
                mx = float(parts[2])
                meta = NodeMeta(
                    node=parts[7],
                    role=parts[3],
                    nr_connections=int(float(parts[4])),
                    transmission_rate_pps=float(parts[5]),
                    packet_size_b=float(parts[6]),
                )
            except (ValueError, ConfigError) as e:
                raise ParseError(f"{path_label}: {e}", line=line_no) from None
            bucket = per_node.setdefault(
                meta.node, {"meta": meta, "ts": [], "sums": [], "maxs": []}
            )
            if bucket["meta"] != meta:
                raise ParseError(
                    f"{path_label}: static features changed for node {meta.node}", line=line_no
                )
            if bucket["ts"] and ts != bucket["ts"][-1] + ROW_PERIOD_US:
                raise ParseError(
                    f"{path_label}: timestamp {ts} breaks the {ROW_PERIOD_US} us row stride",
                    line=line_no,
                )
            bucket["ts"].append(ts)
            bucket["sums"].append(s)
            bucket["maxs"].append(mx)
    finally:
        if close:
            source.close()
    return [
        DownsampledTrace(
            meta=b["meta"],
            timestamps_us=np.asarray(b["ts"], dtype=np.int64),
            sums=np.asarray(b["sums"], dtype=np.float64),
            maxs=np.asarray(b["maxs"], dtype=np.float64),
        )
        for b in per_node.values()
    ]


def fingerprint(traces: Sequence[DownsampledTrace]) -> str:
    """Stable content hash of a downsampled dataset (order-insensitive)."""
    digest = hashlib.sha256()
    for trace in sorted(traces, key=lambda t: t.meta.node):
        digest.update(json.dumps(trace.meta.to_dict(), sort_keys=True).encode())
        digest.update(np.ascontiguousarray(trace.timestamps_us, dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(trace.sums, dtype=np.float64).tobytes())
        digest.update(np.ascontiguousarray(trace.maxs, dtype=np.float64).tobytes())
    return digest.hexdigest()
