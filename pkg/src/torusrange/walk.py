"""Simple random walks, range graphs, and box-traversal machinery.

Walks are simulated in Z^d and wrapped onto the torus on demand; the
traversal extractor works on the Z^d lift, where the periodic preimage
of a small box is a disjoint union of copies, so there is no ambiguity
about wrap-around mid-crossing.

A traversal of a box b enters the Top layer of b^7 from outside, stays
inside b^7, and first exits at a Bot site.  Conditioned traversals are
sampled exactly with a Doob h-transform: h solves the discrete
Dirichlet problem on b^7 (1 at the target exit, 0 elsewhere on the
outer boundary) and transitions are reweighted by h.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from math import ceil
from typing import Sequence

import numpy as np

from .lattice import LatticeBox, SubBoxGrid, TorusSpec, scale_box
from .rng import RngStream

__all__ = [
    "WalkTrace",
    "RangeGraph",
    "TraversalRecord",
    "Itinerary",
    "NotYet",
    "simulate_walk",
    "accumulate_range",
    "top_bot_faces",
    "extract_traversals",
    "tau_rho",
    "sample_conditioned_traversal",
    "exit_probability_field",
    "assign_traversals",
    "traversal_density_event",
    "box_traversal_windows",
    "indicator_concentration",
    "save_trace",
    "load_trace",
]

_TRACE_MAGIC = b"WTRC"
_TRACE_VERSION = 1


def _step_table(d: int) -> np.ndarray:
    """Move code 2*axis is +e_axis, 2*axis+1 is -e_axis."""
    table = np.zeros((2 * d, d), dtype=np.int64)
    for axis in range(d):
        table[2 * axis, axis] = 1
        table[2 * axis + 1, axis] = -1
    return table


@dataclass(frozen=True)
class WalkTrace:
    """A nearest-neighbor path: start point plus move codes."""

    start: tuple[int, ...]
    moves: np.ndarray  # int8 codes in [0, 2d)
    ambient: TorusSpec | None = None
    seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(c) for c in self.start))
        object.__setattr__(self, "moves", np.ascontiguousarray(self.moves, dtype=np.int8))

    @property
    def d(self) -> int:
        return len(self.start)

    @property
    def steps(self) -> int:
        return int(self.moves.size)

    def positions(self) -> np.ndarray:
        """(steps+1, d) array of Z^d positions."""
        out = np.empty((self.steps + 1, self.d), dtype=np.int64)
        out[0] = self.start
        if self.steps:
            np.cumsum(_step_table(self.d)[self.moves], axis=0, out=out[1:])
            out[1:] += out[0]
        return out

    def wrapped_positions(self) -> np.ndarray:
        pos = self.positions()
        if self.ambient is None:
            return pos
        return np.mod(pos, self.ambient.N)


def simulate_walk(
    ambient: TorusSpec | None,
    start: Sequence[int],
    steps: int,
    rng: RngStream,
) -> WalkTrace:
    """Uniform nearest-neighbor walk; deterministic given rng."""
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    d = ambient.d if ambient is not None else len(start)
    if len(start) != d:
        raise ValueError("start dimension does not match ambient")
    gen = rng.generator()
    moves = gen.integers(0, 2 * d, size=steps, dtype=np.int8)
    return WalkTrace(
        start=tuple(start),
        moves=moves,
        ambient=ambient,
        seed=rng.seed,
        stream_id=rng.stream_id,
    )


@dataclass(frozen=True)
class RangeGraph:
    """Vertices visited in a time window plus the edges actually traversed."""

    ambient: TorusSpec | None
    visited: frozenset
    edges: frozenset

    @property
    def vertex_count(self) -> int:
        return len(self.visited)

    def adjacency(self) -> dict:
        adj: dict[tuple, list] = {v: [] for v in self.visited}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def is_connected(self) -> bool:
        if not self.visited:
            return True
        adj = self.adjacency()
        seen = {next(iter(self.visited))}
        stack = [next(iter(seen))]
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == len(self.visited)


def accumulate_range(trace: WalkTrace, window: tuple[int, int]) -> RangeGraph:
    """Range graph of {S(s): t1 <= s < t2}; edges wrapped through the
    torus map when the trace has a torus ambient."""
    t1, t2 = window
    if not (0 <= t1 <= t2 <= trace.steps + 1):
        raise ValueError(f"window {window} out of bounds for {trace.steps} steps")
    pos = trace.wrapped_positions()[t1:t2]
    if pos.shape[0] == 0:
        return RangeGraph(trace.ambient, frozenset(), frozenset())
    verts = frozenset(map(tuple, pos.tolist()))
    edges = set()
    rows = pos.tolist()
    for a, b in zip(rows[:-1], rows[1:]):
        ta, tb = tuple(a), tuple(b)
        edges.add((ta, tb) if ta <= tb else (tb, ta))
    return RangeGraph(trace.ambient, verts, frozenset(edges))


def top_bot_faces(b: LatticeBox) -> tuple[frozenset, frozenset]:
    """(Top, Bot): the B^3 cross-section at the top inner layer of B^7
    and at the bottom outer face; translates of each other along axis 0."""
    b7 = scale_box(b, 7)
    b3 = scale_box(b, 3)
    lo7, hi7 = b7.lo, b7.hi
    cross = [range(l, h + 1) for l, h in zip(b3.lo[1:], b3.hi[1:])]
    from itertools import product as _product

    top = frozenset((hi7[0],) + rest for rest in _product(*cross))
    bot = frozenset((lo7[0] - 1,) + rest for rest in _product(*cross))
    return top, bot


@dataclass(frozen=True)
class TraversalRecord:
    """One top-to-bottom crossing of a box copy in the Z^d lift."""

    gamma: int
    gamma_plus: int
    box: LatticeBox  # the copy beta (side = base box side)


@dataclass(frozen=True)
class Itinerary:
    """Ordered (entry, exit) pairs on Top(box) x Bot(box)."""

    box: LatticeBox
    pairs: tuple

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((tuple(a), tuple(z)) for a, z in self.pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def is_rho_dense(self, rho: float) -> bool:
        d = self.box.d
        return len(self.pairs) >= rho * self.box.side ** (d - 2)


@dataclass(frozen=True)
class NotYet:
    """Marker: the requested traversal count has not been reached."""

    count: int


def _face_geometry(b: LatticeBox):
    b7 = scale_box(b, 7)
    b3 = scale_box(b, 3)
    return (
        np.asarray(b7.lo, dtype=np.int64),
        np.asarray(b7.hi, dtype=np.int64),
        np.asarray(b3.lo, dtype=np.int64),
        np.asarray(b3.hi, dtype=np.int64),
    )


def _is_top(rel: np.ndarray, lo7, hi7, lo3, hi3) -> bool:
    if rel[0] != hi7[0]:
        return False
    return bool(np.all(rel[1:] >= lo3[1:]) and np.all(rel[1:] <= hi3[1:]))


def _is_bot(rel: np.ndarray, lo7, hi7, lo3, hi3) -> bool:
    if rel[0] != lo7[0] - 1:
        return False
    return bool(np.all(rel[1:] >= lo3[1:]) and np.all(rel[1:] <= hi3[1:]))


def box_traversal_windows(positions: np.ndarray, b: LatticeBox) -> list[tuple[int, int]]:
    """Ordered (t, t_plus) windows of top-to-bottom crossings of b^7 by a
    Z^d position sequence, with t >= 1 and t_plus strictly before the
    final index when the sequence itself ends on the crossing's exit.

    This is the event scanned per traversal walk for the sub-box density
    count, and the single-copy core of the lifted extractor.
    """
    lo7, hi7, lo3, hi3 = _face_geometry(b)
    inside = np.all((positions >= lo7) & (positions <= hi7), axis=1)
    n = positions.shape[0]
    windows = []
    t = 1
    while t < n:
        if inside[t] and not inside[t - 1]:
            if _is_top(positions[t], lo7, hi7, lo3, hi3):
                # first exit of b^7 after t
                after = np.flatnonzero(~inside[t + 1 :])
                if after.size == 0:
                    break
                t_plus = t + 1 + int(after[0])
                if _is_bot(positions[t_plus], lo7, hi7, lo3, hi3):
                    windows.append((t, t_plus))
                t = t_plus
            else:
                t += 1
        else:
            t += 1
    return windows


def extract_traversals(
    trace: WalkTrace, t: TorusSpec, b: LatticeBox
) -> list[TraversalRecord]:
    """All traversal triplets of the copies of b^7 in the Z^d lift,
    ordered by entry time; windows are pairwise disjoint."""
    b7 = scale_box(b, 7)
    if b7.side >= t.N:
        raise ValueError(f"b^7 side {b7.side} must be < torus side {t.N}")
    pos = trace.positions()
    lo7 = np.asarray(b7.lo, dtype=np.int64)
    hi7 = np.asarray(b7.hi, dtype=np.int64)
    _, _, lo3, hi3 = _face_geometry(b)
    kk = (pos - lo7) // t.N
    rel = pos - kk * t.N
    inside = np.all(rel <= hi7, axis=1)  # rel >= lo7 holds by construction of kk
    n = pos.shape[0]
    records = []
    outside_after = np.flatnonzero(~inside)
    ti = 1
    while ti < n:
        if inside[ti] and not inside[ti - 1]:
            if _is_top(rel[ti], lo7, hi7, lo3, hi3):
                j = np.searchsorted(outside_after, ti)
                if j >= outside_after.size:
                    break
                t_plus = int(outside_after[j])
                # exit position relative to the same copy as the entry
                exit_rel = pos[t_plus] - kk[ti] * t.N
                if _is_bot(exit_rel, lo7, hi7, lo3, hi3):
                    copy = b.translate((kk[ti] * t.N).tolist())
                    records.append(TraversalRecord(gamma=ti, gamma_plus=t_plus, box=copy))
                ti = t_plus
            else:
                ti += 1
        else:
            ti += 1
    return records


def tau_rho(trace: WalkTrace, t: TorusSpec, b: LatticeBox, rho: float):
    """Exit time of the ceil(rho * n^(d-2))-th traversal, or NotYet."""
    if rho <= 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    need = ceil(rho * b.side ** (b.d - 2))
    records = extract_traversals(trace, t, b)
    if len(records) >= need:
        return records[need - 1].gamma_plus
    return NotYet(count=len(records))


# ---------------------------------------------------------------------------
# Conditioned traversal sampling (Doob h-transform)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def exit_probability_field(b7: LatticeBox, z: tuple) -> np.ndarray:
    """h(x) = P_x[first exit of b7 happens at z], on a grid padded with
    one boundary layer.  Jacobi iteration to max-residual <= 1e-12.

    Index [i1+1, ..., id+1] is the site b7.lo + (i1, ..., id); the pad
    layer holds the absorbing boundary values (1 at z, 0 elsewhere).
    """
    d = b7.d
    side = b7.side
    lo = b7.lo
    shape = tuple(side + 2 for _ in range(d))
    h = np.zeros(shape, dtype=np.float64)
    zi = tuple(int(c) - l + 1 for c, l in zip(z, lo))
    if not all(0 <= i < s for i, s in zip(zi, shape)):
        raise ValueError(f"target {z} is not in the boundary layer of {b7}")
    if all(1 <= i <= side for i in zi):
        raise ValueError(f"target {z} lies inside b^7, not on its outer boundary")
    h[zi] = 1.0
    core = tuple(slice(1, side + 1) for _ in range(d))
    inv = 1.0 / (2 * d)
    for sweep in range(1, 500_000):
        acc = np.zeros((side,) * d, dtype=np.float64)
        for axis in range(d):
            up = list(core)
            dn = list(core)
            up[axis] = slice(2, side + 2)
            dn[axis] = slice(0, side)
            acc += h[tuple(up)]
            acc += h[tuple(dn)]
        acc *= inv
        if sweep % 64 == 0:
            residual = float(np.abs(acc - h[core]).max())
            h[core] = acc
            if residual <= 1e-12:
                break
        else:
            h[core] = acc
    else:
        raise RuntimeError("Dirichlet solve did not converge")
    h.setflags(write=False)
    return h


def harmonic_residual(b7: LatticeBox, z: tuple) -> float:
    """Max |h(x) - mean of neighbors| over interior nodes (solver check)."""
    h = exit_probability_field(b7, z)
    d = b7.d
    side = b7.side
    core = tuple(slice(1, side + 1) for _ in range(d))
    acc = np.zeros((side,) * d, dtype=np.float64)
    for axis in range(d):
        up = list(core)
        dn = list(core)
        up[axis] = slice(2, side + 2)
        dn[axis] = slice(0, side)
        acc += h[tuple(up)] + h[tuple(dn)]
    acc /= 2 * d
    return float(np.abs(acc - h[core]).max())


def sample_conditioned_traversal(
    b: LatticeBox, a: Sequence[int], z: Sequence[int], rng: RngStream
) -> WalkTrace:
    """Walk from a in Top(b) whose first exit of b^7 is exactly at z in
    Bot(b), distributed as SRW conditioned on that exit."""
    top, bot = top_bot_faces(b)
    a = tuple(int(c) for c in a)
    z = tuple(int(c) for c in z)
    if a not in top:
        raise ValueError(f"{a} is not in Top({b})")
    if z not in bot:
        raise ValueError(f"{z} is not in Bot({b})")
    b7 = scale_box(b, 7)
    h = exit_probability_field(b7, z)
    d = b.d
    lo = b7.lo
    cur = tuple(c - l + 1 for c, l in zip(a, lo))
    if h[cur] <= 0.0:
        raise ValueError(f"target {z} unreachable from {a} under conditioning")
    strides = []
    flat_shape = h.shape
    stride = 1
    for s in reversed(flat_shape):
        strides.append(stride)
        stride *= s
    strides = list(reversed(strides))
    hflat = h.ravel()
    zflat = int(np.ravel_multi_index(tuple(int(c) - l + 1 for c, l in zip(z, lo)), flat_shape))
    cur_flat = int(np.ravel_multi_index(cur, flat_shape))
    offsets = []
    for axis in range(d):
        offsets.append(strides[axis])
        offsets.append(-strides[axis])
    gen = rng.generator()
    moves = []
    buf = gen.random(4096)
    buf_i = 0
    weights = [0.0] * (2 * d)
    while cur_flat != zflat:
        total = 0.0
        for j, off in enumerate(offsets):
            w = hflat[cur_flat + off]
            weights[j] = w
            total += w
        if buf_i == len(buf):
            buf = gen.random(4096)
            buf_i = 0
        u = buf[buf_i] * total
        buf_i += 1
        acc = 0.0
        pick = 2 * d - 1
        for j in range(2 * d):
            acc += weights[j]
            if u < acc:
                pick = j
                break
        # code convention: 2*axis is +, 2*axis+1 is -
        moves.append(pick)
        cur_flat += offsets[pick]
    return WalkTrace(start=a, moves=np.asarray(moves, dtype=np.int8), ambient=None)


# ---------------------------------------------------------------------------
# Itinerary assignment and sub-box density
# ---------------------------------------------------------------------------


def _delta_class(delta: Sequence[int], modulus: int) -> int:
    out = 0
    for c in reversed(tuple(delta)):
        out = out * modulus + (int(c) % modulus)
    return out


def assign_traversals(
    h: Itinerary, grid: SubBoxGrid, class_modulus: int = 50
) -> dict:
    """cell center -> indices i (0-based) with i = class(delta(cell))
    mod modulus^d.  Any modulus >= 7 keeps the assignments of cells with
    intersecting b^7 windows disjoint; 50 is the reference value."""
    if class_modulus < 7:
        raise ValueError("class modulus must be >= 7 to keep overlapping cells disjoint")
    d = grid.d
    period = class_modulus**d
    out = {}
    size = len(h)
    for cell in grid.cells:
        cls = _delta_class(grid.delta_index(cell), class_modulus)
        out[cell.center] = list(range(cls, size, period))
    return out


def traversal_density_event(
    h: Itinerary,
    grid: SubBoxGrid,
    walks: Sequence[WalkTrace],
    rho: float,
    class_modulus: int = 50,
):
    """True iff every cell receives at least rho * ||cell||^(d-2)
    assigned traversals whose walks cross it top to bottom; also returns
    the per-cell qualifying counts and the offending cells."""
    if len(walks) != len(h):
        raise ValueError("need one walk per itinerary entry")
    assignment = assign_traversals(h, grid, class_modulus)
    d = grid.d
    threshold = rho * grid.cell_side ** (d - 2)
    counts = {}
    offending = []
    positions = {}
    for center, indices in assignment.items():
        cell = LatticeBox(center, grid.cell_side)
        qualifying = 0
        for i in indices:
            if i not in positions:
                positions[i] = walks[i].positions()
            pos = positions[i]
            # the crossing must complete strictly before the walk's own exit
            if any(w[1] < pos.shape[0] - 1 for w in box_traversal_windows(pos, cell)):
                qualifying += 1
        counts[center] = qualifying
        if qualifying < threshold:
            offending.append(center)
    return (not offending), counts, offending


def indicator_concentration(
    p: float, count: int, replicas: int, rng: RngStream
) -> dict:
    """Self-test of the simulation harness against the lower-tail bound
    for sums of independent indicators: frequency of {Q < mu/2} over
    replicas, with the Chernoff reference exp(-mu/8)."""
    gen = rng.generator()
    mu = p * count
    q = (gen.random((replicas, count)) < p).sum(axis=1)
    freq = float(np.mean(q < mu / 2))
    return {"mu": mu, "freq_below_half_mean": freq, "chernoff_bound": float(np.exp(-mu / 8))}


# ---------------------------------------------------------------------------
# Binary trace checkpoints
# ---------------------------------------------------------------------------


def save_trace(trace: WalkTrace, path) -> None:
    """Little-endian header + packed 3-bit move codes (so d <= 4)."""
    d = trace.d
    if 2 * d > 8:
        raise ValueError("3-bit move codes support d <= 4")
    n = trace.ambient.N if trace.ambient is not None else 0
    header = struct.pack(
        "<4sIIQQQQ",
        _TRACE_MAGIC,
        _TRACE_VERSION,
        d,
        n,
        trace.seed,
        trace.stream_id,
        trace.steps,
    ) + struct.pack(f"<{d}q", *trace.start)
    codes = trace.moves.astype(np.uint8)
    bits = ((codes[:, None] >> np.array([2, 1, 0], dtype=np.uint8)) & 1).ravel()
    payload = np.packbits(bits).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_trace(path) -> WalkTrace:
    with open(path, "rb") as fh:
        head = fh.read(4 + 4 + 4 + 8 * 4)
        magic, version, d, n, seed, stream_id, steps = struct.unpack("<4sIIQQQQ", head)
        if magic != _TRACE_MAGIC:
            raise ValueError("not a walk-trace file")
        if version != _TRACE_VERSION:
            raise ValueError(f"unsupported trace version {version}")
        start = struct.unpack(f"<{d}q", fh.read(8 * d))
        payload = fh.read()
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=3 * steps)
    codes = (bits.reshape(steps, 3) * np.array([4, 2, 1], dtype=np.uint8)).sum(axis=1)
    ambient = TorusSpec(d, n) if n else None
    return WalkTrace(
        start=start,
        moves=codes.astype(np.int8),
        ambient=ambient,
        seed=seed,
        stream_id=stream_id,
    )
