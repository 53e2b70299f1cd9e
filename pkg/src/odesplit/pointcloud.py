"""Point-set ODE collections: chunked, thread-parallel per-point stepping.

States live in a structure-of-arrays field (component-major), so the hot
loops touch one component contiguously across all points of a chunk.
Chunk boundaries depend only on the point count and chunk size, never on
the thread count, and per-chunk results are combined in chunk order, so
every output (including functional reductions) is bitwise identical for
any number of worker threads.
"""

from __future__ import annotations

import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .expr import Expr, evaluate
from .multistage import NewtonNonconvergenceError, StepStats

__all__ = [
    "DEFAULT_CHUNK",
    "PointSet",
    "StateField",
    "PointOdeSolver",
    "step_all",
    "assemble_point_functional",
    "apply_scalar_map",
    "save_field",
    "load_field",
    "field_to_csv",
]

DEFAULT_CHUNK = 256

_MAGIC = b"OSPF"
_VERSION = 1

_executors = {}
_executor_lock = threading.Lock()


def _get_executor(threads):
    with _executor_lock:
        ex = _executors.get(threads)
        if ex is None:
            ex = ThreadPoolExecutor(max_workers=threads, thread_name_prefix="odesplit")
            _executors[threads] = ex
        return ex


@dataclass(frozen=True)
class PointSet:
    """Spatial points (d in {1, 2}) with a fixed contiguous chunking."""

    coords: np.ndarray
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim == 1:
            coords = coords[:, None]
        if coords.ndim != 2 or coords.shape[1] not in (1, 2):
            raise ValueError("coords must be (N,) or (N, d) with d in {1, 2}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.chunk < 1:
            raise ValueError("chunk size must be >= 1")

    @property
    def n(self):
        return self.coords.shape[0]

    def chunks(self):
        return chunk_ranges(self.n, self.chunk)


def chunk_ranges(n, chunk):
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


class StateField:
    """|X| x m per-point states, stored component-major as an (m, N) array,
    plus the time the field is associated with."""

    def __init__(self, data, time=0.0):
        data = np.ascontiguousarray(data, dtype=float)
        if data.ndim != 2:
            raise ValueError("state field data must be (m, N)")
        self.data = data
        self.time = float(time)

    @property
    def m(self):
        return self.data.shape[0]

    @property
    def n(self):
        return self.data.shape[1]

    def copy(self):
        return StateField(self.data.copy(), self.time)

    def component(self, i):
        return self.data[i]

    def with_component(self, i, values, time=None):
        out = self.data.copy()
        out[i] = values
        return StateField(out, self.time if time is None else time)

    @classmethod
    def constant(cls, values, n, time=0.0):
        values = np.asarray(values, dtype=float)
        return cls(np.repeat(values[:, None], n, axis=1), time)


class PointOdeSolver:
    """Steps one ODE system independently at every point of a point set.

    Owns the per-chunk stepper workspaces (so Jacobian caches follow the
    points they belong to, not the thread that happens to run them) and the
    fixed parameter vector for the system.
    """

    def __init__(self, stepper, points, params=None, threads=1):
        self.stepper = stepper
        if isinstance(points, PointSet):
            self.points = points
        else:
            self.points = PointSet(np.zeros(int(points)), chunk=DEFAULT_CHUNK)
        self.params = (
            stepper.kernel.system.default_params()
            if params is None
            else np.asarray(params, dtype=float)
        )
        self.threads = int(threads)
        self._chunks = self.points.chunks()
        self._workspaces = [None] * len(self._chunks)

    @property
    def n(self):
        return self.points.n

    def _workspace(self, ci, width):
        ws = self._workspaces[ci]
        if ws is None:
            ws = self.stepper.make_workspace(width)
            self._workspaces[ci] = ws
        return ws

    def reset_caches(self):
        for ws in self._workspaces:
            self.stepper.reset_workspace(ws)

    def step_all(self, fld: StateField, t, kappa, fresh_jacobians=False):
        """Advance the whole field one step; returns (field', StepStats).

        Any per-point Newton failure aborts the step and reports the global
        point index.  With ``fresh_jacobians`` the per-chunk Jacobian caches
        are invalidated first, making the step a function of the entry state
        alone (bitwise-reproducible from a checkpoint).
        """
        if fld.m != self.stepper.state_dim:
            raise ValueError("field/stepper dimension mismatch")
        if fld.n != self.n:
            raise ValueError("field/point-set size mismatch")
        if fresh_jacobians:
            self.reset_caches()
        out = np.empty_like(fld.data)
        chunks = self._chunks

        def run(ci):
            lo, hi = chunks[ci]
            ws = self._workspace(ci, hi - lo)
            try:
                y1, stats = self.stepper.step_batch(
                    fld.data[:, lo:hi], t, kappa, self.params, workspace=ws
                )
            except NewtonNonconvergenceError as err:
                err.point = lo + (err.point or 0)
                raise
            out[:, lo:hi] = y1
            return stats

        per_chunk = _run_chunks(run, len(chunks), self.threads)
        total = StepStats()
        for st in per_chunk:
            total.merge(st)
        return StateField(out, t + kappa), total

    def functional(self, fld: StateField, integrand, weights=None):
        return assemble_point_functional(
            fld, integrand, weights=weights, threads=self.threads,
            chunk=self.points.chunk, params=self.params,
        )


def _run_chunks(fn, n_chunks, threads):
    """Run fn(ci) for every chunk; results returned in chunk order."""
    if threads <= 1 or n_chunks == 1:
        return [fn(ci) for ci in range(n_chunks)]
    ex = _get_executor(threads)
    futures = [ex.submit(fn, ci) for ci in range(n_chunks)]
    return [f.result() for f in futures]


def step_all(stepper, fld: StateField, t, kappa, params=None, threads=1,
             chunk=DEFAULT_CHUNK):
    """One-shot convenience wrapper around PointOdeSolver.step_all."""
    points = PointSet(np.zeros(fld.n), chunk=chunk)
    solver = PointOdeSolver(stepper, points, params=params, threads=threads)
    return solver.step_all(fld, t, kappa)


def assemble_point_functional(fld: StateField, integrand, weights=None,
                              threads=1, chunk=DEFAULT_CHUNK, params=None):
    """Sum of the integrand over all points: sum_i w_i g(y(x_i)).

    ``integrand`` is an Expr over state symbols (or a callable of the data
    block); ``weights`` defaults to 1 (the plain point measure).  Partial
    sums are accumulated per chunk and combined in fixed chunk order, so the
    value is independent of the thread count.
    """
    params = np.zeros(0) if params is None else np.asarray(params, dtype=float)
    chunks = chunk_ranges(fld.n, chunk)

    def run(ci):
        lo, hi = chunks[ci]
        block = fld.data[:, lo:hi]
        if isinstance(integrand, Expr):
            vals = evaluate(integrand, block, fld.time, params)
            vals = np.broadcast_to(vals, (hi - lo,))
        else:
            vals = integrand(block)
        if weights is not None:
            vals = vals * weights[lo:hi]
        return float(np.sum(vals))

    partials = _run_chunks(run, len(chunks), threads)
    total = 0.0
    for p in partials:
        total += p
    return total


def apply_scalar_map(fld: StateField, fn, time=None) -> StateField:
    """Elementwise, shape-preserving map of the whole field."""
    out = np.asarray(fn(fld.data), dtype=float)
    if out.shape != fld.data.shape:
        raise ValueError("scalar map must preserve the field shape")
    return StateField(out.copy(), fld.time if time is None else time)


# ---------------------------------------------------------------------------
# snapshot format: header (magic, version, N, m, time), then row-major
# (point-major) float64 data


def save_field(path, fld: StateField):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQQd", _VERSION, fld.n, fld.m, fld.time))
        fh.write(np.ascontiguousarray(fld.data.T).tobytes())


def load_field(path) -> StateField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a state-field snapshot")
        version, n, m, time = struct.unpack("<IQQd", fh.read(28))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        raw = np.frombuffer(fh.read(8 * n * m), dtype="<f8").reshape(n, m)
    return StateField(raw.T.copy(), time)


def field_to_csv(path, fld: StateField, names=None, coords=None):
    names = names or [f"y{i}" for i in range(fld.m)]
    cols = list(names)
    head = ["point"]
    if coords is not None:
        head += [f"x{k}" for k in range(coords.shape[1])]
    head += cols
    with open(path, "w") as fh:
        fh.write(",".join(head) + "\n")
        for i in range(fld.n):
            row = [str(i)]
            if coords is not None:
                row += [repr(float(v)) for v in coords[i]]
            row += [repr(float(fld.data[j, i])) for j in range(fld.m)]
            fh.write(",".join(row) + "\n")
