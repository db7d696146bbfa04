"""Cache-tiled fixed-width MLP forward evaluator.

A ``FusedMlp`` is a plain chain of matrix layers, 64 neurons wide in every
hidden layer, evaluated in float32.  The fused path partitions the batch
into 128-sample chunks; each chunk's activations live in a 64x128
chunk-local buffer while the per-layer weights are traversed as 16x16 tiles
so every tile is read exactly once per chunk.  This keeps all intermediate
traffic inside L1/L2 instead of materialising per-layer activation arrays,
which is where the speedup over the naive matmul+activation pipeline comes
from.

The fused path is inference-only; training gradients always flow through
the naive differentiable path of :mod:`freeview.autodiff`.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from typing import List, Optional, Sequence

import numba
import numpy as np
from numba import njit, prange

from .autodiff import DimensionError

WIDTH = 64
TILE = 16
CHUNK = 128
_TILES_PER_SIDE = WIDTH // TILE


class BenchmarkGateError(RuntimeError):
    """Correctness gate failed; timings are refused."""


def tile_matrix(w: np.ndarray) -> np.ndarray:
    """Dice a padded 64x64 weight matrix into evaluation-ordered 16x16 tiles.

    Tiles are stored transposed (output-row major) so the kernel walks them
    in the exact order it consumes them.
    """
    if w.shape != (WIDTH, WIDTH):
        raise DimensionError(f"tile_matrix expects {(WIDTH, WIDTH)}, got {w.shape}")
    wt = np.ascontiguousarray(w.T)
    tiles = np.empty((_TILES_PER_SIDE, _TILES_PER_SIDE, TILE, TILE), dtype=np.float32)
    for it in range(_TILES_PER_SIDE):
        for kt in range(_TILES_PER_SIDE):
            tiles[it, kt] = wt[it * TILE:(it + 1) * TILE, kt * TILE:(kt + 1) * TILE]
    return tiles


def detile_matrix(tiles: np.ndarray) -> np.ndarray:
    """Inverse of :func:`tile_matrix`; reconstruction is bitwise."""
    wt = np.empty((WIDTH, WIDTH), dtype=np.float32)
    for it in range(_TILES_PER_SIDE):
        for kt in range(_TILES_PER_SIDE):
            wt[it * TILE:(it + 1) * TILE, kt * TILE:(kt + 1) * TILE] = tiles[it, kt]
    return np.ascontiguousarray(wt.T)


class FusedMlp:
    """Fixed-width MLP with a tiled weight layout for chunked evaluation.

    ``weights``: list of dense float32 matrices
    ``[in x 64, 64 x 64, ..., 64 x out]`` (ReLU after every layer except the
    last).  Input/output layers narrower than 64 are zero-padded into the
    tile grid; the dense matrices stay around as the source of truth for the
    naive path.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Optional[Sequence[np.ndarray]] = None,
                 activation: str = "relu"):
        if activation != "relu":
            raise ValueError(f"unsupported activation '{activation}'")
        if len(weights) < 2:
            raise DimensionError("FusedMlp needs at least input and output layers")
        self.in_dim = weights[0].shape[0]
        self.out_dim = weights[-1].shape[1]
        if self.in_dim > WIDTH or self.out_dim > WIDTH:
            raise DimensionError(
                f"input/output width must be <= {WIDTH}, got {self.in_dim}/{self.out_dim}")
        for i, w in enumerate(weights):
            want_in = self.in_dim if i == 0 else WIDTH
            want_out = self.out_dim if i == len(weights) - 1 else WIDTH
            if w.shape != (want_in, want_out):
                raise DimensionError(f"layer {i}: expected {(want_in, want_out)}, got {w.shape}")
        self.activation = activation
        self.weights = [np.ascontiguousarray(w, dtype=np.float32) for w in weights]
        if biases is None:
            biases = [np.zeros(w.shape[1], dtype=np.float32) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float32) for b in biases]
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise DimensionError(f"bias shape {b.shape} vs layer width {w.shape[1]}")
        self._pack()

    @property
    def depth(self) -> int:
        """Number of hidden (ReLU) layers."""
        return len(self.weights) - 1

    def _pack(self):
        n_layers = len(self.weights)
        self.tiles = np.zeros((n_layers, _TILES_PER_SIDE, _TILES_PER_SIDE, TILE, TILE),
                              dtype=np.float32)
        self.bias_pad = np.zeros((n_layers, WIDTH), dtype=np.float32)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wp = np.zeros((WIDTH, WIDTH), dtype=np.float32)
            wp[:w.shape[0], :w.shape[1]] = w
            self.tiles[i] = tile_matrix(wp)
            self.bias_pad[i, :b.shape[0]] = b

    def dense_layers(self) -> List[np.ndarray]:
        """Reconstruct padded dense matrices from the tiles (bitwise)."""
        return [detile_matrix(self.tiles[i]) for i in range(len(self.weights))]

    @classmethod
    def random(cls, in_dim: int, out_dim: int, depth: int, seed: int = 0,
               with_bias: bool = True) -> "FusedMlp":
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [WIDTH] * depth + [out_dim]
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append((rng.standard_normal((a, b)) * np.sqrt(2.0 / a)).astype(np.float32))
            biases.append((rng.standard_normal(b) * 0.01 if with_bias else np.zeros(b)).astype(np.float32))
        return cls(weights, biases)


def naive_forward(mlp: FusedMlp, batch: np.ndarray) -> np.ndarray:
    """Reference path: alternating dense matmul and elementwise activation."""
    if batch.ndim != 2 or batch.shape[1] != mlp.in_dim:
        raise DimensionError(f"batch width {batch.shape} vs mlp input {mlp.in_dim}")
    h = np.ascontiguousarray(batch, dtype=np.float32)
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


@njit(parallel=True, cache=True)
def _fused_kernel(x, tiles, biases, out, n_layers, out_dim):  # pragma: no cover - compiled
    n = x.shape[0]
    n_chunks = (n + CHUNK - 1) // CHUNK
    for ci in prange(n_chunks):
        base = ci * CHUNK
        cn = min(CHUNK, n - base)
        h = np.zeros((WIDTH, CHUNK), dtype=np.float32)
        for j in range(cn):
            for r in range(WIDTH):
                h[r, j] = x[base + j, r]
        for layer in range(n_layers):
            hn = np.zeros((WIDTH, CHUNK), dtype=np.float32)
            for it in range(_TILES_PER_SIDE):
                for kt in range(_TILES_PER_SIDE):
                    for oi in range(TILE):
                        orow = it * TILE + oi
                        for ki in range(TILE):
                            w = tiles[layer, it, kt, oi, ki]
                            irow = kt * TILE + ki
                            for j in range(CHUNK):
                                hn[orow, j] += w * h[irow, j]
            is_last = layer == n_layers - 1
            for r in range(WIDTH):
                bv = biases[layer, r]
                for j in range(CHUNK):
                    v = hn[r, j] + bv
                    if (not is_last) and v < 0.0:
                        v = 0.0
                    hn[r, j] = v
            h = hn
        for j in range(cn):
            for r in range(out_dim):
                out[base + j, r] = h[r, j]
    return out


def fused_forward(mlp: FusedMlp, batch: np.ndarray) -> np.ndarray:
    """Chunked, tile-ordered forward pass; numerically equivalent to naive."""
    if batch.ndim != 2 or batch.shape[1] != mlp.in_dim:
        raise DimensionError(f"batch width {batch.shape} vs mlp input {mlp.in_dim}")
    n = batch.shape[0]
    if n < 1:
        raise DimensionError("batch must contain at least one input")
    xpad = np.zeros((n, WIDTH), dtype=np.float32)
    xpad[:, :mlp.in_dim] = batch
    out = np.zeros((n, WIDTH), dtype=np.float32)
    _fused_kernel(xpad, mlp.tiles, mlp.bias_pad, out, len(mlp.weights), WIDTH)
    return np.ascontiguousarray(out[:, :mlp.out_dim])


def fused_forward_reference(mlp: FusedMlp, batch: np.ndarray):
    """Instrumented pure-python fused path.

    Returns ``(output, tile_load_counts)`` where the counter has one entry
    per (layer, row_tile, col_tile); the fused scheme loads each tile exactly
    once per 128-chunk.
    """
    if batch.ndim != 2 or batch.shape[1] != mlp.in_dim:
        raise DimensionError(f"batch width {batch.shape} vs mlp input {mlp.in_dim}")
    n = batch.shape[0]
    n_layers = len(mlp.weights)
    loads = np.zeros((n_layers, _TILES_PER_SIDE, _TILES_PER_SIDE), dtype=np.int64)
    out = np.zeros((n, mlp.out_dim), dtype=np.float32)
    for base in range(0, n, CHUNK):
        cn = min(CHUNK, n - base)
        h = np.zeros((WIDTH, CHUNK), dtype=np.float32)
        h[:mlp.in_dim, :cn] = batch[base:base + cn].T
        for layer in range(n_layers):
            hn = np.zeros((WIDTH, CHUNK), dtype=np.float32)
            for it in range(_TILES_PER_SIDE):
                acc = np.zeros((TILE, CHUNK), dtype=np.float32)
                for kt in range(_TILES_PER_SIDE):
                    tile = mlp.tiles[layer, it, kt]
                    loads[layer, it, kt] += 1
                    acc += tile @ h[kt * TILE:(kt + 1) * TILE]
                hn[it * TILE:(it + 1) * TILE] = acc
            hn += mlp.bias_pad[layer][:, None]
            if layer != n_layers - 1:
                np.maximum(hn, 0.0, out=hn)
            h = hn
        out[base:base + cn] = h[:mlp.out_dim, :cn].T
    return out, loads


# ---------------------------------------------------------------------------
# Benchmark


@dataclass
class EvalReport:
    """Timing comparison between the naive and fused paths at one batch size."""

    batch_size: int
    naive_inputs_per_s: float
    fused_inputs_per_s: float
    speedup: float
    max_abs_deviation: float
    workers: int

    def to_dict(self):
        return asdict(self)


GATE_TOLERANCE = 1e-3
GATE_SAMPLES = 10_000


def check_equivalence(mlp: FusedMlp, n_inputs: int = GATE_SAMPLES, seed: int = 0) -> float:
    """Max abs deviation between fused and naive outputs on random inputs."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (n_inputs, mlp.in_dim)).astype(np.float32)
    return float(np.max(np.abs(fused_forward(mlp, x) - naive_forward(mlp, x))))


def benchmark(mlp: FusedMlp, batch_sizes: Sequence[int], repeats: int = 5,
              workers: Optional[int] = None, seed: int = 0) -> List[EvalReport]:
    """Median-of-repeats throughput for both paths, gated on correctness.

    The gate runs before any timing; if the fused output deviates from the
    naive oracle by more than ``GATE_TOLERANCE`` no timings are reported.
    """
    if workers is not None:
        numba.set_num_threads(workers)
    gate_dev = check_equivalence(mlp, seed=seed)
    if gate_dev > GATE_TOLERANCE:
        raise BenchmarkGateError(
            f"fused/naive deviation {gate_dev:.3e} exceeds {GATE_TOLERANCE:.0e}; refusing to time")

    rng = np.random.default_rng(seed + 1)
    reports = []
    for bs in batch_sizes:
        x = rng.uniform(-1.0, 1.0, (int(bs), mlp.in_dim)).astype(np.float32)
        dev = float(np.max(np.abs(fused_forward(mlp, x) - naive_forward(mlp, x))))
        naive_forward(mlp, x)  # warm cache
        fused_forward(mlp, x)  # warm JIT
        t_naive, t_fused = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            naive_forward(mlp, x)
            t_naive.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            fused_forward(mlp, x)
            t_fused.append(time.perf_counter() - t0)
        naive_ips = bs / float(np.median(t_naive))
        fused_ips = bs / float(np.median(t_fused))
        reports.append(EvalReport(
            batch_size=int(bs),
            naive_inputs_per_s=naive_ips,
            fused_inputs_per_s=fused_ips,
            speedup=fused_ips / naive_ips,
            max_abs_deviation=dev,
            workers=numba.get_num_threads(),
        ))
    return reports


def reports_to_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def format_report_table(reports: Sequence[EvalReport]) -> str:
    lines = [f"{'batch':>8}  {'naive/s':>12}  {'fused/s':>12}  {'speedup':>8}  {'max dev':>10}  {'workers':>7}"]
    for r in reports:
        lines.append(f"{r.batch_size:>8}  {r.naive_inputs_per_s:>12.3e}  {r.fused_inputs_per_s:>12.3e}"
                     f"  {r.speedup:>8.2f}  {r.max_abs_deviation:>10.2e}  {r.workers:>7}")
    return "\n".join(lines)
