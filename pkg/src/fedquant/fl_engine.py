"""Weighted quantized federated averaging over simulated workers.

One global iteration: every worker recovers the global model from the last
server broadcast, runs K_n local mini-batch SGD steps, and uploads the
quantized normalized accumulated update (x_end - x_hat)/(gamma K_n).  The
server aggregates the decoded uploads with weights W_n K_n, quantizes the
normalized aggregate, and broadcasts it.  Server and workers decode the same
message bit-exactly, so every node holds an identical recovered model.

Scaling the quantizer inputs keeps their norms inside fixed ranges (R for
uplinks, (R+1)(1+sqrt(D)) for the broadcast), so quantizer ranges are static.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

from .bound import BoundInputs, step_feasible
from .model_zoo import ProblemMeta, Task
from .quantizer import (
    QuantizerParams,
    QuantizedVector,
    bit_count,
    decode,
    encoded_bit_length,
    quantize_vector,
)
from .rng import stream


class SimulationError(RuntimeError):
    pass


def default_input_ranges(R: float, D: int, n_workers: int) -> np.ndarray:
    """Static quantizer ranges: R per worker, (R+1)(1+sqrt(D)) for the server."""
    if R <= 0:
        raise ValueError("R must be positive")
    out = np.full(n_workers + 1, float(R))
    out[0] = (R + 1.0) * (1.0 + np.sqrt(D))
    return out


@dataclass(frozen=True)
class AlgoParams:
    """Full algorithm parameter tuple; quant[0] is the server quantizer."""

    K0: int
    K: np.ndarray          # local iterations per worker, length N
    B: int
    gamma: np.ndarray      # step per global iteration, length K0
    W: np.ndarray          # aggregation weights, length N, sums to 1
    quant: tuple           # QuantizerParams, length N+1
    enforce_feasible: bool = False

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=int))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        object.__setattr__(self, "W", np.asarray(self.W, dtype=float))
        object.__setattr__(self, "quant", tuple(self.quant))
        n = self.K.size
        if self.W.size != n or len(self.quant) != n + 1:
            raise ValueError("K, W, quant lengths are inconsistent")
        if self.gamma.size != self.K0:
            raise ValueError("gamma must have one entry per global iteration")
        if self.K0 < 0 or self.B < 1 or np.any(self.K < 1):
            raise ValueError("iteration and batch counts must be positive")
        if abs(float(self.W.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @property
    def n_workers(self) -> int:
        return self.K.size

    def validate_feasible(self, meta: ProblemMeta):
        s = np.array([q.s for q in self.quant], dtype=float)
        for g in self.gamma:
            ok, margin, _ = step_feasible(g, self.K, self.W, s, meta.L, self.n_workers, meta.dim)
            if not ok:
                raise ValueError(f"step size {g} violates the feasibility condition (margin {margin})")


def make_algo_params(K0, K, B, gamma, W, s_tilde, s, meta: ProblemMeta,
                     delta=None, enforce_feasible=False) -> AlgoParams:
    """Assemble AlgoParams, deriving quantizer ranges from meta.R by default."""
    K = np.asarray(K, dtype=int)
    n = K.size
    if delta is None:
        delta = default_input_ranges(meta.R, meta.dim, n)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 0:
        gamma = np.full(int(K0), float(gamma))
    quant = tuple(
        QuantizerParams(int(s_tilde[i]), int(s[i]), float(delta[i])) for i in range(n + 1)
    )
    params = AlgoParams(int(K0), K, int(B), gamma, np.asarray(W, dtype=float), quant,
                        enforce_feasible=enforce_feasible)
    if enforce_feasible:
        params.validate_feasible(meta)
    return params


def bound_inputs(params: AlgoParams, meta: ProblemMeta) -> BoundInputs:
    return BoundInputs(
        K=params.K.astype(float),
        B=float(params.B),
        gamma=params.gamma,
        W=params.W,
        s_tilde=np.array([q.s_tilde for q in params.quant], dtype=float),
        s=np.array([q.s for q in params.quant], dtype=float),
        delta=np.array([q.delta for q in params.quant], dtype=float),
        L=meta.L,
        sigma=meta.sigma,
        f_init=meta.f_init,
        f_star_lower=meta.f_star_lower,
        dim=meta.dim,
    )


@dataclass
class LocalStats:
    iterates: list  # local models x_n^{(k0, 0..K_n)}
    max_sample_grad_norm: float


@dataclass
class RunTrace:
    """Per-global-iteration telemetry; row k corresponds to k0 = k+1."""

    loss: np.ndarray
    grad_sq: np.ndarray
    worker_update_norms: np.ndarray   # (K0, N) norms of (x_end - x_hat)/(gamma K_n)
    server_input_norms: np.ndarray    # norms of dx_hat / sum(W K)
    uplink_bits: np.ndarray           # encoded bits per iteration (all workers)
    downlink_bits: np.ndarray         # length K0+1: init broadcast + one per iteration
    f_init_measured: float
    final_loss: float
    final_grad_sq: float
    models: list = field(default_factory=list)

    @property
    def total_uplink_bits(self) -> int:
        return int(self.uplink_bits.sum())

    @property
    def total_downlink_bits(self) -> int:
        return int(self.downlink_bits.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        n = self.worker_update_norms.shape[1] if self.worker_update_norms.size else 0
        cols = ["k0", "loss", "grad_sq", "uplink_bits", "downlink_bits", "server_input_norm"]
        cols += [f"worker_update_norm_{i + 1}" for i in range(n)]
        buf.write(",".join(cols) + "\n")
        for k in range(self.loss.size):
            row = [
                str(k + 1),
                repr(float(self.loss[k])),
                repr(float(self.grad_sq[k])),
                str(int(self.uplink_bits[k])),
                str(int(self.downlink_bits[k + 1])),
                repr(float(self.server_input_norms[k])),
            ]
            row += [repr(float(v)) for v in self.worker_update_norms[k]]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "loss": self.loss.tolist(),
                "grad_sq": self.grad_sq.tolist(),
                "worker_update_norms": self.worker_update_norms.tolist(),
                "server_input_norms": self.server_input_norms.tolist(),
                "uplink_bits": self.uplink_bits.tolist(),
                "downlink_bits": self.downlink_bits.tolist(),
                "f_init_measured": self.f_init_measured,
                "final_loss": self.final_loss,
                "final_grad_sq": self.final_grad_sq,
            }
        )


def local_sgd_pass(x_start, worker, k0, params: AlgoParams, task: Task, rng) -> tuple:
    """K_n mini-batch SGD steps for one worker inside global iteration k0.

    Batches are drawn uniformly with replacement.  Returns the final local
    model and the iterate trail (needed by the drift diagnostics).
    """
    if not np.all(np.isfinite(x_start)):
        raise SimulationError("non-finite local start")
    n_local = int(params.K[worker - 1])
    gamma = float(params.gamma[k0 - 1])
    x = np.array(x_start, dtype=float)
    iterates = [x.copy()]
    max_norm = 0.0
    size = task.worker_sizes[worker - 1]
    for _ in range(n_local):
        idx = rng.integers(0, size, size=params.B)
        grads = task.per_sample_grads(x, worker - 1, idx)
        if not np.all(np.isfinite(grads)):
            raise SimulationError(f"non-finite gradient at worker {worker}, k0={k0}")
        max_norm = max(max_norm, float(np.max(np.linalg.norm(grads, axis=1))))
        x = x - gamma * grads.mean(axis=0)
        iterates.append(x.copy())
    return x, LocalStats(iterates, max_norm)


def aggregate(scaled_updates, params: AlgoParams) -> np.ndarray:
    """Weighted global update: sum_n W_n K_n decode(Q_n), in worker order."""
    dims = {qv.dim for qv in scaled_updates}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch across workers: {sorted(dims)}")
    out = np.zeros(dims.pop())
    for n, qv in enumerate(scaled_updates):
        out += params.W[n] * params.K[n] * decode(qv)
    return out


def recover_global(x_prev, server_msg: QuantizedVector, gamma_prev: float, sum_wk: float) -> np.ndarray:
    """Shared deterministic recovery of the next global model."""
    if sum_wk <= 0:
        raise ValueError("sum of W_n K_n must be positive")
    return np.asarray(x_prev, dtype=float) + gamma_prev * decode(server_msg) * sum_wk


def run_gqfedwavg(task: Task, params: AlgoParams, seed: int, meta: ProblemMeta = None,
                  x0=None, record_models: bool = False):
    """Run the full algorithm; returns (final model, RunTrace)."""
    n = params.n_workers
    if task.n_workers != n:
        raise ValueError("task and params disagree on worker count")
    d = task.dim
    if params.enforce_feasible and meta is not None:
        params.validate_feasible(meta)

    sum_wk = float(np.sum(params.W * params.K))
    q_srv = params.quant[0]

    # initialization broadcast: the step-1 quantizer input must respect the
    # server range, so the initial model is clamped into it (documented).
    if x0 is None:
        g = stream(seed, 0, 0, "init").normal(size=d)
        x0 = g / np.sqrt(d)
    x0 = np.asarray(x0, dtype=float)
    nrm = float(np.linalg.norm(x0)) / sum_wk
    if nrm > q_srv.delta:
        x0 = x0 * (0.9 * q_srv.delta * sum_wk / float(np.linalg.norm(x0)))

    msg = quantize_vector(x0 / sum_wk, q_srv, stream(seed, 0, 0, "downlink"))
    gamma_prev = 1.0  # step-1 convention: makes x_hat^(1) unbiased for x0
    m0_bits = encoded_bit_length(q_srv, d)

    k0_total = params.K0
    loss = np.empty(k0_total)
    grad_sq = np.empty(k0_total)
    worker_norms = np.empty((k0_total, n))
    server_norms = np.empty(k0_total)
    uplink = np.zeros(k0_total, dtype=np.int64)
    downlink = np.zeros(k0_total + 1, dtype=np.int64)
    downlink[0] = m0_bits
    models = []
    f_init_measured = np.nan

    x_hat = np.zeros(d)
    for k0 in range(1, k0_total + 1):
        x_hat = recover_global(x_hat, msg, gamma_prev, sum_wk)
        if record_models:
            models.append(x_hat.copy())
        fval = task.loss_full(x_hat)
        if not np.isfinite(fval):
            raise SimulationError(f"non-finite loss at k0={k0}")
        if k0 == 1:
            f_init_measured = fval
        loss[k0 - 1] = fval
        gfull = task.grad_full(x_hat)
        grad_sq[k0 - 1] = float(gfull @ gfull)

        uploads = []
        for worker in range(1, n + 1):
            x_end, stats = local_sgd_pass(
                x_hat, worker, k0, params, task, stream(seed, worker, k0, "batch")
            )
            if meta is not None and stats.max_sample_grad_norm > meta.R * (1 + 1e-9):
                raise SimulationError(
                    f"sample gradient norm {stats.max_sample_grad_norm} exceeds R={meta.R}; "
                    "constant estimation too tight"
                )
            v = (x_end - x_hat) / (params.gamma[k0 - 1] * params.K[worker - 1])
            vn = float(np.linalg.norm(v))
            worker_norms[k0 - 1, worker - 1] = vn
            qd = params.quant[worker]
            if vn > qd.delta * (1 + 1e-9):
                raise SimulationError(
                    f"scaled update norm {vn} exceeds the quantizer range {qd.delta} (Lemma-2 bound broken)"
                )
            uploads.append(quantize_vector(v, qd, stream(seed, worker, k0, "uplink")))
            uplink[k0 - 1] += encoded_bit_length(qd, d)

        dx_hat = aggregate(uploads, params)
        v0 = dx_hat / sum_wk
        server_norms[k0 - 1] = float(np.linalg.norm(v0))
        msg = quantize_vector(v0, q_srv, stream(seed, 0, k0, "downlink"))
        downlink[k0] = m0_bits
        gamma_prev = float(params.gamma[k0 - 1])

    x_final = recover_global(x_hat, msg, gamma_prev, sum_wk)
    if k0_total == 0:
        f_init_measured = task.loss_full(x_final)
    gfin = task.grad_full(x_final)
    trace = RunTrace(
        loss=loss,
        grad_sq=grad_sq,
        worker_update_norms=worker_norms,
        server_input_norms=server_norms,
        uplink_bits=uplink,
        downlink_bits=downlink,
        f_init_measured=float(f_init_measured),
        final_loss=float(task.loss_full(x_final)),
        final_grad_sq=float(gfin @ gfin),
        models=models,
    )
    return x_final, trace


def expected_bits(params: AlgoParams, dim: int):
    """Closed-form totals: (uplink, downlink) encoded bits for a whole run."""
    up = params.K0 * sum(encoded_bit_length(q, dim) for q in params.quant[1:])
    down = (params.K0 + 1) * encoded_bit_length(params.quant[0], dim)
    return int(up), int(down)


def expected_bits_real(params: AlgoParams, dim: int):
    """Same totals under the real-valued message-size formula."""
    up = params.K0 * sum(bit_count(q, dim) for q in params.quant[1:])
    down = (params.K0 + 1) * bit_count(params.quant[0], dim)
    return float(up), float(down)
