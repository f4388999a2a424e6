"""Desk-scale ML tasks and estimation of the constants the bound consumes.

A Task owns per-worker datasets (equal-size i.i.d. partitions of one pool)
and exposes sample-level losses and gradients.  The synthetic quadratic is
built so that the smoothness constant, the gradient-variance bound, and the
optimal value are exact by construction, which makes the convergence-bound
checks tight.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import stream


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProblemMeta:
    """Constants of the learning problem used by the bound and the optimizer."""

    dim: int
    L: float
    sigma: float
    R: float
    f_star_lower: float
    f_init: float

    def __post_init__(self):
        if not (self.L > 0 and self.R > 0 and self.sigma >= 0):
            raise ValueError("L, R must be positive and sigma nonnegative")
        if not (np.isfinite(self.f_init) and np.isfinite(self.f_star_lower)):
            raise ValueError("loss anchors must be finite")
        if self.f_init < self.f_star_lower:
            raise ValueError("f_init must be >= the lower bound on f*")


class Task:
    """Base interface; subclasses fill in the sample-level math."""

    name = "task"
    nonnegative_loss = True

    def __init__(self, n_workers: int, dim: int, worker_sizes):
        self.n_workers = n_workers
        self.dim = dim
        self.worker_sizes = list(worker_sizes)

    # mean loss / gradient over the given sample indices of one worker
    def loss(self, x, worker, idx):
        raise NotImplementedError

    def grad(self, x, worker, idx):
        return self.per_sample_grads(x, worker, idx).mean(axis=0)

    def per_sample_grads(self, x, worker, idx):
        raise NotImplementedError

    def worker_loss(self, x, worker):
        return self.loss(x, worker, np.arange(self.worker_sizes[worker]))

    def worker_grad(self, x, worker):
        return self.grad(x, worker, np.arange(self.worker_sizes[worker]))

    def loss_full(self, x):
        return float(np.mean([self.worker_loss(x, n) for n in range(self.n_workers)]))

    def grad_full(self, x):
        return np.mean([self.worker_grad(x, n) for n in range(self.n_workers)], axis=0)


# ---------------------------------------------------------------------------
# synthetic quadratic
# ---------------------------------------------------------------------------


class QuadraticTask(Task):
    """F(x; (A, b_i)) = 0.5 ||A x - b_i||^2 with one A shared by all samples.

    Sharing A keeps the per-sample gradient deviation A^T(b_mean - b_i)
    independent of x, so the variance bound holds globally and exactly.
    """

    name = "quadratic"

    def __init__(self, A: np.ndarray, worker_b: list):
        dim = A.shape[1]
        super().__init__(len(worker_b), dim, [b.shape[0] for b in worker_b])
        self.A = A
        self.worker_b = worker_b

    def loss(self, x, worker, idx):
        r = self.A @ x - self.worker_b[worker][idx].T
        return 0.5 * float(np.mean(np.sum(r * r, axis=0)))

    def per_sample_grads(self, x, worker, idx):
        r = (self.A @ x)[None, :] - self.worker_b[worker][idx]
        return r @ self.A

    def grad(self, x, worker, idx):
        b_mean = self.worker_b[worker][idx].mean(axis=0)
        return self.A.T @ (self.A @ x - b_mean)

    def worker_grad(self, x, worker):
        return self.A.T @ (self.A @ x - self.worker_b[worker].mean(axis=0))

    def loss_full(self, x):
        # equal worker sizes: f is the plain average over the pooled samples
        all_b = np.concatenate(self.worker_b, axis=0)
        r = all_b - (self.A @ x)[None, :]
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))

    def grad_full(self, x):
        all_b_mean = np.concatenate(self.worker_b, axis=0).mean(axis=0)
        return self.A.T @ (self.A @ x - all_b_mean)

    def exact_constants(self, region_radius: float = 4.0) -> ProblemMeta:
        H = self.A.T @ self.A
        L = float(np.linalg.eigvalsh(H)[-1])
        sig2 = 0.0
        for b in self.worker_b:
            dev = (b - b.mean(axis=0)) @ self.A
            sig2 = max(sig2, float(np.mean(np.sum(dev * dev, axis=1))))
        all_b = np.concatenate(self.worker_b, axis=0)
        b_mean = all_b.mean(axis=0)
        x_star = np.linalg.lstsq(self.A, b_mean, rcond=None)[0]
        f_star = self.loss_full(x_star)
        f_init = self.loss_full(np.zeros(self.dim))
        # analytic bound on sup over ||x|| <= rho of ||A^T (A x - b_i)||
        R = L * region_radius + float(np.max(np.linalg.norm(all_b @ self.A, axis=1)))
        return ProblemMeta(self.dim, L, float(np.sqrt(sig2)), R, f_star, f_init)


def make_synthetic_quadratic(D, N, samples_per_worker, noise, seed=0, L_target=1.0):
    """Random quadratic task with exact constants; noise scales the b spread.

    The minimizer is placed at unit norm so the default iterate region of
    exact_constants / estimate_constants covers every run that starts at 0.
    """
    rng = stream(seed, purpose="data")
    g = rng.normal(size=(D, D))
    u, _, vt = np.linalg.svd(g)
    sing = np.linspace(np.sqrt(L_target) / 3.0, np.sqrt(L_target), D) if D > 1 else np.array([np.sqrt(L_target)])
    A = (u * sing) @ vt
    x_target = rng.normal(size=D)
    x_target /= np.linalg.norm(x_target)
    b_center = A @ x_target
    worker_b = [
        b_center + noise * rng.normal(size=(samples_per_worker, D))
        for _ in range(N)
    ]
    task = QuadraticTask(A, worker_b)
    return task, task.exact_constants()


# ---------------------------------------------------------------------------
# logistic / MLP tasks
# ---------------------------------------------------------------------------


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mlp_param_count(layer_sizes) -> int:
    return int(sum(i * o + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:])))


class MlpTask(Task):
    """Fully-connected classifier: sigmoid hidden layers, softmax + cross-entropy."""

    name = "mlp"

    def __init__(self, layer_sizes, worker_features, worker_labels):
        self.layer_sizes = tuple(int(v) for v in layer_sizes)
        dim = mlp_param_count(self.layer_sizes)
        super().__init__(len(worker_features), dim, [f.shape[0] for f in worker_features])
        self.worker_features = worker_features
        self.worker_labels = worker_labels
        self.n_classes = self.layer_sizes[-1]

    def _unpack(self, x):
        mats = []
        pos = 0
        for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = x[pos : pos + i * o].reshape(i, o)
            pos += i * o
            b = x[pos : pos + o]
            pos += o
            mats.append((w, b))
        return mats

    def _forward(self, x, feats):
        mats = self._unpack(x)
        acts = [feats]
        h = feats
        for w, b in mats[:-1]:
            h = _sigmoid(h @ w + b)
            acts.append(h)
        w, b = mats[-1]
        probs = _softmax(h @ w + b)
        return mats, acts, probs

    def loss(self, x, worker, idx):
        feats = self.worker_features[worker][idx]
        labels = self.worker_labels[worker][idx]
        _, _, probs = self._forward(x, feats)
        picked = np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)
        return float(np.mean(-np.log(picked)))

    def _backward(self, x, feats, labels):
        """Per-sample flattened gradients, shape (batch, dim)."""
        mats, acts, probs = self._forward(x, feats)
        batch = feats.shape[0]
        grads = np.empty((batch, self.dim))
        delta = probs.copy()
        delta[np.arange(batch), labels] -= 1.0  # dCE/dlogits
        pos = self.dim
        for layer in range(len(mats) - 1, -1, -1):
            w, _ = mats[layer]
            a = acts[layer]
            gb = delta
            gw = np.einsum("bi,bo->bio", a, delta)
            pos -= w.size + gb.shape[1]
            grads[:, pos : pos + w.size] = gw.reshape(batch, -1)
            grads[:, pos + w.size : pos + w.size + gb.shape[1]] = gb
            if layer > 0:
                da = delta @ w.T
                delta = da * a * (1.0 - a)  # sigmoid derivative
        return grads

    def per_sample_grads(self, x, worker, idx):
        feats = self.worker_features[worker][idx]
        labels = self.worker_labels[worker][idx]
        return self._backward(x, feats, labels)


def partition_pool(features, labels, n_workers, rng):
    """Shuffle the pool, then split into equal i.i.d. worker shards."""
    n = features.shape[0]
    per = n // n_workers
    order = rng.permutation(n)
    feats, labs = features[order], labels[order]
    wf = [feats[k * per : (k + 1) * per] for k in range(n_workers)]
    wl = [labs[k * per : (k + 1) * per] for k in range(n_workers)]
    return wf, wl


def load_csv_dataset(path):
    """Rows = samples, last column = integer label."""
    try:
        raw = np.loadtxt(path, delimiter=",")
    except FileNotFoundError:
        raise FileNotFoundError(
            f"dataset file {path!r} not found; omit dataset_path to fall back "
            "to the bundled 8x8 digits (or a synthetic set)"
        )
    raw = np.atleast_2d(raw)
    return raw[:, :-1].astype(float), raw[:, -1].astype(int)


def load_idx_dataset(images_path, labels_path):
    """Minimal reader for the idx image/label binary pair."""

    def read(path, want_magic):
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except FileNotFoundError:
            raise FileNotFoundError(
                f"dataset file {path!r} not found; omit dataset_path to fall back "
                "to the bundled 8x8 digits (or a synthetic set)"
            )
        magic, = struct.unpack(">i", data[:4])
        if magic != want_magic:
            raise ValueError(f"{path!r}: unexpected idx magic {magic:#x}")
        ndims = magic & 0xFF
        dims = struct.unpack(f">{ndims}i", data[4 : 4 + 4 * ndims])
        body = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndims)
        return body.reshape(dims)

    images = read(images_path, 0x00000803)
    labels = read(labels_path, 0x00000801)
    feats = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return feats, labels.astype(int)


def _digits_pool(n_features, n_classes, rng):
    """8x8 digits if scikit-learn is importable, else Gaussian class blobs."""
    try:
        from sklearn.datasets import load_digits

        data = load_digits()
        feats = data.data / 16.0
        labels = data.target
        if feats.shape[1] == n_features and labels.max() + 1 >= n_classes:
            keep = labels < n_classes
            return feats[keep], labels[keep]
    except ImportError:
        pass
    centers = rng.normal(size=(n_classes, n_features))
    per = 120
    feats = np.concatenate([centers[c] + 0.5 * rng.normal(size=(per, n_features)) for c in range(n_classes)])
    labels = np.repeat(np.arange(n_classes), per)
    return feats, labels


def make_mlp_task(layer_sizes, N, dataset_path=None, seed=0, samples_per_worker=None):
    """MLP classification task; dataset from CSV, bundled digits, or blobs."""
    rng = stream(seed, purpose="data")
    layer_sizes = tuple(int(v) for v in layer_sizes)
    if dataset_path is not None:
        feats, labels = load_csv_dataset(dataset_path)
    else:
        feats, labels = _digits_pool(layer_sizes[0], layer_sizes[-1], rng)
    if feats.shape[1] != layer_sizes[0]:
        raise ValueError(f"dataset has {feats.shape[1]} features, model expects {layer_sizes[0]}")
    if samples_per_worker is not None:
        need = samples_per_worker * N
        if need > feats.shape[0]:
            raise ValueError(f"need {need} samples, pool has {feats.shape[0]}")
        order = rng.permutation(feats.shape[0])[:need]
        feats, labels = feats[order], labels[order]
    wf, wl = partition_pool(feats, labels, N, rng)
    task = MlpTask(layer_sizes, wf, wl)
    meta = estimate_constants(task, probe_points=12, seed=seed + 1)
    return task, meta


def make_logistic_task(D, N, samples_per_worker, seed=0):
    """Multinomial logistic regression = single-layer MLP on a 2-class blob set."""
    rng = stream(seed, purpose="data")
    n_classes = 2
    n_features = (D - n_classes) // n_classes
    if mlp_param_count((n_features, n_classes)) != D:
        raise ValueError(f"D={D} is not n_features*2+2 for any integer feature count")
    centers = rng.normal(size=(n_classes, n_features))
    feats = np.concatenate(
        [centers[c] + 0.7 * rng.normal(size=(samples_per_worker * N, n_features)) for c in range(n_classes)]
    )
    labels = np.repeat(np.arange(n_classes), samples_per_worker * N)
    order = rng.permutation(feats.shape[0])[: samples_per_worker * N]
    feats, labels = feats[order], labels[order]
    wf, wl = partition_pool(feats, labels, N, rng)
    task = MlpTask((n_features, n_classes), wf, wl)
    task.name = "logistic"
    meta = estimate_constants(task, probe_points=12, seed=seed + 1)
    return task, meta


# ---------------------------------------------------------------------------
# constant estimation
# ---------------------------------------------------------------------------

SAFETY = 1.2  # on sampled L and R; a true upper bound is what Lemma-2 scaling needs


def estimate_constants(task: Task, probe_points: int = 16, seed: int = 0,
                       region_radius: float = 4.0) -> ProblemMeta:
    """Estimate (L, sigma, R, f*, f_init) from probes of the training data.

    Per worker: the Lipschitz ratio is probed on random pairs and sharpened by
    finite-difference power iteration; the variance and gradient-norm bounds
    come from full per-sample gradient sweeps at the probe points, which span
    the iterate region (radius region_radius around the origin, where
    simulations start) including the stiffest direction found.  Sampled L and
    R get a 1.2 safety factor.
    """
    rng = stream(seed, purpose="probe")
    d = task.dim
    scales = np.geomspace(region_radius / 40.0, region_radius, probe_points)

    lip = 0.0
    sig2 = 0.0
    r_max = 0.0
    for n in range(task.n_workers):
        # random Lipschitz-ratio pairs inside the region
        for _ in range(probe_points):
            x = rng.normal(size=d) / np.sqrt(d) * region_radius * rng.uniform(0, 1)
            ysc = x + rng.normal(size=d) * 0.5
            gx, gy = task.worker_grad(x, n), task.worker_grad(ysc, n)
            lip = max(lip, float(np.linalg.norm(gx - gy) / np.linalg.norm(x - ysc)))
        # finite-difference power iteration around the origin
        base = np.zeros(d)
        g0 = task.worker_grad(base, n)
        v = rng.normal(size=d)
        v /= np.linalg.norm(v)
        eps = 1e-4
        for _ in range(25):
            diff = task.worker_grad(base + eps * v, n) - g0
            norm = np.linalg.norm(diff)
            if norm == 0:
                break
            lip = max(lip, float(norm / eps))
            v = diff / norm

        probes = [np.zeros(d), region_radius * v, -region_radius * v]
        probes += [s * rng.normal(size=d) / np.sqrt(d) for s in scales]
        idx = np.arange(task.worker_sizes[n])
        for x in probes:
            g = task.per_sample_grads(x, n, idx)
            if not np.all(np.isfinite(g)):
                raise EstimationError(f"non-finite gradient for worker {n}")
            norms2 = np.sum(g * g, axis=1)
            r_max = max(r_max, float(np.sqrt(norms2.max())))
            dev = g - g.mean(axis=0)
            sig2 = max(sig2, float(np.mean(np.sum(dev * dev, axis=1))))
    if lip <= 0:
        raise EstimationError("gradient field looks constant; cannot estimate L")

    f_init = task.loss_full(np.zeros(d))
    if task.nonnegative_loss:
        f_star_lower = 0.0
    else:
        raise EstimationError("no lower-bound rule for signed losses; supply ProblemMeta directly")
    sigma = float(np.sqrt(max(sig2, 0.0)))
    return ProblemMeta(d, SAFETY * lip, sigma, SAFETY * r_max, f_star_lower, f_init)
