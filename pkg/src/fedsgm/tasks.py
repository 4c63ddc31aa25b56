"""Synthetic training tasks and client partitions.

Two task families cover the experiments at desk scale:

* quadratics with a controlled Hessian spectrum (so curvature quantities like
  the intrinsic dimension are exact), optionally with heterogeneous per-client
  minima, and
* synthetic binary logistic regression with IID or label-skewed partitions.

A Task exposes mean loss/gradient over arbitrary sample subsets, per-example
gradients (for centralized per-example clipping), and the full Hessian when
the dimension is small enough to afford it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ResourceLimitError

_HESSIAN_DIM_LIMIT = 500

_TASK_TAG = 0x7A5C


@dataclass(frozen=True)
class Partition:
    """Disjoint assignment of sample indices to clients."""

    assignments: tuple
    n: int
    mode: str = "iid"

    def __post_init__(self):
        seen = np.concatenate([np.asarray(a) for a in self.assignments])
        if len(seen) != self.n or len(np.unique(seen)) != self.n:
            raise ConfigurationError("partition must cover each sample exactly once")
        for c, a in enumerate(self.assignments):
            if len(a) == 0:
                raise ConfigurationError(f"client {c} has an empty shard")

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def client_indices(self, c: int) -> np.ndarray:
        return np.asarray(self.assignments[c])


@dataclass
class Task:
    """A differentiable objective over n samples.

    loss/grad take an optional index array and average over it (all samples
    when omitted).  per_example_grads returns the stacked un-averaged
    gradients for the given indices.  hessian is the full-data Hessian at
    theta, or None when unavailable.
    """

    name: str
    d: int
    n: int
    loss: Callable
    grad: Callable
    per_example_grads: Callable
    hessian: Optional[Callable]
    theta0: np.ndarray
    minimum_value: float = math.nan
    test_metric: Optional[Callable] = None
    test_metric_name: str = "loss"

    def __post_init__(self):
        if self.test_metric is None:
            self.test_metric = lambda theta: float(self.loss(theta))
            self.test_metric_name = "loss"


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


def iid_partition(n: int, num_clients: int, seed: int = 0) -> Partition:
    """Random equal-ish split of n samples into num_clients shards."""
    if n < num_clients:
        raise ConfigurationError(f"cannot split {n} samples across {num_clients} clients")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, _TASK_TAG, 1))))
    perm = rng.permutation(n)
    return Partition(tuple(np.sort(a) for a in np.array_split(perm, num_clients)), n)


def label_skew_partition(
    labels: np.ndarray, num_clients: int, concentration: float = 0.5, seed: int = 0
) -> Partition:
    """Dirichlet label-skew split: small concentration, strong heterogeneity."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < num_clients:
        raise ConfigurationError(f"cannot split {n} samples across {num_clients} clients")
    if concentration <= 0:
        raise ConfigurationError(f"concentration must be positive, got {concentration}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, _TASK_TAG, 2))))
    shards: list[list[int]] = [[] for _ in range(num_clients)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(num_clients, concentration))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for c, part in enumerate(np.split(idx, cuts)):
            shards[c].extend(part.tolist())
    # keep every client trainable: hand one sample from the largest shard
    for c in range(num_clients):
        if not shards[c]:
            donor = max(range(num_clients), key=lambda k: len(shards[k]))
            shards[c].append(shards[donor].pop())
    return Partition(
        tuple(np.sort(np.array(s, dtype=int)) for s in shards), n, mode="label_skew"
    )


# ---------------------------------------------------------------------------
# Quadratic tasks
# ---------------------------------------------------------------------------


def power_law_spectrum(d: int, power: float = 2.0) -> np.ndarray:
    """Eigenvalues lambda_i = i^(-power), i = 1..d."""
    return np.arange(1, d + 1, dtype=np.float64) ** (-power)


def make_federated_quadratic(
    eigenvalues: Sequence[float],
    seed: int = 0,
    clients: int = 1,
    heterogeneity: float = 0.0,
    center_scale: float = 1.0,
) -> tuple[Task, Partition]:
    """Quadratic objective L(theta) = mean_i 0.5 (theta-c_i)^T H (theta-c_i).

    H = Q diag(eigenvalues) Q^T with a seeded random orthogonal Q, so the
    Hessian spectrum is exactly the requested one.  One sample per client;
    `heterogeneity` spreads the per-client centers c_i around a common center
    of norm center_scale (zero spread keeps all clients identical).
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    d = lam.shape[0]
    if d < 1:
        raise ConfigurationError("empty spectrum")
    if np.all(lam == 0.0):
        raise ConfigurationError("all-zero spectrum: the objective is constant")
    if lam.max() <= 0.0:
        raise ConfigurationError("spectrum needs at least one positive eigenvalue")
    if clients < 1:
        raise ConfigurationError(f"clients must be >= 1, got {clients}")

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, _TASK_TAG, 3))))
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    H = (Q * lam) @ Q.T
    H = 0.5 * (H + H.T)  # exact symmetry despite rounding

    base = rng.standard_normal(d)
    base *= center_scale / np.linalg.norm(base)
    if clients > 1 and heterogeneity > 0.0:
        offsets = heterogeneity * rng.standard_normal((clients, d)) / math.sqrt(d)
        offsets -= offsets.mean(axis=0)  # the global optimum stays at `base`
        centers = base + offsets
    else:
        centers = np.tile(base, (clients, 1))

    mean_center = centers.mean(axis=0)
    resid = centers - mean_center
    min_val = float(0.5 * np.mean(np.einsum("id,de,ie->i", resid, H, resid)))

    def loss(theta, idx=None):
        diffs = (theta - centers) if idx is None else (theta - centers[np.asarray(idx)])
        return float(0.5 * np.mean(np.einsum("id,de,ie->i", diffs, H, diffs)))

    def grad(theta, idx=None):
        c = mean_center if idx is None else centers[np.asarray(idx)].mean(axis=0)
        return H @ (theta - c)

    def per_example_grads(theta, idx):
        return (theta - centers[np.asarray(idx)]) @ H

    task = Task(
        name="quadratic",
        d=d,
        n=clients,
        loss=loss,
        grad=grad,
        per_example_grads=per_example_grads,
        hessian=lambda theta: H,
        theta0=np.zeros(d),
        minimum_value=min_val if lam.min() >= 0.0 else math.nan,
    )
    part = Partition(tuple(np.array([c]) for c in range(clients)), clients)
    return task, part


def make_quadratic(eigenvalues: Sequence[float], seed: int = 0, center_scale: float = 1.0) -> Task:
    """Single-center quadratic with the given Hessian spectrum (see above)."""
    task, _ = make_federated_quadratic(eigenvalues, seed=seed, center_scale=center_scale)
    return task


# ---------------------------------------------------------------------------
# Logistic regression tasks
# ---------------------------------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logreg_task(X: np.ndarray, y: np.ndarray, X_test, y_test, name="logreg") -> Task:
    n, d = X.shape
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise ConfigurationError("labels must be in {-1, +1}")

    def loss(theta, idx=None):
        Xi, yi = (X, y) if idx is None else (X[np.asarray(idx)], y[np.asarray(idx)])
        return float(np.mean(np.logaddexp(0.0, -yi * (Xi @ theta))))

    def grad(theta, idx=None):
        Xi, yi = (X, y) if idx is None else (X[np.asarray(idx)], y[np.asarray(idx)])
        coef = -yi * _sigmoid(-yi * (Xi @ theta))
        return Xi.T @ coef / len(yi)

    def per_example_grads(theta, idx):
        Xi, yi = X[np.asarray(idx)], y[np.asarray(idx)]
        coef = -yi * _sigmoid(-yi * (Xi @ theta))
        return Xi * coef[:, None]

    def hessian(theta):
        if d > _HESSIAN_DIM_LIMIT:
            raise ResourceLimitError(f"hessian unavailable for d = {d} > {_HESSIAN_DIM_LIMIT}")
        p = _sigmoid(X @ theta)
        w = p * (1.0 - p)
        return (X * w[:, None]).T @ X / n

    def test_accuracy(theta):
        return float(np.mean(np.sign(X_test @ theta) == y_test))

    return Task(
        name=name,
        d=d,
        n=n,
        loss=loss,
        grad=grad,
        per_example_grads=per_example_grads,
        hessian=hessian,
        theta0=np.zeros(d),
        test_metric=test_accuracy,
        test_metric_name="test_accuracy",
    )


def make_logreg(
    n: int,
    d: int,
    clients: int,
    seed: int = 0,
    partition: str = "iid",
    skew: float = 0.5,
    label_noise: float = 0.05,
) -> tuple[Task, Partition]:
    """Synthetic binary logistic regression with a held-out accuracy metric.

    Features are isotropic Gaussian rows scaled to unit expected norm, labels
    come from a random unit teacher vector with `label_noise` flip
    probability.  partition: "iid" or "label_skew" (Dirichlet with
    `concentration = skew`).
    """
    if n < 2 or d < 1:
        raise ConfigurationError(f"need n >= 2, d >= 1, got n={n}, d={d}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, _TASK_TAG, 4))))
    teacher = rng.standard_normal(d)
    teacher /= np.linalg.norm(teacher)

    def draw(m):
        Xm = rng.standard_normal((m, d)) / math.sqrt(d)
        ym = np.sign(Xm @ teacher)
        ym[ym == 0] = 1.0
        flip = rng.random(m) < label_noise
        ym[flip] *= -1.0
        return Xm, ym

    X, y = draw(n)
    X_test, y_test = draw(max(200, n // 5))
    task = _logreg_task(X, y, X_test, y_test)

    if partition == "iid":
        part = iid_partition(n, clients, seed=seed)
    elif partition == "label_skew":
        part = label_skew_partition(y, clients, concentration=skew, seed=seed)
    else:
        raise ConfigurationError(f"unknown partition mode {partition!r}")
    return task, part


# ---------------------------------------------------------------------------
# Curvature and gradient-noise diagnostics
# ---------------------------------------------------------------------------


def intrinsic_dimension(task: Task, theta: Optional[np.ndarray] = None) -> float:
    """I = sum_i |lambda_i| / lambda_max of the loss Hessian at theta.

    Ranges in [1, d]; equals d for an identity Hessian and stays O(1) for
    fast-decaying spectra.  Requires the exact Hessian (d <= 500)."""
    if task.hessian is None:
        raise ConfigurationError(f"task {task.name!r} does not expose a Hessian")
    if task.d > _HESSIAN_DIM_LIMIT:
        raise ResourceLimitError(
            f"intrinsic dimension needs a dense eigendecomposition; d = {task.d} > {_HESSIAN_DIM_LIMIT}"
        )
    if theta is None:
        theta = task.theta0
    lam = np.linalg.eigvalsh(task.hessian(theta))
    lam_max = float(lam.max())
    if lam_max <= 0.0:
        raise ConfigurationError("largest Hessian eigenvalue must be positive")
    return float(np.sum(np.abs(lam)) / lam_max)


def estimate_G_and_sigma_s(
    task: Task,
    partition: Partition,
    thetas: Sequence[np.ndarray],
    batch_size: int,
    seed: int = 0,
    draws: int = 8,
    quantile: float = 0.975,
) -> tuple[float, float]:
    """Empirical client-gradient bound G and minibatch noise scale sigma_s.

    G is the max full-shard client gradient norm over the probe points.
    sigma_s fits the sub-Gaussian tail 2 exp(-a^2/sigma_s^2) to the observed
    minibatch deviations at the given quantile; full-batch sampling (batch
    covering the shard) yields exactly 0.
    """
    if not 0.5 < quantile < 1.0:
        raise ConfigurationError(f"quantile must be in (0.5, 1), got {quantile}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, _TASK_TAG, 5))))
    G = 0.0
    devs = []
    for theta in thetas:
        for c in range(partition.num_clients):
            shard = partition.client_indices(c)
            g_full = task.grad(theta, shard)
            G = max(G, float(np.linalg.norm(g_full)))
            bs = min(batch_size, len(shard))
            for _ in range(draws):
                # sorted so a full batch reproduces g_full bit for bit
                batch = np.sort(rng.choice(shard, size=bs, replace=False))
                devs.append(float(np.linalg.norm(task.grad(theta, batch) - g_full)))
    a_q = float(np.quantile(devs, quantile)) if devs else 0.0
    sigma_s = a_q / math.sqrt(math.log(2.0 / (1.0 - quantile)))
    return G, sigma_s


# ---------------------------------------------------------------------------
# Dataset snapshots (replayable column files)
# ---------------------------------------------------------------------------


def save_dataset(path, X: np.ndarray, y: np.ndarray, partition: Partition):
    """Write samples plus client assignment as one CSV row per sample."""
    X = np.asarray(X, dtype=np.float64)
    owner = np.empty(len(y), dtype=int)
    for c in range(partition.num_clients):
        owner[partition.client_indices(c)] = c
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(X.shape[1])] + ["y", "client"])
        for i in range(X.shape[0]):
            w.writerow([repr(float(v)) for v in X[i]] + [repr(float(y[i])), int(owner[i])])


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, Partition]:
    """Inverse of save_dataset; round-trips bit-exactly (repr serialization)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    d = len(header) - 2
    if header[:d] != [f"x{j}" for j in range(d)] or header[d:] != ["y", "client"]:
        raise ConfigurationError(f"unrecognized dataset header in {path}")
    X = np.array([[float(v) for v in r[:d]] for r in data])
    y = np.array([float(r[d]) for r in data])
    owner = np.array([int(r[d + 1]) for r in data])
    shards = tuple(np.flatnonzero(owner == c) for c in range(owner.max() + 1))
    return X, y, Partition(shards, len(y))


def task_from_snapshot(path, test_fraction: float = 0.2, seed: int = 0):
    """Rebuild a logistic-regression task from a saved snapshot.

    A deterministic slice of the snapshot is held out for the accuracy metric
    so replays are self-contained."""
    X, y, part = load_dataset(path)
    # snapshot data stays the training set; synthesize a held-out view
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, _TASK_TAG, 6))))
    n_test = max(1, int(test_fraction * len(y)))
    take = rng.choice(len(y), size=n_test, replace=False)
    return _logreg_task(X, y, X[take], y[take], name="logreg-snapshot"), part
