"""Multi-kernel MMD between feature sets and the three-scale domain loss."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

BANDWIDTH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelBank:
    """Convex combination of Gaussian kernels; ``bandwidths`` are sigma^2 values."""

    bandwidths: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.bandwidths) < 1 or len(self.bandwidths) != len(self.weights):
            raise ValueError("need at least one kernel and one weight per bandwidth")
        if any(not np.isfinite(b) or b <= 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be finite and positive")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to 1")

    @classmethod
    def single(cls, sigma2: float) -> KernelBank:
        return cls((float(sigma2),), (1.0,))

    @classmethod
    def from_median(cls, median: float,
                    multipliers: Sequence[float] = BANDWIDTH_MULTIPLIERS) -> KernelBank:
        m = len(multipliers)
        return cls(tuple(float(median * k) for k in multipliers), (1.0 / m,) * m)


def _data(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))


def kernel_eval(bank: KernelBank, x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return float(sum(w * np.exp(-d2 / (2.0 * s)) for s, w in zip(bank.bandwidths, bank.weights)))


def median_bandwidth(xs, xt) -> float:
    """Median pairwise squared distance over the pooled set (1.0 if it is 0)."""
    z = np.concatenate([_data(xs), _data(xt)], axis=0)
    if len(z) < 2:
        raise ValueError("median heuristic needs at least two vectors")
    d2 = ((z[:, None, :] - z[None, :, :]) ** 2).sum(axis=-1)
    med = float(np.median(d2[np.triu_indices(len(z), k=1)]))
    return med if med > 0 else 1.0


def _sq_dists(a: Tensor, b: Tensor) -> Tensor:
    n, d = a.shape
    r = b.shape[0]
    diff = nd.reshape(a, (n, 1, d)) - nd.reshape(b, (1, r, d))
    return nd.tsum(diff * diff, axis=2)


def _gram(bank: KernelBank, d2: Tensor) -> Tensor:
    k = None
    for s, w in zip(bank.bandwidths, bank.weights):
        if w == 0:
            continue
        term = nd.exp(d2 * (-1.0 / (2.0 * s))) * w
        k = term if k is None else k + term
    return k


def gram_matrix(bank: KernelBank, x) -> np.ndarray:
    x = nd._as_tensor(_data(x))
    return _gram(bank, _sq_dists(x, x)).data


def mmd2(bank: KernelBank, xs, xt, estimator: str = "biased") -> Tensor:
    """Squared MMD between the rows of ``xs`` (N, d) and ``xt`` (R, d).

    The biased estimator averages full Gram blocks; the unbiased one drops
    the diagonals of the within-set blocks.
    """
    xs, xt = nd._as_tensor(xs), nd._as_tensor(xt)
    if xs.ndim == 1:
        xs = nd.reshape(xs, (-1, 1))
    if xt.ndim == 1:
        xt = nd.reshape(xt, (-1, 1))
    if xs.shape[1] != xt.shape[1]:
        raise ValueError(f"feature dimension mismatch: {xs.shape} vs {xt.shape}")
    n, r = xs.shape[0], xt.shape[0]
    if n < 1 or r < 1:
        raise ValueError("mmd2 needs non-empty sets")
    kss = _gram(bank, _sq_dists(xs, xs))
    ktt = _gram(bank, _sq_dists(xt, xt))
    kst = _gram(bank, _sq_dists(xs, xt))
    if estimator == "biased":
        return kss.sum() / (n * n) + ktt.sum() / (r * r) - kst.sum() * (2.0 / (n * r))
    if estimator == "unbiased":
        if n < 2 or r < 2:
            raise ValueError("unbiased mmd2 needs at least two samples per set")
        off_s = 1.0 - np.eye(n)
        off_t = 1.0 - np.eye(r)
        return ((kss * off_s).sum() / (n * (n - 1)) + (ktt * off_t).sum() / (r * (r - 1))
                - kst.sum() * (2.0 / (n * r)))
    raise ValueError(f"unknown estimator {estimator!r}")


def pool_features(pyramid: Sequence[Tensor]) -> list[Tensor]:
    return [nd.global_avg_pool(f) for f in pyramid]


def median_banks(pyr_s: Sequence[Tensor], pyr_t: Sequence[Tensor],
                 multipliers: Sequence[float] = BANDWIDTH_MULTIPLIERS) -> list[KernelBank]:
    """Per-scale banks from the median heuristic on pooled features (no gradient)."""
    banks = []
    for fs, ft in zip(pyr_s, pyr_t):
        ps = fs.data.mean(axis=(2, 3))
        pt = ft.data.mean(axis=(2, 3))
        banks.append(KernelBank.from_median(median_bandwidth(ps, pt), multipliers))
    return banks


def domain_loss_terms(pyr_s: Sequence[Tensor], pyr_t: Sequence[Tensor],
                      banks: Sequence[KernelBank], beta: Sequence[float]) -> list[Tensor]:
    """beta_i * mmd2 on globally pooled features, one term per scale."""
    if not (len(pyr_s) == len(pyr_t) == len(banks) == len(beta)):
        raise ValueError("pyramids, banks and beta must cover the same scales")
    terms = []
    for i, (fs, ft) in enumerate(zip(pyr_s, pyr_t)):
        if fs.shape[1:] != ft.shape[1:]:
            raise ValueError(f"scale {i}: feature dims {fs.shape[1:]} vs {ft.shape[1:]}")
        if beta[i] == 0:
            terms.append(Tensor(0.0))
            continue
        ps, pt = nd.global_avg_pool(fs), nd.global_avg_pool(ft)
        terms.append(mmd2(banks[i], ps, pt) * float(beta[i]))
    return terms


def domain_loss(pyr_s, pyr_t, banks, beta) -> Tensor:
    terms = domain_loss_terms(pyr_s, pyr_t, banks, beta)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def build_intermediate(batch_s, batch_t, rng: np.random.Generator):
    """Shuffled union of a source and a labeled target batch.

    Returns the mixed samples and the permutation applied to the
    concatenation ``batch_s + batch_t`` (so that features already computed
    for both batches can be gathered in the same order).
    """
    if not batch_s or not batch_t:
        raise ValueError("intermediate domain needs non-empty source and target batches")
    for s in batch_t:
        if not s.labeled:
            raise ValueError("target samples entering the intermediate domain must carry labels")
    joined = list(batch_s) + list(batch_t)
    perm = rng.permutation(len(joined))
    mixed = []
    for i in perm:
        s = joined[i]
        mixed.append(dataclasses.replace(s, labels=list(s.labels), domain="intermediate",
                                         origin=s.origin or s.domain))
    return mixed, perm
