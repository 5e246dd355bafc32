"""SI-SNR objective, permutation search and output alignment, speaker-identity loss."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Linear, Tensor
from .autodiff import functional as F
from .signal import Waveform

MAX_PIT_SOURCES = 4


def si_snr(x, s, eps: float = 1e-8, zero_mean: bool = False) -> Tensor:
    """Scale-invariant SNR in dB over the last axis; differentiable w.r.t. ``x``.

    The reference is projected onto the estimate::

        x_t = <x, s> / <x, x> * x,   e = x_t - s,   10 log10(<x_t, x_t> / <e, e>)

    ``eps`` is added to both energies of the ratio. The projection denominator
    is only guarded against an all-zero estimate, which keeps the value
    exactly invariant to rescaling ``x``. Batched inputs (..., T) give a (...)
    tensor of values.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=x.dtype))
    if x.shape[-1] != s.shape[-1]:
        raise ValueError(f"length mismatch: estimate {x.shape[-1]} vs reference {s.shape[-1]}")
    if zero_mean:
        x = x - x.mean(axis=-1, keepdims=True)
        s = s - s.mean(axis=-1, keepdims=True)
    xs = (x * s).sum(axis=-1, keepdims=True)
    xx = (x * x).sum(axis=-1, keepdims=True)
    silent = Tensor((xx.data == 0).astype(xx.dtype))
    proj = x * (xs / (xx + silent))
    err = proj - s
    ratio = ((proj * proj).sum(axis=-1) + eps) / ((err * err).sum(axis=-1) + eps)
    return ratio.log() * (10.0 / np.log(10.0))


def si_snr_value(x, s, eps: float = 1e-8, zero_mean: bool = False) -> float:
    """Plain-float SI-SNR for evaluation code."""
    xa = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    sa = s.samples if isinstance(s, Waveform) else np.asarray(s, dtype=np.float64)
    return float(si_snr(Tensor(xa.astype(np.float64)), Tensor(sa.astype(np.float64)), eps, zero_mean).data)


def reconstruction_loss(estimates, references, eps: float = 1e-8) -> Tensor:
    """Mean negative SI-SNR over already-aligned (estimate, reference) pairs.

    Accepts sequences of signals or stacked tensors (..., n, T).
    """
    if isinstance(estimates, Tensor):
        if estimates.size == 0:
            raise ValueError("no estimates given")
        return -si_snr(estimates, references, eps).mean()
    if len(estimates) == 0:
        raise ValueError("no estimates given")
    if len(estimates) != len(references):
        raise ValueError(f"{len(estimates)} estimates for {len(references)} references")
    est = F.stack([_as_tensor(e) for e in estimates])
    ref = np.stack([_as_array(r) for r in references])
    return -si_snr(est, ref, eps).mean()


def batch_pit_loss(estimates: Tensor, references, eps: float = 1e-8) -> tuple[Tensor, np.ndarray]:
    """PIT over a batch (B, n, T): the best assignment is chosen per example.

    Returns the mean loss and a (B, n) array of estimate indices per reference.
    """
    refs = references if isinstance(references, Tensor) else Tensor(np.asarray(references, dtype=estimates.dtype))
    b, n, t = estimates.shape
    _check_count(n, refs.shape[1])
    scores = si_snr(estimates.reshape(b, n, 1, t), refs.reshape(b, 1, n, t), eps)  # (B, est, ref)
    perms = np.array(list(itertools.permutations(range(n))))
    totals = np.stack([scores.data[:, p, np.arange(n)].sum(axis=1) for p in perms], axis=1)
    chosen = perms[np.argmax(totals, axis=1)]  # (B, n)
    picked = scores[np.arange(b)[:, None], chosen, np.arange(n)[None, :]]
    return -picked.mean(), chosen


def pairwise_si_snr(estimates, references, eps: float = 1e-8) -> np.ndarray:
    """Matrix M[i, j] = SI-SNR(estimate i, reference j)."""
    est = np.stack([_as_array(e) for e in estimates])
    ref = np.stack([_as_array(r) for r in references])
    return si_snr(Tensor(est[:, None, :]), Tensor(ref[None, :, :]), eps).data


def _check_count(n_est: int, n_ref: int) -> None:
    if n_est != n_ref:
        raise ValueError(f"{n_est} estimates for {n_ref} references")
    if n_est == 0:
        raise ValueError("no estimates given")
    if n_est > MAX_PIT_SOURCES:
        raise ValueError(f"exhaustive permutation search supports at most {MAX_PIT_SOURCES} sources, got {n_est}")


def pit_loss(estimates, references, eps: float = 1e-8) -> tuple[Tensor, tuple[int, ...]]:
    """Minimum reconstruction loss over all assignments; returns ``(loss, perm)``.

    ``perm[j]`` is the estimate index assigned to reference ``j``.
    """
    ests = _unstack(estimates)
    refs = [_as_array(r) for r in references]
    _check_count(len(ests), len(refs))
    ref_arr = np.stack(refs)
    best, best_perm = None, None
    for perm in itertools.permutations(range(len(ests))):
        loss = -si_snr(F.stack([ests[i] for i in perm]), ref_arr, eps).mean()
        if best is None or loss.item() < best.item():
            best, best_perm = loss, perm
    return best, best_perm


@dataclass
class AlignedPair:
    estimate: Waveform
    reference: Waveform
    speaker_label: str | None = None

    def __post_init__(self):
        if len(self.estimate) != len(self.reference):
            raise ValueError(f"aligned pair lengths differ: {len(self.estimate)} vs {len(self.reference)}")


def best_permutation(estimates, references, eps: float = 1e-8) -> tuple[tuple[int, ...], float]:
    """Permutation maximizing total pairwise SI-SNR, and that total."""
    _check_count(len(estimates), len(references))
    scores = pairwise_si_snr(estimates, references, eps)
    n = len(estimates)
    best_perm, best_total = None, -np.inf
    for perm in itertools.permutations(range(n)):
        total = float(sum(scores[perm[j], j] for j in range(n)))
        if total > best_total:
            best_perm, best_total = perm, total
    return best_perm, best_total


def align_outputs(
    estimates: Sequence[Waveform],
    references: Sequence[Waveform],
    labels: Sequence[str] | None = None,
    eps: float = 1e-8,
) -> list[AlignedPair]:
    """Pair each reference with an estimate so that the summed SI-SNR is maximal.

    The result is ordered like ``references``.
    """
    perm, _ = best_permutation([_as_array(e) for e in estimates], [_as_array(r) for r in references], eps)
    labels = list(labels) if labels is not None else [None] * len(references)
    out = []
    for j, ref in enumerate(references):
        est = estimates[perm[j]]
        est_w = est if isinstance(est, Waveform) else Waveform(np.asarray(est))
        ref_w = ref if isinstance(ref, Waveform) else Waveform(np.asarray(ref))
        out.append(AlignedPair(est_w, ref_w, labels[j]))
    return out


def identity_loss(filters: Tensor, speaker_index, classifier: Linear, num_speakers: int) -> Tensor:
    """Cross-entropy of the classifier's logits on the speaker filter(s)."""
    idx = np.atleast_1d(np.asarray(speaker_index))
    if np.any(idx < 0) or np.any(idx >= num_speakers):
        raise IndexError(f"speaker index {speaker_index} out of range [0, {num_speakers})")
    logits = classifier(filters)
    if logits.shape[-1] != num_speakers:
        raise ValueError(f"classifier has {logits.shape[-1]} outputs for {num_speakers} speakers")
    return F.cross_entropy(logits, idx)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Waveform):
        return x.samples
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(_as_array(x))


def _unstack(estimates) -> list[Tensor]:
    if isinstance(estimates, Tensor):
        return [estimates[i] for i in range(estimates.shape[0])]
    return [_as_tensor(e) for e in estimates]
