"""Linear-chain CRF.

A path y over K positions scores ``sum_i e[i, y_i] + sum_{i>=1} t[y_{i-1}, y_i]``.
The first emission is included and there are no start/stop transitions.
All functions accept a single sequence ``[K, N]`` or a batch ``[B, K, N]``;
batched calls take a ``[B, K]`` mask of valid positions (left-aligned).
"""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch
from torch import nn

MAX_ENUMERATION = 10 ** 6


class EmptySequenceError(ValueError):
    pass


def _batched(emissions, tags=None, mask=None):
    squeeze = emissions.dim() == 2
    if squeeze:
        emissions = emissions.unsqueeze(0)
        tags = None if tags is None else tags.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    B, K, _ = emissions.shape
    if K == 0:
        raise EmptySequenceError("CRF over an empty sequence")
    if mask is None:
        mask = torch.ones(B, K, dtype=torch.bool, device=emissions.device)
    mask = mask.bool()
    if not bool(mask[:, 0].all()):
        raise EmptySequenceError("every sequence needs at least one position")
    if tags is not None and tags.shape != (B, K):
        raise ValueError(f"tag shape {tuple(tags.shape)} does not match emissions {(B, K)}")
    return emissions, tags, mask, squeeze


def path_score(emissions: torch.Tensor, transitions: torch.Tensor, tags: torch.Tensor,
               mask: torch.Tensor | None = None) -> torch.Tensor:
    e, y, mask, squeeze = _batched(emissions, tags, mask)
    y = y.long()
    m = mask.to(e.dtype)
    emit = e.gather(2, y.unsqueeze(2)).squeeze(2)
    score = (emit * m).sum(1)
    if e.shape[1] > 1:
        trans = transitions[y[:, :-1], y[:, 1:]]
        score = score + (trans * m[:, 1:]).sum(1)
    return score[0] if squeeze else score


def log_partition(emissions: torch.Tensor, transitions: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    e, _, mask, squeeze = _batched(emissions, None, mask)
    alpha = e[:, 0]
    for i in range(1, e.shape[1]):
        nxt = torch.logsumexp(alpha.unsqueeze(2) + transitions.unsqueeze(0), dim=1) + e[:, i]
        alpha = torch.where(mask[:, i:i + 1], nxt, alpha)
    out = torch.logsumexp(alpha, dim=1)
    return out[0] if squeeze else out


def nll(emissions: torch.Tensor, transitions: torch.Tensor, tags: torch.Tensor,
        mask: torch.Tensor | None = None) -> torch.Tensor:
    """-log P(tags | emissions); per-sequence for batched input."""
    if tags.shape != emissions.shape[:-1]:
        raise ValueError(f"tag shape {tuple(tags.shape)} does not match emissions "
                         f"{tuple(emissions.shape[:-1])}")
    return log_partition(emissions, transitions, mask) - path_score(emissions, transitions, tags, mask)


def viterbi(emissions, transitions, mask=None) -> list[int] | list[list[int]]:
    """Best path(s). Ties go to the lowest tag index at each backtracking step.

    Runs in numpy; returns a list for ``[K, N]`` input and a list of
    per-sequence lists (trimmed to their lengths) for ``[B, K, N]`` input.
    """
    e = _to_numpy(emissions)
    t = _to_numpy(transitions)
    single = e.ndim == 2
    if single:
        e = e[None]
    B, K, N = e.shape
    if K == 0:
        raise EmptySequenceError("CRF over an empty sequence")
    m = np.ones((B, K), dtype=bool) if mask is None else _to_numpy(mask).astype(bool)
    if single and mask is not None:
        m = m[None]
    score = e[:, 0].copy()
    back = np.zeros((B, K, N), dtype=np.int64)
    ident = np.arange(N)
    for i in range(1, K):
        cand = score[:, :, None] + t[None]  # [B, prev, cur]
        best_prev = cand.argmax(axis=1)
        nxt = np.take_along_axis(cand, best_prev[:, None, :], axis=1)[:, 0] + e[:, i]
        live = m[:, i]
        score = np.where(live[:, None], nxt, score)
        back[:, i] = np.where(live[:, None], best_prev, ident)
    paths = []
    lengths = m.sum(1)
    for b in range(B):
        L = int(lengths[b])
        y = [int(score[b].argmax())]
        for i in range(L - 1, 0, -1):
            y.append(int(back[b, i, y[-1]]))
        paths.append(y[::-1])
    return paths[0] if single else paths


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def score_numpy(e: np.ndarray, t: np.ndarray, y) -> float:
    s = float(e[0, y[0]])
    for i in range(1, len(y)):
        s += float(e[i, y[i]] + t[y[i - 1], y[i]])
    return s


def enumerate_distribution(emissions, transitions) -> dict[tuple[int, ...], float]:
    """Exact distribution over all N^K tag sequences by brute force."""
    e, t = _to_numpy(emissions).astype(np.float64), _to_numpy(transitions).astype(np.float64)
    K, N = e.shape
    if K == 0:
        raise EmptySequenceError("CRF over an empty sequence")
    if N ** K > MAX_ENUMERATION:
        raise ValueError(f"N^K = {N}^{K} exceeds the enumeration limit {MAX_ENUMERATION}")
    paths = list(itertools.product(range(N), repeat=K))
    scores = np.array([score_numpy(e, t, y) for y in paths])
    top = scores.max()
    weights = np.exp(scores - top)
    z = weights.sum()
    return {y: float(w / z) for y, w in zip(paths, weights)}


def enumerate_log_partition(emissions, transitions) -> float:
    e, t = _to_numpy(emissions).astype(np.float64), _to_numpy(transitions).astype(np.float64)
    K, N = e.shape
    scores = [score_numpy(e, t, y) for y in itertools.product(range(N), repeat=K)]
    top = max(scores)
    return top + math.log(sum(math.exp(s - top) for s in scores))


class CRF(nn.Module):
    """Trainable transition matrix plus the functions above."""

    def __init__(self, num_tags: int):
        super().__init__()
        self.num_tags = num_tags
        self.transitions = nn.Parameter(torch.zeros(num_tags, num_tags))

    def nll(self, emissions, tags, mask=None):
        return nll(emissions, self.transitions, tags, mask)

    def decode(self, emissions, mask=None):
        return viterbi(emissions, self.transitions, mask)
