"""Shared test utilities: corpus synthesis and finite-difference gradients."""

from __future__ import annotations

import math

import torch

WORDS = (
    "the quick brown fox jumps over a lazy dog while rain falls on green "
    "hills and small birds sing in tall trees near the old stone bridge "
    "where children play until dusk turns the sky deep red and quiet"
).split()

PUNCT = [". ", ", ", " ", " ", " ", " ", "; "]


def make_corpus(n_chars: int, seed: int = 0) -> str:
    """Deterministic pseudo-English text: enough structure for a char model
    to learn from, built from a small fixed word list."""
    rng = torch.Generator().manual_seed(seed)
    parts: list[str] = []
    total = 0
    while total < n_chars:
        w = WORDS[int(torch.randint(len(WORDS), (1,), generator=rng))]
        p = PUNCT[int(torch.randint(len(PUNCT), (1,), generator=rng))]
        piece = w + p
        parts.append(piece)
        total += len(piece)
    return "".join(parts)[:n_chars]


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of a scalar fn w.r.t. tensor x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = float(fn(x))
        flat[i] = orig - h
        down = float(fn(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    denom = torch.maximum(a.abs(), b.abs()).clamp_min(floor)
    return float(((a - b).abs() / denom).max())


def chi_square_pvalue(counts: torch.Tensor) -> float:
    """Upper-tail p-value of Pearson's chi-square against a uniform null."""
    from scipy import stats

    n = counts.sum().item()
    k = counts.numel()
    expected = n / k
    stat = float(((counts.double() - expected) ** 2 / expected).sum())
    return float(stats.chi2.sf(stat, df=k - 1))


def log(msg: str) -> None:
    print(msg, flush=True)


def entropy_nats(counts: dict[int, int]) -> float:
    total = sum(counts.values())
    h = 0.0
    for c in counts.values():
        if c:
            p = c / total
            h -= p * math.log(p)
    return h
