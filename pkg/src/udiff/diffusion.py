"""Categorical diffusion with a uniform prior: forward corruption, reverse
posterior, and the training objectives.

Forward process per token: at time t in [0, 1] the marginal of a clean token
x0 is ``alpha_t * onehot(x0) + (1 - alpha_t) / V`` where alpha_t decreases
monotonically from 1 (clean) to 0 (pure uniform noise).  The reverse
posterior q(x_s | x_t, x0) for s < t follows from Bayes' rule and is what
ancestral sampling iterates with the model's prediction substituted for x0.

Loss variants (selected through :class:`LossConfig`):

* ``nelbo``                -- exact per-token negative evidence lower bound.
* ``reconstruction``       -- cross entropy against x0 at every position.
* ``denoising``            -- cross entropy restricted to corrupted positions.
* ``contrastive_uniform``  -- denoising plus a +log p term on one uniformly
                              drawn negative token per corrupted position.
* ``contrastive_noisy``    -- same, with the noisy token x_t as the negative.

All operations are pure functions of their arguments plus an explicitly
passed ``torch.Generator``; there is no shared mutable state, so concurrent
use on distinct generators is safe.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import torch
from torch import Tensor

log = logging.getLogger(__name__)

ALPHA_CLAMP = 1e-6   # floor on alpha_t so t = 1 stays usable in ratios
PROB_FLOOR = 1e-12   # clamp inside bare logs; keeps every loss finite
T_MIN = 1e-3         # training/eval time draws live in (T_MIN, 1]


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


# ---------------------------------------------------------------------------
# Vocabulary and noise schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocab:
    """Token alphabet of size V with the uniform prior 1/V."""

    size: int

    def __post_init__(self) -> None:
        if self.size < 2:
            raise DomainError(f"vocab size must be >= 2, got {self.size}")

    def prior(self, dtype: torch.dtype = torch.float64) -> Tensor:
        return torch.full((self.size,), 1.0 / self.size, dtype=dtype)


def _as_time(t) -> Tensor:
    if torch.is_tensor(t):
        t = t if t.is_floating_point() else t.to(torch.float64)
    else:
        t = torch.as_tensor(t, dtype=torch.float64)
    if (t < 0).any() or (t > 1).any():
        raise DomainError(f"diffusion time must lie in [0, 1], got {t}")
    return t


class NoiseSchedule:
    """Maps diffusion time t in [0, 1] to (alpha_t, alpha'_t).

    alpha is clamped below at ``clamp`` so that t = 1 does not produce an
    exact zero; alpha' is always the raw analytic derivative.
    """

    kind = "base"

    def __init__(self, clamp: float = ALPHA_CLAMP):
        if clamp < 0 or clamp >= 1:
            raise DomainError(f"clamp must lie in [0, 1), got {clamp}")
        self.clamp = clamp

    def _raw_alpha(self, t: Tensor) -> Tensor:
        raise NotImplementedError

    def alpha(self, t) -> Tensor:
        return self._raw_alpha(_as_time(t)).clamp_min(self.clamp)

    def alpha_prime(self, t) -> Tensor:
        raise NotImplementedError


class LinearSchedule(NoiseSchedule):
    """alpha_t = 1 - t."""

    kind = "linear"

    def _raw_alpha(self, t: Tensor) -> Tensor:
        return 1.0 - t

    def alpha_prime(self, t) -> Tensor:
        return torch.full_like(_as_time(t), -1.0)


class GeometricSchedule(NoiseSchedule):
    """alpha_t = floor**t: geometric interpolation from 1 down to the floor."""

    kind = "geometric"

    def __init__(self, clamp: float = ALPHA_CLAMP):
        super().__init__(clamp)
        if self.clamp <= 0:
            raise DomainError("geometric schedule needs a positive floor")
        self._log_floor = math.log(self.clamp)

    def _raw_alpha(self, t: Tensor) -> Tensor:
        return torch.exp(self._log_floor * t)

    def alpha_prime(self, t) -> Tensor:
        return self._log_floor * torch.exp(self._log_floor * _as_time(t))


def make_schedule(kind: str, clamp: float = ALPHA_CLAMP) -> NoiseSchedule:
    if kind == "linear":
        return LinearSchedule(clamp)
    if kind == "geometric":
        return GeometricSchedule(clamp)
    raise DomainError(f"unknown noise schedule {kind!r}")


def alpha_at(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    """Scalar (alpha_t, alpha'_t) with domain validation."""
    tt = _as_time(float(t)).to(torch.float64)
    return float(schedule.alpha(tt)), float(schedule.alpha_prime(tt))


def sample_times(
    batch_size: int,
    rng: torch.Generator | None = None,
    t_min: float = T_MIN,
    stratified: bool = True,
) -> Tensor:
    """Draw one diffusion time per example from U(t_min, 1].

    With ``stratified`` each example occupies its own stratum of the
    interval, which lowers the variance of the batch loss without changing
    its expectation.
    """
    u = torch.rand(batch_size, generator=rng, dtype=torch.float64)
    if stratified:
        u = (torch.arange(batch_size, dtype=torch.float64) + u) / batch_size
    return t_min + (1.0 - t_min) * u


# ---------------------------------------------------------------------------
# Sequences and model-output grids
# ---------------------------------------------------------------------------

@dataclass
class NoisySequence:
    """A corrupted sequence x_t paired with its time and corruption mask."""

    tokens: Tensor          # (L,) long
    t: float
    corrupted_mask: Tensor  # (L,) bool, True where tokens differ from x0


@dataclass
class NoisyBatch:
    """Batch form of :class:`NoisySequence` with one time per example."""

    tokens: Tensor          # (B, L) long
    t: Tensor               # (B,) float
    corrupted_mask: Tensor  # (B, L) bool


@dataclass
class CategoricalGrid:
    """Per-position distributions over the vocabulary (model output)."""

    probs: Tensor  # (..., V); rows are normalized on access

    @classmethod
    def from_logits(cls, logits: Tensor) -> "CategoricalGrid":
        return cls(torch.softmax(logits, dim=-1))


def as_probs(grid) -> Tensor:
    """Normalize grid rows, warning when they are materially off."""
    p = grid.probs if isinstance(grid, CategoricalGrid) else grid
    if (p < 0).any():
        raise DomainError("probability grid contains negative entries")
    totals = p.sum(dim=-1, keepdim=True)
    if (totals <= 0).any():
        raise DomainError("probability grid contains an all-zero row")
    if (totals - 1.0).abs().max() > 1e-6:
        log.warning("probability grid rows renormalized (max dev %.3g)",
                    float((totals - 1.0).abs().max()))
    return p / totals


def _validate_tokens(tokens: Tensor, V: int, name: str) -> None:
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= V):
        raise DomainError(f"{name} contains indices outside [0, {V})")


# ---------------------------------------------------------------------------
# Forward process
# ---------------------------------------------------------------------------

def forward_marginal(
    x0_token: int, t: float, vocab: Vocab, schedule: NoiseSchedule
) -> Tensor:
    """Marginal of x_t given one clean token: alpha*onehot + (1-alpha)/V."""
    if not 0 <= x0_token < vocab.size:
        raise DomainError(f"token {x0_token} outside [0, {vocab.size})")
    alpha, _ = alpha_at(schedule, t)
    p = torch.full((vocab.size,), (1.0 - alpha) / vocab.size, dtype=torch.float64)
    p[x0_token] += alpha
    return p


def corrupt_batch(
    x0: Tensor,
    t: Tensor,
    vocab: Vocab,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> NoisyBatch:
    """Sample x_t per position: keep x0 with probability alpha_t, else draw
    a uniformly random token (which may coincide with x0)."""
    _validate_tokens(x0, vocab.size, "x0")
    alpha = schedule.alpha(t).to(torch.float64)
    keep = torch.rand(x0.shape, generator=rng, dtype=torch.float64) < alpha.unsqueeze(-1)
    replacement = torch.randint(vocab.size, x0.shape, generator=rng)
    tokens = torch.where(keep, x0, replacement)
    return NoisyBatch(tokens=tokens, t=t, corrupted_mask=tokens != x0)


def corrupt_sequence(
    x0: Tensor,
    t: float,
    vocab: Vocab,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> NoisySequence:
    """Single-sequence convenience wrapper around :func:`corrupt_batch`."""
    if not 0 < t <= 1:
        raise DomainError(f"corruption time must lie in (0, 1], got {t}")
    batch = corrupt_batch(x0.unsqueeze(0), torch.tensor([t], dtype=torch.float64),
                          vocab, schedule, rng)
    return NoisySequence(batch.tokens[0], t, batch.corrupted_mask[0])


# ---------------------------------------------------------------------------
# Reverse posterior
# ---------------------------------------------------------------------------

def posterior_probs(
    xt_tokens: Tensor,
    x0_probs: Tensor,
    t: float,
    s: float,
    vocab: Vocab,
    schedule: NoiseSchedule,
) -> Tensor:
    """Reverse posterior q(x_s | x_t, x0) for every position, vectorized.

    ``x0_probs`` is either the exact one-hot of x0 or the model's predicted
    distribution over x0.  Computed in float64; all four additive terms are
    nonnegative, so the output needs no clamping and sums to 1 analytically.
    """
    if s > t:
        raise DomainError(f"posterior needs s <= t, got s={s}, t={t}")
    alpha_t, _ = alpha_at(schedule, t)
    alpha_s, _ = alpha_at(schedule, s)
    if alpha_s == 0.0:
        raise DomainError("alpha_s = 0: step ratio alpha_t/alpha_s undefined")
    V = vocab.size
    _validate_tokens(xt_tokens, V, "x_t")
    a_ts = alpha_t / alpha_s

    p = as_probs(x0_probs).to(torch.float64)
    onehot_t = torch.nn.functional.one_hot(xt_tokens, V).to(torch.float64)
    p_at_xt = p.gather(-1, xt_tokens.unsqueeze(-1))

    num = (
        V * alpha_t * onehot_t * p
        + (a_ts - alpha_t) * onehot_t
        + (alpha_s - alpha_t) * p
        + (1.0 - a_ts) * (1.0 - alpha_s) / V
    )
    denom = V * alpha_t * p_at_xt + 1.0 - alpha_t
    out = num / denom
    return out / out.sum(dim=-1, keepdim=True)


def posterior_step(
    x_t_token: int,
    x0_dist: Tensor,
    t: float,
    s: float,
    vocab: Vocab,
    schedule: NoiseSchedule,
) -> Tensor:
    """One-position reverse posterior; see :func:`posterior_probs`."""
    return posterior_probs(
        torch.tensor([x_t_token]), x0_dist.unsqueeze(0), t, s, vocab, schedule
    )[0]


# ---------------------------------------------------------------------------
# Loss configuration and reports
# ---------------------------------------------------------------------------

class LossVariant(str, Enum):
    NELBO = "nelbo"
    RECONSTRUCTION = "reconstruction"
    DENOISING = "denoising"
    CONTRASTIVE_UNIFORM = "contrastive_uniform"
    CONTRASTIVE_NOISY = "contrastive_noisy"


@dataclass
class LossConfig:
    """Objective selection and the knobs shared by the variants.

    ``negative_weight`` scales the +log p(negative) term; it exists as a
    testing/ablation hook (0 reduces both contrastive variants to the plain
    denoising loss up to the epsilon shift).  ``epsilon_positive_only``
    restricts the epsilon stabilizer to the positive log; the default keeps
    it in both logs since the divergence risk lives in the negative term.
    """

    variant: LossVariant = LossVariant.DENOISING
    epsilon: float = 1e-4
    time_samples_per_example: int = 1
    reduction: str = "mean_over_corrupted"  # or "mean_over_all"
    epsilon_positive_only: bool = False
    exclude_clean_negatives: bool = False
    negative_weight: float = 1.0

    def __post_init__(self) -> None:
        self.variant = LossVariant(self.variant)
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if self.time_samples_per_example < 1:
            raise DomainError("time_samples_per_example must be >= 1")
        if self.reduction not in ("mean_over_corrupted", "mean_over_all"):
            raise DomainError(f"unknown reduction {self.reduction!r}")


@dataclass
class LossReport:
    """Scalar loss plus its decomposition.

    ``value`` is a 0-dim tensor and keeps the autograd graph;
    ``positive_term`` and ``negative_term`` are detached floats with
    ``value = positive_term + negative_weight * negative_term`` for the
    contrastive variants (``negative_term`` is 0 elsewhere).
    """

    value: Tensor
    corrupted_count: int
    positive_term: float
    negative_term: float = 0.0


# ---------------------------------------------------------------------------
# Losses (batched cores + single-sequence wrappers)
# ---------------------------------------------------------------------------

def _gather_token_probs(probs: Tensor, tokens: Tensor) -> Tensor:
    return probs.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)


def _item(x: Tensor) -> float:
    return float(x.detach())


def _check_mask(x0: Tensor, noisy: NoisyBatch) -> None:
    if x0.shape != noisy.tokens.shape:
        raise DomainError("x0 and x_t shapes differ")
    if not torch.equal(noisy.corrupted_mask, noisy.tokens != x0):
        raise DomainError("corrupted_mask inconsistent with (x0, x_t)")


def _reconstruction_sums(x0: Tensor, probs: Tensor, mask: Tensor | None) -> Tensor:
    target = _gather_token_probs(probs, x0).clamp_min(PROB_FLOOR)
    nll = -torch.log(target)
    if mask is not None:
        nll = nll * mask
    return nll.sum()


def _contrastive_sums(
    x0: Tensor,
    noisy: NoisyBatch,
    probs: Tensor,
    config: LossConfig,
    negatives: Tensor,
) -> tuple[Tensor, Tensor]:
    mask = noisy.corrupted_mask
    eps = config.epsilon
    p_pos = _gather_token_probs(probs, x0)
    p_neg = _gather_token_probs(probs, negatives)
    pos = -(torch.log(p_pos + eps) * mask).sum()
    if config.epsilon_positive_only:
        neg = (torch.log(p_neg.clamp_min(PROB_FLOOR)) * mask).sum()
    else:
        neg = (torch.log(p_neg + eps) * mask).sum()
    return pos, neg


def _draw_uniform_negatives(
    x0: Tensor, V: int, config: LossConfig, rng: torch.Generator | None
) -> Tensor:
    if config.exclude_clean_negatives:
        # Uniform over the V-1 tokens that differ from x0.
        neg = torch.randint(V - 1, x0.shape, generator=rng)
        return neg + (neg >= x0).long()
    return torch.randint(V, x0.shape, generator=rng)


def reconstruction_loss(x0: Tensor, xt: NoisySequence, grid) -> LossReport:
    """Cross entropy against x0 at every position (sum over the sequence)."""
    probs = as_probs(grid)
    noisy = NoisyBatch(xt.tokens.unsqueeze(0), torch.tensor([xt.t]),
                       xt.corrupted_mask.unsqueeze(0))
    _check_mask(x0.unsqueeze(0), noisy)
    total = _reconstruction_sums(x0.unsqueeze(0), probs.unsqueeze(0), None)
    return LossReport(total, int(xt.corrupted_mask.sum()), _item(total))


def denoising_loss(x0: Tensor, xt: NoisySequence, grid) -> LossReport:
    """Cross entropy restricted to corrupted positions (sum)."""
    probs = as_probs(grid)
    noisy = NoisyBatch(xt.tokens.unsqueeze(0), torch.tensor([xt.t]),
                       xt.corrupted_mask.unsqueeze(0))
    _check_mask(x0.unsqueeze(0), noisy)
    total = _reconstruction_sums(x0.unsqueeze(0), probs.unsqueeze(0),
                                 noisy.corrupted_mask)
    return LossReport(total, int(xt.corrupted_mask.sum()), _item(total))


def contrastive_uniform_loss(
    x0: Tensor,
    xt: NoisySequence,
    grid,
    config: LossConfig,
    rng: torch.Generator | None = None,
) -> LossReport:
    """Denoising loss plus +log p on one uniform negative per corrupted
    position (negatives may coincide with x0 unless configured otherwise)."""
    probs = as_probs(grid).unsqueeze(0)
    noisy = NoisyBatch(xt.tokens.unsqueeze(0), torch.tensor([xt.t]),
                       xt.corrupted_mask.unsqueeze(0))
    x0b = x0.unsqueeze(0)
    _check_mask(x0b, noisy)
    negatives = _draw_uniform_negatives(x0b, probs.shape[-1], config, rng)
    pos, neg = _contrastive_sums(x0b, noisy, probs, config, negatives)
    value = pos + config.negative_weight * neg
    return LossReport(value, int(xt.corrupted_mask.sum()), _item(pos), _item(neg))


def contrastive_noisy_loss(
    x0: Tensor, xt: NoisySequence, grid, config: LossConfig
) -> LossReport:
    """Contrastive variant whose negative at position l is x_t^l itself;
    deterministic, and the negative is never the clean token wherever the
    corruption indicator fires."""
    probs = as_probs(grid).unsqueeze(0)
    noisy = NoisyBatch(xt.tokens.unsqueeze(0), torch.tensor([xt.t]),
                       xt.corrupted_mask.unsqueeze(0))
    x0b = x0.unsqueeze(0)
    _check_mask(x0b, noisy)
    pos, neg = _contrastive_sums(x0b, noisy, probs, config, noisy.tokens)
    value = pos + config.negative_weight * neg
    return LossReport(value, int(xt.corrupted_mask.sum()), _item(pos), _item(neg))


# ---------------------------------------------------------------------------
# NELBO
# ---------------------------------------------------------------------------

@dataclass
class NelboTerms:
    """Intermediate quantities of the per-token NELBO.

    ``x_tilde = V*alpha*onehot(x0) + (1-alpha)`` and likewise for the model
    distribution; every entry is at least ``1 - alpha > 0`` so all logs are
    finite, and x_tilde sums to V.
    """

    x_tilde: Tensor
    x_theta_tilde: Tensor
    index: Tensor
    weight: Tensor


def _nelbo_terms(
    x0: Tensor, xt: Tensor, alpha: Tensor, alpha_prime: Tensor, probs: Tensor
) -> NelboTerms:
    V = probs.shape[-1]
    if (alpha >= 1.0).any() or (alpha <= 0.0).any():
        raise DomainError("NELBO needs alpha_t strictly inside (0, 1)")
    a = alpha.reshape(-1, *([1] * (probs.dim() - 1)))
    onehot = torch.nn.functional.one_hot(x0, V).to(probs.dtype)
    x_tilde = V * a * onehot + (1.0 - a)
    x_theta = V * a * probs + (1.0 - a)
    weight = -alpha_prime / (V * alpha)
    return NelboTerms(x_tilde, x_theta, xt, weight)


def _nelbo_per_position(terms: NelboTerms) -> Tensor:
    V = terms.x_tilde.shape[-1]
    xt_i = _gather_token_probs(terms.x_tilde, terms.index)
    xth_i = _gather_token_probs(terms.x_theta_tilde, terms.index)
    log_ratio = (
        torch.log(xth_i).unsqueeze(-1)
        + torch.log(terms.x_tilde)
        - torch.log(terms.x_theta_tilde)
        - torch.log(xt_i).unsqueeze(-1)
    )
    cross = (terms.x_tilde * log_ratio).sum(-1) / xt_i
    bracket = V / xt_i - V / xth_i - cross
    w = terms.weight.reshape(-1, *([1] * (bracket.dim() - 1)))
    return w * bracket


def nelbo_token_loss(
    x0_token: int,
    x_t_token: int,
    t: float,
    model_probs: Tensor,
    vocab: Vocab,
    schedule: NoiseSchedule,
) -> Tensor:
    """Exact per-token NELBO at time t (0-dim tensor)."""
    if not 0 <= x0_token < vocab.size or not 0 <= x_t_token < vocab.size:
        raise DomainError("token index outside vocabulary")
    probs = as_probs(model_probs)
    alpha, alpha_prime = alpha_at(schedule, t)
    terms = _nelbo_terms(
        torch.tensor([x0_token]),
        torch.tensor([x_t_token]),
        torch.tensor([alpha], dtype=torch.float64),
        torch.tensor([alpha_prime], dtype=torch.float64),
        probs.unsqueeze(0),
    )
    return _nelbo_per_position(terms)[0]


def _nelbo_batch_sum(
    x0: Tensor, noisy: NoisyBatch, probs: Tensor, schedule: NoiseSchedule
) -> Tensor:
    alpha = schedule.alpha(noisy.t).to(probs.dtype)
    alpha_prime = schedule.alpha_prime(noisy.t).to(probs.dtype)
    terms = _nelbo_terms(x0, noisy.tokens, alpha, alpha_prime, probs)
    return _nelbo_per_position(terms).sum()


# ---------------------------------------------------------------------------
# Batch dispatch
# ---------------------------------------------------------------------------

def batch_loss(
    x0: Tensor,
    noisy: NoisyBatch,
    grid,
    config: LossConfig,
    vocab: Vocab,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> LossReport:
    """Dispatch on the configured variant and reduce over the batch.

    ``mean_over_corrupted`` divides the summed loss by the total corrupted
    count across the batch (0 when that count is 0); ``mean_over_all``
    divides by batch * L.  The NELBO variant is defined per token over all
    positions, so it always averages over batch * L.
    """
    if x0.dim() != 2:
        raise DomainError("batch_loss expects (B, L) token tensors")
    _check_mask(x0, noisy)
    probs = as_probs(grid)
    _validate_tokens(x0, vocab.size, "x0")
    B, L = x0.shape
    count = int(noisy.corrupted_mask.sum())
    pos_sum = None
    neg_sum = None

    if config.variant is LossVariant.NELBO:
        total = _nelbo_batch_sum(x0, noisy, probs, schedule)
        value = total / (B * L)
        return LossReport(value, count, _item(value))

    if config.variant is LossVariant.RECONSTRUCTION:
        total = _reconstruction_sums(x0, probs, None)
    elif config.variant is LossVariant.DENOISING:
        total = _reconstruction_sums(x0, probs, noisy.corrupted_mask)
    elif config.variant is LossVariant.CONTRASTIVE_UNIFORM:
        negatives = _draw_uniform_negatives(x0, vocab.size, config, rng)
        pos_sum, neg_sum = _contrastive_sums(x0, noisy, probs, config, negatives)
        total = pos_sum + config.negative_weight * neg_sum
    elif config.variant is LossVariant.CONTRASTIVE_NOISY:
        pos_sum, neg_sum = _contrastive_sums(x0, noisy, probs, config, noisy.tokens)
        total = pos_sum + config.negative_weight * neg_sum
    else:  # pragma: no cover
        raise DomainError(f"unhandled variant {config.variant}")

    if config.reduction == "mean_over_corrupted":
        divisor = count if count > 0 else None
    else:
        divisor = B * L
    if divisor is None:
        value = total * 0.0
    else:
        value = total / divisor

    if pos_sum is None:
        return LossReport(value, count, _item(value))
    scale = 1.0 / divisor if divisor else 0.0
    return LossReport(value, count, _item(pos_sum) * scale, _item(neg_sum) * scale)
