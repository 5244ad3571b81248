"""Self-contained correctness oracles for the categorical diffusion core.

Every check here validates the vectorized implementation in
:mod:`udiff.diffusion` against an independent computation: straight-line
float arithmetic, brute-force enumeration, or an algebraic identity.  The
reference code deliberately avoids the tensorized code paths it checks
(plain Python loops, ``math.log``), so agreement is meaningful.

``run_verification()`` executes the whole suite and returns one record per
check; the ``verify`` CLI subcommand prints them as a pass/fail table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import diffusion as dd

__all__ = [
    "CheckResult",
    "nelbo_reference",
    "posterior_reference",
    "run_verification",
]


# ---------------------------------------------------------------------------
# Independent references (plain floats, explicit loops)
# ---------------------------------------------------------------------------

def nelbo_reference(
    x0: int,
    xt: int,
    alpha: float,
    alpha_prime: float,
    probs: list[float],
) -> float:
    """Per-token NELBO computed term by term with scalar arithmetic.

    Mirrors the written-out loss: with x~ = V*alpha*onehot(x0) + (1-alpha)
    and x~th = V*alpha*p + (1-alpha), the loss at the observed noisy index
    i = xt is

        -alpha'/(V*alpha) * [ V/x~_i - V/x~th_i
                              - sum_j (x~_j/x~_i) * log(x~th_i*x~_j / (x~th_j*x~_i)) ]
    """
    V = len(probs)
    x_tilde = [V * alpha * (1.0 if j == x0 else 0.0) + (1.0 - alpha) for j in range(V)]
    x_theta = [V * alpha * probs[j] + (1.0 - alpha) for j in range(V)]
    i = xt
    bracket = V / x_tilde[i] - V / x_theta[i]
    for j in range(V):
        ratio = (x_theta[i] * x_tilde[j]) / (x_theta[j] * x_tilde[i])
        bracket -= (x_tilde[j] / x_tilde[i]) * math.log(ratio)
    return -alpha_prime / (V * alpha) * bracket


def posterior_reference(
    xt: int,
    x0_dist: list[float],
    alpha_t: float,
    alpha_s: float,
) -> list[float]:
    """One-position reverse posterior computed with scalar arithmetic."""
    V = len(x0_dist)
    a_ts = alpha_t / alpha_s
    denom = V * alpha_t * x0_dist[xt] + 1.0 - alpha_t
    out = []
    for j in range(V):
        num = (
            V * alpha_t * (x0_dist[j] if j == xt else 0.0)
            + (a_ts - alpha_t) * (1.0 if j == xt else 0.0)
            + (alpha_s - alpha_t) * x0_dist[j]
            + (1.0 - a_ts) * (1.0 - alpha_s) / V
        )
        out.append(num / denom)
    return out


def _random_dist(V: int, rng: torch.Generator) -> list[float]:
    w = torch.rand(V, generator=rng, dtype=torch.float64) + 1e-3
    return (w / w.sum()).tolist()


# ---------------------------------------------------------------------------
# Check harness
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.detail}"


def check_forward_marginal_normalization(seed: int = 0) -> CheckResult:
    """Marginal rows sum to 1 within 1e-12 across vocab sizes and times."""
    rng = torch.Generator().manual_seed(seed)
    schedule = dd.LinearSchedule()
    worst = 0.0
    for _ in range(1000):
        V = int(torch.randint(2, 65, (1,), generator=rng))
        t = float(torch.rand(1, generator=rng, dtype=torch.float64))
        x0 = int(torch.randint(0, V, (1,), generator=rng))
        p = dd.forward_marginal(x0, t, dd.Vocab(V), schedule)
        worst = max(worst, abs(float(p.sum()) - 1.0))
        if (p < 0).any():
            return CheckResult("forward_marginal_normalization", False, "negative entry")
    return CheckResult(
        "forward_marginal_normalization",
        worst <= 1e-12,
        f"max |sum-1| = {worst:.2e} (tol 1e-12)",
    )


def check_posterior_identity(seed: int = 1) -> CheckResult:
    """posterior_step with s = t is one-hot at the current token, all V <= 8."""
    rng = torch.Generator().manual_seed(seed)
    schedule = dd.LinearSchedule()
    worst = 0.0
    for V in range(2, 9):
        vocab = dd.Vocab(V)
        for _ in range(10):
            t = 0.999 * float(torch.rand(1, generator=rng, dtype=torch.float64)) + 1e-3
            for x0 in range(V):
                for xt in range(V):
                    onehot = torch.zeros(V, dtype=torch.float64)
                    onehot[x0] = 1.0
                    post = dd.posterior_step(xt, onehot, t, t, vocab, schedule)
                    expect = torch.zeros(V, dtype=torch.float64)
                    expect[xt] = 1.0
                    worst = max(worst, float((post - expect).abs().max()))
    return CheckResult(
        "posterior_identity_s_eq_t",
        worst <= 1e-12,
        f"max deviation from one-hot = {worst:.2e}",
    )


def check_chapman_kolmogorov(seed: int = 2, trials: int = 200) -> CheckResult:
    """Composing the reverse posterior with q_t recovers q_s by enumeration.

    For every x_s entry: sum over all x_t of
    q_{s|t}(x_s | x_t, x0) * q_t(x_t | x0) must equal q_s(x_s | x0).
    """
    rng = torch.Generator().manual_seed(seed)
    schedule = dd.LinearSchedule()
    worst = 0.0
    for _ in range(trials):
        V = int(torch.randint(2, 9, (1,), generator=rng))
        vocab = dd.Vocab(V)
        x0 = int(torch.randint(0, V, (1,), generator=rng))
        ts = torch.rand(2, generator=rng, dtype=torch.float64) * 0.997 + 2e-3
        s, t = float(ts.min()), float(ts.max())
        if t - s < 1e-6:
            t = min(1.0, s + 1e-3)
        onehot = torch.zeros(V, dtype=torch.float64)
        onehot[x0] = 1.0
        q_t = dd.forward_marginal(x0, t, vocab, schedule).to(torch.float64)
        q_s = dd.forward_marginal(x0, s, vocab, schedule).to(torch.float64)
        mix = torch.zeros(V, dtype=torch.float64)
        for xt in range(V):
            post = dd.posterior_step(xt, onehot, t, s, vocab, schedule)
            mix += post * q_t[xt]
        worst = max(worst, float((mix - q_s).abs().max()))
    return CheckResult(
        "chapman_kolmogorov_composition",
        worst <= 1e-9,
        f"max entrywise error = {worst:.2e} (tol 1e-9)",
    )


def check_nelbo_transcription(seed: int = 3, trials: int = 1000) -> CheckResult:
    """Vectorized NELBO agrees with the scalar transcription, 1e-9 relative."""
    rng = torch.Generator().manual_seed(seed)
    schedule = dd.LinearSchedule()
    worst = 0.0
    for _ in range(trials):
        V = int(torch.randint(2, 9, (1,), generator=rng))
        vocab = dd.Vocab(V)
        x0 = int(torch.randint(0, V, (1,), generator=rng))
        xt = int(torch.randint(0, V, (1,), generator=rng))
        t = 0.996 * float(torch.rand(1, generator=rng, dtype=torch.float64)) + 2e-3
        probs = _random_dist(V, rng)
        got = float(
            dd.nelbo_token_loss(
                x0, xt, t, torch.tensor(probs, dtype=torch.float64), vocab, schedule
            )
        )
        alpha, alpha_prime = dd.alpha_at(schedule, t)
        want = nelbo_reference(x0, xt, alpha, alpha_prime, probs)
        rel = abs(got - want) / max(abs(want), 1e-12)
        worst = max(worst, rel)
    return CheckResult(
        "nelbo_vs_transcription",
        worst <= 1e-9,
        f"max relative error = {worst:.2e} over {trials} instances (tol 1e-9)",
    )


def check_denoising_subset_equality(seed: int = 4, trials: int = 50) -> CheckResult:
    """Corrupted-only loss equals the reconstruction loss on that subset."""
    rng = torch.Generator().manual_seed(seed)
    schedule = dd.LinearSchedule()
    worst = 0.0
    for _ in range(trials):
        V = int(torch.randint(3, 9, (1,), generator=rng))
        L = int(torch.randint(2, 12, (1,), generator=rng))
        vocab = dd.Vocab(V)
        x0 = torch.randint(0, V, (L,), generator=rng)
        t = 0.9 * float(torch.rand(1, generator=rng, dtype=torch.float64)) + 0.05
        noisy = dd.corrupt_sequence(x0, t, vocab, schedule, rng)
        grid = torch.rand(L, V, generator=rng, dtype=torch.float64) + 1e-3
        grid = grid / grid.sum(-1, keepdim=True)
        masked = float(dd.denoising_loss(x0, noisy, grid).value)
        idx = noisy.corrupted_mask.nonzero().squeeze(-1)
        if idx.numel() == 0:
            if masked != 0.0:
                return CheckResult(
                    "denoising_equals_reconstruction_subset", False, "nonzero on clean batch"
                )
            continue
        sub_noisy = dd.NoisySequence(
            tokens=noisy.tokens[idx],
            t=noisy.t,
            corrupted_mask=noisy.corrupted_mask[idx],
        )
        subset = float(dd.reconstruction_loss(x0[idx], sub_noisy, grid[idx]).value)
        worst = max(worst, abs(masked - subset))
    return CheckResult(
        "denoising_equals_reconstruction_subset",
        worst <= 1e-12,
        f"max |masked - subset| = {worst:.2e}",
    )


def check_contrastive_reduction(seed: int = 5, trials: int = 50) -> CheckResult:
    """With the negative term disabled, both contrastive losses reduce to the
    plain denoising loss up to the epsilon shift inside the positive log."""
    rng = torch.Generator().manual_seed(seed)
    schedule = dd.LinearSchedule()
    eps = 1e-4
    cfg = dd.LossConfig(epsilon=eps, negative_weight=0.0)
    worst_margin = -math.inf
    for _ in range(trials):
        V = int(torch.randint(3, 9, (1,), generator=rng))
        L = int(torch.randint(2, 12, (1,), generator=rng))
        vocab = dd.Vocab(V)
        x0 = torch.randint(0, V, (L,), generator=rng)
        t = 0.8 * float(torch.rand(1, generator=rng, dtype=torch.float64)) + 0.1
        noisy = dd.corrupt_sequence(x0, t, vocab, schedule, rng)
        grid = torch.rand(L, V, generator=rng, dtype=torch.float64) + 1e-3
        grid = grid / grid.sum(-1, keepdim=True)
        plain = dd.denoising_loss(x0, noisy, grid)
        for variant in ("uniform", "noisy"):
            if variant == "uniform":
                rep = dd.contrastive_uniform_loss(x0, noisy, grid, cfg, rng)
            else:
                rep = dd.contrastive_noisy_loss(x0, noisy, grid, cfg)
            if plain.corrupted_count == 0:
                ok = float(rep.value) == 0.0
            else:
                p_min = float(
                    grid.gather(-1, x0.unsqueeze(-1)).squeeze(-1)[noisy.corrupted_mask].min()
                )
                bound = plain.corrupted_count * eps / p_min
                diff = abs(float(rep.value) - float(plain.value))
                ok = diff <= bound
                worst_margin = max(worst_margin, diff - bound)
            if not ok:
                return CheckResult(
                    "contrastive_reduces_to_denoising", False, f"{variant} exceeded bound"
                )
    return CheckResult(
        "contrastive_reduces_to_denoising",
        True,
        f"epsilon-shift always within count*eps/p_min (worst margin {worst_margin:.2e})",
    )


def run_verification() -> list[CheckResult]:
    """Run every core-math oracle; all must pass on a correct build."""
    return [
        check_forward_marginal_normalization(),
        check_posterior_identity(),
        check_chapman_kolmogorov(),
        check_nelbo_transcription(),
        check_denoising_subset_equality(),
        check_contrastive_reduction(),
    ]
