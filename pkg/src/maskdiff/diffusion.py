"""Forward corruption, exact concrete-score oracle, score-entropy loss,
reverse Euler sampler, and multi-condition guidance.

The forward process replaces each token independently with MASK at rate
sigma(t); closed form: a token is masked at time t with probability
1 - exp(-sbar(t)) and unchanged otherwise. The reverse process unmasks
positions at rate sigma(t) * score and never touches unmasked positions
(the absorbing transition matrix has zero rate out of ordinary states in
reverse). Scores are transition ratios p(neighbour)/p(state).
"""

from __future__ import annotations

import json
from typing import Callable, Optional, Sequence

import numpy as np

from .core import ConditionBundle, DataDistribution, ScoreField, TokenGrid
from .errors import (
    LossDomainError,
    UnreachableStateError,
    ValidationError,
)
from .schedule import NoiseSchedule

ScoreFn = Callable[[TokenGrid, Optional[ConditionBundle], float], ScoreField]

GUIDANCE_FLOOR = 1e-12


def corrupt(x0: TokenGrid, t: float, sched: NoiseSchedule, rng: np.random.Generator) -> TokenGrid:
    """Mask each of the L*R entries independently with probability mask_probability(t)."""
    if x0.has_mask():
        raise ValidationError("clean grid must not contain MASK")
    p = float(sched.mask_probability(t))
    u = rng.random(x0.tokens.shape)
    tokens = np.where(u < p, x0.mask_value, x0.tokens)
    return TokenGrid(tokens, x0.n)


def exact_concrete_score(
    xt: TokenGrid, t: float, dist: DataDistribution, sched: NoiseSchedule
) -> ScoreField:
    """Exact transition ratios p_t(xt with (i,r)=v) / p_t(xt) by enumeration.

    Every support entry compatible with the unmasked part of ``xt`` has the
    same forward likelihood (identical masked/unmasked pattern), so the ratio
    reduces to exp(-sbar)/(1-exp(-sbar)) times the posterior probability of
    value v at (i, r) given the unmasked observations.
    """
    if (dist.L, dist.R, dist.n) != (xt.L, xt.R, xt.n):
        raise ValidationError("distribution support does not share the grid's shape")
    masked = xt.masked()
    values = np.zeros((xt.L, xt.R, xt.n), dtype=np.float64)
    if not masked.any():
        return ScoreField(values, masked)

    sbar = float(sched.cumulative_noise(t))
    stay = np.exp(-sbar)
    flip = -np.expm1(-sbar)
    if flip <= 0.0:
        raise UnreachableStateError("masked positions are unreachable at time with zero mask probability")
    ratio = stay / flip

    support = np.stack([g.tokens for g, _ in dist.entries])  # (K, L, R)
    probs = dist.probabilities()
    compatible = ((support == xt.tokens[None]) | masked[None]).all(axis=(1, 2))
    total = probs[compatible].sum()
    if total <= 0.0:
        raise UnreachableStateError("corrupted state has probability zero under the distribution")

    rows, cols = np.nonzero(masked)
    for k in np.nonzero(compatible)[0]:
        values[rows, cols, support[k][masked]] += probs[k]
    values[rows, cols, :] *= ratio / total
    return ScoreField(values, masked)


def conditional_score_targets(
    xt: TokenGrid, x0: TokenGrid, t: float, sched: NoiseSchedule
) -> ScoreField:
    """The per-pair targets c = p(neighbour | x0) / p(xt | x0).

    For absorbing corruption this is exp(-sbar)/(1-exp(-sbar)) at the clean
    value and 0 elsewhere. The score-entropy loss attains 0 exactly at these
    targets on any instance.
    """
    _check_corruption_pair(xt, x0)
    masked = xt.masked()
    values = np.zeros((xt.L, xt.R, xt.n), dtype=np.float64)
    if masked.any():
        sbar = float(sched.cumulative_noise(t))
        flip = -np.expm1(-sbar)
        if flip <= 0.0:
            raise ValidationError("grid has masked entries but mask probability at t is zero")
        ratio = np.exp(-sbar) / flip
        rows, cols = np.nonzero(masked)
        values[rows, cols, x0.tokens[rows, cols]] = ratio
    return ScoreField(values, masked)


def dse_loss(
    scores: ScoreField, xt: TokenGrid, x0: TokenGrid, t: float, sched: NoiseSchedule
) -> float:
    """Score-entropy integrand for one (x0, xt, t) triple.

    Per masked position and ordinary value v, with target c (the conditional
    ratio at v = x0, else 0) and estimate s: accumulate
    sigma(t) * [s - c log s + c log c - c], using 0 * log s = 0 at c = 0.
    Nonnegative; zero exactly at s = c.
    """
    _check_corruption_pair(xt, x0)
    if scores.values.shape != (xt.L, xt.R, xt.n):
        raise ValidationError("score field shape does not match the grid")
    masked = xt.masked()
    if not masked.any():
        return 0.0
    sbar = float(sched.cumulative_noise(t))
    flip = -np.expm1(-sbar)
    if flip <= 0.0:
        raise ValidationError("grid has masked entries but mask probability at t is zero")
    ratio = np.exp(-sbar) / flip
    sigma = float(sched.instantaneous_noise(t))

    s = scores.values[masked]  # (M, n)
    target_vals = x0.tokens[masked]  # (M,)
    s_at_target = s[np.arange(len(target_vals)), target_vals]
    if (s_at_target <= 0).any():
        raise LossDomainError("nonpositive score at a position whose target is positive")
    # c = 0 entries contribute s alone; the target entry adds the entropy terms.
    total = s.sum()
    total += (-ratio * np.log(s_at_target) + ratio * np.log(ratio) - ratio).sum()
    return float(sigma * total)


def euler_step(
    xt: TokenGrid,
    scores: ScoreField,
    t: float,
    dt: float,
    sched: NoiseSchedule,
    rng: np.random.Generator,
) -> TokenGrid:
    """One first-order reverse step from t to t - dt.

    Each masked position independently unmasks to value v with probability
    sigma(t) * dt * score_v, jointly rescaled when the total exceeds 1;
    unmasked positions never change.
    """
    if dt <= 0:
        raise ValidationError(f"step size must be positive, got {dt}")
    if dt > t + 1e-12:
        raise ValidationError(f"step size {dt} exceeds current time {t}")
    if scores.values.shape != (xt.L, xt.R, xt.n):
        raise ValidationError("score field shape does not match the grid")
    masked = xt.masked()
    if not (scores.defined_mask | ~masked).all():
        raise ValidationError("scores undefined at some masked positions")
    sigma = float(sched.instantaneous_noise(t))
    tokens = xt.tokens.copy()
    _unmask_inplace(tokens, masked, scores.values, sigma * dt, rng, xt.n)
    return TokenGrid(tokens, xt.n)


def _unmask_inplace(tokens, masked, values, rate_dt, rng, n) -> int:
    """Categorical unmask draws at masked positions; returns #positions unmasked.

    ``tokens`` may carry leading batch dimensions; draws are consumed in
    row-major order over the masked positions, so results are reproducible
    for a given generator state.
    """
    idx = np.nonzero(masked)
    m = len(idx[0])
    if m == 0:
        return 0
    pi = rate_dt * values[idx]  # (M, n)
    totals = pi.sum(axis=1)
    over = totals > 1.0
    if over.any():
        pi[over] /= totals[over, None]
    cums = np.cumsum(pi, axis=1)
    u = rng.random(m)
    choice = (u[:, None] >= cums).sum(axis=1)  # n means "stay masked"
    jumped = choice < n
    new_tokens = np.where(jumped, choice, n)
    tokens[idx] = new_tokens
    return int(jumped.sum())


def sample(
    score_fn: ScoreFn,
    cond: Optional[ConditionBundle],
    shape: tuple,
    steps: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    diagnostics_path: Optional[str] = None,
) -> TokenGrid:
    """Reverse-sample a MASK-free grid from all-MASK at t = 1.

    Walks a uniform time grid of ``steps`` Euler steps down to t ~ 0 and then
    force-unmasks any residual MASK to the argmax of the final score field.
    """
    L, R, n = shape
    out = _sample_tokens(
        score_fn,
        cond,
        np.full((1, L, R), n, dtype=np.int64),
        n,
        steps,
        sched,
        rng,
        t_start=1.0,
        diagnostics_path=diagnostics_path,
    )
    return TokenGrid(out[0], n)


def sample_batch(
    score_fn: ScoreFn,
    cond: Optional[ConditionBundle],
    count: int,
    shape: tuple,
    steps: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    diagnostics_path: Optional[str] = None,
) -> np.ndarray:
    """Vectorised sampler: evolves ``count`` grids jointly, one rng stream.

    Returns an (count, L, R) integer array with no MASK entries.
    """
    L, R, n = shape
    init = np.full((count, L, R), n, dtype=np.int64)
    return _sample_tokens(
        score_fn, cond, init, n, steps, sched, rng, t_start=1.0, diagnostics_path=diagnostics_path
    )


def _sample_tokens(
    score_fn,
    cond,
    tokens: np.ndarray,
    n: int,
    steps: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    t_start: float = 1.0,
    diagnostics_path: Optional[str] = None,
) -> np.ndarray:
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    tokens = tokens.copy()
    dt = t_start / steps
    last_values = None
    records = [] if diagnostics_path else None
    for k in range(steps):
        t = t_start - k * dt
        values = _batched_scores(score_fn, tokens, cond, t, n)
        sigma = float(sched.instantaneous_noise(t))
        masked = tokens == n
        unmasked = _unmask_inplace(tokens, masked, values, sigma * dt, rng, n)
        last_values = values
        if records is not None:
            records.append(
                {
                    "step": k,
                    "t": t,
                    "unmasked": unmasked,
                    "remaining": int((tokens == n).sum()),
                    "clamped": int(getattr(score_fn, "clamp_events", 0)),
                }
            )
    residual = tokens == n
    if residual.any():
        tokens[residual] = np.argmax(last_values[residual], axis=-1)
        if records is not None:
            records.append({"step": steps, "forced": int(residual.sum()), "remaining": 0})
    if records is not None:
        with open(diagnostics_path, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return tokens


def _batched_scores(score_fn, tokens: np.ndarray, cond, t: float, n: int) -> np.ndarray:
    """Score values for a stack of grids; uses score_fn.scores_batch when available."""
    batch_eval = getattr(score_fn, "scores_batch", None)
    if batch_eval is not None:
        return batch_eval(tokens, cond, t)
    out = np.empty(tokens.shape + (n,), dtype=np.float64)
    for i in range(tokens.shape[0]):
        out[i] = score_fn(TokenGrid(tokens[i], n), cond, t).values
    return out


def guided_score(
    uncond: ScoreField,
    conditional: Sequence[tuple],
    floor: float = GUIDANCE_FLOOR,
    diagnostics: Optional[dict] = None,
) -> ScoreField:
    """Combine conditional and unconditional fields in log space.

    log s* = log s_uncond + sum_k w_k (log s_k - log s_uncond). The weight-0
    and single-condition weight-1 limits return the respective input field
    bit-identically (exp(log x) differs from x in floats, so the limits are
    short-circuited). Scores below ``floor`` are clamped before the log and
    counted in ``diagnostics["clamped"]`` when a dict is supplied.
    """
    for f, _ in conditional:
        if f.values.shape != uncond.values.shape:
            raise ValidationError("guidance fields must share a shape")
    active = [(f, w) for f, w in conditional if w != 0.0]
    if not active:
        return uncond.copy()
    if len(active) == 1 and active[0][1] == 1.0:
        return active[0][0].copy()

    defined = uncond.defined_mask
    clamped = 0

    def _log(field: ScoreField) -> np.ndarray:
        nonlocal clamped
        vals = field.values[defined]
        clamped += int((vals < floor).sum())
        return np.log(np.maximum(vals, floor))

    log_u = _log(uncond)
    combined = log_u.copy()
    for f, w in active:
        combined += w * (_log(f) - log_u)
    values = np.zeros_like(uncond.values)
    values[defined] = np.exp(combined)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + clamped
    return ScoreField(values, defined.copy())


class OracleScorer:
    """Score function backed by exact enumeration, memoised per (state, time).

    The condition argument is ignored: the wrapped distribution is already
    the conditional law. Exposes ``scores_batch`` so samplers can evaluate a
    whole population with one oracle call per unique state.
    """

    def __init__(self, dist: DataDistribution, sched: NoiseSchedule):
        self.dist = dist
        self.sched = sched
        self._cache: dict = {}

    def __call__(self, xt: TokenGrid, cond, t: float) -> ScoreField:
        key = (xt.key(), round(float(t), 15))
        field = self._cache.get(key)
        if field is None:
            field = exact_concrete_score(xt, t, self.dist, self.sched)
            self._cache[key] = field
        return field

    def scores_batch(self, tokens: np.ndarray, cond, t: float) -> np.ndarray:
        flat = tokens.reshape(tokens.shape[0], -1)
        uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
        n = self.dist.n
        fields = np.empty((len(uniq), self.dist.L, self.dist.R, n), dtype=np.float64)
        for j, row in enumerate(uniq):
            grid = TokenGrid(row.reshape(self.dist.L, self.dist.R), n)
            fields[j] = self(grid, cond, t).values
        return fields[inverse]


def _check_corruption_pair(xt: TokenGrid, x0: TokenGrid) -> None:
    if x0.has_mask():
        raise ValidationError("clean grid must not contain MASK")
    if xt.tokens.shape != x0.tokens.shape or xt.n != x0.n:
        raise ValidationError("corrupted and clean grids must share (L, R, n)")
    unmasked = ~xt.masked()
    if not np.array_equal(xt.tokens[unmasked], x0.tokens[unmasked]):
        raise ValidationError("unmasked entries of the corrupted grid must equal the clean grid")
