"""Core value types: token grids, score fields, condition bundles.

Conventions used everywhere in this package:

- A token grid is an ``(L, R)`` integer array. Ordinary tokens take values
  ``0 .. n-1``; the distinguished MASK symbol is ``n`` (one past the vocab),
  so embedding tables of size ``n + 1`` index tokens directly.
- Level index 0 is the coarsest residual level.
- Score fields are ``(L, R, n)`` float64 arrays of nonnegative transition
  ratios, meaningful only where ``defined_mask`` is True (masked positions).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class TokenGrid:
    """A length-L, R-level grid of discrete tokens over {0..n-1} plus MASK = n."""

    tokens: np.ndarray
    n: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValidationError(f"token grid must be 2-d (L, R), got shape {self.tokens.shape}")
        if self.n < 1:
            raise ValidationError(f"vocab size must be >= 1, got {self.n}")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() > self.n):
            raise ValidationError(
                f"token values must lie in [0, {self.n}] (MASK = {self.n}); "
                f"found range [{self.tokens.min()}, {self.tokens.max()}]"
            )

    @property
    def L(self) -> int:
        return self.tokens.shape[0]

    @property
    def R(self) -> int:
        return self.tokens.shape[1]

    @property
    def mask_value(self) -> int:
        return self.n

    def masked(self) -> np.ndarray:
        """Boolean (L, R) map of MASK positions."""
        return self.tokens == self.n

    def has_mask(self) -> bool:
        return bool((self.tokens == self.n).any())

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.n)

    @classmethod
    def full_mask(cls, L: int, R: int, n: int) -> "TokenGrid":
        return cls(np.full((L, R), n, dtype=np.int64), n)

    def key(self) -> bytes:
        """Hashable identity of the grid contents (used for memoisation)."""
        return self.tokens.tobytes()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TokenGrid)
            and self.n == other.n
            and self.tokens.shape == other.tokens.shape
            and bool(np.array_equal(self.tokens, other.tokens))
        )


@dataclass
class ScoreField:
    """Per-position, per-level, per-value concrete-score estimates.

    ``values[i, r, v]`` approximates the ratio p(grid with (i, r) = v) / p(grid)
    for masked positions (i, r); entries outside ``defined_mask`` carry no
    meaning and are kept at zero by constructors in this package.
    """

    values: np.ndarray
    defined_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.defined_mask = np.asarray(self.defined_mask, dtype=bool)
        if self.values.ndim != 3:
            raise ValidationError(f"score values must be 3-d (L, R, n), got {self.values.shape}")
        if self.defined_mask.shape != self.values.shape[:2]:
            raise ValidationError(
                f"defined_mask shape {self.defined_mask.shape} does not match "
                f"values shape {self.values.shape[:2]}"
            )
        if not np.isfinite(self.values).all():
            raise ValidationError("score values must be finite")
        if (self.values < 0).any():
            raise ValidationError("score values must be nonnegative")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def copy(self) -> "ScoreField":
        return ScoreField(self.values.copy(), self.defined_mask.copy())


@dataclass
class ConditionBundle:
    """Semantic / global-style / temporal-style conditions, each nullable.

    Shapes (when present): semantic ``(L, C_sem)``, global_style ``(C_id,)``,
    temporal_style ``(L', C_emo)`` with ``L' = L / U``.
    """

    semantic: Optional[np.ndarray] = None
    global_style: Optional[np.ndarray] = None
    temporal_style: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.semantic is not None:
            self.semantic = np.asarray(self.semantic, dtype=np.float64)
            if self.semantic.ndim != 2:
                raise ValidationError("semantic condition must be (L, C_sem)")
        if self.global_style is not None:
            self.global_style = np.asarray(self.global_style, dtype=np.float64)
            if self.global_style.ndim != 1:
                raise ValidationError("global style must be a vector (C_id,)")
        if self.temporal_style is not None:
            self.temporal_style = np.asarray(self.temporal_style, dtype=np.float64)
            if self.temporal_style.ndim != 2:
                raise ValidationError("temporal style must be (L', C_emo)")

    def validate_for(self, L: int, U: int) -> None:
        """Check shapes against a declared sequence length and window factor."""
        if L % U != 0:
            raise ValidationError(f"sequence length {L} not divisible by window factor {U}")
        if self.semantic is not None and self.semantic.shape[0] != L:
            raise ValidationError(
                f"semantic condition has {self.semantic.shape[0]} frames, expected {L}"
            )
        if self.temporal_style is not None and self.temporal_style.shape[0] != L // U:
            raise ValidationError(
                f"temporal style has {self.temporal_style.shape[0]} windows, expected {L // U}"
            )

    def replace(self, **kwargs) -> "ConditionBundle":
        vals = {
            "semantic": self.semantic,
            "global_style": self.global_style,
            "temporal_style": self.temporal_style,
        }
        vals.update(kwargs)
        return ConditionBundle(**vals)

    @classmethod
    def empty(cls) -> "ConditionBundle":
        return cls()


@dataclass
class DataDistribution:
    """Explicit enumeration of (clean grid, probability) pairs.

    Oracle-only construct: enables exact marginals p_t and exact concrete
    scores by summation over the support. Probabilities must sum to 1
    within 1e-12 and all grids must share (L, R, n).
    """

    entries: Sequence[tuple]
    conditions: Optional[Sequence[ConditionBundle]] = field(default=None)

    def __post_init__(self):
        if not self.entries:
            raise ValidationError("data distribution needs at least one entry")
        grids = [g for g, _ in self.entries]
        probs = np.array([p for _, p in self.entries], dtype=np.float64)
        if (probs < 0).any():
            raise ValidationError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValidationError(f"probabilities sum to {probs.sum()!r}, expected 1 within 1e-12")
        first = grids[0]
        for g in grids[1:]:
            if g.tokens.shape != first.tokens.shape or g.n != first.n:
                raise ValidationError("all support grids must share (L, R, n)")
        if self.conditions is not None and len(self.conditions) != len(self.entries):
            raise ValidationError("conditions must align one-to-one with entries")

    @property
    def L(self) -> int:
        return self.entries[0][0].L

    @property
    def R(self) -> int:
        return self.entries[0][0].R

    @property
    def n(self) -> int:
        return self.entries[0][0].n

    def probabilities(self) -> np.ndarray:
        return np.array([p for _, p in self.entries], dtype=np.float64)

    def grids(self) -> list:
        return [g for g, _ in self.entries]

    def marginal(self, frame: int, level: int) -> np.ndarray:
        """Exact marginal distribution of one (frame, level) position, length n."""
        out = np.zeros(self.n, dtype=np.float64)
        for grid, p in self.entries:
            out[grid.tokens[frame, level]] += p
        return out
