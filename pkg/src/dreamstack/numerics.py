"""Numeric primitives shared by the world model and the behavior heads.

Everything in here is small, stateless or explicitly-stated state, and usable
standalone: signed log squashing, twohot value codecs, streaming channel
normalizers, the percentile-based return scale, and categorical helpers.
"""

from __future__ import annotations

import numpy as np
import torch

_VAR_FLOOR = 1e-8


def symlog(x: torch.Tensor) -> torch.Tensor:
    """Signed log squash: sign(x) * ln(1 + |x|). Rejects non-finite input."""
    if not torch.isfinite(x).all():
        raise ValueError("symlog: input must be finite")
    return torch.sign(x) * torch.log1p(torch.abs(x))


def symexp(y: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`symlog`: sign(y) * (exp(|y|) - 1)."""
    if not torch.isfinite(y).all():
        raise ValueError("symexp: input must be finite")
    return torch.sign(y) * torch.expm1(torch.abs(y))


def unimix(probs: torch.Tensor, ratio: float = 0.01) -> torch.Tensor:
    """Mix a simplex with the uniform distribution over the last axis."""
    classes = probs.shape[-1]
    return (1.0 - ratio) * probs + ratio / classes


def categorical_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) for stacked categorical groups.

    Args:
        p, q: probabilities shaped (..., groups, classes), already floored
            away from zero (e.g. via :func:`unimix`).

    Returns:
        KL summed over groups and classes, shaped (...,).
    """
    if (p < 0).any() or (q < 0).any():
        raise ValueError("categorical_kl: probabilities must be nonnegative")
    kl = p * (torch.log(p) - torch.log(q))
    return kl.sum(dim=(-2, -1))


class TwohotCodec:
    """Encode scalars as two-hot weight vectors over a fixed bin grid.

    With ``transform="symexp"`` the bin centers are symexp(linspace(low,
    high, num_bins)), i.e. uniform in symlog space, which keeps resolution
    near zero while covering a huge dynamic range. Interpolation between the
    two straddling centers is linear, so decode(encode(v)) == v inside the
    covered range.
    """

    def __init__(
        self,
        num_bins: int = 255,
        low: float = -20.0,
        high: float = 20.0,
        transform: str = "symexp",
    ):
        if num_bins < 2:
            raise ValueError("TwohotCodec: need at least two bins")
        grid = torch.linspace(low, high, num_bins, dtype=torch.float64)
        if transform == "symexp":
            centers = symexp(grid)
        elif transform == "identity":
            centers = grid
        else:
            raise ValueError(f"TwohotCodec: unknown transform {transform!r}")
        self.num_bins = num_bins
        self.centers = centers

    def encode(self, values: torch.Tensor) -> torch.Tensor:
        """Return (..., num_bins) weights; values outside the grid clip."""
        if not torch.isfinite(values).all():
            raise ValueError("TwohotCodec.encode: values must be finite")
        v = values.detach().to(torch.float64).clamp(
            self.centers[0], self.centers[-1]
        ).contiguous()
        # index of the center at or below v (the left straddling bin)
        below = (torch.searchsorted(self.centers, v, right=True) - 1).clamp(
            0, self.num_bins - 2
        )
        above = below + 1
        c_lo = self.centers[below]
        c_hi = self.centers[above]
        w_hi = ((v - c_lo) / (c_hi - c_lo)).clamp(0.0, 1.0)
        weights = torch.zeros(*v.shape, self.num_bins, dtype=torch.float64)
        weights.scatter_(-1, below.unsqueeze(-1), (1.0 - w_hi).unsqueeze(-1))
        weights.scatter_add_(-1, above.unsqueeze(-1), w_hi.unsqueeze(-1))
        return weights.to(values.dtype)

    def decode(self, weights: torch.Tensor) -> torch.Tensor:
        """Expected value of the bin distribution."""
        centers = self.centers.to(weights.dtype)
        return (weights * centers).sum(-1)

    def log_prob(self, logits: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        """Two-hot cross-entropy: sum_k target_k * log softmax(logits)_k."""
        target = self.encode(values).to(logits.dtype)
        return (target * torch.log_softmax(logits, -1)).sum(-1)

    def mean_from_logits(self, logits: torch.Tensor) -> torch.Tensor:
        return self.decode(torch.softmax(logits, -1))


class EmaNormalizer:
    """Per-channel streaming normalizer with exponential moving statistics.

    Statistics start at (mean 0, variance 1) and move toward each update
    batch's per-channel moments with rate (1 - decay). Updates are
    intentionally order-dependent (it is a streaming estimate, not a dataset
    statistic). `normalize` / `denormalize` are exact inverses under fixed
    statistics.
    """

    def __init__(self, channels: int, decay: float = 0.99, floor: float = _VAR_FLOOR):
        self.channels = channels
        self.decay = decay
        self.floor = floor
        self.mean = torch.zeros(channels)
        self.var = torch.ones(channels)
        self.initialized = False

    def _batch_moments(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x.shape[-3] != self.channels:
            raise ValueError(
                f"EmaNormalizer: expected {self.channels} channels, got {x.shape[-3]}"
            )
        flat = x.detach().transpose(-3, 0).reshape(self.channels, -1)
        return flat.mean(1), flat.var(1, unbiased=False)

    def update(self, x: torch.Tensor) -> None:
        """Fold one batch (shape (..., C, H, W)) into the running moments."""
        m, v = self._batch_moments(x)
        d = self.decay
        self.mean = d * self.mean + (1 - d) * m
        self.var = (d * self.var + (1 - d) * v).clamp_min(self.floor)
        self.initialized = True

    def _spread(self) -> torch.Tensor:
        return torch.sqrt(self.var + self.floor)

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        shape = (self.channels, 1, 1)
        return (x - self.mean.view(shape)) / self._spread().view(shape)

    def denormalize(self, y: torch.Tensor) -> torch.Tensor:
        shape = (self.channels, 1, 1)
        return y * self._spread().view(shape) + self.mean.view(shape)

    # plain-array state for checkpoints
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "mean": self.mean.numpy().copy(),
            "var": self.var.numpy().copy(),
            "initialized": np.array([int(self.initialized)], dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.mean = torch.as_tensor(arrays["mean"], dtype=torch.float32).clone()
        self.var = torch.as_tensor(arrays["var"], dtype=torch.float32).clone()
        self.initialized = bool(int(arrays["initialized"][0]))


class ReturnScale:
    """Running 5th-95th percentile spread of return batches.

    The first update seeds the moving percentiles directly; later updates
    blend with rate (1 - decay). The effective divisor is never below 1, so
    dividing by it can only shrink advantages, never amplify noise.
    """

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.low: float | None = None
        self.high: float | None = None

    def update(self, returns: torch.Tensor) -> None:
        flat = returns.detach().to(torch.float64).reshape(-1).numpy()
        if flat.size == 0:
            raise ValueError("ReturnScale.update: empty batch")
        lo = float(np.percentile(flat, 5))
        hi = float(np.percentile(flat, 95))
        if self.low is None:
            self.low, self.high = lo, hi
        else:
            d = self.decay
            self.low = d * self.low + (1 - d) * lo
            self.high = d * self.high + (1 - d) * hi

    def scale(self) -> float:
        if self.low is None:
            return 1.0
        return max(1.0, self.high - self.low)

    def state_arrays(self) -> dict[str, np.ndarray]:
        seeded = self.low is not None
        return {
            "low": np.array([self.low if seeded else 0.0], dtype=np.float64),
            "high": np.array([self.high if seeded else 0.0], dtype=np.float64),
            "seeded": np.array([int(seeded)], dtype=np.int64),
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if int(arrays["seeded"][0]):
            self.low = float(arrays["low"][0])
            self.high = float(arrays["high"][0])
        else:
            self.low = self.high = None
