"""Training objectives and rank correlation."""
from typing import Optional, Tuple, Union
import logging

import numpy as np
import torch
from scipy.stats import rankdata

from config.config import SOFT_RANK_TAU
from .verification import DegenerateBatchError

logger = logging.getLogger(__name__)

ArrayLike = Union[torch.Tensor, np.ndarray, list, tuple]

SRCC_MODES = ('soft', 'exact')


def _as_tensor(x: ArrayLike, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _batch(o: ArrayLike, s: ArrayLike) -> Tuple[torch.Tensor, torch.Tensor]:
    o = _as_tensor(o)
    s = _as_tensor(s, like=o).to(o.dtype).detach()
    if o.ndim != 1 or s.ndim != 1:
        raise ValueError("Predictions and ground truth must be 1-D")
    if o.shape[0] != s.shape[0]:
        raise ValueError(f"Length mismatch: {o.shape[0]} predictions, {s.shape[0]} targets")
    if o.shape[0] == 0:
        raise ValueError("Empty batch")
    if not (torch.isfinite(o).all() and torch.isfinite(s).all()):
        raise ValueError("Batch contains non-finite values")
    return o, s


def _as_numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def mae_loss(o: ArrayLike, s: ArrayLike) -> torch.Tensor:
    o, s = _batch(o, s)
    return (o - s).abs().mean()


def mse_loss(o: ArrayLike, s: ArrayLike) -> torch.Tensor:
    o, s = _batch(o, s)
    return ((o - s) ** 2).mean()


def rank_loss(o: ArrayLike, s: ArrayLike) -> torch.Tensor:
    """Pairwise hinge on every ordered pair, averaged over B^2.

    Each term is max(0, |s_i - s_j| - e_ij * (o_i - o_j)) with e_ij = +1 when
    s_i >= s_j and -1 otherwise.
    """
    o, s = _batch(o, s)
    ds = s[:, None] - s[None, :]
    do = o[:, None] - o[None, :]
    sign = torch.where(ds >= 0, torch.ones_like(ds), -torch.ones_like(ds))
    terms = torch.clamp(ds.abs() - sign * do, min=0.0)
    return terms.sum() / o.shape[0] ** 2


def combined_loss(o: ArrayLike, s: ArrayLike) -> torch.Tensor:
    return mae_loss(o, s) + rank_loss(o, s)


def rank_with_ties(vector: ArrayLike) -> np.ndarray:
    """Ascending 1-based ranks; tied values share their average position."""
    values = _as_numpy(vector)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("rank_with_ties needs a non-empty 1-D vector")
    return rankdata(values, method='average').astype(np.float64)


def pearson(x: ArrayLike, y: ArrayLike) -> Optional[float]:
    """Pearson correlation; None when either side is constant."""
    x, y = _as_numpy(x), _as_numpy(y)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two vectors of equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if denom == 0.0:
        return None
    return float(np.clip((dx * dy).sum() / denom, -1.0, 1.0))


def srcc_exact(o: ArrayLike, s: ArrayLike) -> float:
    """Pearson correlation of tie-averaged ranks. Constant input scores 0."""
    o, s = _as_numpy(o), _as_numpy(s)
    if o.shape != s.shape or o.ndim != 1:
        raise ValueError("srcc_exact needs two 1-D vectors of equal length")
    if o.size < 2:
        raise ValueError("SRCC needs at least 2 samples")
    value = pearson(rank_with_ties(o), rank_with_ties(s))
    if value is None:
        logger.warning(f"SRCC undefined for constant input (n={o.size}); reporting 0")
        return 0.0
    return value


def soft_rank(o: torch.Tensor, tau: float = SOFT_RANK_TAU) -> torch.Tensor:
    """softrank_i = 1 + sum_{j != i} sigmoid((o_i - o_j) / tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    # the diagonal contributes sigmoid(0) = 0.5
    return 0.5 + torch.sigmoid((o[:, None] - o[None, :]) / tau).sum(dim=1)


def _pearson_torch(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    dx, dy = x - x.mean(), y - y.mean()
    denom = torch.clamp(dx.norm() * dy.norm(), min=1e-12)
    return (dx * dy).sum() / denom


def srcc_loss(o: ArrayLike, s: ArrayLike, mode: str = 'soft', tau: float = SOFT_RANK_TAU) -> torch.Tensor:
    """1 - SRCC. 'exact' is piecewise constant in o; 'soft' is differentiable in o."""
    if mode not in SRCC_MODES:
        raise ValueError(f"Unknown SRCC mode {mode}; expected one of {SRCC_MODES}")
    o, s = _batch(o, s)
    if o.shape[0] < 2:
        raise ValueError("SRCC loss needs a batch of at least 2")
    if bool((s == s[0]).all()):
        raise DegenerateBatchError(f"Constant ground truth in a batch of {s.shape[0]}; SRCC undefined")
    if mode == 'exact':
        return torch.tensor(1.0 - srcc_exact(o, s), dtype=o.dtype)
    target_ranks = torch.as_tensor(rank_with_ties(s), dtype=o.dtype)
    return 1.0 - _pearson_torch(soft_rank(o, tau), target_ranks)


def phase_loss(name: str, o: torch.Tensor, s: torch.Tensor, tau: float = SOFT_RANK_TAU) -> torch.Tensor:
    """Objective by PhaseConfig.loss name."""
    if name == 'combined':
        return combined_loss(o, s)
    if name == 'srcc_soft':
        return srcc_loss(o, s, mode='soft', tau=tau)
    if name == 'mse':
        return mse_loss(o, s)
    raise ValueError(f"Unknown loss {name}")
