"""Session-wise Euclidean alignment and channel-subset extraction."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .data import Session, Trial

REGULARIZATION = 1e-6


def mean_covariance(session: Session | np.ndarray, eps: float = REGULARIZATION) -> np.ndarray:
    """Mean of X_i X_i^T over the session's trials, symmetrized and regularized.

    Eigenvalues below ``eps * trace / C`` are raised to that floor, so the
    result stays SPD for rank-deficient sessions and scales with the data,
    while well-conditioned sessions are returned unchanged.
    """
    x = session.data if isinstance(session, Session) else np.asarray(session)
    if x.ndim != 3:
        raise ValueError(f"expected trials shaped (n, C, T), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("cannot compute a reference matrix from an empty session")
    x = x.astype(np.float64, copy=False)
    if not np.all(np.isfinite(x)):
        raise ValueError("session contains non-finite values")
    ref = np.einsum("nct,ndt->cd", x, x) / x.shape[0]
    ref = 0.5 * (ref + ref.T)
    floor = eps * np.trace(ref) / ref.shape[0]
    evals, evecs = np.linalg.eigh(ref)
    if evals[0] >= floor:
        return ref
    ref = (evecs * np.maximum(evals, floor)) @ evecs.T
    return 0.5 * (ref + ref.T)


def inv_sqrt_sym(ref: np.ndarray) -> np.ndarray:
    """Inverse principal square root of an SPD matrix via eigendecomposition."""
    ref = np.asarray(ref, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[0] != ref.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {ref.shape}")
    scale = max(np.abs(ref).max(), np.finfo(np.float64).tiny)
    if np.abs(ref - ref.T).max() > 1e-10 * scale:
        raise ValueError("reference matrix is not symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (ref + ref.T))
    if evals[0] <= 0:
        raise ValueError(f"reference matrix is not positive definite (smallest eigenvalue {evals[0]:.3e})")
    return (evecs * evals ** -0.5) @ evecs.T


def euclidean_align_session(session: Session) -> Session:
    """Whiten every trial by the session's mean covariance: X~ = R^{-1/2} X."""
    whitener = inv_sqrt_sym(mean_covariance(session))
    aligned = np.einsum("cd,ndt->nct", whitener, session.data.astype(np.float64))
    return replace(session, data=aligned.astype(session.data.dtype))


def subset_channels(session: Session, keep: Sequence[str]) -> Session:
    """Select rows by channel name; ``keep`` fixes the output row order."""
    if not keep:
        raise ValueError("channel subset must be non-empty")
    index = {name: i for i, name in enumerate(session.channel_names)}
    missing = [name for name in keep if name not in index]
    if missing:
        raise KeyError(f"unknown channel(s): {', '.join(missing)}")
    rows = [index[name] for name in keep]
    return replace(session, data=session.data[:, rows, :], channel_names=list(keep))


def align_for_inference(ref: np.ndarray, trial: Trial | np.ndarray) -> Trial | np.ndarray:
    """Apply a frozen reference to unseen trial(s).

    Accepts a single :class:`Trial`, a (C, T) matrix or an (n, C, T) stack.
    """
    whitener = inv_sqrt_sym(ref)
    c = whitener.shape[0]
    x = trial.matrix if isinstance(trial, Trial) else np.asarray(trial)
    if x.shape[-2] != c:
        raise ValueError(f"reference is {c}x{c} but trial has {x.shape[-2]} channels")
    out = np.matmul(whitener, x.astype(np.float64)).astype(x.dtype)
    if isinstance(trial, Trial):
        return Trial(out, trial.label)
    return out
