"""Lagrange-coded masking of real-valued embedding vectors.

An embedding ``h`` is hidden inside a degree-``T`` polynomial ``g`` that takes
the value ``h`` at the first anchor point and random masks at the remaining
``T`` anchors.  Receivers only ever see ``g`` evaluated at the evaluation
points.  Because ``g`` is linear in its anchor values, element-wise sums of
share bundles decode to the sum of the hidden embeddings.

Arithmetic is plain float64.  With the small consecutive-integer point scheme
the interpolation weights are exact small rationals, so recovery is lossless
up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

SINGULAR_EPS = 1e-12


class CodingError(ValueError):
    """Raised for malformed coding parameters or share bundles."""


@dataclass(frozen=True)
class CodingParams:
    t: int
    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    mask_seed: int = 0

    def __post_init__(self):
        if self.t < 1:
            raise CodingError(f"privacy threshold must be >= 1, got {self.t}")
        if len(self.alphas) != self.t + 1 or len(self.betas) != self.t + 1:
            raise CodingError(
                f"expected {self.t + 1} alphas and betas, got "
                f"{len(self.alphas)} and {len(self.betas)}"
            )

    @property
    def num_shares(self) -> int:
        return self.t + 1

    @property
    def size(self) -> int:
        """Scalars in the full parameter set: 2T+2 points plus T masks."""
        return 3 * self.t + 2

    def is_valid(self) -> bool:
        points = list(self.alphas) + list(self.betas)
        return len(set(points)) == len(points)


@dataclass(frozen=True)
class ShareBundle:
    shares: np.ndarray  # (T+1, d)

    def __post_init__(self):
        if self.shares.ndim != 2:
            raise CodingError("shares must be a (T+1, d) array")

    @property
    def dim(self) -> int:
        return self.shares.shape[1]

    def __len__(self):
        return self.shares.shape[0]

    def __add__(self, other: "ShareBundle") -> "ShareBundle":
        if self.shares.shape != other.shares.shape:
            raise CodingError(
                f"cannot add bundles of shape {self.shares.shape} and {other.shares.shape}"
            )
        return ShareBundle(self.shares + other.shares)


def generate_params(t: int, rng_seed: int = 0, scheme: str = "canonical") -> CodingParams:
    """Build a parameter set for privacy threshold ``t``.

    ``canonical`` uses alphas 1..T+1 and betas T+2..2T+2.  ``random`` draws
    2T+2 distinct integers from [1, 4(T+1)] and shuffles them into the two
    groups; it exists for randomized invertibility checks.
    """
    if t < 1:
        raise CodingError(f"privacy threshold must be >= 1, got {t}")
    n = t + 1
    if scheme == "canonical":
        alphas = tuple(float(i) for i in range(1, n + 1))
        betas = tuple(float(n + j) for j in range(1, n + 1))
    elif scheme == "random":
        rng = np.random.default_rng(rng_seed)
        points = rng.choice(np.arange(1, 4 * n + 1), size=2 * n, replace=False)
        alphas = tuple(float(p) for p in points[:n])
        betas = tuple(float(p) for p in points[n:])
    else:
        raise CodingError(f"unknown point scheme {scheme!r}")
    return CodingParams(t=t, alphas=alphas, betas=betas, mask_seed=int(rng_seed))


def _check_distinct(points: Sequence[float], what: str):
    if len(set(points)) != len(points):
        raise CodingError(f"duplicate {what} make interpolation singular: {tuple(points)}")


def lagrange_weights(nodes: Sequence[float], x: float) -> np.ndarray:
    """Values of every Lagrange basis polynomial over ``nodes`` at ``x``."""
    nodes = np.asarray(nodes, dtype=np.float64)
    n = len(nodes)
    w = np.ones(n)
    for i in range(n):
        for k in range(n):
            if k != i:
                w[i] *= (x - nodes[k]) / (nodes[i] - nodes[k])
    return w


def encoding_matrix(params: CodingParams) -> np.ndarray:
    """``U[i, j]`` = i-th Lagrange basis over the betas, evaluated at alpha j.

    Row 0 multiplies the embedding, rows 1..T the masks; column j yields the
    share for alpha j.
    """
    n = params.num_shares
    U = np.empty((n, n))
    for j, a in enumerate(params.alphas):
        U[:, j] = lagrange_weights(params.betas, a)
    return U


def decoding_weights(params: CodingParams) -> np.ndarray:
    """Weights that interpolate through the alphas and evaluate at beta_1."""
    _check_distinct(params.alphas, "alphas")
    return lagrange_weights(params.alphas, params.betas[0])


def lcc_encode(h, params: CodingParams, masks) -> ShareBundle:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1:
        raise CodingError("embedding must be a vector")
    masks = np.atleast_2d(np.asarray(masks, dtype=np.float64))
    if masks.shape != (params.t, h.shape[0]):
        raise CodingError(
            f"expected {params.t} masks of dimension {h.shape[0]}, got shape {masks.shape}"
        )
    _check_distinct(params.betas, "betas")
    anchors = np.vstack([h[None, :], masks])  # (T+1, d)
    shares = np.empty_like(anchors)
    for k, a in enumerate(params.alphas):
        shares[k] = lagrange_weights(params.betas, a) @ anchors
    return ShareBundle(shares)


def lcc_decode(aggregated: ShareBundle, params: CodingParams) -> np.ndarray:
    if len(aggregated) != params.num_shares:
        raise CodingError(
            f"expected {params.num_shares} shares, got {len(aggregated)}"
        )
    return decoding_weights(params) @ aggregated.shares


def encode_many(H: np.ndarray, params: CodingParams, masks: np.ndarray, U: np.ndarray | None = None) -> np.ndarray:
    """Encode a batch: ``H`` is (m, d), ``masks`` (m, T, d); returns (m, T+1, d)."""
    if U is None:
        U = encoding_matrix(params)
    if masks.shape != (H.shape[0], params.t, H.shape[1]):
        raise CodingError(f"mask batch has shape {masks.shape}, expected {(H.shape[0], params.t, H.shape[1])}")
    out = H[:, None, :] * U[0][None, :, None]
    for r in range(params.t):
        out += masks[:, r, None, :] * U[r + 1][None, :, None]
    return out


def decode_many(S: np.ndarray, params: CodingParams) -> np.ndarray:
    """Decode a batch of summed bundles (m, T+1, d) into (m, d)."""
    w = decoding_weights(params)
    return np.einsum("k,mkd->md", w, S)


@dataclass(frozen=True)
class BottomDiagnostic:
    determinants: tuple[float, ...]
    min_abs_det: float
    invertible: bool


def bottom_submatrix_nonsingular(params: CodingParams, eps: float = SINGULAR_EPS) -> BottomDiagnostic:
    """Check that the mask rows of U hide the embedding for any T shares.

    For window ``t`` the submatrix keeps the T mask rows and the T columns
    ``t, t+1, ..., t+T-1`` (cyclic), i.e. every column but one.  A nonzero
    determinant means T colluding share holders still see the embedding
    blinded by uniformly random masks.
    """
    n = params.num_shares
    with np.errstate(divide="ignore", invalid="ignore"):
        U = encoding_matrix(params)
    dets = []
    for t in range(n):
        cols = [(t + c) % n for c in range(params.t)]
        sub = U[1:, cols]
        # a repeated anchor leaves U undefined; the interpolation is singular
        dets.append(float(np.linalg.det(sub)) if np.isfinite(sub).all() else 0.0)
    min_abs = min(abs(d) for d in dets)
    return BottomDiagnostic(tuple(dets), min_abs, min_abs > eps)


def sample_masks(rng: np.random.Generator, t: int, d: int, count: int | None = None) -> np.ndarray:
    """Fresh uniform [-1, 1] masks, shape (T, d) or (count, T, d)."""
    shape = (t, d) if count is None else (count, t, d)
    return rng.uniform(-1.0, 1.0, size=shape)
