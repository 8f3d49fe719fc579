"""Structure-preserving H&E colour normalisation by sparse non-negative factorisation.

RGB intensities are mapped to optical density (OD), the tissue pixels of an
image are factorised as ``V ~ W @ H`` with a 3x2 non-negative, unit-column stain
matrix ``W`` and sparse non-negative concentrations ``H``, and a tile is
normalised by re-composing its concentrations with a target stain matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

I0 = 256.0
OD_TISSUE_THRESHOLD = 0.15
MIN_TISSUE_PIXELS = 100

# standard H&E reference directions (hematoxylin, eosin)
REFERENCE_STAIN_MATRIX = np.array([[0.65, 0.07],
                                   [0.70, 0.99],
                                   [0.29, 0.11]])
REFERENCE_STAIN_MATRIX = REFERENCE_STAIN_MATRIX / np.linalg.norm(REFERENCE_STAIN_MATRIX, axis=0)
REFERENCE_MAX_CONCENTRATION = np.array([1.9705, 1.0308])


class InsufficientTissueError(ValueError):
    pass


def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    """``-ln((v + 1) / 256)`` per channel; white maps to exactly zero."""
    return -np.log((np.asarray(rgb, dtype=np.float64) + 1.0) / I0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    v = I0 * np.exp(-np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class StainProfile:
    stain_matrix: np.ndarray  # (3, 2), columns hematoxylin then eosin
    max_concentration: np.ndarray  # (2,)

    def __post_init__(self):
        W = np.asarray(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        m = np.asarray(self.max_concentration, dtype=np.float64).reshape(2)
        if np.any(W < 0) or not np.all(np.isfinite(W)):
            raise ValueError("stain matrix must be finite and non-negative")
        object.__setattr__(self, "stain_matrix", W)
        object.__setattr__(self, "max_concentration", m)

    def check_rank(self):
        s = np.linalg.svd(self.stain_matrix, compute_uv=False)
        if s[-1] <= 1e-6 * s[0]:
            raise ValueError("degenerate stain matrix: columns are (nearly) parallel")
        if np.any(self.max_concentration <= 0):
            raise ValueError("degenerate stain profile: non-positive max concentration")

    def to_json(self) -> str:
        fmt = lambda xs: "[" + ", ".join(format(float(x), ".17g") for x in xs) + "]"
        return ('{"stain_matrix": ' + fmt(self.stain_matrix.ravel()) +
                ', "max_concentration": ' + fmt(self.max_concentration) + "}\n")

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        obj = json.loads(text)
        return cls(np.array(obj["stain_matrix"], dtype=np.float64).reshape(3, 2),
                   np.array(obj["max_concentration"], dtype=np.float64))

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "StainProfile":
        return cls.from_json(Path(path).read_text())


DEFAULT_TARGET_PROFILE = StainProfile(REFERENCE_STAIN_MATRIX, REFERENCE_MAX_CONCENTRATION)


def nonneg_lasso(V, W, sparsity, H=None, sweeps=200, tol=1e-12):
    """Column-wise ``min_h ||v - W h||^2 + sparsity * sum(h)`` with ``h >= 0``.

    Cyclic coordinate descent, vectorised over pixels. Each coordinate update is
    an exact minimisation, so the objective never increases from the warm start ``H``.
    """
    V = np.asarray(V, dtype=np.float64)
    k = W.shape[1]
    H = np.zeros((k, V.shape[1])) if H is None else np.array(H, dtype=np.float64)
    G = W.T @ W
    B = W.T @ V
    diag = np.diag(G)
    if np.any(diag <= 0):
        raise ValueError("stain matrix has a zero column")
    for _ in range(sweeps):
        delta = 0.0
        for j in range(k):
            # residual correlation excluding coordinate j
            r = B[j] - G[j] @ H + diag[j] * H[j]
            new = np.maximum(0.0, (r - 0.5 * sparsity) / diag[j])
            delta = max(delta, float(np.max(np.abs(new - H[j]), initial=0.0)))
            H[j] = new
        if delta <= tol:
            break
    return H


def factorization_objective(V, W, H, sparsity) -> float:
    R = V - W @ H
    return float(np.sum(R * R) + sparsity * np.sum(np.abs(H)))


def _project_unit_columns(W):
    W = np.maximum(W, 0.0)
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        return None
    return W / norms


def sparse_stain_factorization(V, sparsity=0.1, n_iter=50, W0=None, h_sweeps=20,
                               w_steps=10):
    """Alternating minimisation of ``||V - W H||_F^2 + sparsity * sum(H)``.

    Returns ``(W, H, objective_trace)``; ``objective_trace[0]`` is the value after
    the initial H-step and one entry is appended per iteration.

    The W-step is projected gradient descent onto non-negative unit-norm columns
    with a backtracking step size; a step that would raise the objective is
    rejected, and so is a whole iteration whose recomputed objective rises,
    which keeps the trace non-increasing.
    """
    V = np.asarray(V, dtype=np.float64)
    W = np.array(REFERENCE_STAIN_MATRIX if W0 is None else W0, dtype=np.float64)
    H = nonneg_lasso(V, W, sparsity, sweeps=h_sweeps)
    obj = factorization_objective(V, W, H, sparsity)
    trace = [obj]
    vv = float(np.sum(V * V))
    for _ in range(n_iter):
        prev_W, prev_H = W, H
        H = nonneg_lasso(V, W, sparsity, H=H, sweeps=h_sweeps)
        obj = factorization_objective(V, W, H, sparsity)

        # with H fixed the objective depends on W only through V H^T and H H^T
        HHt = H @ H.T
        VHt = V @ H.T
        penalty = sparsity * float(np.sum(H))
        w_obj = lambda M: vv - 2.0 * float(np.sum(M * VHt)) + float(np.sum((M.T @ M) * HHt)) + penalty
        lipschitz = 2.0 * max(np.linalg.norm(HHt, 2), 1e-12)
        for _ in range(w_steps):
            grad = 2.0 * (W @ HHt - VHt)
            step = 1.0 / lipschitz
            accepted = False
            for _ in range(30):
                cand = _project_unit_columns(W - step * grad)
                if cand is not None:
                    cand_obj = w_obj(cand)
                    if cand_obj <= obj:
                        W, obj, accepted = cand, cand_obj, True
                        break
                step *= 0.5
            if not accepted:
                break
        obj = factorization_objective(V, W, H, sparsity)
        if obj > trace[-1]:
            # rounding in the expanded W-step objective can leave a last-ulp rise
            W, H, obj = prev_W, prev_H, trace[-1]
        trace.append(obj)
    return W, H, np.array(trace)


def tissue_od(rgb, od_threshold=OD_TISSUE_THRESHOLD) -> np.ndarray:
    """OD vectors (3 x n) of pixels whose OD norm exceeds the threshold."""
    od = rgb_to_od(np.asarray(rgb).reshape(-1, 3))
    keep = np.linalg.norm(od, axis=1) > od_threshold
    return od[keep].T


def _order_stains(W, H):
    # hematoxylin carries the larger blue-channel OD
    if W[2, 0] < W[2, 1]:
        return W[:, ::-1].copy(), H[::-1].copy()
    return W, H


def fit_stain_profile(rgb, sparsity=0.1, n_iter=50, od_threshold=OD_TISSUE_THRESHOLD,
                      percentile=99.0) -> StainProfile:
    """Estimate the stain matrix and robust maximum concentrations of an image.

    ``rgb`` is any uint8 array whose last axis is RGB; pooled pixels of several
    tiles can be passed stacked along the first axis.
    """
    V = tissue_od(rgb, od_threshold)
    if V.shape[1] < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError("insufficient tissue for stain estimation")
    W, H, _ = sparse_stain_factorization(V, sparsity=sparsity, n_iter=n_iter)
    W, H = _order_stains(W, H)
    max_conc = np.percentile(H, percentile, axis=1)
    return StainProfile(W, max_conc)


def stain_concentrations(rgb, stain_matrix, method="lstsq", sparsity=0.0) -> np.ndarray:
    """Per-pixel stain concentrations, shape ``(2, n_pixels)``.

    ``method="lstsq"`` projects OD onto the stain plane and may return small
    negative values for pixels just outside the fitted stain cone; ``"nnls"``
    solves the non-negative (optionally sparse) problem instead.
    """
    W = np.asarray(stain_matrix, dtype=np.float64)
    od = rgb_to_od(np.asarray(rgb).reshape(-1, 3)).T
    if method == "lstsq":
        return np.linalg.solve(W.T @ W, W.T @ od)
    if method == "nnls":
        return nonneg_lasso(od, W, sparsity)
    raise ValueError(f"unknown concentration method {method!r}")


def normalize_to(rgb, source: StainProfile, target: StainProfile, method="lstsq") -> np.ndarray:
    """Map ``rgb`` from the ``source`` stain appearance onto ``target``."""
    source.check_rank()
    target.check_rank()
    rgb = np.asarray(rgb)
    C = stain_concentrations(rgb, source.stain_matrix, method)
    C *= (target.max_concentration / source.max_concentration)[:, None]
    od = (target.stain_matrix @ C).T.reshape(rgb.shape)
    return od_to_rgb(od)
