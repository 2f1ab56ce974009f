"""Embedding visualizations: PCA, LDA, and exact t-SNE projections.

Each method returns a Projection (coordinates + per-method diagnostics)
that renders to a self-contained SVG with a CSV coordinate table beside
it. All three are deterministic given (X, params, seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import _svg
from ..errors import BlockExecutionError, DataError

_EPS = 1e-12


@dataclass
class Projection:
    method: str  # pca | lda | tsne
    coords: np.ndarray  # (n, 2) for pca/tsne, (n, 1) for lda
    labels: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    ids: list[str] | None = None
    split: list[str] | None = None


def pca_project(X: np.ndarray, components: int = 2, labels=None) -> Projection:
    """Project onto the top right-singular vectors of the centered matrix.

    Component signs are fixed so each component's largest-magnitude entry
    is positive; explained-variance ratios come back in descending order.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise DataError("pca needs n >= 2")
    if components > min(n - 1, d):
        raise DataError(f"components={components} exceeds min(n-1, D)={min(n - 1, d)}")
    Xc = X - X.mean(axis=0)
    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:components].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    eigvals = svals**2 / (n - 1)
    total = eigvals.sum()
    ratios = eigvals[:components] / total if total > 0 else np.zeros(components)
    return Projection(
        method="pca",
        coords=Xc @ comps.T,
        labels=None if labels is None else np.asarray(labels),
        diagnostics={
            "explained_variance_ratio": ratios.tolist(),
            "explained_variance": eigvals[:components].tolist(),
            "components": comps.tolist(),
        },
    )


def lda_project(X: np.ndarray, labels) -> Projection:
    """One-dimensional Fisher discriminant projection.

    Solves (S_w + eps*I) w = mu1 - mu0 with eps = 1e-6 * trace(S_w)/D,
    normalizes w, and orients it so the class-1 mean projects higher.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = X.shape
    if n < 4:
        raise DataError("lda needs n >= 4")
    if set(np.unique(labels)) != {0, 1}:
        raise DataError("lda needs both classes present")

    mu = {c: X[labels == c].mean(axis=0) for c in (0, 1)}
    scatter = np.zeros((d, d))
    for c in (0, 1):
        dev = X[labels == c] - mu[c]
        scatter += dev.T @ dev
    eps = 1e-6 * np.trace(scatter) / d
    if eps <= 0:
        eps = _EPS  # all points equal their class mean; keep the solve total
    w = np.linalg.solve(scatter + eps * np.eye(d), mu[1] - mu[0])
    norm = np.linalg.norm(w)
    if norm == 0:
        w = np.zeros(d)
        w[0] = 1.0  # identical class means: any direction; pick a stable one
    else:
        w = w / norm

    mean_gap = float(w @ (mu[1] - mu[0]))
    if mean_gap < 0:  # orient so the class-1 mean projects higher
        w = -w
        mean_gap = -mean_gap
    z = X @ w
    # between/within variance of the projected data, written as quadratic
    # forms in w so translation invariance of the inputs carries over exactly
    pooled = float(w @ scatter @ w) / (n - 2)
    fisher = mean_gap**2 / max(pooled, _EPS)
    return Projection(
        method="lda",
        coords=z[:, None],
        labels=labels,
        diagnostics={"fisher_ratio": float(fisher), "direction": w.tolist()},
    )


def conditional_affinities(
    X: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gaussian affinities with bandwidths bisected to a perplexity.

    Returns (P_conditional, realized_perplexities). Row i's precision beta
    is searched so exp(entropy) matches the target within tol, up to
    max_steps bisection steps.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    sq = np.sum(X**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    P = np.zeros((n, n))
    realized = np.zeros(n)
    for i in range(n):
        d = np.delete(d2[i], i)
        d = d - d.min()  # shift-invariant: stabilizes exp() for large beta
        mean_d = d.mean()
        beta = 1.0 / mean_d if mean_d > 0 else 1.0
        beta_min, beta_max = 0.0, math.inf
        p = np.exp(-d * beta)
        for _ in range(max_steps):
            s = p.sum()
            entropy = math.log(s) + beta * float(d @ p) / s
            perp = math.exp(entropy)
            if abs(perp - perplexity) <= tol:
                break
            if perp > perplexity:  # too flat: sharpen
                beta_min = beta
                beta = beta * 2.0 if beta_max == math.inf else 0.5 * (beta + beta_max)
            else:
                beta_max = beta
                beta = 0.5 * (beta + beta_min)
            p = np.exp(-d * beta)
        s = p.sum()
        entropy = math.log(s) + beta * float(d @ p) / s
        realized[i] = math.exp(entropy)
        row = p / s
        P[i, :i] = row[:i]
        P[i, i + 1 :] = row[i:]
    return P, realized


def tsne_embed(
    X: np.ndarray,
    perplexity: float = 30.0,
    iters: int = 1000,
    learning_rate: float = 200.0,
    seed: int = 0,
    labels=None,
    early_exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
) -> Projection:
    """Exact (non-approximate) t-SNE to two dimensions.

    Symmetrized Gaussian input affinities, Student-t low-dimensional
    kernel, gradient descent with momentum 0.5 for the first 250
    iterations then 0.8, early exaggeration for the first 250 iterations,
    initial coordinates from a seeded normal scaled by 1e-4. The KL
    divergence (always against the unexaggerated affinities, so recorded
    values are comparable across phases) is logged every 50 iterations.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 5:
        raise DataError("tsne needs n >= 5")
    perp_eff = min(float(perplexity), (n - 1) / 3.0)

    P_cond, realized = conditional_affinities(X, perp_eff)
    P = (P_cond + P_cond.T) / (2.0 * n)
    P = np.maximum(P, _EPS * 1e-6)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, 2)) * 1e-4
    update = np.zeros_like(Y)
    kl_trace: list[tuple[int, float]] = []

    def kl_divergence(coords: np.ndarray) -> float:
        q_num = _student_t_numerators(coords)
        Q = np.maximum(q_num / q_num.sum(), _EPS)
        mask = P > 0
        return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))

    for it in range(iters):
        exaggerating = it < exaggeration_iters
        P_eff = P * early_exaggeration if exaggerating else P
        momentum = 0.5 if it < exaggeration_iters else 0.8

        q_num = _student_t_numerators(Y)
        Q = np.maximum(q_num / q_num.sum(), _EPS)
        PQ = (P_eff - Q) * q_num
        grad = 4.0 * (np.diag(PQ.sum(axis=1)) - PQ) @ Y

        update = momentum * update - learning_rate * grad
        Y = Y + update

        if (it + 1) % 50 == 0:
            kl = kl_divergence(Y)
            if not math.isfinite(kl):
                raise BlockExecutionError(f"non-finite KL at iteration {it + 1}")
            kl_trace.append((it + 1, kl))

    if not kl_trace or kl_trace[-1][0] != iters:
        kl_trace.append((iters, kl_divergence(Y)))

    return Projection(
        method="tsne",
        coords=Y,
        labels=None if labels is None else np.asarray(labels),
        diagnostics={
            "kl_trace": [[it, kl] for it, kl in kl_trace],
            "final_kl": kl_trace[-1][1],
            "perplexity": perp_eff,
            "perplexity_max_abs_err": float(np.max(np.abs(realized - perp_eff))),
        },
    )


def _student_t_numerators(Y: np.ndarray) -> np.ndarray:
    sq = np.sum(Y**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T), 0.0)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    return num


def render_projection(p: Projection, out: str | Path) -> None:
    """Write a projection as a self-contained SVG plus a CSV table.

    Scatter colored by class for 2-D methods; for LDA, one Gaussian
    kernel-density path per class (Silverman bandwidth), the density-plot
    presentation that makes class peaks visible.
    """
    out = Path(out)
    coords = np.asarray(p.coords, dtype=np.float64)
    if coords.ndim != 2 or not np.all(np.isfinite(coords)):
        raise DataError("projection coords must be a finite rank-2 matrix")
    out.parent.mkdir(parents=True, exist_ok=True)

    if coords.shape[1] == 1:
        svg = _render_density(p, coords[:, 0])
    else:
        svg = _render_scatter(p, coords)
    out.write_text(svg)
    _write_coords_csv(p, coords, out.with_suffix(".csv"))


def _class_color(label) -> str:
    return _svg.CLASS_COLORS.get(int(label), _svg.FALLBACK_COLOR)


def _render_scatter(p: Projection, coords: np.ndarray) -> str:
    width, height = 640, 480
    ax = _svg.Axes(
        width,
        height,
        (coords[:, 0].min(), coords[:, 0].max()),
        (coords[:, 1].min(), coords[:, 1].max()),
    )
    body = [_svg.text(width / 2, 24, p.method.upper(), size=15)]
    body += ax.frame()
    labels = p.labels if p.labels is not None else [None] * len(coords)
    for (x, y), label in zip(coords, labels):
        color = _svg.FALLBACK_COLOR if label is None else _class_color(label)
        body.append(
            f'<circle cx="{_svg.fmt(ax.px(x))}" cy="{_svg.fmt(ax.py(y))}" r="3" '
            f'fill="{color}" fill-opacity="0.75"/>'
        )
    body += _legend(width)
    return _svg.document(width, height, body)


def _silverman_bandwidth(values: np.ndarray) -> float:
    n = len(values)
    std = float(np.std(values, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(values, [75, 25])
    iqr = float(q75 - q25)
    scale = min(std, iqr / 1.34) if iqr > 0 else std
    h = 0.9 * scale * n ** (-0.2)
    if h <= 0:
        spread = float(values.max() - values.min())
        h = max(1e-3 * spread, 1e-6)
    return h


def _render_density(p: Projection, values: np.ndarray) -> str:
    width, height = 640, 480
    labels = np.asarray(p.labels) if p.labels is not None else np.zeros(len(values), int)
    classes = sorted(set(int(c) for c in labels))
    bandwidths = {c: _silverman_bandwidth(values[labels == c]) for c in classes}
    pad = 3.0 * max(bandwidths.values())
    grid = np.linspace(values.min() - pad, values.max() + pad, 200)

    densities = {}
    for c in classes:
        pts = values[labels == c]
        h = bandwidths[c]
        z = (grid[:, None] - pts[None, :]) / h
        densities[c] = np.exp(-0.5 * z**2).sum(axis=1) / (len(pts) * h * math.sqrt(2 * math.pi))

    peak = max(d.max() for d in densities.values())
    ax = _svg.Axes(width, height, (grid[0], grid[-1]), (0.0, peak))
    body = [_svg.text(width / 2, 24, p.method.upper(), size=15)]
    body += ax.frame()
    for c in classes:
        pts = " L ".join(
            f"{_svg.fmt(ax.px(x))} {_svg.fmt(ax.py(y))}" for x, y in zip(grid, densities[c])
        )
        body.append(
            f'<path d="M {pts}" fill="none" stroke="{_class_color(c)}" stroke-width="1.5"/>'
        )
    body += _legend(width)
    return _svg.document(width, height, body)


def _legend(width: int) -> list[str]:
    items = []
    for i, (cls, name) in enumerate(((0, "class 0"), (1, "class 1"))):
        x = width - 150 + i * 70
        items.append(f'<circle cx="{x}" cy="40" r="4" fill="{_class_color(cls)}"/>')
        items.append(_svg.text(x + 8, 44, name, size=11, anchor="start"))
    return items


def _write_coords_csv(p: Projection, coords: np.ndarray, path: Path) -> None:
    n, d = coords.shape
    ids = p.ids if p.ids is not None else [str(i) for i in range(n)]
    labels = p.labels if p.labels is not None else [""] * n
    split = p.split if p.split is not None else [""] * n
    header = ["patch_id", "label", "split", "x"] + (["y"] if d > 1 else [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(n):
            row = [ids[i], labels[i], split[i]] + [repr(float(v)) for v in coords[i]]
            writer.writerow(row)
