"""Lane-structured attention masking and a minimal masked forward pass.

Queries are lane points on an (n_lanes, m_points) grid, flattened as
lane * m + point.  Three boolean masks restrict which keys each query
may attend to: points on its own lane, the two nearest points on every
neighboring lane in the direction orthogonal to the local tangent, and
the nearest entries of the propagated memory.  Together they leave only
a small fraction of the full attention matrix active.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import basis_matrix


def same_line_mask(n_lanes: int, m_points: int) -> np.ndarray:
    """Boolean (n*m, n*m) mask: query and key belong to the same lane."""
    if n_lanes < 1 or m_points < 1:
        raise ValueError("lane and point counts must be >= 1")
    lane = np.repeat(np.arange(n_lanes), m_points)
    return lane[:, None] == lane[None, :]


def neighbor_line_mask(points: np.ndarray) -> np.ndarray:
    """Boolean (n*m, n*m) mask selecting, per query, the 2 points of every
    other lane closest to the query's orthogonal line.

    The orthogonal line runs through the query point perpendicular to
    the local x-y tangent, so a candidate's distance to it is the
    magnitude of its offset along the tangent direction.  Degenerate
    tangents fall back to the longitudinal axis.  Ties keep the lower
    point index.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 3 or points.shape[2] < 2:
        raise ValueError("points must be (n_lanes, m_points, >=2)")
    n, m = points.shape[:2]
    tangents = np.einsum("sm,nmc->nsc", basis_matrix(m, np.linspace(0, 1, m), order=1).matrix,
                         points[:, :, :2])
    norms = np.linalg.norm(tangents, axis=2, keepdims=True)
    tangents = np.where(norms > 1e-12, tangents / np.maximum(norms, 1e-12), [0.0, 1.0])

    mask = np.zeros((n * m, n * m), dtype=bool)
    for i in range(n):
        for j in range(m):
            q = points[i, j, :2]
            t = tangents[i, j]
            row = i * m + j
            for other in range(n):
                if other == i:
                    continue
                along = np.abs((points[other, :, :2] - q) @ t)
                nearest = np.argsort(along, kind="stable")[:2]
                mask[row, other * m + nearest] = True
    return mask


def memory_mask(query_points: np.ndarray, memory_points: np.ndarray,
                k_nearest: int = 10) -> np.ndarray:
    """Boolean (queries, memory) mask: the k_nearest memory entries by 3D distance.

    Memory geometry must already be propagated into the query frame.
    Ties keep the lower memory index; an empty memory yields all-false
    rows and the attention contribution is skipped downstream.
    """
    query_points = np.asarray(query_points, dtype=float).reshape(-1, np.asarray(query_points).shape[-1])
    memory_points = np.asarray(memory_points, dtype=float)
    n_q = query_points.shape[0]
    n_k = memory_points.shape[0]
    mask = np.zeros((n_q, n_k), dtype=bool)
    if n_k == 0:
        return mask
    if n_k <= k_nearest:
        mask[:] = True
        return mask
    diff = query_points[:, None, :3] - memory_points[None, :, :3]
    dist = np.linalg.norm(diff, axis=2)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k_nearest]
    np.put_along_axis(mask, nearest, True, axis=1)
    return mask


@dataclass(frozen=True)
class EncodingConfig:
    """Sinusoidal positional encoding over the 4 scalars (x, y, z, v).

    `dim` output channels split evenly over the scalars, one sin/cos
    pair per frequency octave, inputs normalized (and clamped) to their
    configured ranges.
    """

    dim: int = 64
    x_range: tuple[float, float] = (-20.0, 20.0)
    y_range: tuple[float, float] = (0.0, 200.0)
    z_range: tuple[float, float] = (-5.0, 5.0)
    v_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.dim % 8 != 0:
            raise ValueError("encoding dim must be divisible by 8 (4 scalars x sin/cos)")

    @property
    def frequencies(self) -> int:
        return self.dim // 8

    @property
    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (self.x_range, self.y_range, self.z_range, self.v_range)


def positional_encoding(points: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """Deterministic multi-frequency encoding of (x, y, z, v) points to (n, dim)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 4:
        raise ValueError("points must have 4 components (x, y, z, v)")
    blocks = []
    freqs = 2.0 ** np.arange(cfg.frequencies)
    for scalar, (lo, hi) in enumerate(cfg.ranges):
        u = np.clip((pts[:, scalar] - lo) / (hi - lo), 0.0, 1.0)
        angles = np.pi * u[:, None] * freqs[None, :]
        blocks.append(np.sin(angles))
        blocks.append(np.cos(angles))
    out = np.concatenate(blocks, axis=1)
    return out[0] if np.asarray(points).ndim == 1 else out


def masked_attention(queries: np.ndarray, keys: np.ndarray, values: np.ndarray,
                     mask: np.ndarray, heads: int = 1) -> np.ndarray:
    """Scaled dot-product attention restricted to the masked keys.

    Rows whose mask is entirely false return zeros, so the attention
    contribution degrades gracefully when no keys exist (e.g. an empty
    memory on the first frame).
    """
    queries = np.asarray(queries, dtype=float)
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    r, c = queries.shape
    if keys.shape != values.shape or keys.shape[1] != c:
        raise ValueError("queries, keys, and values must share the channel dimension")
    if mask.shape != (r, keys.shape[0]):
        raise ValueError(f"mask shape {mask.shape} does not match (queries, keys)")
    if c % heads != 0:
        raise ValueError(f"channels {c} not divisible by {heads} heads")
    if keys.shape[0] == 0:
        return np.zeros_like(queries)

    head_dim = c // heads
    out = np.zeros_like(queries)
    active = mask.any(axis=1)
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        scores = queries[:, sl] @ keys[:, sl].T / np.sqrt(head_dim)
        row_max = np.max(np.where(mask, scores, -np.inf), axis=1, keepdims=True)
        shifted = np.where(mask, scores - np.where(np.isfinite(row_max), row_max, 0.0), 0.0)
        weights = np.where(mask, np.exp(shifted), 0.0)
        sums = weights.sum(axis=1, keepdims=True)
        weights = np.divide(weights, sums, out=np.zeros_like(weights), where=sums > 0)
        out[:, sl] = weights @ values[:, sl]
    out[~active] = 0.0
    return out


def scale_to_range(u, lo: float, hi: float):
    """Map raw head outputs through a sigmoid onto [lo, hi]."""
    if not lo < hi:
        raise ValueError("range must satisfy lo < hi")
    u = np.asarray(u, dtype=float)
    sig = 1.0 / (1.0 + np.exp(-u))
    out = sig * (hi - lo) + lo
    return float(out) if out.ndim == 0 else out


def sparsity_ratio(same_line: np.ndarray, neighbor: np.ndarray,
                   memory: np.ndarray | None = None) -> float:
    """Active fraction of the union mask over rows x (current keys + memory keys)."""
    same_line = np.asarray(same_line, dtype=bool)
    neighbor = np.asarray(neighbor, dtype=bool)
    if neighbor.shape != same_line.shape:
        raise ValueError("current-frame masks must share their shape")
    active = np.count_nonzero(same_line | neighbor)
    columns = same_line.shape[1]
    if memory is not None:
        memory = np.asarray(memory, dtype=bool)
        if memory.shape[0] != same_line.shape[0]:
            raise ValueError("memory mask must share the query dimension")
        active += np.count_nonzero(memory)
        columns += memory.shape[1]
    total = same_line.shape[0] * columns
    return active / total if total else 0.0


def spatio_temporal_layer(embeddings: np.ndarray, points: np.ndarray,
                          memory_embeddings: np.ndarray, memory_points: np.ndarray,
                          enc: EncodingConfig, heads: int = 1,
                          k_nearest: int = 10) -> np.ndarray:
    """One structured attention layer: same-line, neighbor, then memory attention.

    Each stage is masked attention with a residual add on the
    position-informed queries; output shape equals the (n, m, channels)
    input embedding shape.
    """
    embeddings = np.asarray(embeddings, dtype=float)
    points = np.asarray(points, dtype=float)
    n, m, channels = embeddings.shape
    flat_points = points.reshape(n * m, 4)
    q = embeddings.reshape(n * m, channels) + positional_encoding(flat_points, enc)

    q = q + masked_attention(q, q, q, same_line_mask(n, m), heads=heads)
    q = q + masked_attention(q, q, q, neighbor_line_mask(points), heads=heads)

    memory_points = np.asarray(memory_points, dtype=float).reshape(-1, 4)
    memory_embeddings = np.asarray(memory_embeddings, dtype=float).reshape(-1, channels) \
        if memory_points.shape[0] else np.zeros((0, channels))
    if memory_points.shape[0]:
        mem_keys = memory_embeddings + positional_encoding(memory_points, enc)
    else:
        mem_keys = memory_embeddings
    mem = memory_mask(flat_points, memory_points, k_nearest=k_nearest)
    q = q + masked_attention(q, mem_keys, mem_keys, mem, heads=heads)
    return q.reshape(n, m, channels)
