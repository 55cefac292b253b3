"""Structural descriptors of segmented voxel images.

Covers everything used for calibration and validation: volume fractions,
two-point coverage probability functions (raw per-lag estimates merged onto a
distance grid by Nadaraya-Watson regression with a Gaussian kernel), chord
length distributions, specific surface area in 2-d and 3-d, mean geodesic
tortuosity and constrictivity.

All estimators are deterministic functions of the image. The two-point
machinery precomputes its lag geometry once per window shape; the same
geometry drives both the exact estimator on hard images and the differentiable
estimator on soft channel tensors used during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import csgraph
from scipy.spatial import SphericalVoronoi

from . import autodiff as ad
from .autodiff import Tensor
from .model import PhaseImage

PAIRS = ((1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3))

_AXIS_OF = {"x": 0, "y": 1, "z": 2}


class DescriptorError(ValueError):
    pass


class NonPercolatingError(DescriptorError):
    """The phase has no connected path between the two faces."""


def volume_fractions(img: PhaseImage) -> tuple[float, float, float]:
    counts = np.bincount(img.labels.reshape(-1), minlength=4)[1:4]
    return tuple(float(c) / img.labels.size for c in counts)


# ---------------------------------------------------------------------------
# two-point coverage probability functions
# ---------------------------------------------------------------------------

@dataclass
class TpcfGeometry:
    """Precomputed lag set and regression operator for one window shape.

    ``lag_flat`` indexes the padded circular-correlation grid at the wrap
    position of every admissible lag vector (|t| <= max_lag, C-order over the
    lag cube); ``counts`` holds c(t), the number of point pairs realizing the
    lag inside the window; ``regression`` maps raw per-lag values to the
    h_grid via normalized Gaussian weights.
    """

    extents: tuple[int, ...]
    max_lag: int
    h_grid: np.ndarray
    bandwidth: float
    pad_shape: tuple[int, ...]
    lag_vectors: np.ndarray
    lag_flat: np.ndarray
    lag_h: np.ndarray
    counts: np.ndarray
    regression: np.ndarray


def gaussian_regression_matrix(h_grid: np.ndarray, x: np.ndarray, bandwidth: float
                               ) -> np.ndarray:
    """Rows of normalized Gaussian weights K((h - x)/b) / sum K."""
    if bandwidth <= 0:
        raise DescriptorError(f"bandwidth must be positive, got {bandwidth}")
    u = (np.asarray(h_grid, dtype=np.float64)[:, None] - np.asarray(x)[None, :]) / bandwidth
    w = np.exp(-0.5 * u * u)
    return w / w.sum(axis=1, keepdims=True)


def build_tpcf_geometry(extents, max_lag: int, h_grid=None, bandwidth: float = 0.5
                        ) -> TpcfGeometry:
    extents = tuple(int(n) for n in extents)
    if max_lag < 0 or max_lag > min(extents) - 1:
        raise DescriptorError(
            f"max_lag must lie in [0, {min(extents) - 1}] for extents {extents}")
    if h_grid is None:
        h_grid = np.arange(max_lag + 1, dtype=np.float64)
    h_grid = np.asarray(h_grid, dtype=np.float64)

    d = len(extents)
    pad_shape = tuple(n + max_lag for n in extents)
    offs = [np.arange(-max_lag, max_lag + 1)] * d
    vecs = np.stack(np.meshgrid(*offs, indexing="ij"), axis=-1).reshape(-1, d)
    norms = np.sqrt((vecs.astype(np.float64) ** 2).sum(axis=1))
    keep = norms <= max_lag
    vecs = vecs[keep]
    lag_h = norms[keep]
    counts = np.prod([np.asarray(extents)[a] - np.abs(vecs[:, a]) for a in range(d)],
                     axis=0).astype(np.float64)
    wrapped = np.stack([np.mod(vecs[:, a], pad_shape[a]) for a in range(d)], axis=0)
    lag_flat = np.ravel_multi_index(tuple(wrapped), pad_shape)
    return TpcfGeometry(
        extents=extents, max_lag=max_lag, h_grid=h_grid, bandwidth=bandwidth,
        pad_shape=pad_shape, lag_vectors=vecs, lag_flat=lag_flat, lag_h=lag_h,
        counts=counts, regression=gaussian_regression_matrix(h_grid, lag_h, bandwidth))


@dataclass
class TPCFSet:
    """Estimated coverage probability curves C_ij(h) for the six phase pairs."""

    pairs: tuple
    h_grid: np.ndarray
    values: dict
    raw: dict | None = None

    def stacked(self) -> np.ndarray:
        """(6, len(h_grid)) array in PAIRS order."""
        return np.stack([self.values[p] for p in self.pairs])


def _padded_spectrum(indicator: np.ndarray, geom: TpcfGeometry) -> np.ndarray:
    padded = np.zeros(geom.pad_shape)
    padded[tuple(slice(0, n) for n in indicator.shape)] = indicator
    return np.fft.rfftn(padded)


def _pair_numerators(fa: np.ndarray, fb: np.ndarray, geom: TpcfGeometry) -> np.ndarray:
    corr = np.fft.irfftn(np.conj(fa) * fb, s=geom.pad_shape,
                         axes=range(len(geom.pad_shape)))
    return corr.reshape(-1)[geom.lag_flat]


def tpcf_raw(img: PhaseImage, i: int, j: int, max_lag: int,
             geom: TpcfGeometry | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-lag estimates c_ij(t) for all lag vectors with |t| <= max_lag.

    Returns (h, values, counts) aligned arrays, one entry per admissible lag
    vector in C-order. Since the window is a full cuboid, every admissible lag
    has c(t) > 0. Numerators are integral for one-hot images and are computed
    exactly (FFT result rounded to the nearest integer).
    """
    if geom is None:
        geom = build_tpcf_geometry(img.extents, max_lag)
    fa = _padded_spectrum(img.indicator(i).astype(np.float64), geom)
    fb = fa if i == j else _padded_spectrum(img.indicator(j).astype(np.float64), geom)
    num = np.rint(_pair_numerators(fa, fb, geom))
    return geom.lag_h.copy(), num / geom.counts, geom.counts.copy()


def tpcf_kernel_regress(h_raw, values, h_grid, bandwidth: float = 0.5) -> np.ndarray:
    """Nadaraya-Watson estimate of C(h) on h_grid from raw (|t|, c(t)) pairs."""
    h_raw = np.asarray(h_raw, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if h_raw.size == 0:
        raise DescriptorError("no raw two-point estimates to regress")
    return gaussian_regression_matrix(np.asarray(h_grid, dtype=np.float64),
                                      h_raw, bandwidth) @ values


def tpcf_set(img: PhaseImage, max_lag: int, h_grid=None, bandwidth: float = 0.5,
             geom: TpcfGeometry | None = None, keep_raw: bool = False) -> TPCFSet:
    """All six pair curves of one image."""
    if geom is None:
        geom = build_tpcf_geometry(img.extents, max_lag, h_grid, bandwidth)
    spectra = {p: _padded_spectrum(img.indicator(p).astype(np.float64), geom)
               for p in (1, 2, 3)}
    values = {}
    raw = {} if keep_raw else None
    for (i, j) in PAIRS:
        num = np.rint(_pair_numerators(spectra[i], spectra[j], geom))
        y = num / geom.counts
        values[(i, j)] = geom.regression @ y
        if keep_raw:
            raw[(i, j)] = (geom.lag_h.copy(), y, geom.counts.copy())
    return TPCFSet(pairs=PAIRS, h_grid=geom.h_grid.copy(), values=values, raw=raw)


def tpcf_data_average(images, max_lag: int, h_grid=None, bandwidth: float = 0.5) -> TPCFSet:
    """Pointwise average of per-slice curves over a stack of 2-d images."""
    images = list(images)
    if not images:
        raise DescriptorError("need at least one image")
    extents = images[0].extents
    if any(im.extents != extents for im in images):
        raise DescriptorError("all slices must share the same extents")
    geom = build_tpcf_geometry(extents, max_lag, h_grid, bandwidth)
    acc = None
    for im in images:
        cur = tpcf_set(im, max_lag, geom=geom)
        if acc is None:
            acc = {p: v.copy() for p, v in cur.values.items()}
        else:
            for p in PAIRS:
                acc[p] += cur.values[p]
    for p in PAIRS:
        acc[p] /= len(images)
    return TPCFSet(pairs=PAIRS, h_grid=geom.h_grid.copy(), values=acc)


def tpcf_curves_tensor(channels, geom: TpcfGeometry) -> dict:
    """Differentiable pair curves from soft channel tensors (same estimator,
    products of real-valued channels in place of indicator products)."""
    padded = {p: ad.pad_to(channels[p - 1], geom.pad_shape) for p in (1, 2, 3)}
    inv_counts = ad.constant(1.0 / geom.counts)
    curves = {}
    for (i, j) in PAIRS:
        corr = ad.cross_correlate(padded[i], padded[j])
        num = ad.take(corr, geom.lag_flat)
        curves[(i, j)] = ad.linear_map(geom.regression, ad.mul(num, inv_counts))
    return curves


# ---------------------------------------------------------------------------
# chord lengths
# ---------------------------------------------------------------------------

@dataclass
class ChordLengthDistribution:
    """Lengths of maximal same-phase runs along one grid direction.

    Runs touching the window boundary are censored (discarded). ``lengths``
    is sorted and in voxel units; the CDF is the empirical distribution with
    linear interpolation between observed lengths.
    """

    phase: int
    direction: str
    lengths: np.ndarray
    voxel_size: float = 1.0

    @property
    def count(self) -> int:
        return self.lengths.size

    @property
    def mean_voxels(self) -> float:
        return float(self.lengths.mean())

    @property
    def mean_physical(self) -> float:
        return self.mean_voxels * self.voxel_size

    @property
    def max_voxels(self) -> float:
        return float(self.lengths.max())

    def cdf(self, t) -> np.ndarray:
        """Phi(t) with Phi(0) = 0 and Phi(t) = 1 beyond the largest chord."""
        xs = np.unique(self.lengths)
        counts = np.searchsorted(self.lengths, xs, side="right")
        xp = np.concatenate(([0.0], xs.astype(np.float64)))
        fp = np.concatenate(([0.0], counts / self.lengths.size))
        return np.interp(np.asarray(t, dtype=np.float64), xp, fp, left=0.0, right=1.0)


def chord_lengths(img: PhaseImage, phase: int, direction: str,
                  voxel_size: float | None = None) -> ChordLengthDistribution:
    axis = _AXIS_OF.get(direction)
    if axis is None or axis >= img.labels.ndim:
        raise DescriptorError(f"direction {direction!r} not available in {img.labels.ndim}-d")
    if voxel_size is None:
        voxel_size = img.voxel_size
    mask = np.moveaxis(img.indicator(phase), axis, -1)
    n = mask.shape[-1]
    rows = mask.reshape(-1, n)
    # sentinel zero columns so every run has a detectable start and end
    padded = np.zeros((rows.shape[0], n + 2), dtype=np.int8)
    padded[:, 1:-1] = rows
    diff = np.diff(padded.reshape(-1))
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1)
    row_len = n + 2
    start_col = starts % row_len
    end_col = ends % row_len
    interior = (start_col != 0) & (end_col != n)
    lengths = (ends - starts)[interior]
    if lengths.size == 0:
        raise DescriptorError(
            f"no interior chords for phase {phase} along {direction} "
            "(phase absent or every run touches the boundary)")
    return ChordLengthDistribution(phase=phase, direction=direction,
                                   lengths=np.sort(lengths).astype(np.float64),
                                   voxel_size=voxel_size)


# ---------------------------------------------------------------------------
# specific surface area
# ---------------------------------------------------------------------------

def _crossing_rate(mask: np.ndarray, offset) -> float:
    """Phase boundary crossings per unit probe length along one lattice
    direction; window faces contribute nothing (only in-window pairs)."""
    src = tuple(slice(max(0, -o), mask.shape[a] - max(0, o))
                for a, o in enumerate(offset))
    dst = tuple(slice(max(0, o), mask.shape[a] + min(0, o))
                for a, o in enumerate(offset))
    a = mask[src]
    b = mask[dst]
    if a.size == 0:
        return 0.0
    return float((a != b).sum()) / (a.size * float(np.sqrt(sum(o * o for o in offset))))


_DIRECTIONS_2D = ((1, 0), (0, 1), (1, 1), (1, -1))

_DIRECTIONS_3D = tuple(
    t for t in ((a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1))
    if t > (0, 0, 0))

_WEIGHTS_3D_CACHE: np.ndarray | None = None


def _weights_3d() -> np.ndarray:
    """Solid-angle quadrature weights of the 13 lattice direction pairs
    (spherical Voronoi cell areas of the 26 unit vectors)."""
    global _WEIGHTS_3D_CACHE
    if _WEIGHTS_3D_CACHE is None:
        units = np.array([np.asarray(v) / np.linalg.norm(v) for v in _DIRECTIONS_3D])
        pts = np.concatenate([units, -units])
        areas = SphericalVoronoi(pts, radius=1.0).calculate_areas()
        _WEIGHTS_3D_CACHE = (areas[:13] + areas[13:]) / (4.0 * np.pi)
    return _WEIGHTS_3D_CACHE


def perimeter_2d(mask: np.ndarray) -> float:
    """Boundary length of a binary mask in pixel units, by the Cauchy-Crofton
    formula over the four lattice directions (axes and diagonals, equal
    angular weight): L = (pi / 2) * area * mean crossing rate."""
    rate = sum(0.25 * _crossing_rate(mask, v) for v in _DIRECTIONS_2D)
    return float(np.pi / 2.0 * rate * mask.size)


def specific_surface_2d(img: PhaseImage, phase: int, voxel_size: float | None = None) -> float:
    """S_V = (4 / pi) * L_A with L_A the specific perimeter (boundary length
    per window area); the factor converts the 2-d perimeter density to a 3-d
    surface density under isotropy."""
    if img.labels.ndim != 2:
        raise DescriptorError("specific_surface_2d expects a 2-d image")
    if voxel_size is None:
        voxel_size = img.voxel_size
    perim = perimeter_2d(img.indicator(phase))
    area = img.labels.size
    return (4.0 / np.pi) * perim / (area * voxel_size)


def specific_surface_3d(img: PhaseImage, phase: int, voxel_size: float | None = None) -> float:
    """Surface area per window volume from directional crossing counts over
    the 13 lattice direction pairs with solid-angle weights: S_V = 2 * mean
    crossing rate. Window faces are not counted."""
    if img.labels.ndim != 3:
        raise DescriptorError("specific_surface_3d expects a 3-d image")
    if voxel_size is None:
        voxel_size = img.voxel_size
    mask = img.indicator(phase)
    if mask.all() or not mask.any():
        return 0.0
    rate = sum(w * _crossing_rate(mask, v)
               for v, w in zip(_DIRECTIONS_3D, _weights_3d()))
    return float(2.0 * rate / voxel_size)


# ---------------------------------------------------------------------------
# geodesic tortuosity
# ---------------------------------------------------------------------------

def _forward_offsets(d: int) -> list[tuple]:
    """Half of the 26-neighborhood (3-d) or 8-neighborhood (2-d):
    lexicographically positive offsets only; the reverse edges are added
    explicitly."""
    offs = []
    rng = [(-1, 0, 1)] * d
    for t in np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, d):
        t = tuple(int(v) for v in t)
        if t > (0,) * d:
            offs.append(t)
    return offs


def _phase_graph(mask: np.ndarray) -> tuple[np.ndarray, sparse.csr_matrix]:
    """Node ids for phase voxels and the weighted adjacency over the
    26-neighborhood with metric edge weights {1, sqrt(2), sqrt(3)}."""
    node_id = np.full(mask.shape, -1, dtype=np.int64)
    node_id[mask] = np.arange(int(mask.sum()))
    n = int(mask.sum())
    rows, cols, vals = [], [], []
    for off in _forward_offsets(mask.ndim):
        src = tuple(slice(max(0, -o), mask.shape[a] - max(0, o)) for a, o in enumerate(off))
        dst = tuple(slice(max(0, o), mask.shape[a] + min(0, o)) for a, o in enumerate(off))
        both = mask[src] & mask[dst]
        a = node_id[src][both]
        b = node_id[dst][both]
        w = float(np.sqrt(sum(o * o for o in off)))
        rows.append(a)
        cols.append(b)
        vals.append(np.full(a.size, w))
        rows.append(b)
        cols.append(a)
        vals.append(np.full(a.size, w))
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    graph = sparse.csr_matrix((vals, (rows, cols)), shape=(n + 1, n + 1))
    return node_id, graph


def geodesic_tortuosity(img: PhaseImage, phase: int, axis: int = 2) -> float:
    """Mean over start-face phase voxels of (geodesic length to the far face)
    divided by the window extent along the axis.

    Path lengths are voxel-inclusive: the center-to-center geodesic distance
    plus one voxel, so a straight path through the full window has tortuosity
    exactly 1. Start voxels without a path are skipped; if none percolates a
    NonPercolatingError is raised.
    """
    mask = img.indicator(phase)
    if axis >= mask.ndim:
        raise DescriptorError(f"axis {axis} not available in {mask.ndim}-d")
    extent = mask.shape[axis]
    node_id, graph = _phase_graph(mask)
    n = graph.shape[0] - 1

    end_face = np.take(node_id, -1, axis=axis)
    end_nodes = end_face[end_face >= 0]
    start_face = np.take(node_id, 0, axis=axis)
    start_nodes = start_face[start_face >= 0]
    if start_nodes.size == 0 or end_nodes.size == 0:
        raise NonPercolatingError(f"phase {phase} misses a face along axis {axis}")

    # virtual source (index n) attached to the far face; epsilon weight keeps
    # the entries from being pruned as explicit zeros
    virtual = sparse.csr_matrix(
        (np.full(end_nodes.size, 1e-12), (np.full(end_nodes.size, n), end_nodes)),
        shape=graph.shape)
    dist = csgraph.dijkstra(graph + virtual, directed=True, indices=n)
    d_start = dist[start_nodes]
    finite = np.isfinite(d_start)
    if not finite.any():
        raise NonPercolatingError(f"phase {phase} does not percolate along axis {axis}")
    return float(np.mean((d_start[finite] + 1.0) / extent))


# ---------------------------------------------------------------------------
# constrictivity
# ---------------------------------------------------------------------------

def _covered_fraction(centers: np.ndarray, mask: np.ndarray, r: float) -> float:
    """Fraction of the mask covered by dilating the center set by a ball r."""
    if not centers.any():
        return 0.0
    reach = ndimage.distance_transform_edt(~centers) <= r
    return float((reach & mask).sum() / mask.sum())


def _interp_half_radius(radii: np.ndarray, fractions: np.ndarray) -> float:
    """Radius where the (non-increasing) covered fraction crosses 0.5."""
    f = np.asarray(fractions)
    below = np.flatnonzero(f < 0.5)
    if below.size == 0:
        return float(radii[-1])
    k = below[0]
    if k == 0:
        return float(radii[0])
    f_hi, f_lo = f[k - 1], f[k]
    t = (f_hi - 0.5) / (f_hi - f_lo) if f_hi > f_lo else 0.0
    return float(radii[k - 1] + t * (radii[k] - radii[k - 1]))


def constrictivity(img: PhaseImage, phase: int, axis: int = 2) -> float:
    """Bottleneck descriptor beta = (r_min / r_max)^2.

    r_max: radius at which the morphological opening of the phase by balls
    still covers half the phase volume (continuous pore size distribution).
    r_min: the same 50% radius for simulated intrusion from the start face,
    where only ball centers connected to a reservoir pasted onto the start
    face may contribute.
    """
    mask = img.indicator(phase)
    if axis >= mask.ndim:
        raise DescriptorError(f"axis {axis} not available in {mask.ndim}-d")
    if not mask.any():
        raise NonPercolatingError(f"phase {phase} is empty")
    # percolation check along the axis (26-connectivity)
    labels, _ = ndimage.label(mask, structure=np.ones((3,) * mask.ndim, dtype=np.int8))
    lab_start = np.unique(np.take(labels, 0, axis=axis))
    lab_end = np.unique(np.take(labels, -1, axis=axis))
    common = np.intersect1d(lab_start, lab_end)
    if not np.any(common > 0):
        raise NonPercolatingError(f"phase {phase} does not percolate along axis {axis}")

    dist = ndimage.distance_transform_edt(mask)
    r_top = float(dist.max())
    radii = np.arange(0.5, np.ceil(r_top) + 1.0, 0.5)

    psd = [_covered_fraction(dist >= r, mask, r) for r in radii]
    r_max = _interp_half_radius(radii, psd)

    # reservoir: full-phase slab pasted before the start face so intruding
    # balls can enter from outside the window
    pad = int(np.ceil(r_top)) + 1
    pad_spec = [(0, 0)] * mask.ndim
    pad_spec[axis] = (pad, 0)
    padded = np.pad(mask, pad_spec, constant_values=True)
    dist_p = ndimage.distance_transform_edt(padded)
    reservoir = np.zeros_like(padded)
    reservoir_slice = [slice(None)] * mask.ndim
    reservoir_slice[axis] = slice(0, pad)
    reservoir[tuple(reservoir_slice)] = True
    original = [slice(None)] * mask.ndim
    original[axis] = slice(pad, None)
    original = tuple(original)

    struct = np.ones((3,) * mask.ndim, dtype=np.int8)
    intrusion = []
    for r in radii:
        centers = dist_p >= r
        lab, _ = ndimage.label(centers, structure=struct)
        seeds = np.unique(lab[reservoir & centers])
        seeds = seeds[seeds > 0]
        if seeds.size == 0:
            intrusion.append(0.0)
            continue
        reachable = np.isin(lab, seeds)
        # dilate on the padded grid so reservoir-seated balls still reach in
        covered = ndimage.distance_transform_edt(~reachable) <= r
        intrusion.append(float((covered[original] & mask).sum() / mask.sum()))
    r_min = _interp_half_radius(radii, intrusion)
    return float(min((r_min / r_max) ** 2, 1.0))


# ---------------------------------------------------------------------------
# aggregated summary
# ---------------------------------------------------------------------------

@dataclass
class DescriptorSummary:
    """Per-phase descriptor table; tortuosity and constrictivity only for the
    transport phases (1 and 2) of percolating 3-d images."""

    volume_fractions: dict
    mean_chord: dict
    specific_surface: dict
    tortuosity: dict = field(default_factory=dict)
    constrictivity: dict = field(default_factory=dict)


def compute_summary(img: PhaseImage, axis: int = 2,
                    transport_descriptors: bool = True) -> DescriptorSummary:
    eps = volume_fractions(img)
    dims = img.labels.ndim
    directions = ["x", "y", "z"][:dims]
    mean_chord = {}
    surface = {}
    for phase in (1, 2, 3):
        pooled = []
        for direction in directions:
            try:
                pooled.append(chord_lengths(img, phase, direction).lengths)
            except DescriptorError:
                pass
        mean_chord[phase] = (float(np.concatenate(pooled).mean()) * img.voxel_size
                             if pooled else float("nan"))
        if dims == 2:
            surface[phase] = specific_surface_2d(img, phase)
        else:
            surface[phase] = specific_surface_3d(img, phase)
    summary = DescriptorSummary(
        volume_fractions={p: eps[p - 1] for p in (1, 2, 3)},
        mean_chord=mean_chord, specific_surface=surface)
    if dims == 3 and transport_descriptors:
        for phase in (1, 2):
            try:
                summary.tortuosity[phase] = geodesic_tortuosity(img, phase, axis)
                summary.constrictivity[phase] = constrictivity(img, phase, axis)
            except NonPercolatingError:
                summary.tortuosity[phase] = float("nan")
                summary.constrictivity[phase] = float("nan")
    return summary
