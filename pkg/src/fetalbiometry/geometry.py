"""Pixel-domain geometry: binary morphology, connected components, ellipse
and minimum-area rectangle fitting, cross-pattern key-point matching, mask
rasterization and the biometric length/circumference formulas.

Masks are 2-d boolean numpy arrays indexed ``[row, col]``; point
coordinates are ``(x, y)`` with x along columns.  A pixel occupies a unit
square centered on its integer coordinates, so the extent of a run of
``n`` pixels measured between centers is ``n - 1``.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class FitError(ValueError):
    """Raised when a geometric fit is degenerate or underdetermined."""


@dataclass
class EllipseParams:
    """Center, semi-axes and major-axis angle of an ellipse.

    ``a >= b > 0``; ``theta`` is the major-axis angle against the x-axis,
    normalized to [0, pi).
    """

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise FitError(f"ellipse axes must satisfy a >= b > 0, got a={self.a}, b={self.b}")
        self.theta = self.theta % math.pi


@dataclass
class RectParams:
    """Oriented rectangle: center, side lengths (length >= breadth) and the
    angle of the long side in [0, pi)."""

    center: tuple[float, float]
    length: float
    breadth: float
    angle: float

    def __post_init__(self):
        if self.length < self.breadth or self.breadth < 0:
            raise FitError(
                f"rectangle needs length >= breadth >= 0, got {self.length}, {self.breadth}")
        self.angle = self.angle % math.pi


@dataclass
class KeyPointPair:
    """Two matched key points with their correlation scores."""

    p1: tuple[float, float]
    p2: tuple[float, float]
    score1: float
    score2: float


# ---------------------------------------------------------------------------
# morphology and components
# ---------------------------------------------------------------------------

def _disc_offsets(radius: int) -> list[tuple[int, int]]:
    return [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]


def dilate(mask: np.ndarray, se_radius: int) -> np.ndarray:
    """Minkowski dilation with a disc structuring element."""
    if se_radius < 1:
        raise ValueError(f"se_radius must be >= 1, got {se_radius}")
    h, w = mask.shape
    r = se_radius
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    for dy, dx in _disc_offsets(r):
        padded[r + dy:r + dy + h, r + dx:r + dx + w] |= mask
    return padded[r:r + h, r:r + w]


def erode(mask: np.ndarray, se_radius: int) -> np.ndarray:
    """Minkowski erosion with a disc structuring element (border is background)."""
    if se_radius < 1:
        raise ValueError(f"se_radius must be >= 1, got {se_radius}")
    h, w = mask.shape
    r = se_radius
    padded = np.zeros((h + 2 * r, w + 2 * r), dtype=bool)
    padded[r:r + h, r:r + w] = mask
    out = np.ones((h, w), dtype=bool)
    for dy, dx in _disc_offsets(r):
        out &= padded[r + dy:r + dy + h, r + dx:r + dx + w]
    return out


def _neighbors(connectivity: int) -> list[tuple[int, int]]:
    four = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 4:
        return four
    if connectivity == 8:
        return four + [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def label_components(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Label connected components by flood fill; labels start at 1 and are
    assigned in row-major order of the component anchor pixel."""
    offs = _neighbors(connectivity)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    current = 0
    for y0, x0 in zip(*np.nonzero(mask)):
        if labels[y0, x0]:
            continue
        current += 1
        stack = [(int(y0), int(x0))]
        labels[y0, x0] = current
        while stack:
            y, x = stack.pop()
            for dy, dx in offs:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                    labels[ny, nx] = current
                    stack.append((ny, nx))
    return labels, current


def largest_component(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Keep only the largest connected component.

    Ties go to the component whose anchor pixel comes first in row-major
    order (that is, the lowest label).  An empty mask maps to itself.
    """
    labels, n = label_components(mask, connectivity)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    counts = np.bincount(labels.reshape(-1))[1:]
    best = int(np.argmax(counts)) + 1  # argmax returns the first max: lowest label wins
    return labels == best


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill enclosed background regions.

    Background components that do not touch the image border are holes;
    they become foreground.  Keeps outer-boundary fits immune to speckle
    holes inside a predicted region.
    """
    labels, n = label_components(~mask, connectivity=4)
    if n == 0:
        return mask.copy()
    border = np.unique(np.concatenate([labels[0], labels[-1],
                                       labels[:, 0], labels[:, -1]]))
    outside = np.isin(labels, border[border > 0])
    return mask | (~mask & ~outside)


def boundary(mask: np.ndarray) -> list[tuple[int, int]]:
    """Set pixels with an unset 4-neighbor or on the border, as (x, y) pairs
    in row-major order."""
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    edge = mask & ~interior
    ys, xs = np.nonzero(edge)
    return [(int(x), int(y)) for y, x in zip(ys, xs)]


# ---------------------------------------------------------------------------
# ellipse fitting
# ---------------------------------------------------------------------------

def fit_ellipse(points) -> EllipseParams:
    """Direct least-squares conic fit constrained to an ellipse.

    Uses the numerically stable partitioned formulation of the
    ellipse-specific constraint 4AC - B^2 = 1 on the conic coefficients.
    Points are centered before fitting for conditioning.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 6:
        raise FitError(f"need at least 6 (x, y) points, got {pts.shape}")
    mean = pts.mean(axis=0)
    x = pts[:, 0] - mean[0]
    y = pts[:, 1] - mean[1]

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise FitError("degenerate point scatter (rank-deficient design)") from exc
    m = s1 + s2 @ t
    # apply the inverse constraint matrix for 4AC - B^2 = 1
    m = np.array([m[2] / 2.0, -m[1], m[0] / 2.0])
    eigval, eigvec = np.linalg.eig(m)
    cond = 4.0 * eigvec[0] * eigvec[2] - eigvec[1] ** 2
    good = np.nonzero(np.isreal(eigval) & (cond > 0))[0]
    if len(good) == 0:
        raise FitError("no elliptical solution (hyperbolic or parabolic fit)")
    a1 = np.real(eigvec[:, good[0]])
    coeffs = np.concatenate([a1, t @ a1])  # A, B, C, D, E, F in centered frame

    params = _conic_to_ellipse(coeffs)
    # undo the centering shift
    return EllipseParams(cx=params.cx + mean[0], cy=params.cy + mean[1],
                         a=params.a, b=params.b, theta=params.theta)


def _conic_to_ellipse(c: np.ndarray) -> EllipseParams:
    """Convert conic coefficients A x^2 + B xy + C y^2 + D x + E y + F = 0."""
    A, B, C, D, E, F = c
    den = B * B - 4.0 * A * C
    if den >= 0:
        raise FitError("conic is not an ellipse")
    cx = (2.0 * C * D - B * E) / den
    cy = (2.0 * A * E - B * D) / den
    f0 = A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + F
    m = np.array([[A, B / 2.0], [B / 2.0, C]])
    eigval, eigvec = np.linalg.eigh(m)
    scaled = -f0 / eigval  # squared semi-axes; both must be positive
    if not np.all(scaled > 0):
        raise FitError("degenerate ellipse (non-positive axis length)")
    axes = np.sqrt(scaled)
    major = int(np.argmax(axes))
    v = eigvec[:, major]
    theta = math.atan2(v[1], v[0]) % math.pi
    return EllipseParams(cx=float(cx), cy=float(cy),
                         a=float(axes[major]), b=float(axes[1 - major]), theta=theta)


def fit_filled_ellipse(mask: np.ndarray) -> EllipseParams:
    """Fit an ellipse to the boundary of a filled rasterized region.

    Boundary pixel centers of a filled mask sit about half a pixel inside
    the continuous contour, so the fitted axes are inflated by 0.5 px to
    remove that systematic bias.
    """
    fit = fit_ellipse(boundary(mask))
    return EllipseParams(cx=fit.cx, cy=fit.cy, a=fit.a + 0.5, b=fit.b + 0.5,
                         theta=fit.theta)


def fit_ellipse_moments(mask: np.ndarray) -> EllipseParams:
    """Second-moments fallback fit of a filled region.

    Semi-axes are 2 * sqrt(eigenvalue) of the covariance of the set pixel
    coordinates, which is exact for an ideal solid ellipse.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) < 3:
        raise FitError("too few pixels for a moments fit")
    pts = np.column_stack([xs, ys]).astype(np.float64)
    mean = pts.mean(axis=0)
    cov = np.cov((pts - mean).T, bias=True)
    eigval, eigvec = np.linalg.eigh(np.atleast_2d(cov))
    if np.any(eigval <= 0):
        raise FitError("degenerate pixel scatter")
    axes = 2.0 * np.sqrt(eigval)
    major = int(np.argmax(axes))
    v = eigvec[:, major]
    return EllipseParams(cx=float(mean[0]), cy=float(mean[1]),
                         a=float(axes[major]), b=float(axes[1 - major]),
                         theta=math.atan2(v[1], v[0]) % math.pi)


def recover_annotated_ellipse(annot: np.ndarray, bridge_radius: int = 3) -> EllipseParams:
    """Recover an ellipse from a dashed outline annotation.

    A dilation bridges the dash gaps so the outline reads as one connected
    component; the largest component then selects the outline among any
    clutter.  The fit itself uses only the original annotation pixels
    inside that component: fitting the thick dilated band directly biases
    the axes toward a circle, noticeably so for small, thin ellipses.
    """
    comp = largest_component(dilate(annot, bridge_radius))
    keep = annot & comp
    ys, xs = np.nonzero(keep)
    if len(xs) < 6:
        raise FitError("too few annotation pixels to fit an ellipse")
    return fit_ellipse(np.column_stack([xs, ys]).astype(np.float64))


def ellipse_circumference(e: EllipseParams) -> float:
    """Ramanujan's second perimeter approximation.

    Relative error against the exact elliptic-integral perimeter is below
    1e-4 for aspect ratios b/a >= 0.2.
    """
    a, b = e.a, e.b
    if not (a > 0 and b > 0):
        raise ValueError("axes must be positive")
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1.0 + 3.0 * h / (10.0 + math.sqrt(4.0 - 3.0 * h)))


# ---------------------------------------------------------------------------
# minimum-area rectangle
# ---------------------------------------------------------------------------

def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, no duplicate endpoint."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    # lexicographic sort on (x, y)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def fit_min_rect(mask: np.ndarray) -> RectParams:
    """Minimum-area enclosing rectangle of the set pixel centers.

    Convex hull followed by rotating calipers over hull edges; area ties
    break toward the smallest normalized angle.  A collinear mask yields a
    valid zero-breadth rectangle.
    """
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise FitError("empty mask")
    pts = np.column_stack([xs, ys]).astype(np.float64)
    hull = convex_hull(pts)

    if len(hull) == 1:
        return RectParams(center=(float(hull[0, 0]), float(hull[0, 1])),
                          length=0.0, breadth=0.0, angle=0.0)
    if len(hull) == 2:
        return _degenerate_rect(hull[0], hull[1])

    best = None  # (area, angle, length, breadth, center)
    n = len(hull)
    for i in range(n):
        edge = hull[(i + 1) % n] - hull[i]
        norm = math.hypot(edge[0], edge[1])
        if norm == 0:
            continue
        ang = math.atan2(edge[1], edge[0]) % math.pi
        c, s = math.cos(ang), math.sin(ang)
        rot = hull @ np.array([[c, -s], [s, c]])  # rotate by -ang
        mins = rot.min(axis=0)
        maxs = rot.max(axis=0)
        dx, dy = maxs - mins
        area = dx * dy
        if dx >= dy:
            length, breadth, long_angle = dx, dy, ang
        else:
            length, breadth, long_angle = dy, dx, (ang + math.pi / 2.0) % math.pi
        mid = (mins + maxs) / 2.0
        center = (mid[0] * c - mid[1] * s, mid[0] * s + mid[1] * c)
        if (best is None or area < best[0] - 1e-12
                or (abs(area - best[0]) <= 1e-12 and long_angle < best[1])):
            best = (area, long_angle, length, breadth, center)

    area, ang, length, breadth, center = best
    return RectParams(center=(float(center[0]), float(center[1])),
                      length=float(length), breadth=float(breadth), angle=float(ang))


def _degenerate_rect(p0: np.ndarray, p1: np.ndarray) -> RectParams:
    d = p1 - p0
    length = math.hypot(d[0], d[1])
    ang = math.atan2(d[1], d[0]) % math.pi
    center = (p0 + p1) / 2.0
    return RectParams(center=(float(center[0]), float(center[1])),
                      length=length, breadth=0.0, angle=ang)


def rect_perimeter(r: RectParams) -> float:
    return 2.0 * (r.length + r.breadth)


def femur_length_endpoints(p1, p2) -> float:
    """Euclidean distance between the two detected endpoints."""
    return math.hypot(p2[0] - p1[0], p2[1] - p1[1])


# ---------------------------------------------------------------------------
# cross-pattern template matching
# ---------------------------------------------------------------------------

def cross_template(arm: int) -> np.ndarray:
    """Plus-shaped template: ones on the center row and column of a
    (2*arm+1) square."""
    if arm < 2:
        raise ValueError(f"arm must be >= 2, got {arm}")
    side = 2 * arm + 1
    t = np.zeros((side, side))
    t[arm, :] = 1.0
    t[:, arm] = 1.0
    return t


def match_cross_patterns(image: np.ndarray, arm: int = 3,
                         top_k: int = 2) -> list[tuple[tuple[int, int], float]]:
    """Find plus-shaped markers by zero-mean normalized cross-correlation.

    Returns up to ``top_k`` ``((x, y), score)`` peaks after greedy
    non-maximum suppression with exclusion radius ``2 * arm``, sorted by
    descending score.  Flat windows score 0.
    """
    tmpl = cross_template(arm)
    th, tw = tmpl.shape
    h, w = image.shape
    if h < th or w < tw:
        raise ValueError(f"image {h}x{w} smaller than template {th}x{tw}")
    tz = tmpl - tmpl.mean()
    tnorm = math.sqrt(float((tz * tz).sum()))

    windows = sliding_window_view(image, (th, tw))
    wsum = windows.sum(axis=(2, 3))
    wsq = (windows ** 2).sum(axis=(2, 3))
    npix = th * tw
    num = np.einsum("ijkl,kl->ij", windows, tz)  # window mean drops out: tz sums to 0
    var = np.maximum(wsq - wsum ** 2 / npix, 0.0)
    denom = np.sqrt(var) * tnorm
    scores = np.divide(num, denom, out=np.zeros_like(num), where=denom > 1e-12)

    order = np.argsort(scores, axis=None)[::-1]
    peaks: list[tuple[tuple[int, int], float]] = []
    excl = 2 * arm
    for flat in order:
        if len(peaks) >= top_k:
            break
        r, c = divmod(int(flat), scores.shape[1])
        x, y = c + arm, r + arm
        if any((x - px) ** 2 + (y - py) ** 2 < excl * excl for (px, py), _ in peaks):
            continue
        peaks.append(((x, y), float(scores[r, c])))
    return peaks


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _pixel_grid(w: int, h: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs.astype(np.float64), ys.astype(np.float64)


def rasterize_ellipse_mask(e: EllipseParams, w: int, h: int, filled: bool = True,
                           dash: tuple[float, float] | None = None) -> np.ndarray:
    """Rasterize an ellipse.

    Filled mode sets pixels whose center satisfies the ellipse inequality.
    Outline mode marches the parametric curve at steps of at most half a
    pixel; ``dash`` gives (on, off) lengths in arc-length units.
    """
    if filled:
        xs, ys = _pixel_grid(w, h)
        ct, st = math.cos(e.theta), math.sin(e.theta)
        u = (xs - e.cx) * ct + (ys - e.cy) * st
        v = -(xs - e.cx) * st + (ys - e.cy) * ct
        return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0

    mask = np.zeros((h, w), dtype=bool)
    perim = ellipse_circumference(e)
    n = max(64, int(math.ceil(perim / 0.25)))
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    ct, st = math.cos(e.theta), math.sin(e.theta)
    px = e.cx + e.a * np.cos(t) * ct - e.b * np.sin(t) * st
    py = e.cy + e.a * np.cos(t) * st + e.b * np.sin(t) * ct
    seg = np.hypot(np.diff(px, append=px[:1]), np.diff(py, append=py[:1]))
    arc = np.concatenate([[0.0], np.cumsum(seg[:-1])])
    if dash is not None:
        on, off = dash
        keep = (arc % (on + off)) < on
    else:
        keep = np.ones_like(arc, dtype=bool)
    xi = np.rint(px[keep]).astype(int)
    yi = np.rint(py[keep]).astype(int)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    mask[yi[ok], xi[ok]] = True
    return mask


def rasterize_line_mask(p1, p2, width: int, w: int, h: int) -> np.ndarray:
    """Rasterize a fixed-width line segment.

    A pixel is set when its center projects onto the segment and lies
    within width/2 of it (the caps beyond the endpoints are not drawn);
    a zero-length segment degenerates to a disc of radius width/2.
    """
    if width < 1:
        raise ValueError(f"width must be >= 1, got {width}")
    xs, ys = _pixel_grid(w, h)
    dx, dy = p2[0] - p1[0], p2[1] - p1[1]
    seg_len = math.hypot(dx, dy)
    half = width / 2.0
    if seg_len == 0:
        return (xs - p1[0]) ** 2 + (ys - p1[1]) ** 2 <= half * half
    ux, uy = dx / seg_len, dy / seg_len
    t = (xs - p1[0]) * ux + (ys - p1[1]) * uy
    perp = np.abs(-(xs - p1[0]) * uy + (ys - p1[1]) * ux)
    return (t >= 0.0) & (t <= seg_len) & (perp <= half)
