import logging
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Protocol, Tuple

import numpy as np
from scipy.ndimage import correlate1d

from core import ContractViolation, FlowField, Frame, ProbMap, ValidationError
from sequence_io import atomic_write_bytes

if TYPE_CHECKING:
    from synthetic import SyntheticSpec

log = logging.getLogger('flow')

FLOW_MAGIC = b'VSFL'
_HEADER = struct.Struct('<4sII')

# below this the match is treated as exact and sub-pixel refinement is skipped
_EXACT_COST = 1e-12


class DimensionMismatchError(ContractViolation):
    """Raised when a map and a flow field disagree in size."""


class FlowEstimator(Protocol):
    def estimate(self, src: Frame, dst: Frame) -> FlowField:
        """Field on ``src``'s grid giving, per pixel, the displacement into ``dst``."""
        ...


def zero_flow(height: int, width: int) -> FlowField:
    return np.zeros((height, width, 2), dtype=np.float32)


def warp_bilinear(prob: ProbMap, flow: FlowField) -> ProbMap:
    """Backward warp: output(p) is ``prob`` sampled at p + flow(p), zero outside the grid."""
    if flow.ndim != 3 or flow.shape[2] != 2 or prob.shape != flow.shape[:2]:
        raise DimensionMismatchError(f'Cannot warp map of shape {prob.shape} with flow of shape {flow.shape}')

    height, width = prob.shape
    src = np.asarray(prob, dtype=np.float64)
    ys, xs = np.mgrid[0:height, 0:width]
    x = xs + flow[..., 0].astype(np.float64)
    y = ys + flow[..., 1].astype(np.float64)

    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def sample(cx: np.ndarray, cy: np.ndarray) -> np.ndarray:
        inside = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        values = np.zeros_like(x)
        values[inside] = src[cy[inside], cx[inside]]
        return values

    out = ((1.0 - wx) * (1.0 - wy) * sample(x0, y0)
           + wx * (1.0 - wy) * sample(x0 + 1, y0)
           + (1.0 - wx) * wy * sample(x0, y0 + 1)
           + wx * wy * sample(x0 + 1, y0 + 1))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _candidate_order(radius: int) -> List[Tuple[int, int]]:
    displacements = [(dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)]
    # ties resolve toward the smaller displacement, then lexicographic (dx, dy)
    return sorted(displacements, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))


class _WindowCost:
    """Windowed SSD between ``a`` and ``b`` shifted by one displacement at a time."""

    def __init__(self, a: np.ndarray, b: np.ndarray, window: int, radius: int):
        self.a = a
        self.radius = radius
        self.kernel = np.ones(window, dtype=np.float64)
        self.padded = np.pad(b, ((radius, radius), (radius, radius), (0, 0)), mode='edge')

    def __call__(self, dx: int, dy: int) -> np.ndarray:
        height, width = self.a.shape[:2]
        r = self.radius
        # out[y, x] = b[y + dy, x + dx] with edge replication
        shifted = self.padded[r + dy:r + dy + height, r + dx:r + dx + width]
        ssd = np.sum((self.a - shifted) ** 2, axis=2)
        # direct (not running) sums keep exact zeros exact
        ssd = correlate1d(ssd, self.kernel, axis=0, mode='nearest')
        return correlate1d(ssd, self.kernel, axis=1, mode='nearest')


def _parabola_offset(c_lo: np.ndarray, c0: np.ndarray, c_hi: np.ndarray) -> np.ndarray:
    usable = np.isfinite(c_lo) & np.isfinite(c_hi) & (c0 > _EXACT_COST)
    denom = np.where(usable, c_lo - 2.0 * c0 + c_hi, 0.0)
    usable &= denom > 0
    offset = np.zeros_like(c0)
    offset[usable] = (c_lo[usable] - c_hi[usable]) / (2.0 * denom[usable])
    return np.clip(offset, -0.5, 0.5)


def block_matching_flow(src: Frame, dst: Frame, window: int = 8, radius: int = 8) -> FlowField:
    """SSD block matching from ``src`` into ``dst`` with parabolic sub-pixel refinement.

    Per pixel only the best cost and its four neighbouring costs are held; a
    second pass over the displacements collects the neighbours.
    """
    if window < 1 or radius < 0:
        raise ValidationError(f'Invalid block matching parameters window={window} radius={radius}')
    if src.shape != dst.shape:
        raise DimensionMismatchError(f'Frames differ in size: {src.shape} vs {dst.shape}')

    height, width = src.shape
    window_cost = _WindowCost(src.pixels.astype(np.float64), dst.pixels.astype(np.float64), window, radius)

    best_cost = np.full((height, width), np.inf)
    best_dx = np.zeros((height, width), dtype=np.int64)
    best_dy = np.zeros((height, width), dtype=np.int64)
    for dx, dy in _candidate_order(radius):
        cost = window_cost(dx, dy)
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_dx[better] = dx
        best_dy[better] = dy

    left, right, up, down = (np.full((height, width), np.inf) for _ in range(4))
    for dx in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            same_x = best_dx == dx
            same_y = best_dy == dy
            targets = (
                (left, same_y & (best_dx == dx + 1)),
                (right, same_y & (best_dx == dx - 1)),
                (up, same_x & (best_dy == dy + 1)),
                (down, same_x & (best_dy == dy - 1)),
            )
            if not any(where.any() for _, where in targets):
                continue
            cost = window_cost(dx, dy)
            for neighbour, where in targets:
                neighbour[where] = cost[where]

    field = np.empty((height, width, 2), dtype=np.float32)
    field[..., 0] = best_dx + _parabola_offset(left, best_cost, right)
    field[..., 1] = best_dy + _parabola_offset(up, best_cost, down)
    return field


@dataclass(frozen=True)
class BlockMatchingFlow:
    window: int = 8
    radius: int = 8

    def estimate(self, src: Frame, dst: Frame) -> FlowField:
        return block_matching_flow(src, dst, self.window, self.radius)


class CachedFlow:
    """Memoises an estimator on (src.index, dst.index); frames without an index bypass the cache."""

    def __init__(self, estimator: FlowEstimator):
        self.estimator = estimator
        self._fields: Dict[Tuple[int, int], FlowField] = {}

    def estimate(self, src: Frame, dst: Frame) -> FlowField:
        if src.index is None or dst.index is None:
            return self.estimator.estimate(src, dst)
        key = (src.index, dst.index)
        field = self._fields.get(key)
        if field is None:
            field = self.estimator.estimate(src, dst)
            self._fields[key] = field
        return field

    def __len__(self) -> int:
        return len(self._fields)


def oracle_flow(spec: 'SyntheticSpec', i: int, j: int) -> FlowField:
    """Analytic field on frame ``i``'s grid pointing to the same scene point in frame ``j``.

    Pixels showing object ``o`` in frame ``i`` move with that object's trajectory;
    background and occluder pixels are static.
    """
    if not (0 <= i < spec.num_frames and 0 <= j < spec.num_frames):
        raise ValidationError(f'Frame indices ({i}, {j}) out of range for {spec.num_frames} frames')
    field = zero_flow(spec.height, spec.width)
    if i == j:
        return field
    layers = spec.layer_map(i)
    for position, obj in enumerate(spec.objects):
        on_object = layers == position
        if not on_object.any():
            continue
        xi, yi = obj.center(i)
        xj, yj = obj.center(j)
        field[on_object, 0] = xj - xi
        field[on_object, 1] = yj - yi
    return field


def encode_flow(flow: FlowField) -> bytes:
    height, width = flow.shape[:2]
    if not np.all(np.isfinite(flow)):
        raise ContractViolation('Flow field contains non-finite components')
    return _HEADER.pack(FLOW_MAGIC, width, height) + np.ascontiguousarray(flow, dtype='<f4').tobytes()


def decode_flow(data: bytes) -> FlowField:
    if len(data) < _HEADER.size:
        raise ValidationError('Flow file is truncated')
    magic, width, height = _HEADER.unpack_from(data)
    if magic != FLOW_MAGIC:
        raise ValidationError(f'Not a flow file (magic {magic!r})')
    expected = _HEADER.size + width * height * 2 * 4
    if len(data) != expected:
        raise ValidationError(f'Flow file has {len(data)} bytes, expected {expected}')
    values = np.frombuffer(data, dtype='<f4', offset=_HEADER.size)
    return values.reshape(height, width, 2).astype(np.float32)


def write_flow(path: str, flow: FlowField) -> None:
    atomic_write_bytes(path, encode_flow(flow))


def read_flow(path: str) -> FlowField:
    with open(path, 'rb') as fh:
        return decode_flow(fh.read())
