import tracemalloc

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import correlate1d

from core import Frame, ValidationError
from flow import (
    BlockMatchingFlow,
    CachedFlow,
    DimensionMismatchError,
    block_matching_flow,
    decode_flow,
    encode_flow,
    oracle_flow,
    read_flow,
    warp_bilinear,
    write_flow,
    zero_flow,
)
from synthetic import SyntheticObject, SyntheticSpec, Trajectory


def bilinear_oracle(prob, x, y):
    height, width = prob.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    total = 0.0
    for cx, cy, weight in ((x0, y0, (1 - fx) * (1 - fy)), (x0 + 1, y0, fx * (1 - fy)),
                           (x0, y0 + 1, (1 - fx) * fy), (x0 + 1, y0 + 1, fx * fy)):
        if 0 <= cx < width and 0 <= cy < height:
            total += weight * prob[cy, cx]
    return total


def textured(seed, height=48, width=64):
    rng = np.random.default_rng(seed)
    coarse = rng.random((height // 4 + 2, width // 4 + 2, 3))
    image = np.kron(coarse, np.ones((4, 4, 1)))[:height, :width]
    return np.clip(0.7 * image + 0.3 * rng.random((height, width, 3)), 0.0, 1.0).astype(np.float32)


def moving_disc_spec(velocity=(2.0, 0.0), num_frames=4):
    disc = SyntheticObject('disc', (0.9, 0.1, 0.1), (4.0, 4.0), Trajectory('linear', (10.0, 12.0), velocity))
    return SyntheticSpec(width=40, height=24, num_frames=num_frames, objects=(disc,))


def test_zero_flow_is_identity():
    prob = np.random.default_rng(0).random((9, 11)).astype(np.float32)
    assert np.array_equal(warp_bilinear(prob, zero_flow(9, 11)), prob)


def test_integer_shift_moves_block_with_zero_fill():
    prob = np.zeros((6, 14), dtype=np.float32)
    prob[:, 4:8] = 1.0
    flow = zero_flow(6, 14)
    flow[..., 0] = -2.0
    out = warp_bilinear(prob, flow)
    expected = np.zeros_like(prob)
    expected[:, 6:10] = 1.0
    assert np.array_equal(out, expected)


@given(st.integers(-5, 5), st.integers(-5, 5), st.integers(0, 2 ** 32 - 1))
def test_integer_constant_flow_is_exact_shift(dx, dy, seed):
    prob = np.random.default_rng(seed).random((10, 12)).astype(np.float32)
    flow = zero_flow(10, 12)
    flow[..., 0] = dx
    flow[..., 1] = dy
    expected = np.zeros_like(prob)
    for y in range(10):
        for x in range(12):
            if 0 <= x + dx < 12 and 0 <= y + dy < 10:
                expected[y, x] = prob[y + dy, x + dx]
    assert np.array_equal(warp_bilinear(prob, flow), expected)


def test_half_pixel_sample():
    prob = np.zeros((10, 10), dtype=np.float32)
    prob[5, 5] = 1.0
    flow = zero_flow(10, 10)
    flow[..., 0] = -0.5
    assert warp_bilinear(prob, flow)[5, 5] == pytest.approx(0.5)


def test_random_fractional_samples_match_oracle():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 10_000:
        height, width = 20, 25
        prob = rng.random((height, width)).astype(np.float32)
        flow = rng.uniform(-4.0, 4.0, size=(height, width, 2)).astype(np.float32)
        out = warp_bilinear(prob, flow)
        for y, x in zip(rng.integers(0, height, 500), rng.integers(0, width, 500)):
            expected = bilinear_oracle(prob.astype(np.float64), x + float(flow[y, x, 0]), y + float(flow[y, x, 1]))
            assert abs(out[y, x] - expected) < 1e-6
            checked += 1


@given(st.integers(0, 2 ** 32 - 1))
def test_warp_preserves_bounds(seed):
    rng = np.random.default_rng(seed)
    prob = rng.random((8, 8)).astype(np.float32)
    flow = rng.uniform(-10, 10, size=(8, 8, 2)).astype(np.float32)
    out = warp_bilinear(prob, flow)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_warp_rejects_mismatched_shapes():
    with pytest.raises(DimensionMismatchError):
        warp_bilinear(np.zeros((4, 4)), zero_flow(4, 5))


def test_block_matching_identical_frames_gives_zero_field():
    frame = Frame(textured(1))
    field = block_matching_flow(frame, frame, window=8, radius=4)
    assert np.array_equal(field, np.zeros_like(field))


def test_block_matching_flat_frames_tie_break_to_zero():
    frame = Frame(np.full((16, 16, 3), 0.4, dtype=np.float32))
    field = block_matching_flow(frame, frame, window=4, radius=3)
    assert not field.any()


def test_block_matching_recovers_translation():
    image = textured(7, 48, 64)
    src = Frame(image[:, 3:])
    dst = Frame(image[:, :-3])
    # src(x) == dst(x + 3)
    field = BlockMatchingFlow(window=8, radius=5).estimate(src, dst)
    interior = field[8:-8, 8:-8]
    hits = np.isclose(interior[..., 0], 3.0, atol=0.25) & np.isclose(interior[..., 1], 0.0, atol=0.25)
    assert hits.mean() >= 0.9


def cost_volume_flow(src, dst, window, radius):
    a = src.pixels.astype(np.float64)
    b = dst.pixels.astype(np.float64)
    height, width = src.shape
    padded = np.pad(b, ((radius, radius), (radius, radius), (0, 0)), mode='edge')
    kernel = np.ones(window)
    size = 2 * radius + 1
    costs = np.empty((size, size, height, width))
    for dx in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            shifted = padded[radius + dy:radius + dy + height, radius + dx:radius + dx + width]
            ssd = np.sum((a - shifted) ** 2, axis=2)
            ssd = correlate1d(correlate1d(ssd, kernel, axis=0, mode='nearest'), kernel, axis=1, mode='nearest')
            costs[dy + radius, dx + radius] = ssd
    order = sorted(((dx, dy) for dx in range(-radius, radius + 1) for dy in range(-radius, radius + 1)),
                   key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1]))
    field = np.zeros((height, width, 2))
    for y in range(height):
        for x in range(width):
            dx, dy = min(order, key=lambda d: costs[d[1] + radius, d[0] + radius, y, x])
            c0 = costs[dy + radius, dx + radius, y, x]
            for axis, (lo, hi) in enumerate((((dx - 1, dy), (dx + 1, dy)), ((dx, dy - 1), (dx, dy + 1)))):
                offset = 0.0
                if c0 > 1e-12 and all(-radius <= v <= radius for v in lo + hi):
                    c_lo = costs[lo[1] + radius, lo[0] + radius, y, x]
                    c_hi = costs[hi[1] + radius, hi[0] + radius, y, x]
                    denom = c_lo - 2.0 * c0 + c_hi
                    if denom > 0:
                        offset = float(np.clip((c_lo - c_hi) / (2.0 * denom), -0.5, 0.5))
                field[y, x, axis] = (dx, dy)[axis] + offset
    return field


def test_block_matching_matches_full_cost_volume_search():
    image = textured(11, 24, 32)
    src = Frame(image[2:, 1:-2])
    dst = Frame(image[:-2, 3:])
    field = block_matching_flow(src, dst, window=4, radius=3)
    expected = cost_volume_flow(src, dst, window=4, radius=3)
    assert np.allclose(field, expected, atol=1e-5)


def test_block_matching_memory_does_not_scale_with_search_area():
    src = Frame(textured(3, 120, 160))
    dst = Frame(textured(4, 120, 160))
    tracemalloc.start()
    try:
        block_matching_flow(src, dst, window=8, radius=8)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    # a full 17x17 cost volume at this size would be about 44 MB
    assert peak < 12 * 1024 * 1024


def test_oracle_flow_same_frame_is_zero():
    spec = moving_disc_spec()
    assert not oracle_flow(spec, 2, 2).any()


def test_oracle_flow_follows_linear_motion():
    spec = moving_disc_spec((2.0, 0.0))
    on_disc = spec.layer_map(1) == 0
    forward = oracle_flow(spec, 1, 2)
    assert np.all(forward[on_disc] == [2.0, 0.0])
    assert not forward[~on_disc].any()
    assert np.all(oracle_flow(spec, 1, 0)[on_disc] == [-2.0, 0.0])
    assert np.all(oracle_flow(spec, 1, 3)[on_disc] == [4.0, 0.0])


def test_oracle_flow_rejects_bad_index():
    with pytest.raises(ValidationError):
        oracle_flow(moving_disc_spec(), 0, 9)


def test_flow_file_roundtrip(tmp_path):
    field = np.random.default_rng(3).normal(size=(5, 7, 2)).astype(np.float32)
    path = tmp_path / 'f.vsfl'
    write_flow(str(path), field)
    data = path.read_bytes()
    assert data[:4] == b'VSFL'
    assert int.from_bytes(data[4:8], 'little') == 7
    assert int.from_bytes(data[8:12], 'little') == 5
    assert np.array_equal(read_flow(str(path)), field)
    assert not (tmp_path / 'f.vsfl.tmp').exists()


def test_flow_decode_rejects_truncated():
    data = encode_flow(zero_flow(3, 3))
    with pytest.raises(ValidationError):
        decode_flow(data[:-4])
    with pytest.raises(ValidationError):
        decode_flow(b'XXXX' + data[4:])


def test_cached_flow_estimates_each_pair_once():
    calls = []

    class Counting:
        def estimate(self, src, dst):
            calls.append((src.index, dst.index))
            return zero_flow(*src.shape)

    frames = [Frame(np.zeros((4, 4, 3), dtype=np.float32), index=i) for i in range(2)]
    cached = CachedFlow(Counting())
    cached.estimate(frames[0], frames[1])
    cached.estimate(frames[0], frames[1])
    cached.estimate(frames[1], frames[0])
    assert calls == [(0, 1), (1, 0)]
    assert len(cached) == 2
