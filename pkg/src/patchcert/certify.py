"""Certification of score maps against patch attacks.

Three checks of decreasing cost: a generic worst-case sweep for any monotone
aggregator, a per-region sum check driven by summed-area tables, and a single
global-margin comparison. All certificate arithmetic is integer-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (DependencyRegion, LayerGeom, PatchRegion,
                       dependency_rects, dependency_region)

SCORE_MAP_MAGIC = b"PCSM"


def validate_score_map(s: np.ndarray) -> np.ndarray:
    """Check a (h,w,c) array is a binary score map; returns it as uint8."""
    s = np.asarray(s)
    if s.ndim != 3:
        raise ValueError(f"score map must be (h_out, w_out, c_out), got shape {s.shape}")
    if s.dtype != np.uint8:
        cast = s.astype(np.uint8)
        if not np.array_equal(cast.astype(s.dtype), s):
            raise ValueError("score map entries must be 0 or 1")
        s = cast
    if s.max(initial=0) > 1:
        raise ValueError("score map entries must be 0 or 1")
    return s


def classify(s: np.ndarray) -> Tuple[int, np.ndarray]:
    """Aggregate votes per class: S_c = sum over (i,j) of s[i,j,c].

    Returns (argmax class, raw integer score vector). Ties break to the lowest
    class index; tied predictions are never certifiable.
    """
    s = validate_score_map(s)
    sums = s.sum(axis=(0, 1), dtype=np.int64)
    return int(sums.argmax()), sums


def is_tied(sums: np.ndarray) -> bool:
    top = sums.max()
    return int((sums == top).sum()) > 1


def delta_map(s: np.ndarray, c_t: int) -> np.ndarray:
    """Per-cell vote margin: delta[i,j,c] = s[i,j,c_t] - s[i,j,c] (int8)."""
    s = validate_score_map(s)
    if not 0 <= c_t < s.shape[2]:
        raise ValueError(f"class {c_t} out of range for {s.shape[2]} classes")
    return (s[:, :, c_t:c_t + 1].astype(np.int8) - s.astype(np.int8))


def worst_case_map(s: np.ndarray, c_t: int, region: DependencyRegion) -> np.ndarray:
    """Scores with every cell inside the dependency region flipped maximally
    against class c_t: 1 for c != c_t, 0 for c == c_t."""
    s = validate_score_map(s)
    out = s.copy()
    if not region.is_empty:
        if (region.row_stop > s.shape[0] or region.col_stop > s.shape[1]
                or region.row_start < 0 or region.col_start < 0):
            raise ValueError(f"dependency region {region} exceeds the {s.shape[:2]} grid")
        out[region.row_start:region.row_stop, region.col_start:region.col_stop, :] = 1
        out[region.row_start:region.row_stop, region.col_start:region.col_stop, c_t] = 0
    return out


def build_integral_image(delta: np.ndarray) -> np.ndarray:
    """Per-class summed-area table of a delta map; entry (i,j,c) holds the sum
    over the half-open rectangle [0,i) x [0,j). Shape (h+1, w+1, c), int32."""
    delta = np.asarray(delta)
    h, w, c = delta.shape
    table = np.zeros((h + 1, w + 1, c), dtype=np.int32)
    table[1:, 1:, :] = delta.cumsum(axis=0, dtype=np.int32).cumsum(axis=1)
    return table


def region_sum(table: np.ndarray, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    """Per-class sum over the half-open rectangle [r0,r1) x [c0,c1): 4 lookups."""
    return (table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0])


@dataclass(frozen=True)
class CertificationResult:
    """Outcome of certifying one score map against one feasible region set.

    `margin` is the worst-case integer score gap min over regions and classes
    of g(s_wc)_{c_t} - g(s_wc)_c; certification requires it to be positive and
    the clean prediction to equal c_t (without ties). Flags are None for
    conditions that were not evaluated.
    """

    predicted: int
    tied: bool
    certified_generic: Optional[bool] = None
    certified_sum: Optional[bool] = None
    certified_cheap: Optional[bool] = None
    margin: int = 0
    limiting_region: Optional[PatchRegion] = None


def _clean_ok(pred: int, tied: bool, c_t: int) -> bool:
    return pred == c_t and not tied


def certify_sum(s: np.ndarray, c_t: int, regions: Sequence[PatchRegion],
                layers: Sequence[LayerGeom]) -> CertificationResult:
    """Per-region check for the sum aggregator: for every feasible region the
    delta votes outside its dependency rectangle must exceed the rectangle
    area. Evaluated for all regions at once via the integral image."""
    s = validate_score_map(s)
    if not regions:
        raise ValueError("region set must be non-empty")
    h, w, c = s.shape
    pred, sums = classify(s)
    r0, r1, c0, c1, area = dependency_rects(regions, layers, h, w)
    table = build_integral_image(delta_map(s, c_t))
    inside = (table[r1, c1] - table[r0, c1] - table[r1, c0] + table[r0, c0])  # (L, C)
    total = table[-1, -1]
    outside = total[None, :] - inside
    outside[:, c_t] = np.iinfo(np.int32).max
    worst_by_region = outside.min(axis=1) - area  # (L,)
    idx = int(worst_by_region.argmin())
    margin = int(worst_by_region[idx])
    tied = is_tied(sums)
    return CertificationResult(
        predicted=pred, tied=tied,
        certified_sum=bool(margin > 0 and _clean_ok(pred, tied, c_t)),
        margin=margin, limiting_region=regions[idx])


def certify_cheap(s: np.ndarray, c_t: int, r_max: int) -> CertificationResult:
    """Constant-time check: the global delta sum of every rival class must
    exceed twice the largest dependency-region cardinality."""
    s = validate_score_map(s)
    pred, sums = classify(s)
    deltas = sums[c_t] - sums
    deltas[c_t] = np.iinfo(np.int64).max
    margin = int(deltas.min() - 2 * r_max)
    tied = is_tied(sums)
    return CertificationResult(
        predicted=pred, tied=tied,
        certified_cheap=bool(margin > 0 and _clean_ok(pred, tied, c_t)),
        margin=margin, limiting_region=None)


# ---------------------------------------------------------------------------
# generic aggregators

@dataclass(frozen=True)
class AggregatorSpec:
    """A registered monotone aggregation from score maps to class scores."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]


def _sum_aggregator(s: np.ndarray) -> np.ndarray:
    return np.asarray(s, dtype=np.int64).sum(axis=(0, 1))


G_SUM = AggregatorSpec(name="sum", fn=_sum_aggregator)


def register_aggregator(name: str, fn: Callable[[np.ndarray], np.ndarray], *,
                        probe_trials: int = 64, seed: int = 0) -> AggregatorSpec:
    """Register an aggregator after a randomized monotonicity probe: for score
    maps with s1 >= s2 elementwise, g(s1)_c >= g(s2)_c must hold per class."""
    rng = np.random.default_rng(seed)
    for _ in range(probe_trials):
        h, w, c = rng.integers(2, 7), rng.integers(2, 7), rng.integers(2, 5)
        s2 = rng.integers(0, 2, size=(h, w, c)).astype(np.uint8)
        s1 = np.maximum(s2, rng.integers(0, 2, size=(h, w, c)).astype(np.uint8))
        g1 = np.asarray(fn(s1), dtype=np.float64)
        g2 = np.asarray(fn(s2), dtype=np.float64)
        if g1.shape != (c,) or g2.shape != (c,):
            raise ValueError(f"aggregator {name!r} must map (h,w,c) to (c,) class scores")
        if not (g1 >= g2).all():
            raise ValueError(f"aggregator {name!r} failed the monotonicity probe")
    return AggregatorSpec(name=name, fn=fn)


def certify_generic(s: np.ndarray, c_t: int, regions: Sequence[PatchRegion],
                    layers: Sequence[LayerGeom],
                    g: AggregatorSpec = G_SUM) -> CertificationResult:
    """Reference path: materialize the worst-case map for every region and
    demand strict dominance of c_t under the aggregator. Costs one aggregator
    evaluation per feasible region."""
    s = validate_score_map(s)
    if not regions:
        raise ValueError("region set must be non-empty")
    h, w, _ = s.shape
    deps = [dependency_region(r, layers, h, w) for r in regions]
    return _certify_generic_deps(s, c_t, regions, deps, g)


def certify_generic_masks(s: np.ndarray, c_t: int,
                          masks: Sequence[np.ndarray],
                          g: AggregatorSpec = G_SUM) -> CertificationResult:
    """Generic path over explicit (possibly non-rectangular) output index sets,
    one boolean (h,w) mask per feasible region."""
    s = validate_score_map(s)
    pred, sums = classify(s)
    tied = is_tied(sums)
    worst = None
    for mask in masks:
        s_wc = s.copy()
        s_wc[mask, :] = 1
        s_wc[mask, c_t] = 0
        scores = np.asarray(g.fn(s_wc), dtype=np.int64)
        gaps = scores[c_t] - scores
        gaps[c_t] = np.iinfo(np.int64).max
        gap = int(gaps.min())
        if worst is None or gap < worst:
            worst = gap
    if worst is None:
        raise ValueError("region set must be non-empty")
    return CertificationResult(
        predicted=pred, tied=tied,
        certified_generic=bool(worst > 0 and _clean_ok(pred, tied, c_t)),
        margin=worst, limiting_region=None)


def _certify_generic_deps(s, c_t, regions, deps, g) -> CertificationResult:
    pred, sums = classify(s)
    tied = is_tied(sums)
    worst = None
    limiting = None
    for region, dep in zip(regions, deps):
        s_wc = worst_case_map(s, c_t, dep)
        scores = np.asarray(g.fn(s_wc), dtype=np.int64)
        gaps = scores[c_t] - scores
        gaps[c_t] = np.iinfo(np.int64).max
        gap = int(gaps.min())
        if worst is None or gap < worst:
            worst, limiting = gap, region
    return CertificationResult(
        predicted=pred, tied=tied,
        certified_generic=bool(worst > 0 and _clean_ok(pred, tied, c_t)),
        margin=worst, limiting_region=limiting)


def certify_all(s: np.ndarray, c_t: int, regions: Sequence[PatchRegion],
                layers: Sequence[LayerGeom], r_max: int,
                g: AggregatorSpec = G_SUM) -> CertificationResult:
    """Evaluate all three conditions; margin/limiting region come from the
    per-region sum check."""
    res_sum = certify_sum(s, c_t, regions, layers)
    res_cheap = certify_cheap(s, c_t, r_max)
    res_gen = certify_generic(s, c_t, regions, layers, g)
    return CertificationResult(
        predicted=res_sum.predicted, tied=res_sum.tied,
        certified_generic=res_gen.certified_generic,
        certified_sum=res_sum.certified_sum,
        certified_cheap=res_cheap.certified_cheap,
        margin=res_sum.margin, limiting_region=res_sum.limiting_region)


# ---------------------------------------------------------------------------
# batch fast path

def _validate_batch_maps(maps: np.ndarray) -> np.ndarray:
    maps = np.asarray(maps)
    if maps.ndim != 4:
        raise ValueError(f"expected (B,h,w,C) maps, got shape {maps.shape}")
    if maps.dtype != np.uint8:
        cast = maps.astype(np.uint8)
        if not np.array_equal(cast.astype(maps.dtype), maps):
            raise ValueError("batch score maps must be binary; use the relaxed path")
        maps = cast
    if maps.size and maps.max() > 1:
        raise ValueError("batch score maps must be binary; use the relaxed path")
    return maps


@dataclass(frozen=True)
class BatchCertification:
    """Vectorized certification of many score maps against one region set."""

    predicted: np.ndarray       # (B,) int
    tied: np.ndarray            # (B,) bool
    certified_sum: np.ndarray   # (B,) bool
    certified_cheap: np.ndarray  # (B,) bool
    margin_sum: np.ndarray      # (B,) int  worst-case gap, per-region condition
    margin_cheap: np.ndarray    # (B,) int  global-margin condition
    limiting_index: np.ndarray  # (B,) int  index into the region set


def certify_batch(maps: np.ndarray, labels: np.ndarray,
                  rects: Tuple[np.ndarray, ...], r_max: int,
                  chunk: int = 256) -> BatchCertification:
    """Certify (B,h,w,C) binary maps against precomputed dependency rectangles
    (from geometry.dependency_rects). Integer-exact throughout.

    Works on per-class score integral images: the delta sum outside R(l) for
    rival c equals (T_ct - I_ct) - (T_c - I_c) with T/I total/inside score
    sums, so no delta map is materialized.
    """
    maps = _validate_batch_maps(maps)
    labels = np.asarray(labels)
    b, h, w, c = maps.shape
    r0, r1, c0, c1, area = rects
    flat_w = w + 1
    i11 = r1 * flat_w + c1
    i01 = r0 * flat_w + c1
    i10 = r1 * flat_w + c0
    i00 = r0 * flat_w + c0

    pred = np.empty(b, dtype=np.int64)
    tied = np.empty(b, dtype=bool)
    cert_s = np.empty(b, dtype=bool)
    cert_c = np.empty(b, dtype=bool)
    margin_s = np.empty(b, dtype=np.int64)
    margin_c = np.empty(b, dtype=np.int64)
    lim = np.empty(b, dtype=np.int64)

    # score sums are bounded by h*w, so int16 tables suffice on typical grids
    table_dtype = np.int16 if h * w <= np.iinfo(np.int16).max else np.int32
    sentinel = np.int32(np.iinfo(np.int32).min // 2)
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        s = maps[lo:hi]
        y = labels[lo:hi]
        n = hi - lo
        rows = np.arange(n)
        table = np.zeros((n, h + 1, w + 1, c), dtype=table_dtype)
        table[:, 1:, 1:, :] = s.cumsum(axis=1, dtype=table_dtype).cumsum(axis=2, dtype=table_dtype)
        flat = table.reshape(n, (h + 1) * flat_w, c)
        inside = (flat[:, i11].astype(np.int32) - flat[:, i01]
                  - flat[:, i10] + flat[:, i00])             # (n, L, C)
        total = flat[:, -1].astype(np.int32)                 # (n, C)
        outside = total[:, None, :] - inside
        out_true = outside[rows, :, y]                       # (n, L)
        outside[rows, :, y] = sentinel
        rival = outside.max(axis=2)                          # (n, L)
        worst = out_true - rival - area[None, :]             # (n, L)
        lim_i = worst.argmin(axis=1)
        m_s = worst[rows, lim_i]

        sums = total.astype(np.int64)
        p = sums.argmax(axis=1)
        top = sums.max(axis=1)
        t = (sums == top[:, None]).sum(axis=1) > 1
        d = sums[rows, y][:, None] - sums
        d[rows, y] = np.iinfo(np.int64).max
        m_c = d.min(axis=1) - 2 * r_max

        clean = (p == y) & ~t
        pred[lo:hi] = p
        tied[lo:hi] = t
        margin_s[lo:hi] = m_s
        margin_c[lo:hi] = m_c
        lim[lo:hi] = lim_i
        cert_s[lo:hi] = (m_s > 0) & clean
        cert_c[lo:hi] = (m_c > 0) & clean
    return BatchCertification(predicted=pred, tied=tied, certified_sum=cert_s,
                              certified_cheap=cert_c, margin_sum=margin_s,
                              margin_cheap=margin_c, limiting_index=lim)


def certify_batch_cheap(maps: np.ndarray, labels: np.ndarray, r_max: int,
                        chunk: int = 1024):
    """Global-margin condition only, vectorized; cost is independent of the
    number of feasible regions. Returns (certified, margin, predicted)."""
    maps = _validate_batch_maps(maps)
    labels = np.asarray(labels)
    b = maps.shape[0]
    cert = np.empty(b, dtype=bool)
    margin = np.empty(b, dtype=np.int64)
    pred = np.empty(b, dtype=np.int64)
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        s = maps[lo:hi]
        y = labels[lo:hi]
        rows = np.arange(hi - lo)
        sums = s.sum(axis=(1, 2), dtype=np.int64)
        p = sums.argmax(axis=1)
        top = sums.max(axis=1)
        t = (sums == top[:, None]).sum(axis=1) > 1
        d = sums[rows, y][:, None] - sums
        d[rows, y] = np.iinfo(np.int64).max
        m = d.min(axis=1) - 2 * r_max
        pred[lo:hi] = p
        margin[lo:hi] = m
        cert[lo:hi] = (m > 0) & (p == y) & ~t
    return cert, margin, pred


def certify_batch_relaxed(maps: np.ndarray, labels: np.ndarray,
                          rects: Tuple[np.ndarray, ...], r_max: int,
                          chunk: int = 256):
    """Same decisions for relaxed score maps with entries in [0,1] (sigmoid or
    softmax heads). The bounds only use 0 <= s <= 1, so the conditions stay
    sound; sums are float64 and compared strictly, no tolerance.

    Returns (certified_sum, certified_cheap, predicted) boolean/int arrays.
    """
    maps = np.asarray(maps, dtype=np.float64)
    labels = np.asarray(labels)
    if maps.min(initial=0.0) < 0.0 or maps.max(initial=0.0) > 1.0:
        raise ValueError("relaxed score maps must lie in [0,1]")
    b, h, w, c = maps.shape
    r0, r1, c0, c1, area = rects
    cert_s = np.empty(b, dtype=bool)
    cert_c = np.empty(b, dtype=bool)
    pred = np.empty(b, dtype=np.int64)
    for lo in range(0, b, chunk):
        hi = min(lo + chunk, b)
        s = maps[lo:hi]
        y = labels[lo:hi]
        n = hi - lo
        rows = np.arange(n)
        table = np.zeros((n, h + 1, w + 1, c), dtype=np.float64)
        table[:, 1:, 1:, :] = s.cumsum(axis=1).cumsum(axis=2)
        flat = table.reshape(n, (h + 1) * (w + 1), c)
        inside = flat[:, r1 * (w + 1) + c1] - flat[:, r0 * (w + 1) + c1] \
            - flat[:, r1 * (w + 1) + c0] + flat[:, r0 * (w + 1) + c0]
        total = flat[:, -1]
        outside = total[:, None, :] - inside
        out_true = outside[rows, :, y]
        outside[rows, :, y] = -np.inf
        rival = outside.max(axis=2)
        ok_s = ((out_true - rival) > area[None, :]).all(axis=1)

        p = total.argmax(axis=1)
        top = total.max(axis=1)
        t = (total == top[:, None]).sum(axis=1) > 1
        d = total[rows, y][:, None] - total
        d[rows, y] = np.inf
        ok_c = d.min(axis=1) > 2.0 * r_max

        clean = (p == y) & ~t
        cert_s[lo:hi] = ok_s & clean
        cert_c[lo:hi] = ok_c & clean
        pred[lo:hi] = p
    return cert_s, cert_c, pred


# ---------------------------------------------------------------------------
# score-map blobs

def save_score_maps(path, maps: np.ndarray) -> None:
    """Write one or more binary score maps as concatenated PCSM records:
    magic, three little-endian uint32 dims (h, w, c), one byte per entry in
    row-major (h, w, c) order."""
    maps = np.asarray(maps)
    if maps.ndim == 3:
        maps = maps[None]
    records = []
    for m in maps:
        m = validate_score_map(m)
        h, w, c = m.shape
        records.append(SCORE_MAP_MAGIC + struct.pack("<III", h, w, c) + m.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(records))


def load_score_maps(path) -> List[np.ndarray]:
    """Read every PCSM record in a file; rejects bad magic, truncation, or
    non-binary entries."""
    with open(path, "rb") as f:
        buf = f.read()
    maps = []
    offset = 0
    header = len(SCORE_MAP_MAGIC) + 12
    while offset < len(buf):
        if buf[offset:offset + 4] != SCORE_MAP_MAGIC:
            raise ValueError(
                f"bad score-map magic {buf[offset:offset + 4]!r} at byte {offset}")
        if offset + header > len(buf):
            raise ValueError("truncated score-map header")
        h, w, c = struct.unpack_from("<III", buf, offset + 4)
        n = h * w * c
        start = offset + header
        if start + n > len(buf):
            raise ValueError(
                f"truncated score map: need {n} bytes, file has {len(buf) - start}")
        m = np.frombuffer(buf, dtype=np.uint8, count=n, offset=start).reshape(h, w, c)
        maps.append(validate_score_map(m.copy()))
        offset = start + n
    return maps
