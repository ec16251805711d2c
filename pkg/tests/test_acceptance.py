"""Release gate: nine end-to-end quality criteria, one test per criterion.

Each test prints a single summary line through the capture-disabled
channel, "ACCEPTANCE <n> PASS|FAIL: <numbers>", so the verdicts are
visible in any pytest log regardless of capture settings.  The heavy
fixtures (ten full-size phantom segmentations) are shared across tests.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import (
    assert_filter_match,
    diff_oracle,
    erode_oracle,
    mean_oracle,
    small_spec,
    threshold_oracle,
)
from octseg.filters import Orientation, diff_filter, erode_ball, mean_filter, threshold_zero
from octseg.phantom import PhantomSpec, evaluate, generate_phantom
from octseg.pipeline import (
    ANATOMICAL_ORDER,
    Boundary,
    PipelineConfig,
    segment_all,
    segment_ilm,
    segment_isos,
    segment_rpe,
)
from octseg.surface import (
    SmoothingSchedule,
    WeightMatrices,
    dynamic_threshold,
    error_distance_map,
    poly3_reject,
    smooth_depth_map,
)
from octseg.volume import Volume, flatten_volume, unflatten_depths


def _verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"ACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n}: {detail}"


# ---------------------------------------------------------------------------
# shared full-size segmentation runs

@pytest.fixture(scope="module")
def clean_runs():
    """Five full-size noiseless phantoms, segmented with defaults."""
    runs = []
    for seed in range(1, 6):
        vol, truth = generate_phantom(PhantomSpec(seed=seed))
        res = segment_all(vol)
        runs.append((seed, truth, res, evaluate(res.boundaries, truth)))
        del vol
    return runs


@pytest.fixture(scope="module")
def noisy_runs():
    """Five full-size phantoms with speckle, vessel shadows and clutter."""
    runs = []
    for seed in range(11, 16):
        spec = PhantomSpec(seed=seed, speckle_sigma=0.15, shadow_count=4, blob_count=8)
        vol, truth = generate_phantom(spec)
        res = segment_all(vol)
        runs.append((seed, truth, res, evaluate(res.boundaries, truth)))
        del vol
    return runs


# ---------------------------------------------------------------------------
# 1: volume filters against brute-force oracles

def _max_rel(got: np.ndarray, want: np.ndarray) -> float:
    sel = want != 0
    if not sel.any():
        return 0.0
    return float(np.max(np.abs(got[sel] - want[sel]) / np.abs(want[sel])))


def test_1_filters_match_bruteforce_oracles(capsys):
    rng = np.random.default_rng(100)
    t0 = time.perf_counter()
    failures: list[str] = []
    worst_rel = 0.0
    for i in range(100):
        frames = int(rng.integers(2, 10))
        depth = int(rng.integers(3, 10))
        width = int(rng.integers(2, 10))
        vol = rng.integers(0, 256, size=(frames, depth, width), dtype=np.int64)
        vol = vol.astype(np.uint8)

        size = (
            int(rng.integers(1, width + 1)),
            int(rng.integers(1, frames + 1)),
            int(rng.integers(1, depth + 1)),
        )
        got, want = mean_filter(vol, size), mean_oracle(vol, size)
        worst_rel = max(worst_rel, _max_rel(got, want))
        try:
            assert_filter_match(got, want)
        except AssertionError:
            failures.append(f"mean #{i} shape {vol.shape} size {size}")

        k3 = int(rng.choice([k for k in (3, 5, 7, 9) if k <= depth]))
        dsize = (size[0], size[1], k3)
        orient = Orientation.BRIGHT_ABOVE if i % 2 else Orientation.BRIGHT_BELOW
        got, want = diff_filter(vol, dsize, orient), diff_oracle(vol, dsize, orient)
        worst_rel = max(worst_rel, _max_rel(got, want))
        try:
            assert_filter_match(got, want)
        except AssertionError:
            failures.append(f"diff #{i} shape {vol.shape} size {dsize}")

        t = int(rng.integers(0, 256))
        if not np.array_equal(threshold_zero(vol, t), threshold_oracle(vol, t)):
            failures.append(f"threshold #{i} t={t}")

        r = int(rng.integers(0, 4))
        if not np.array_equal(erode_ball(vol, r), erode_oracle(vol, r)):
            failures.append(f"erode #{i} r={r}")
    seconds = time.perf_counter() - t0
    detail = (
        f"4 filters on 100 random volumes within 9x9x9 match triple-loop oracles, "
        f"max mean/diff rel err {worst_rel:.2e} (bound 1e-9), {seconds:.1f}s"
    )
    if failures:
        detail = f"{len(failures)} mismatches, first: {failures[0]}"
    _verdict(capsys, 1, not failures, detail)


# ---------------------------------------------------------------------------
# 2: smoothing stencil sums and the flat-map fixed point

def test_2_stencil_sums_and_flat_map_zero(capsys):
    w7, w5 = WeightMatrices.size7(), WeightMatrices.size5()
    off7 = w7.w1.copy()
    off7[3, 3] = 0.0
    off5 = w5.w1.copy()
    off5[2, 2] = 0.0
    sums_ok = (
        off7.sum() == 138.0
        and w7.w1[3, 3] == -138.0
        and w7.normalization == 138.0
        and off5.sum() == 64.0
        and w5.w1[2, 2] == -64.0
        and w5.normalization == 64.0
    )

    rng = np.random.default_rng(2)
    stencils = (w7, w5, WeightMatrices.size3())
    flat_worst = 0.0
    for _ in range(300):
        shape = (int(rng.integers(1, 41)), int(rng.integers(1, 41)))
        level = float(rng.integers(0, 497))
        w = stencils[int(rng.integers(0, 3))]
        ed = error_distance_map(np.full(shape, level), w.w1)
        flat_worst = max(flat_worst, float(np.abs(ed).max()))
    ok = sums_ok and flat_worst == 0.0
    _verdict(
        capsys, 2, ok,
        f"off-centre sums 138 (7x7) and 64 (5x5); error distance of 300 random "
        f"constant maps is exactly {flat_worst}",
    )


# ---------------------------------------------------------------------------
# 3: the iterative smoother terminates, bounds its error, and is idempotent

def _spiked_map(seed: int) -> np.ndarray:
    """A gently waving 97x512 surface with 1..12 isolated spike defects."""
    rng = np.random.default_rng(seed)
    frames, width = 97, 512
    y = np.arange(frames, dtype=np.float64)[:, None]
    x = np.arange(width, dtype=np.float64)[None, :]
    m = (
        rng.uniform(100.0, 380.0)
        + rng.uniform(0.0, 8.0) * np.sin(2 * np.pi * x / rng.uniform(200.0, 400.0)
                                         + rng.uniform(0.0, 2 * np.pi))
        + rng.uniform(0.0, 8.0) * np.sin(2 * np.pi * y / rng.uniform(80.0, 160.0)
                                         + rng.uniform(0.0, 2 * np.pi))
    )
    spikes = int(rng.integers(1, 13))
    placed: list[tuple[int, int]] = []
    while len(placed) < spikes:
        yy = int(rng.integers(4, frames - 4))
        xx = int(rng.integers(4, width - 4))
        if all(max(abs(yy - py), abs(xx - px)) >= 7 for py, px in placed):
            placed.append((yy, xx))
    for yy, xx in placed:
        m[yy, xx] += rng.uniform(40.0, 190.0) * (1.0 if rng.random() < 0.5 else -1.0)
    return m


def test_3_smoother_terminates_and_reruns_are_identity(capsys):
    w = WeightMatrices.size7()
    sched = SmoothingSchedule()
    t0 = time.perf_counter()
    worst_iters = 0
    failures: list[str] = []
    for seed in range(1000):
        m = _spiked_map(seed)
        out, iters = smooth_depth_map(m, w.w1, w.w2, sched)
        worst_iters = max(worst_iters, iters)
        if iters > sched.iterations:
            failures.append(f"seed {seed}: ran {iters} iterations")
            continue
        ed = error_distance_map(out, w.w1)
        if not (ed <= dynamic_threshold(iters, sched, out.size)).all():
            failures.append(f"seed {seed}: error distance above the stop threshold")
        again, reruns = smooth_depth_map(out, w.w1, w.w2, sched)
        if reruns != 1 or not np.array_equal(again, out):
            failures.append(f"seed {seed}: rerun changed the map ({reruns} iterations)")
    seconds = time.perf_counter() - t0
    detail = (
        f"1000 spiked 97x512 maps: max {worst_iters} of 25 iterations, final error "
        f"distance within the stop threshold, rerun is the identity in 1 pass, {seconds:.1f}s"
    )
    if failures:
        detail = f"{len(failures)} failures, first: {failures[0]}"
    _verdict(capsys, 3, not failures, detail)


# ---------------------------------------------------------------------------
# 4: cubic-trend outlier rejection repairs exactly the planted points

def test_4_poly3_repairs_all_planted_outliers(capsys):
    n = 512
    x = np.arange(n, dtype=np.float64)
    sigma = 1.0 / np.sqrt(3.0)  # std of the U(-1, 1) inlier noise
    failures: list[str] = []
    worst_fix = 0.0
    for k in (1, 5, 20):
        for trial in range(200):
            rng = np.random.default_rng(1000 * k + trial)
            cubic = (
                rng.uniform(120, 300)
                + rng.uniform(-0.2, 0.2) * x
                + rng.uniform(-4e-4, 4e-4) * x**2
                + rng.uniform(-6e-7, 6e-7) * x**3
            )
            z = cubic + rng.uniform(-1.0, 1.0, n)
            pos = rng.choice(n, size=k, replace=False)
            mags = rng.uniform(5 * sigma, 10 * sigma, k) * rng.choice([-1.0, 1.0], k)
            z[pos] = cubic[pos] + mags
            planted = np.zeros(n, dtype=bool)
            planted[pos] = True

            res = poly3_reject(z)
            tag = f"k={k} trial={trial}"
            if res.degraded:
                failures.append(f"{tag}: degraded")
                continue
            if not np.array_equal(res.replaced, planted):
                failures.append(f"{tag}: replacement mask differs from the planted set")
                continue
            if not np.array_equal(res.depths[~planted], z[~planted]):
                failures.append(f"{tag}: an inlier moved")
                continue
            fix_err = float(np.max(np.abs(res.depths[pos] - cubic[pos])))
            worst_fix = max(worst_fix, fix_err)
            if fix_err > 0.5:
                failures.append(f"{tag}: replacement off by {fix_err:.3f} px")
    detail = (
        f"600 rows, outliers of 5 to 10 sigma at k in (1, 5, 20): every planted point "
        f"replaced, no inlier moved, worst replacement error {worst_fix:.3f} px (bound 0.5)"
    )
    if failures:
        detail = f"{len(failures)} failures, first: {failures[0]}"
    _verdict(capsys, 4, not failures, detail)


# ---------------------------------------------------------------------------
# 5: segmentation accuracy on clean and degraded full-size phantoms

def test_5_phantom_accuracy(capsys, clean_runs, noisy_runs):
    clean_worst = max(rep.overall.mae_px for _, _, _, rep in clean_runs)
    noisy_worst = max(rep.overall.mae_px for _, _, _, rep in noisy_runs)
    ok = clean_worst <= 1.5 and noisy_worst <= 3.0
    _verdict(
        capsys, 5, ok,
        f"overall MAE across 5 seeds: clean max {clean_worst:.3f} px (bound 1.5), "
        f"speckle+shadows+clutter max {noisy_worst:.3f} px (bound 3.0)",
    )


# ---------------------------------------------------------------------------
# 6: focal-defect recovery (dark IS/OS spots; bright vitreous clutter)

def _flatten_and_mask(vol: Volume, cfg: PipelineConfig):
    """Front half of the pipeline: RPE, flatten, zero everything below."""
    rpe, _ = segment_rpe(vol, cfg)
    flat_vol, offsets = flatten_volume(vol, rpe)
    reference = offsets.reference_depth
    flat = flat_vol.voxels.copy()
    flat[:, reference + 1 :, :] = 0
    return flat, offsets, reference


def test_6_focal_defect_recovery(capsys):
    cfg = PipelineConfig()

    # Dark spots punched through the IS/OS band: the global maximum loses
    # the surface inside each spot, and only the per-frame cubic repair
    # can win it back.
    spec = PhantomSpec(seed=5)
    vol, truth = generate_phantom(spec)
    isos_truth = truth[Boundary.ONL_ISOS]
    v = vol.voxels.copy()
    rng = np.random.default_rng(50)
    spots: list[tuple[int, int]] = []
    while len(spots) < 6:
        y0 = int(rng.integers(10, spec.frames - 19))
        x0 = int(rng.integers(20, spec.width - 29))
        if all(abs(y0 - py) > 12 or abs(x0 - px) > 12 for py, px in spots):
            spots.append((y0, x0))
    spot_mask = np.zeros((spec.frames, spec.width), dtype=bool)
    for y0, x0 in spots:
        spot_mask[y0 : y0 + 9, x0 : x0 + 9] = True
        for dy in range(9):
            for dx in range(9):
                zc = int(round(float(isos_truth[y0 + dy, x0 + dx])))
                v[y0 + dy, zc - 2 : zc + 13, x0 + dx] = 40

    flat, offsets, reference = _flatten_and_mask(Volume(v), cfg)
    ilm, _, _ = segment_ilm(flat, cfg)
    np.clip(ilm, 0, reference, out=ilm)
    rpe_flat = np.full(ilm.shape, float(reference))

    cfg_off = PipelineConfig.from_dict({"isos": {"polyfit_enabled": False}})
    spot_errs = {}
    for label, c in (("off", cfg_off), ("on", cfg)):
        isos, _ = segment_isos(flat, ilm, rpe_flat, c)
        err = np.abs(unflatten_depths(isos, offsets) - isos_truth)
        spot_errs[label] = float(err[spot_mask].max())
    del vol, v, flat

    # Bright clutter floating in the vitreous: the plain detection branch
    # locks onto it, the eroded branch plus merge must not.
    spec2 = PhantomSpec(seed=3, blob_count=24, blob_intensity=160, speckle_sigma=0.05)
    vol2, truth2 = generate_phantom(spec2)
    ilm_truth = truth2[Boundary.VITREOUS_ILM]
    flat2, offsets2, reference2 = _flatten_and_mask(vol2, cfg)
    ilm2, _, parts = segment_ilm(flat2, cfg)
    np.clip(ilm2, 0, reference2, out=ilm2)
    plain_err = float(np.abs(unflatten_depths(parts.bss, offsets2) - ilm_truth).max())
    merged_err = float(np.abs(unflatten_depths(ilm2, offsets2) - ilm_truth).max())

    ok = (
        spot_errs["off"] > 10.0
        and spot_errs["on"] <= 3.0
        and plain_err > 3.0
        and merged_err <= 3.0
    )
    _verdict(
        capsys, 6, ok,
        f"IS/OS dark spots: {spot_errs['off']:.1f} px without row repair vs "
        f"{spot_errs['on']:.2f} px with it (bounds >10, <=3); vitreous clutter: "
        f"plain ILM branch {plain_err:.1f} px vs merged {merged_err:.2f} px (bound 3)",
    )


# ---------------------------------------------------------------------------
# 7: anatomical ordering always holds; flags stay rare on clean input

def test_7_ordering_and_flag_rate(capsys, clean_runs, noisy_runs):
    violations = max(
        res.boundaries.ordering_violations()
        for _, _, res, _ in clean_runs + noisy_runs
    )
    worst_frac = 0.0
    for _, _, res, _ in clean_runs:
        frames, width = res.boundaries.shape
        flagged = res.clamped_columns + sum(r.flagged_columns for r in res.reports)
        worst_frac = max(worst_frac, flagged / (frames * width))
    ok = violations == 0 and worst_frac < 0.01
    _verdict(
        capsys, 7, ok,
        f"max ordering violations over 10 runs: {violations}; worst clean "
        f"flagged-column fraction {worst_frac:.4%} (bound 1%)",
    )


# ---------------------------------------------------------------------------
# 8: bitwise determinism and exact flatten round trips

def test_8_determinism_and_flatten_roundtrip(capsys):
    vol, truth = generate_phantom(small_spec(seed=21))
    first = segment_all(vol)
    second = segment_all(vol)
    threaded = segment_all(vol, PipelineConfig.from_dict({"threads": 4}))
    identical = all(
        np.array_equal(first.boundaries[b], second.boundaries[b])
        and np.array_equal(first.boundaries[b], threaded.boundaries[b])
        for b in ANATOMICAL_ORDER
    )

    _, offsets = flatten_volume(vol, first.boundaries[Boundary.RPE_CHOROID])
    rng = np.random.default_rng(8)
    round_ok = True
    for _ in range(20):
        m = rng.integers(0, vol.depth, size=offsets.offsets.shape).astype(np.float64)
        if not np.array_equal(unflatten_depths(m + offsets.offsets, offsets), m):
            round_ok = False
    for b in ANATOMICAL_ORDER:
        t = np.asarray(truth[b], dtype=np.float64)
        if not np.array_equal(unflatten_depths(t + offsets.offsets, offsets), t):
            round_ok = False

    ok = identical and round_ok
    _verdict(
        capsys, 8, ok,
        "two reruns and a threads=4 run agree bitwise on all 7 boundaries; "
        "flatten/unflatten round trip is exact on 27 integer maps",
    )


# ---------------------------------------------------------------------------
# 9: full-volume runtime budget

def test_9_runtime_budget(capsys, clean_runs):
    _, _, res, _ = clean_runs[0]
    per_frame = res.total_seconds / res.frames
    ok = res.total_seconds <= 120.0
    _verdict(
        capsys, 9, ok,
        f"full 97x496x512 volume segmented in {res.total_seconds:.1f}s single-threaded "
        f"(budget 120s), {per_frame:.2f}s per frame",
    )
