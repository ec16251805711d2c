"""Synthetic volume generation and the error/thickness reporting around it."""

from dataclasses import replace

import numpy as np
import pytest

from conftest import small_spec
from octseg.phantom import (
    BAND_NAMES,
    DEFAULT_BANDS,
    LAYERS,
    PhantomSpec,
    SurfaceSpec,
    evaluate,
    generate_phantom,
    layer_thickness_report,
)
from octseg.pipeline import ANATOMICAL_ORDER, Boundary, BoundarySet
from octseg.volume import VolumeMeta


def _flat_spec(seed=0, **overrides):
    spec = small_spec(seed=seed)
    flat = {b: replace(s, amplitude=0.0, fovea_depth=0.0) for b, s in spec.surfaces.items()}
    return small_spec(seed=seed, surfaces=flat, **overrides)


def test_same_seed_is_bit_identical():
    spec = small_spec(seed=9, speckle_sigma=0.1, shadow_count=2, shadow_width=4, blob_count=3)
    va, ta = generate_phantom(spec)
    vb, tb = generate_phantom(small_spec(seed=9, speckle_sigma=0.1, shadow_count=2, shadow_width=4, blob_count=3))
    assert np.array_equal(va.voxels, vb.voxels)
    for b in ANATOMICAL_ORDER:
        assert np.array_equal(ta[b], tb[b])


def test_different_seed_differs():
    va, _ = generate_phantom(small_spec(seed=1, speckle_sigma=0.1))
    vb, _ = generate_phantom(small_spec(seed=2, speckle_sigma=0.1))
    assert not np.array_equal(va.voxels, vb.voxels)


def test_flat_noiseless_volume_structure():
    vol, truth = generate_phantom(_flat_spec())
    v = vol.voxels
    assert v.dtype == np.uint8
    # every A-scan is the same column of bands
    assert np.array_equal(v, np.broadcast_to(v[:1, :, :1], v.shape))
    col = v[0, :, 0]
    for i, b in enumerate(ANATOMICAL_ORDER):
        z = int(truth[b][0, 0])
        assert col[z] == DEFAULT_BANDS[i + 1]  # first voxel of the band below
        assert col[z - 1] == DEFAULT_BANDS[i]


def test_truth_respects_anatomical_order():
    _, truth = generate_phantom(small_spec(seed=4))
    assert truth.ordering_violations() == 0


def test_shadows_touch_exactly_their_columns():
    base = small_spec(seed=5)
    shadowed = small_spec(seed=5, shadow_count=3, shadow_width=4)
    v0, _ = generate_phantom(base)
    v1, t1 = generate_phantom(shadowed)
    changed = np.any(v0.voxels != v1.voxels, axis=(0, 1))
    assert int(changed.sum()) == 3 * 4
    # attenuation acts at and below the inner surface, never in the vitreous
    ys, zs, xs = np.nonzero(v0.voxels != v1.voxels)
    ilm = t1[Boundary.VITREOUS_ILM]
    assert np.all(zs >= ilm[ys, xs])


def test_blobs_stay_above_the_inner_surface():
    base = small_spec(seed=6)
    cluttered = small_spec(seed=6, blob_count=5, blob_intensity=200)
    v0, t = generate_phantom(base)
    v1, _ = generate_phantom(cluttered)
    diff = v0.voxels != v1.voxels
    assert diff.any()
    ys, zs, xs = np.nonzero(diff)
    assert zs.max() < t[Boundary.VITREOUS_ILM].min()
    assert np.all(v1.voxels[diff] == 200)


def test_speckle_perturbs_but_stays_in_range():
    clean, _ = generate_phantom(small_spec(seed=7))
    noisy, _ = generate_phantom(small_spec(seed=7, speckle_sigma=0.15))
    assert noisy.voxels.dtype == np.uint8
    assert not np.array_equal(clean.voxels, noisy.voxels)
    frac_changed = np.mean(clean.voxels != noisy.voxels)
    assert frac_changed > 0.3  # multiplicative noise touches most bright voxels


def test_evaluate_truth_against_itself_is_zero():
    _, truth = generate_phantom(small_spec(seed=0))
    rep = evaluate(truth, truth)
    for b in ANATOMICAL_ORDER:
        e = rep.per_boundary[b]
        assert (e.mae_px, e.mae_sd_px, e.signed_px, e.signed_sd_px) == (0, 0, 0, 0)
    assert rep.overall.mae_px == 0
    assert "overall" in rep.format_table()


def test_evaluate_uniform_shift_scales_to_microns():
    _, truth = generate_phantom(small_spec(seed=0))
    shifted = BoundarySet({b: truth[b] + 2.0 for b in ANATOMICAL_ORDER})
    rep = evaluate(shifted, truth, VolumeMeta(axial_um_per_px=3.9))
    e = rep.per_boundary[Boundary.IPL_INL]
    assert (e.mae_px, e.mae_sd_px, e.signed_px) == (2.0, 0.0, 2.0)
    assert e.scaled(rep.axial_um_per_px)[0] == pytest.approx(7.8)
    assert rep.overall.signed_px == 2.0


def test_evaluate_signed_errors_cancel_but_absolute_do_not():
    _, truth = generate_phantom(small_spec(seed=0))
    w = truth.shape[1]
    pattern = np.where(np.arange(w) < w // 2, 1.0, -1.0)
    bent = BoundarySet({b: truth[b] + pattern for b in ANATOMICAL_ORDER})
    rep = evaluate(bent, truth)
    assert rep.overall.signed_px == 0.0
    assert rep.overall.mae_px == 1.0
    assert rep.overall.signed_sd_px == 1.0


def test_evaluate_rejects_shape_mismatch():
    _, truth = generate_phantom(small_spec(seed=0))
    other = BoundarySet({b: np.zeros((3, 4)) for b in ANATOMICAL_ORDER})
    with pytest.raises(ValueError):
        evaluate(other, truth)


def test_error_report_csv(tmp_path):
    _, truth = generate_phantom(small_spec(seed=0))
    rep = evaluate(truth, truth, VolumeMeta(axial_um_per_px=3.9))
    p = rep.to_csv(tmp_path / "errors.csv")
    lines = p.read_text().strip().splitlines()
    assert len(lines) == 1 + len(ANATOMICAL_ORDER) + 1
    assert lines[0].startswith("boundary,abs_px")
    assert lines[-1].startswith("overall,")


def test_layer_thickness_matches_design_gaps():
    vol, truth = generate_phantom(_flat_spec())
    rows = layer_thickness_report(truth, VolumeMeta(axial_um_per_px=3.9))
    assert [r.layer for r in rows] == [name for name, _, _ in LAYERS]
    spec = small_spec()
    bases = [spec.surfaces[b].base for b in ANATOMICAL_ORDER]
    for row, (top, bottom) in zip(rows, zip(bases, bases[1:])):
        assert row.mean_px == pytest.approx(bottom - top)
        assert row.mean_um == pytest.approx((bottom - top) * 3.9)
        assert row.sd_um == 0.0


def test_layer_thickness_rejects_inverted_boundaries():
    maps = {b: np.full((2, 3), 10.0 * i) for i, b in enumerate(ANATOMICAL_ORDER)}
    maps[Boundary.NFL_GCL][:] = -5.0
    with pytest.raises(ValueError, match="out of order"):
        layer_thickness_report(BoundarySet(maps))


def test_spec_json_round_trip(tmp_path):
    spec = small_spec(seed=3, speckle_sigma=0.2, shadow_count=2, shadow_width=4)
    p = tmp_path / "spec.json"
    spec.to_json(p)
    again = PhantomSpec.from_json(p)
    assert again.to_dict() == spec.to_dict()
    vol_a, _ = generate_phantom(spec)
    vol_b, _ = generate_phantom(again)
    assert np.array_equal(vol_a.voxels, vol_b.voxels)


def test_spec_from_dict_merges_partial_surfaces():
    spec = PhantomSpec.from_dict({"surfaces": {"vitreous_ilm": {"base": 180.0}}})
    assert spec.surfaces[Boundary.VITREOUS_ILM].base == 180.0
    assert spec.surfaces[Boundary.RPE_CHOROID].base == PhantomSpec().surfaces[Boundary.RPE_CHOROID].base


def test_spec_validation_errors():
    with pytest.raises(ValueError, match="unknown"):
        PhantomSpec.from_dict({"weird": 1})
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"band_intensities": [1, 2, 3]})
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"shadow_attenuation": 0.0})
    with pytest.raises(ValueError):
        SurfaceSpec(base=100.0, wavelength=0.0)
    assert len(BAND_NAMES) == len(DEFAULT_BANDS)


def test_generate_rejects_impossible_geometry():
    spec = small_spec()
    crossed = dict(spec.surfaces)
    crossed[Boundary.NFL_GCL] = replace(crossed[Boundary.NFL_GCL], base=crossed[Boundary.IPL_INL].base + 30)
    with pytest.raises(ValueError, match="cross"):
        generate_phantom(small_spec(surfaces=crossed))

    shallow = dict(spec.surfaces)
    shallow[Boundary.VITREOUS_ILM] = replace(
        shallow[Boundary.VITREOUS_ILM], base=0.2, amplitude=0.0, fovea_depth=0.0
    )
    with pytest.raises(ValueError, match="room"):
        generate_phantom(small_spec(surfaces=shallow))

    deep = dict(spec.surfaces)
    deep[Boundary.RPE_CHOROID] = replace(deep[Boundary.RPE_CHOROID], base=500.0)
    with pytest.raises(ValueError, match="depth"):
        generate_phantom(small_spec(surfaces=deep))

    with pytest.raises(ValueError, match="overlap"):
        generate_phantom(small_spec(shadow_count=9, shadow_width=8))


def test_truth_round_trips_through_directory(tmp_path):
    _, truth = generate_phantom(small_spec(seed=8))
    truth.save_dir(tmp_path / "truth")
    back = BoundarySet.load_dir(tmp_path / "truth")
    for b in ANATOMICAL_ORDER:
        assert np.array_equal(back[b], truth[b])
