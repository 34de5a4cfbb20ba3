import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fogdet import fogsim, rng
from fogdet.fogsim import (Annotation, FogParamError, FogParams, SceneObject,
                           SceneSpec, SceneSpecError)


def test_zero_scattering_is_identity():
    gen = rng.derive(1, "fog")
    img = gen.uniform(size=(8, 8, 3))
    depth = gen.uniform(1, 10, size=(8, 8))
    out = fogsim.apply_fog(img, depth, FogParams(0.0))
    assert np.array_equal(out, img)


def test_transmission_multiplicative_in_beta():
    depth = rng.derive(2, "fog").uniform(0.5, 10, size=(6, 6))
    t = fogsim.transmission
    assert np.abs(t(depth, 0.3) * t(depth, 0.5) - t(depth, 0.8)).max() <= 1e-12


def test_far_depth_limit_is_airlight():
    img = rng.derive(3, "fog").uniform(size=(4, 4, 3))
    out = fogsim.apply_fog(img, np.full((4, 4), 1e4), FogParams(1.0, 0.9))
    assert np.abs(out - 0.9).max() <= 1e-6


def test_transmission_hand_value():
    assert fogsim.transmission(np.array([10.0]), 0.08)[0] == pytest.approx(
        np.exp(-0.8), abs=1e-15)


def test_fog_density_complements_transmission():
    depth = rng.derive(4, "fog").uniform(0, 10, size=(5, 5))
    p = FogParams(0.06)
    total = fogsim.fog_density(depth, p) + fogsim.transmission(depth, p.beta)
    assert np.abs(total - 1.0).max() <= 1e-15


@given(st.floats(0.0, 2.0), st.floats(0.0, 1.0))
@settings(max_examples=40, deadline=None)
def test_fogged_image_stays_in_unit_range(beta, airlight):
    gen = np.random.default_rng(99)
    img = gen.uniform(size=(6, 6, 3))
    depth = gen.uniform(0, 12, size=(6, 6))
    out = fogsim.apply_fog(img, depth, FogParams(beta, airlight))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_fog_pulls_pixels_toward_airlight():
    img = np.zeros((4, 4, 3))
    depth = np.full((4, 4), 5.0)
    lo = fogsim.apply_fog(img, depth, FogParams(0.04))
    hi = fogsim.apply_fog(img, depth, FogParams(0.08))
    assert (hi >= lo).all() and hi.mean() > lo.mean()


def test_negative_beta_rejected():
    with pytest.raises(FogParamError):
        FogParams(-0.1)
    with pytest.raises(FogParamError):
        fogsim.transmission(np.ones(3), -1.0)


def test_airlight_out_of_range_rejected():
    with pytest.raises(FogParamError):
        FogParams(0.1, 1.5)


def test_image_depth_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        fogsim.apply_fog(np.zeros((4, 4, 3)), np.zeros((5, 4)), FogParams(0.1))


# -- rendering -------------------------------------------------------------

def _square_scene():
    obj = SceneObject("square", (1.0, 0.0, 0.0), (16, 16), 4, 3.0)
    return SceneSpec(height=32, width=32, objects=(obj,))


def test_square_annotation_is_tight():
    image, depth, ann = fogsim.render_scene(_square_scene())
    # 9x9 block centered at (16,16): cols 12..20 inclusive
    assert ann.boxes == [(16.5 / 32, 16.5 / 32, 9 / 32, 9 / 32)]
    assert ann.labels == [fogsim.CATEGORIES.index("square")]
    assert (image[16, 16] == (1.0, 0.0, 0.0)).all()
    assert depth[16, 16] == 3.0


def test_nearer_object_occludes_farther():
    near = SceneObject("square", (0.0, 1.0, 0.0), (16, 16), 4, 2.0)
    far = SceneObject("square", (1.0, 0.0, 0.0), (16, 16), 6, 8.0)
    image, depth, ann = fogsim.render_scene(
        SceneSpec(height=32, width=32, objects=(far, near)))
    assert (image[16, 16] == (0.0, 1.0, 0.0)).all()
    assert depth[16, 16] == 2.0
    assert len(ann.boxes) == 2


def test_render_rejects_out_of_canvas():
    obj = SceneObject("circle", (1.0, 1.0, 1.0), (2, 2), 5, 3.0)
    with pytest.raises(SceneSpecError):
        fogsim.render_scene(SceneSpec(height=32, width=32, objects=(obj,)))


def test_render_rejects_empty_scene():
    with pytest.raises(SceneSpecError):
        fogsim.render_scene(SceneSpec(height=32, width=32, objects=()))


def test_unknown_shape_rejected():
    with pytest.raises(SceneSpecError):
        fogsim._shape_mask("hexagon", 8, 8, (4, 4), 2)


def test_random_scenes_always_valid():
    gen = rng.derive(7, "scenes")
    for _ in range(50):
        spec = fogsim.random_scene(gen, 32, 32, max_objects=3)
        image, depth, ann = fogsim.render_scene(spec)
        assert 1 <= len(ann.boxes) <= 3
        for cx, cy, w, h in ann.boxes:
            assert 0.0 < w <= 1.0 and 0.0 < h <= 1.0
            assert 0.0 <= cx - w / 2 and cx + w / 2 <= 1.0
            assert 0.0 <= cy - h / 2 and cy + h / 2 <= 1.0


def test_annotation_length_contract():
    with pytest.raises(AssertionError):
        Annotation(boxes=[(0.5, 0.5, 0.1, 0.1)], labels=[1, 2])


# -- I/O -------------------------------------------------------------------

def test_ppm_roundtrip_within_quantization(tmp_path):
    img = rng.derive(9, "io").uniform(size=(8, 6, 3))
    path = tmp_path / "img.ppm"
    fogsim.write_ppm(path, img)
    back = fogsim.read_ppm(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_ppm_exact_for_8bit_values(tmp_path):
    img = np.round(rng.derive(10, "io").uniform(size=(4, 4, 3)) * 255) / 255
    path = tmp_path / "img.ppm"
    fogsim.write_ppm(path, img)
    assert np.array_equal(fogsim.read_ppm(path), img)


def test_read_ppm_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P3\n1 1\n255\n000")
    with pytest.raises(ValueError):
        fogsim.read_ppm(path)


def test_depth_roundtrip_exact(tmp_path):
    depth = rng.derive(11, "io").uniform(1, 10, size=(8, 8))
    path = tmp_path / "d.bin"
    fogsim.save_depth(path, depth)
    assert np.array_equal(fogsim.load_depth(path), depth)


# -- dataset ---------------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    levels = [FogParams(0.04), FogParams(0.08)]
    manifest = fogsim.make_dataset(tmp_path / "d", 5, levels, seed=3,
                                   height=16, width=16, max_objects=2)
    assert manifest["count"] == 5
    assert manifest["has_fog_stream"]
    samples = fogsim.load_dataset(tmp_path / "d")
    assert len(samples) == 5
    for s in samples:
        assert s.clear.shape == (16, 16, 3)
        assert s.depth.shape == (16, 16)
        assert len(s.annotation.boxes) >= 1
        # the stored foggy image equals re-fogging the stored clear image,
        # up to 8-bit quantization of both files
        refog = fogsim.apply_fog(s.clear, s.depth, s.fog)
        assert np.abs(refog - s.foggy).max() <= 1.5 / 255


def test_dataset_generation_deterministic(tmp_path):
    levels = [FogParams(0.06)]
    fogsim.make_dataset(tmp_path / "a", 4, levels, seed=5, height=16, width=16)
    fogsim.make_dataset(tmp_path / "b", 4, levels, seed=5, height=16, width=16)
    for sub in ("clear", "foggy", "depth"):
        for pa in sorted((tmp_path / "a" / sub).iterdir()):
            pb = tmp_path / "b" / sub / pa.name
            assert pa.read_bytes() == pb.read_bytes()
    assert ((tmp_path / "a" / "annotations.jsonl").read_text()
            == (tmp_path / "b" / "annotations.jsonl").read_text())


def test_dataset_annotations_are_json_lines(tmp_path):
    fogsim.make_dataset(tmp_path / "d", 3, [FogParams(0.04)], seed=1,
                        height=16, width=16)
    lines = (tmp_path / "d" / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 3
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"id", "boxes", "labels", "fog"}


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        fogsim.make_dataset("/tmp/nowhere", 0, [FogParams(0.04)], seed=0)
