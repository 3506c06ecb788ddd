import hashlib
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from inbetween.data import (
    GenConfig,
    ManifestError,
    PPMError,
    Scene,
    Shape,
    decode_ppm,
    encode_ppm,
    few_shot_sample,
    generate_synthetic,
    load_manifest,
    mix_manifests,
    read_image,
    render,
    split_holdout,
    write_image,
)


def _tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_ppm_round_trip(tmp_path):
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    raw = encode_ppm(px)
    f = tmp_path / "a.ppm"
    f.write_bytes(raw)
    write_image(read_image(f), tmp_path / "b.ppm")
    assert (tmp_path / "b.ppm").read_bytes() == raw


def test_ppm_accepts_comments_and_odd_whitespace():
    px = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    raw = b"P6 # comment\n2\t2\n# another\n255\n" + px.tobytes()
    assert np.array_equal(decode_ppm(raw), px)


def test_pixel_scale(tmp_path):
    f = tmp_path / "c.ppm"
    f.write_bytes(encode_ppm(np.full((1, 1, 3), 128, dtype=np.uint8)))
    assert read_image(f)[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_ppm_errors():
    good = encode_ppm(np.zeros((2, 3, 3), dtype=np.uint8))
    with pytest.raises(PPMError, match="expected 18 bytes, got 10"):
        decode_ppm(good[:-8])
    with pytest.raises(PPMError, match="magic"):
        decode_ppm(b"P3\n1 1\n255\n" + bytes(3))
    with pytest.raises(PPMError, match="maxval"):
        decode_ppm(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(PPMError):
        decode_ppm(b"P6\n1")
    with pytest.raises(PPMError):
        write_image(np.zeros((2, 2)), "unused.ppm")


def test_generator_deterministic(tmp_path):
    cfg = GenConfig(image_size=16, n_triplets=6, seed=4)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    generate_synthetic(GenConfig(image_size=16, n_triplets=6, seed=5), tmp_path / "c")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_generator_counts(tmp_path):
    m = generate_synthetic(GenConfig(image_size=8, n_triplets=512, max_shapes=1), tmp_path)
    assert len(m) == 512 and len(set(m.ids)) == 512
    assert len(list(tmp_path.glob("triplets/*/*.ppm"))) == 1536
    loaded = load_manifest(tmp_path)
    assert loaded.ids == m.ids


def test_bad_gen_config():
    with pytest.raises(ValueError, match="n must be ≥ 1"):
        GenConfig(n_triplets=0)
    with pytest.raises(ValueError):
        GenConfig(max_shapes=5)
    with pytest.raises(ValueError):
        GenConfig(shape_kinds=("triangle",))


def test_midpoint_linear_motion():
    shape = Shape("rectangle", np.array([4.0, 8.0]), np.array([2.0, 0.0]), np.array([1.5, 2.0]), np.array([1.0, 0.0, 0.0]))
    scene = Scene(size=16, background=[], base_color=np.array([0.2, 0.2, 0.2]), shapes=[shape])
    assert shape.position(-1)[0] == 2.0 and shape.position(1)[0] == 6.0
    still = Scene(size=16, background=[], base_color=scene.base_color,
                  shapes=[Shape("rectangle", np.array([4.0, 8.0]), np.zeros(2), shape.half_size, shape.color)])
    assert np.array_equal(render(scene, 0.0), render(still, 0.0))
    # the centroid of the red channel moves by equal steps
    cx = [np.average(np.arange(16), weights=render(scene, t)[..., 0].sum(0) - 0.2 * 16) for t in (-1, 0, 1)]
    assert cx[1] == pytest.approx((cx[0] + cx[2]) / 2, abs=1e-9)


def test_pan_midpoint():
    pan = Scene(size=16, background=[(np.array([0.1, 0.05, 0.0]), 0.7, 0.3, 0.0)], base_color=np.full(3, 0.5),
                pan=np.array([1.5, -1.0]))
    shifted = Scene(size=16, background=[(np.array([0.1, 0.05, 0.0]), 0.7, 0.3, 0.7 * -0.75 + 0.3 * 0.5)],
                    base_color=np.full(3, 0.5))
    np.testing.assert_allclose(render(pan, 0.5), render(shifted, 0.0), atol=1e-12)


def test_manifest_missing_file(tmp_path):
    generate_synthetic(GenConfig(image_size=8, n_triplets=3), tmp_path)
    (tmp_path / "triplets" / "00001" / "mid.ppm").unlink()
    with pytest.raises(ManifestError, match="missing"):
        load_manifest(tmp_path / "manifest.json")


def test_manifest_duplicate_id(tmp_path):
    generate_synthetic(GenConfig(image_size=8, n_triplets=2), tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["entries"][1]["id"] = raw["entries"][0]["id"]
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path)


@pytest.fixture(scope="module")
def pool(tmp_path_factory):
    return generate_synthetic(GenConfig(image_size=8, n_triplets=40, max_shapes=1), tmp_path_factory.mktemp("pool"))


def test_few_shot(pool):
    full = few_shot_sample(pool, len(pool), seed=3)
    assert sorted(full.ids) == sorted(pool.ids)
    small, big = few_shot_sample(pool, 8, 1), few_shot_sample(pool, 16, 1)
    assert small.ids == big.ids[:8]
    assert len(few_shot_sample(pool, 0, 1)) == 0
    with pytest.raises(ValueError):
        few_shot_sample(pool, 41, 0)


def test_split_holdout(pool):
    train, held = split_holdout(pool, 10)
    assert len(train) == 30 and len(held) == 10
    assert held.ids == sorted(pool.ids)[-10:]
    assert not set(train.ids) & set(held.ids)


def test_mix(pool, tmp_path):
    assert mix_manifests([pool], 12, seed=2).ids == few_shot_sample(pool, 12, seed=2).ids
    other = generate_synthetic(GenConfig(image_size=8, n_triplets=40, seed=9), tmp_path, source="other")
    mixed = mix_manifests([pool, other], 20, seed=0)
    counts = Counter(i.split("/")[0] for i in mixed.ids)
    assert set(counts) == {"synthetic", "other"}
    assert abs(counts["synthetic"] - counts["other"]) <= 1
    assert len(mixed) == 20
    mixed.triplets().__next__()
    with pytest.raises(ValueError, match="insufficient"):
        mix_manifests([pool, other], 81)
