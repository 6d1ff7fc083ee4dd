import numpy as np
import pytest

from vdnet import data as D

MASK64 = (1 << 64) - 1


def splitmix_reference(seed, n):
    """Plain-integer SplitMix64, one value at a time."""
    out, s = [], seed
    for _ in range(n):
        s = (s + 0x9E3779B97F4A7C15) & MASK64
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


# ---------------------------------------------------------------- RNG


def test_splitmix_published_first_output():
    assert D.SplitMix64(0).next() == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 7, 2 ** 63 + 5, MASK64])
def test_splitmix_block_matches_scalar_reference(seed):
    rng = D.SplitMix64(seed)
    got = rng.block(5).tolist() + [rng.next() for _ in range(3)]
    assert got == splitmix_reference(seed, 8)


def test_randint_range():
    rng = D.SplitMix64(3)
    vals = [rng.randint(2, 5) for _ in range(400)]
    assert set(vals) == {2, 3, 4, 5}
    with pytest.raises(ValueError):
        rng.randint(5, 2)


# ---------------------------------------------------------------- scenes


def test_same_seed_same_bytes():
    a, b = D.generate_scene(42), D.generate_scene(42)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.annotations == b.annotations
    assert D.generate_scene(43).image.tobytes() != a.image.tobytes()


def test_images_are_8_bit_values():
    img = D.generate_scene(5).image
    assert img.shape == (3, 64, 64)
    np.testing.assert_array_equal(np.round(img * 255) / 255, img)
    assert img.min() >= 0 and img.max() <= 1


def test_background_only_scene():
    s = D.generate_scene(1, D.SceneConfig(min_objects=0, max_objects=0))
    assert s.annotations == []
    assert s.boxes.shape == (0, 4)


def test_grayscale_scenes():
    s = D.generate_scene(9, D.SceneConfig(channels=1))
    assert s.image.shape == (1, 64, 64)


def test_thousand_scenes_have_valid_boxes():
    for seed in range(1000):
        s = D.generate_scene(seed)
        assert 1 <= len(s.annotations) <= 3
        for c, (x0, y0, x1, y1) in s.annotations:
            assert 0 <= c < 3
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64


def test_boxes_are_tight():
    # objects are drawn at >= 140/255 per channel; background stays <= 98/255
    for seed in range(200):
        s = D.generate_scene(seed)
        bright = s.image.min(axis=0) >= 120 / 255
        for _, (x0, y0, x1, y1) in s.annotations:
            x0, y0, x1, y1 = map(int, (x0, y0, x1, y1))
            inside = bright[y0:y1, x0:x1]
            assert inside[0].any() and inside[-1].any()
            assert inside[:, 0].any() and inside[:, -1].any()


def test_config_errors():
    with pytest.raises(D.ConfigError):
        D.SceneConfig(max_objects=12, max_object_size=22).validate()
    with pytest.raises(D.ConfigError):
        D.SceneConfig(class_names=("hexagon",)).validate()
    with pytest.raises(D.ConfigError):
        D.SceneConfig(channels=2).validate()
    with pytest.raises(D.ConfigError):
        D.generate_scene(0, D.SceneConfig(min_objects=3, max_objects=2))


# ---------------------------------------------------------------- manifest and annotations


def test_manifest_splits_are_disjoint_and_stable(tmp_path):
    m = D.make_manifest(7, 200, 50)
    train, test = set(m.seeds("train")), set(m.seeds("test"))
    assert len(train) == 200 and len(test) == 50 and not train & test
    assert D.make_manifest(7, 200, 50).digest() == m.digest()
    assert D.make_manifest(8, 200, 50).digest() != m.digest()
    m.save(tmp_path / "m.json")
    back = D.DatasetManifest.load(tmp_path / "m.json")
    assert back.digest() == m.digest()
    assert m.stem(m.seeds("test")[0]).startswith("test_")


def test_manifest_rejects_tampered_config(tmp_path):
    m = D.make_manifest(1, 3, 1)
    m.save(tmp_path / "m.json")
    text = (tmp_path / "m.json").read_text().replace('"noise": 16', '"noise": 3')
    (tmp_path / "m.json").write_text(text)
    with pytest.raises(D.ConfigError):
        D.DatasetManifest.load(tmp_path / "m.json")


def test_annotations_round_trip(tmp_path):
    m = D.make_manifest(2, 5, 0)
    scenes = D.load_scenes(m, "train")
    D.write_annotations(tmp_path / "a.jsonl", m, scenes)
    rows = D.read_annotations(tmp_path / "a.jsonl")
    assert [r["image"] for r in rows] == [m.stem(s.seed) for s in scenes]
    for r, s in zip(rows, scenes):
        assert [(o["class"], tuple(o["box"])) for o in r["objects"]] == \
               [(m.class_names[c], b) for c, b in s.annotations]


# ---------------------------------------------------------------- patches


def overlap(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def test_single_square_gives_square_patch():
    cfg = D.SceneConfig(class_names=("square",), min_objects=1, max_objects=1)
    p = D.classification_patches([D.generate_scene(4, cfg)], cfg.class_names)
    assert p.class_names == ["background", "square"]
    assert (p.labels == 1).sum() == 1
    assert p.images.shape[1:] == (3, 16, 16)


def test_background_only_scenes_give_background_patches():
    cfg = D.SceneConfig(min_objects=0, max_objects=0)
    p = D.classification_patches([D.generate_scene(s, cfg) for s in range(5)], cfg.class_names,
                                 backgrounds_per_scene=2)
    assert len(p) == 10 and np.all(p.labels == 0)


def test_patch_labels_agree_with_annotations():
    scenes = [D.generate_scene(s) for s in range(300)]
    p = D.classification_patches(scenes, D.SceneConfig().class_names, seed=1)
    for label, (si, win) in zip(p.labels, p.windows):
        area = (win[2] - win[0]) * (win[3] - win[1])
        if label == 0:
            assert all(overlap(win, b) == 0 for _, b in scenes[si].annotations)
        else:
            best = max((overlap(win, b), c) for c, b in scenes[si].annotations)
            assert best[1] + 1 == label
            assert best[0] >= 0.5 * area


def test_object_crops_add_context_along_either_axis():
    scenes = [D.generate_scene(s) for s in range(100)]
    p = D.classification_patches(scenes, D.SceneConfig().class_names, seed=3)
    wide = tall = 0
    for label, (si, win) in zip(p.labels, p.windows):
        if label == 0:
            continue
        box = max((overlap(win, b), b) for _, b in scenes[si].annotations)[1]
        gx = (win[2] - win[0]) / (box[2] - box[0])
        gy = (win[3] - win[1]) / (box[3] - box[1])
        assert gx * gy <= 1.96 + 1e-12
        wide += gx > gy
        tall += gy > gx
    assert wide > 50 and tall > 50


@pytest.mark.parametrize("context", [-0.01, 1.5])
def test_context_outside_unit_interval_rejected(context):
    with pytest.raises(D.ConfigError):
        D.classification_patches([], ["a"], context=context)


# ---------------------------------------------------------------- netpbm


def test_ppm_round_trip(tmp_path):
    white = np.ones((3, 2, 2))
    D.write_ppm(tmp_path / "w.ppm", white)
    np.testing.assert_array_equal(D.read_ppm(tmp_path / "w.ppm"), np.full((3, 2, 2), 255))
    assert (tmp_path / "w.ppm").read_bytes() == b"P6\n2 2\n255\n" + b"\xff" * 12


def test_header_length_contract(tmp_path):
    (tmp_path / "ok.ppm").write_bytes(b"P6 2 2 255\n" + bytes(12))
    assert D.read_ppm(tmp_path / "ok.ppm").shape == (3, 2, 2)
    (tmp_path / "short.ppm").write_bytes(b"P6 2 2 255\n" + bytes(11))
    with pytest.raises(D.NetpbmError):
        D.read_ppm(tmp_path / "short.ppm")


def test_header_with_comments_and_bad_headers(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made here\n3 1\n255\n" + bytes([1, 2, 3]))
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "c.pgm"), [[1, 2, 3]])
    for bad in (b"P5 3 1 65535\n" + bytes(6), b"P6 3 1 255\n" + bytes(9), b"P5 x 1 255\n", b"P5 3"):
        (tmp_path / "b.pgm").write_bytes(bad)
        with pytest.raises(D.NetpbmError):
            D.read_pgm(tmp_path / "b.pgm")


def test_random_images_double_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(20):
        h, w = rng.integers(1, 20, size=2)
        img = rng.integers(0, 256, size=(3, h, w), dtype=np.uint8)
        D.write_ppm(tmp_path / "a.ppm", img)
        back = D.read_ppm(tmp_path / "a.ppm")
        np.testing.assert_array_equal(back, img)
        D.write_ppm(tmp_path / "b.ppm", back)
        assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
        gray = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
        D.write_pgm(tmp_path / "g.pgm", gray)
        np.testing.assert_array_equal(D.read_pgm(tmp_path / "g.pgm"), gray)


def test_float_quantisation():
    np.testing.assert_array_equal(D.to_uint8(np.array([-0.1, 0.0, 0.5, 1.0, 1.7])), [0, 0, 128, 255, 255])


def test_draw_boxes_outlines_only():
    img = np.zeros((3, 10, 10))
    out = D.draw_boxes(img, [(2, 3, 6, 8)], colour=(1, 1, 1))
    assert out[0, 3, 2:6].all() and out[0, 7, 2:6].all()
    assert out[0, 3:8, 2].all() and out[0, 3:8, 5].all()
    assert out[0, 4:7, 3:5].sum() == 0
    assert img.sum() == 0
