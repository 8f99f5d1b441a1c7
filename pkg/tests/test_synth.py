import filecmp
from collections import Counter

import numpy as np
import pytest

from ffssd.synth import (ManifestError, SceneSpec, gen_scene, gen_split, load_split, read_ppm, scene_background,
                         write_pgm, write_ppm)
from ffssd.boxes import iou


def test_scene_is_deterministic():
    a_img, a_anns = gen_scene(42)
    b_img, b_anns = gen_scene(42)
    assert np.array_equal(a_img, b_img) and a_anns == b_anns
    c_img, _ = gen_scene(43)
    assert not np.array_equal(a_img, c_img)


def test_degenerate_affinity_row():
    rows = [(1.0, 0, 0, 0, 0, 0)] + list(SceneSpec().affinity[1:])
    spec = SceneSpec(affinity=tuple(rows))
    seen = 0
    for seed in range(300):
        _, anns = gen_scene(seed, spec)
        if spec.backgrounds[scene_background(seed, spec)] == "sea":
            seen += len(anns)
            assert all(a.category == 0 for a in anns)
    assert seen > 0


def test_affinity_rows_must_sum_to_one():
    with pytest.raises(ValueError):
        SceneSpec(affinity=((0.5, 0.4, 0, 0, 0, 0),) * 4)


def test_annotation_bounds_and_overlap():
    spec = SceneSpec()
    for seed in range(500):
        _, anns = gen_scene(seed, spec)
        assert 1 <= len(anns) <= spec.max_objects
        for a in anns:
            x0, y0, x1, y1 = a.box
            assert 0 <= x0 < x1 <= spec.canvas and 0 <= y0 < y1 <= spec.canvas
            assert a.width >= 4 and a.height >= 4
            assert a.size_class == ("small" if max(a.width, a.height) <= spec.small_threshold else "large")
        for i in range(len(anns)):
            for j in range(i):
                assert iou(anns[i].box, anns[j].box) <= spec.max_iou


def test_affinity_monte_carlo():
    # empirical P(category | background) over 10^4 scenes vs the table
    spec = SceneSpec()
    counts = np.zeros((len(spec.backgrounds), len(spec.categories)))
    for seed in range(10_000):
        bg = scene_background(seed, spec)
        for a in gen_scene(seed, spec)[1]:
            counts[bg, a.category] += 1
    freq = counts / counts.sum(axis=1, keepdims=True)
    assert np.max(np.abs(freq - np.array(spec.affinity))) <= 0.02


def test_context_is_informative_for_small_objects():
    # predicting the background's most likely category beats a uniform guess
    spec = SceneSpec()
    table = np.array(spec.affinity)
    hits = total = 0
    for seed in range(2000):
        bg = scene_background(seed, spec)
        for a in gen_scene(seed, spec)[1]:
            if a.size_class == "small":
                total += 1
                hits += a.category == int(np.argmax(table[bg]))
    assert hits / total > 1 / len(spec.categories) + 0.1


def test_confusable_pairs_share_shapes():
    spec = SceneSpec()
    shapes = Counter(spec.shapes)
    assert sum(1 for n in shapes.values() if n == 2) == 2


def test_ppm_round_trip(tmp_path):
    img, _ = gen_scene(3)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_write(tmp_path):
    heat = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "h.pgm", heat)
    back = read_ppm(tmp_path / "h.pgm")
    assert back.shape == (1, 1, 3, 4)
    assert np.allclose(back[0, 0], heat, atol=1 / 255)


def test_split_round_trip(tmp_path):
    anns = gen_split(100, SceneSpec(), 12, tmp_path)
    split = load_split(tmp_path)
    assert split.all_annotations() == anns
    assert split.categories == SceneSpec().categories
    for i, image_id in enumerate(split.image_ids):
        assert np.array_equal(split.image(image_id), gen_scene(100 + int(image_id[7:12]))[0])


def test_empty_split(tmp_path):
    assert gen_split(0, SceneSpec(), 0, tmp_path) == []
    assert (tmp_path / "manifest.txt").read_text() == "#categories: boat,car,bird,plant,ball,box\n"
    assert len(load_split(tmp_path)) == 0


def test_split_is_byte_identical(tmp_path):
    gen_split(5, SceneSpec(), 6, tmp_path / "a")
    gen_split(5, SceneSpec(), 6, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in (tmp_path / "a" / "images").iterdir():
        assert name.read_bytes() == (tmp_path / "b" / "images" / name.name).read_bytes()


def test_malformed_manifest_reports_line(tmp_path):
    gen_split(0, SceneSpec(), 2, tmp_path)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    lines[2] = lines[2].replace("\t", " ", 1)
    (tmp_path / "manifest.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match=r"manifest.txt:3:"):
        load_split(tmp_path)


def test_missing_image_file(tmp_path):
    gen_split(0, SceneSpec(), 1, tmp_path)
    split = load_split(tmp_path)
    (tmp_path / split.image_ids[0]).unlink()
    with pytest.raises(FileNotFoundError):
        split.image(split.image_ids[0])


def test_small_object_share_of_default_split(tmp_path):
    anns = gen_split(0, SceneSpec(), 500, tmp_path)
    share = np.mean([a.size_class == "small" for a in load_split(tmp_path).all_annotations()])
    assert len(anns) > 500 and share >= 0.6
