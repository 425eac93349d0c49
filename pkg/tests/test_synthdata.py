import json

import numpy as np
import pytest

from msfm.geometry import Box, area
from msfm.synthdata import (
    BODY,
    HO,
    OCC_A,
    OCC_B,
    R,
    R_PLUS_HO,
    ConfigError,
    DatasetFormatError,
    GeneratorConfig,
    compose_scene,
    generate_dataset,
    generate_scene,
    load_dataset,
    save_dataset,
    subset_by_name,
    subset_filter,
    training_filter,
    visible_region,
)
from msfm.synthdata import Annotation


def fake(vis, height):
    full = Box(0, 0, 0.41 * height, height)
    return Annotation(full, full, vis, height)


class TestGeneration:
    def test_deterministic(self):
        cfg = GeneratorConfig()
        a, b = generate_scene(cfg, 17), generate_scene(cfg, 17)
        np.testing.assert_array_equal(a.feature_grid, b.feature_grid)
        assert a.annotations == b.annotations

    def test_no_occluders_full_visibility(self):
        cfg = GeneratorConfig(occluders=(0, 0))
        for s in generate_dataset(cfg, 10, 0):
            for a in s.annotations:
                assert a.visibility == 1.0 and a.visible == a.full

    def test_annotation_invariants(self):
        for s in generate_dataset(GeneratorConfig.occluder_heavy(), 40, 3):
            assert np.all(np.isfinite(s.feature_grid))
            for a in s.annotations:
                assert a.full.contains(a.visible)
                assert abs(a.visibility - area(a.visible) / area(a.full)) < 1e-9
                assert a.height == a.full.y2 - a.full.y1
                assert s.bounds.contains(a.full)

    def test_hand_occlusion(self):
        cfg = GeneratorConfig(width=64, height=64, ped_height=(16, 40), noise=0.0)
        s = compose_scene(cfg, [Box(0, 0, 10, 20)], [Box(0, 10, 10, 20)])
        (a,) = s.annotations
        assert a.visible == Box(0, 0, 10, 10)
        assert a.visibility == 0.5

    def test_fully_covered_dropped(self):
        cfg = GeneratorConfig(width=64, height=64, ped_height=(16, 40))
        s = compose_scene(cfg, [Box(0, 0, 10, 20)], [Box(0, 0, 12, 22)])
        assert s.annotations == []

    def test_visible_region_exhaustive(self):
        full = Box(0, 0, 10, 10)
        # L-shaped remainder: largest rectangle is the top 10x6 strip
        assert visible_region(full, [Box(0, 6, 4, 10), Box(4, 6, 10, 10)]) == Box(0, 0, 10, 6)
        assert visible_region(full, [Box(7, 0, 10, 10)]) == Box(0, 0, 7, 10)

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            GeneratorConfig(pedestrians=(3, 1)).validate()
        with pytest.raises(ConfigError):
            GeneratorConfig(width=16, height=16).validate()
        with pytest.raises(ConfigError):
            GeneratorConfig(channels=4).validate()

    def test_signatures_separable(self):
        # mean pedestrian vs occluder signature differ by more than the noise level
        cfg = GeneratorConfig(noise=0.3)
        ped_cells, occ_cells = [], []
        for s in generate_dataset(cfg, 20, 5):
            g = s.feature_grid
            ped_cells.append(g[:, g[BODY] > 0.8].T)
            occ_cells.append(g[:, (g[OCC_A] > 0.4) & (g[OCC_B] > 0.4)].T)
        ped = np.concatenate(ped_cells).mean(axis=0)
        occ = np.concatenate(occ_cells).mean(axis=0)
        assert np.linalg.norm(ped - occ) > cfg.noise


class TestSubsets:
    def test_examples(self):
        assert subset_filter(fake(0.9, 60), R)
        assert not subset_filter(fake(0.5, 60), R) and subset_filter(fake(0.5, 60), HO)
        assert not subset_filter(fake(0.9, 40), R)

    def test_boundaries_half_open(self):
        assert subset_filter(fake(0.65, 60), HO) and not subset_filter(fake(0.65, 60), R)
        assert not subset_filter(fake(0.20, 60), HO)

    def test_consistency(self):
        rng = np.random.default_rng(0)
        for v in rng.uniform(0.01, 1.0, 2000):
            a = fake(float(v), 60)
            r, ho, both = subset_filter(a, R), subset_filter(a, HO), subset_filter(a, R_PLUS_HO)
            assert not (r and ho)
            assert both == (r or ho)

    def test_training_filter(self):
        assert training_filter(fake(0.40, 55))
        assert not training_filter(fake(0.25, 55))
        assert not training_filter(fake(1.0, 49))

    def test_names(self):
        assert subset_by_name("ho") is HO
        assert subset_by_name("r+ho") is R_PLUS_HO
        with pytest.raises(KeyError):
            subset_by_name("X")


class TestDatasetFiles:
    def test_round_trip(self, tmp_path):
        cfg = GeneratorConfig.occluder_heavy()
        scenes = generate_dataset(cfg, 5, 9)
        save_dataset(scenes, tmp_path / "d.json")
        back = load_dataset(tmp_path / "d.json")
        assert [s.id for s in back] == [s.id for s in scenes]
        for a, b in zip(scenes, back):
            assert a.seed == b.seed and a.bounds == b.bounds
            assert a.annotations == b.annotations
            np.testing.assert_array_equal(a.feature_grid, b.feature_grid)

    def test_empty(self, tmp_path):
        save_dataset([], tmp_path / "e.json")
        assert load_dataset(tmp_path / "e.json") == []

    def test_truncated(self, tmp_path):
        save_dataset(generate_dataset(GeneratorConfig(), 3, 1), tmp_path / "d.json")
        text = (tmp_path / "d.json").read_text()
        (tmp_path / "t.json").write_text(text[: len(text) // 2])
        with pytest.raises(DatasetFormatError, match="line"):
            load_dataset(tmp_path / "t.json")

    def test_field_diagnostics(self, tmp_path):
        save_dataset(generate_dataset(GeneratorConfig(), 2, 1), tmp_path / "d.json")
        doc = json.loads((tmp_path / "d.json").read_text())
        del doc["scenes"][1]["annotations"][0]["visible"]
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetFormatError, match=r"scenes\[1\]\.annotations\[0\]"):
            load_dataset(tmp_path / "bad.json")

    def test_tampered_annotation(self, tmp_path):
        save_dataset(generate_dataset(GeneratorConfig(), 2, 1), tmp_path / "d.json")
        doc = json.loads((tmp_path / "d.json").read_text())
        a = doc["scenes"][0]["annotations"][0]
        a["full"][0] -= 1.0
        a["visible"][0] -= 1.0
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetFormatError):
            load_dataset(tmp_path / "bad.json")
