import numpy as np
import pytest

from viplab.bench.scenes import (
    CorpusSpec,
    SceneParams,
    SpaceParams,
    box_iou,
    cell_mask,
    generate_category_space,
    generate_scene,
    read_records,
    write_records,
)
from viplab.prompt_encoder import BoxSpec


def test_space_is_deterministic():
    a = generate_category_space(12, 32, 4, seed=7)
    b = generate_category_space(12, 32, 4, seed=7)
    assert np.array_equal(a.text_embeds, b.text_embeds)
    assert np.array_equal(a.visual_prototypes, b.visual_prototypes)
    assert np.array_equal(a.appearance_modes, b.appearance_modes)


def test_space_text_rows_are_unit():
    s = generate_category_space(12, 32, 4, seed=0)
    np.testing.assert_allclose(np.linalg.norm(s.text_embeds, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_group_separation_holds(seed):
    s = generate_category_space(6, 16, 3, seed=seed)
    lo, hi = s.group_separation()
    assert lo > hi


def test_groups_equal_k_is_vacuous():
    s = generate_category_space(5, 8, 5, seed=0)
    assert len(set(s.hierarchy)) == 5
    lo, hi = s.group_separation()
    assert lo == np.inf


def test_visual_prototypes_related_but_not_identical():
    s = generate_category_space(12, 32, 4, seed=0)
    assert not np.allclose(s.visual_prototypes, s.text_embeds)
    # the rotation keeps the relational structure close to the text one
    tv = np.corrcoef((s.text_embeds @ s.text_embeds.T).ravel(),
                     (s.visual_prototypes @ s.visual_prototypes.T).ravel())[0, 1]
    assert tv > 0.8


def test_nuisance_basis_orthogonal_to_prototypes():
    s = generate_category_space(12, 32, 4, seed=0)
    assert s.nuisance_basis.shape == (20, 32)
    np.testing.assert_allclose(s.nuisance_basis @ s.visual_prototypes.T, 0.0, atol=1e-10)
    np.testing.assert_allclose(s.appearance_modes.mean(axis=1), s.visual_prototypes, atol=1e-12)


def test_space_argument_errors():
    with pytest.raises(ValueError):
        generate_category_space(3, 32, 4, seed=0)
    with pytest.raises(ValueError):
        generate_category_space(1, 32, 1, seed=0)
    with pytest.raises(ValueError):
        generate_category_space(4, 4, 1, seed=0)


def test_noiseless_region_equals_prototype():
    s = generate_category_space(6, 16, 3, seed=1, params=SpaceParams(modes=0))
    params = SceneParams(sigma_inst=0.0, sigma_scene=0.0)
    scene = generate_scene(s, 4, params, seed=3)
    for box, cat in scene.instances[-1:]:  # the last one is never overwritten
        cells = scene.grid[cell_mask(box, params.grid)]
        np.testing.assert_allclose(cells, np.broadcast_to(s.visual_prototypes[cat], cells.shape))


def test_scene_determinism_and_iou_cap():
    s = generate_category_space(12, 32, 4, seed=0)
    a, b = generate_scene(s, 5, seed=11), generate_scene(s, 5, seed=11)
    assert np.array_equal(a.grid, b.grid) and a.instances == b.instances
    for seed in range(200):
        inst = generate_scene(s, 5, seed=seed).instances
        assert len(inst) >= 1
        for i in range(len(inst)):
            for j in range(i):
                assert box_iou(inst[i][0], inst[j][0]) <= 0.3 + 1e-12


def test_scene_argument_error():
    with pytest.raises(ValueError):
        generate_scene(generate_category_space(6, 16, 3, 0), 0)


def test_crowded_scene_drops_instances():
    s = generate_category_space(6, 16, 3, seed=0)
    params = SceneParams(min_size=0.9, max_size=0.95, max_categories=3)
    scene = generate_scene(s, 5, params, seed=0)
    assert 1 <= len(scene.instances) < 5


def test_box_iou_hand_values():
    assert box_iou(BoxSpec(0.5, 0.5, 0.2, 0.2), BoxSpec(0.5, 0.5, 0.2, 0.2)) == pytest.approx(1.0)
    assert box_iou(BoxSpec(0.3, 0.5, 0.2, 0.2), BoxSpec(0.4, 0.5, 0.2, 0.2)) == pytest.approx(1 / 3)
    assert box_iou(BoxSpec(0.2, 0.2, 0.1, 0.1), BoxSpec(0.8, 0.8, 0.1, 0.1)) == 0.0


def test_corpus_round_trip(tmp_path):
    spec = CorpusSpec(K=6, D=16, groups=3, space_seed=2, scene_seeds=[1, 2, 3])
    spec.save(tmp_path / "c.json")
    back = CorpusSpec.load(tmp_path / "c.json")
    assert back == spec
    a, b = spec.build_scenes(), back.build_scenes()
    assert all(np.array_equal(x.grid, y.grid) for x, y in zip(a, b))


def test_records_round_trip(tmp_path):
    rows = [(0, 3, BoxSpec(0.3, 0.4, 0.2, 0.1)), (1, 0, BoxSpec(0.123456789012345, 0.5, 0.3, 0.3), 0.75)]
    write_records(tmp_path / "r.csv", rows)
    assert read_records(tmp_path / "r.csv") == rows
    (tmp_path / "bad.csv").write_text("0,1,0.5\n")
    with pytest.raises(ValueError, match="line 1"):
        read_records(tmp_path / "bad.csv")
