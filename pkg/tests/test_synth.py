"""Synthetic arch generator: determinism, schema consistency, guard rails."""

import numpy as np
import pytest

from dentalmesh import landmarks as lm
from dentalmesh import synth
from dentalmesh.errors import GenerationError
from dentalmesh.synth import ArchSpec


def test_spec_validation():
    with pytest.raises(GenerationError):
        ArchSpec(width=15.0).validate()
    with pytest.raises(GenerationError):
        ArchSpec(depth=8.0).validate()
    with pytest.raises(GenerationError, match="jitter"):
        ArchSpec(size_jitter=0.5).validate()
    with pytest.raises(GenerationError, match="jitter"):
        ArchSpec(size_jitter=-0.1).validate()
    with pytest.raises(GenerationError, match="too coarse"):
        ArchSpec(target_cells=1000).validate()
    with pytest.raises(GenerationError, match="missing-tooth"):
        ArchSpec(missing=(0,)).validate()
    with pytest.raises(GenerationError, match="missing-tooth"):
        ArchSpec(missing=(15,)).validate()
    ArchSpec().validate()  # defaults are fine


def test_generate_is_deterministic(small_arch):
    mesh, ann = small_arch
    mesh2, ann2 = synth.generate(ArchSpec(target_cells=4500, seed=3))
    assert np.array_equal(mesh.vertices, mesh2.vertices)
    assert np.array_equal(mesh.cells, mesh2.cells)
    assert np.array_equal(ann.labels, ann2.labels)
    assert set(ann.landmarks) == set(ann2.landmarks)
    for key in ann.landmarks:
        assert np.array_equal(ann.landmarks[key], ann2.landmarks[key])


def test_different_seeds_differ():
    a, _ = synth.generate(ArchSpec(target_cells=4500, seed=3))
    b, _ = synth.generate(ArchSpec(target_cells=4500, seed=4))
    assert not np.array_equal(a.vertices, b.vertices)


def test_generated_arch_schema(small_arch):
    mesh, ann = small_arch
    # cell budget honored to within the grid quantization
    assert abs(mesh.num_cells - 4500) / 4500 < 0.1
    ann.validate(mesh.num_cells)
    present = set(np.unique(ann.labels))
    assert present == set(range(0, 15))  # gingiva plus all 14 teeth
    # every landmark tooth carries its full schema, nothing extra
    for tooth in lm.landmark_teeth():
        names = {n for (t, n) in ann.landmarks if t == tooth}
        assert names == set(lm.landmark_names(tooth))
    assert len(ann.landmarks) == 44
    assert all((t, n) for (t, n) in ann.landmarks if t in lm.landmark_teeth())


def test_landmarks_sit_on_their_tooth(small_arch):
    # each landmark should be within a couple of mm of its tooth's cells
    mesh, ann = small_arch
    bary = mesh.cell_barycenters
    for (tooth, name), pos in ann.landmarks.items():
        d = np.linalg.norm(bary[ann.labels == tooth] - pos, axis=1).min()
        assert d < 2.5, f"{lm.landmark_key(tooth, name)} is {d:.2f} mm off its tooth"


def test_missing_teeth_leave_gaps():
    mesh, ann = synth.generate(ArchSpec(target_cells=4500, seed=5, missing=(4, 11)))
    present = set(np.unique(ann.labels))
    assert 4 not in present and 11 not in present
    # their landmarks disappear too
    assert not any(t in (4, 11) for (t, _) in ann.landmarks)
    ann.validate(mesh.num_cells)


def test_teeth_stand_above_gingiva(small_arch):
    mesh, ann = small_arch
    bary = mesh.cell_barycenters
    gum = bary[ann.labels == 0, 2].mean()
    for tooth in range(1, 15):
        crown = bary[ann.labels == tooth, 2]
        assert crown.size > 30  # every tooth has a real patch of surface
        assert crown.max() > gum + 2.0


def test_default_specs_recipe():
    specs = synth.default_specs(count=12, target_cells=9000, base_seed=100)
    assert len(specs) == 12
    assert all(s.target_cells == 9000 for s in specs)
    assert [s.seed for s in specs] == list(range(100, 112))
    widths = {s.width for s in specs}
    depths = {s.depth for s in specs}
    assert len(widths) == 5 and len(depths) == 3
    for spec in specs:
        spec.validate()


def test_sharp_arch_rejected():
    # narrow and deep bends the band past the fold limit
    with pytest.raises(GenerationError, match="bends too sharply"):
        synth.generate(ArchSpec(width=22.0, depth=60.0, target_cells=4500))
