import numpy as np
import pytest
from scipy import ndimage

from wavetomo.errors import StructuralError
from wavetomo.grid import Grid2D
from wavetomo.phantom import (DEFAULT_TABLE, PhantomSpec, Tissue, TissueTable, assign_sound_speed,
                              generate_batch, generate_phantom)

GRID = Grid2D.centered(128, 128, 1e-3)


def components(mask):
    return ndimage.label(mask)[1]


def test_disc_phantom():
    g = Grid2D.centered(128, 128, 1e-3)
    ph = generate_phantom(PhantomSpec("disc", body_radius=0.05), g)
    assert set(np.unique(ph.labels)) == {Tissue.WATER, Tissue.FAT}
    X, Y = g.mesh()
    np.testing.assert_array_equal(ph.labels == Tissue.FAT, np.hypot(X, Y) <= 0.05)


@pytest.mark.parametrize("organ", ["breast", "arm", "leg"])
def test_determinism(organ):
    a = generate_phantom(PhantomSpec(organ, body_radius=0.045, seed=7), GRID)
    b = generate_phantom(PhantomSpec(organ, body_radius=0.045, seed=7), GRID)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_phantom(PhantomSpec(organ, body_radius=0.045, seed=8), GRID)
    assert np.any(a.labels != c.labels)


def test_leg_has_one_bone_enclosing_marrow():
    ph = generate_phantom(PhantomSpec("leg", body_radius=0.05, seed=3), GRID)
    cortical = ph.labels == Tissue.BONE_CORTICAL
    marrow = ph.labels == Tissue.BONE_MARROW
    assert components(cortical) == 1 and components(marrow) == 1
    # marrow is enclosed: filling the cortical ring's holes covers the marrow
    assert np.all(ndimage.binary_fill_holes(cortical)[marrow])


@pytest.mark.parametrize("organ", ["breast", "arm", "leg"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_structural_invariants(organ, seed):
    ph = generate_phantom(PhantomSpec(organ, body_radius=0.045, lesion_count=1 if organ == "breast" else 0,
                                      seed=seed), GRID)
    water = ph.labels == Tissue.WATER
    assert components(water) == 1
    assert water[0].all() and water[-1].all() and water[:, 0].all() and water[:, -1].all()
    skin = ph.labels == Tissue.SKIN
    body = ~water
    # skin closes the body: removing it disconnects the interior from water
    inside = body & ~skin
    assert not np.any(ndimage.binary_dilation(inside) & water)
    if organ == "breast":
        assert np.any(ph.labels == Tissue.GLAND) and np.any(ph.labels == Tissue.LESION_MALIGNANT)
    else:
        assert components(ph.labels == Tissue.BONE_CORTICAL) == 1
        assert np.any(ph.labels == Tissue.MUSCLE)


def test_too_large_body_rejected():
    with pytest.raises(StructuralError):
        generate_phantom(PhantomSpec("breast", body_radius=0.07), GRID)
    with pytest.raises(StructuralError):
        generate_phantom(PhantomSpec("disc", body_radius=0.07), GRID)


def test_batch_seeds():
    spec = PhantomSpec("arm", body_radius=0.04, seed=0)
    batch = generate_batch(spec, GRID, 3, base_seed=10)
    ref = generate_phantom(PhantomSpec("arm", body_radius=0.04, seed=11), GRID)
    np.testing.assert_array_equal(batch[1].labels, ref.labels)


def test_zero_halfwidth_gives_means():
    table = TissueTable({k: (v[0], 0.0) for k, v in DEFAULT_TABLE.items()})
    ph = generate_phantom(PhantomSpec("breast", body_radius=0.045, lesion_count=1, seed=2), GRID)
    c = assign_sound_speed(ph, table, seed=5)
    for t in np.unique(ph.labels):
        assert np.all(c[ph.labels == t] == table.lookup(t)[0])
    assert np.all(c[ph.labels == Tissue.LESION_MALIGNANT] == 1590.0)


def test_region_constant_perturbation():
    table = TissueTable({**DEFAULT_TABLE, "bone_cortical": (3000.0, 50.0)})
    ph = generate_phantom(PhantomSpec("arm", body_radius=0.045, seed=4), GRID)
    c = assign_sound_speed(ph, table, seed=9)
    bone = c[ph.labels == Tissue.BONE_CORTICAL]
    assert bone.min() == bone.max() and 2950 <= bone[0] <= 3050
    assert np.all(c[ph.labels == Tissue.WATER] == 1500.0)
    assert c.min() >= 1300 and c.max() <= 3500
    np.testing.assert_array_equal(c, assign_sound_speed(ph, table, seed=9))


def test_per_pixel_option():
    ph = generate_phantom(PhantomSpec("disc", body_radius=0.03), GRID)
    c = assign_sound_speed(ph, seed=1, per_pixel=True)
    fat = c[ph.labels == Tissue.FAT]
    assert fat.std() > 0 and np.all(np.abs(fat - 1450) <= 10)


def test_table_validation():
    with pytest.raises(StructuralError):
        TissueTable({"water": (1000.0, 0.0)})
    with pytest.raises(StructuralError):
        TissueTable({"water": (1500.0, 200.0)})
    with pytest.raises(StructuralError):
        TissueTable({"cartilage": (1600.0, 0.0)})
    ph = generate_phantom(PhantomSpec("disc", body_radius=0.03), GRID)
    with pytest.raises(StructuralError):
        assign_sound_speed(ph, TissueTable({"water": (1500.0, 0.0)}))


def test_spec_roundtrip():
    spec = PhantomSpec("leg", body_radius=0.05, seed=3)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
