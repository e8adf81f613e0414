import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voxssc.errors import FormatError, InvalidArgumentError
from voxssc.grid import (Box, OccupancyGrid, Plane, SceneSpec, SemanticGrid, Sphere, VoxelGrid, decode_grid,
                         downsample_occupancy, encode_grid, generate_scene, new_grid, random_scene_spec,
                         read_grid, toy_sphere_spec, voxel_centers, write_grid)

from . import oracles


def test_new_grid_fill():
    assert np.array_equal(new_grid((2, 2, 2), 1, 0.0).data.ravel(), np.zeros(8))
    assert np.array_equal(new_grid((1, 1, 1), 3, 1.5).data.ravel(), [1.5, 1.5, 1.5])


def test_new_grid_full_scale():
    g = new_grid((256, 256, 32), 1, 0.0)
    assert g.data.size == 2_097_152


@pytest.mark.parametrize("dims", [(0, 2, 2), (2, -1, 2), (2, 2)])
def test_bad_dims_rejected(dims):
    with pytest.raises(InvalidArgumentError):
        new_grid(dims, 1)


def test_voxel_grid_rejects_nonfinite():
    data = np.zeros((2, 2, 2, 1))
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(InvalidArgumentError):
        VoxelGrid(data, 0.4)


def test_voxel_grid_rejects_bad_voxel_size():
    with pytest.raises(InvalidArgumentError):
        VoxelGrid(np.zeros((1, 1, 1, 1)), 0.0)


def test_voxel_centers_convention():
    c = voxel_centers((2, 1, 1), 0.5, (1.0, 0.0, 0.0))
    assert np.allclose(c[:, 0, 0], [[1.25, 0.25, 0.25], [1.75, 0.25, 0.25]])


def test_semantic_grid_rejects_out_of_range_label():
    with pytest.raises(InvalidArgumentError):
        SemanticGrid(np.full((1, 1, 1), 20, dtype=np.uint8), 20)
    SemanticGrid(np.full((1, 1, 1), 255, dtype=np.uint8), 20)  # ignore label is fine


def test_empty_scene():
    occ, sem, _, depth = generate_scene(SceneSpec(dims=(4, 4, 2)))
    assert occ.count() == 0
    assert np.all(sem.labels == 0)
    assert np.all(depth == 0)


def test_single_sphere_count_matches_brute_force():
    spec = toy_sphere_spec((16, 16, 8), 0.4, 3.0)
    occ, sem, _, _ = generate_scene(spec)
    sphere = spec.primitives[0]
    count = 0
    for i in range(16):
        for j in range(16):
            for k in range(8):
                c = ((i + 0.5) * 0.4, (j + 0.5) * 0.4, (k + 0.5) * 0.4)
                if sum((a - b) ** 2 for a, b in zip(c, sphere.center)) <= sphere.radius ** 2:
                    count += 1
    assert occ.count() == count
    assert set(np.unique(sem.labels)) == {0, 1}


def test_scene_is_deterministic():
    spec = random_scene_spec((8, 8, 4), 0.4, 3, seed=5)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert encode_grid(a[1]) == encode_grid(b[1])
    assert a[3].tobytes() == b[3].tobytes()


def test_later_primitives_overwrite():
    spec = SceneSpec(dims=(4, 4, 4), voxel_size=1.0,
                     primitives=(Box((0, 0, 0), (4, 4, 4), 1), Sphere((2, 2, 2), 1.0, 2)))
    _, sem, _, _ = generate_scene(spec)
    assert sem.labels[1, 1, 1] == 2 and sem.labels[0, 0, 0] == 1


def test_depth_hits_box_face():
    # a wall filling the far half; the camera sits one voxel before x=0
    spec = SceneSpec(dims=(8, 8, 8), voxel_size=1.0, primitives=(Plane(0, 4.0, 8.0, 1),), image_dims=(8, 8))
    _, _, cam, depth = generate_scene(spec)
    # the slab face x=4 is perpendicular to the optical axis, 5 units from the camera,
    # so every hit has camera depth 5; a pixel hits when its ray lands inside the 8x8 face
    for v in range(8):
        for u in range(8):
            y = 4.0 - (u + 0.5 - cam.cx) / cam.fx * 5.0
            z = 4.0 - (v + 0.5 - cam.cy) / cam.fy * 5.0
            expected = 5.0 if 0 <= y <= 8 and 0 <= z <= 8 else 0.0
            assert depth[v, u] == pytest.approx(expected, abs=1e-12)


def test_spec_dict_round_trip():
    spec = random_scene_spec((8, 8, 4), 0.4, 4, seed=2)
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_downsample_trivial():
    z = OccupancyGrid(np.zeros((4, 4, 4), dtype=np.uint8))
    assert downsample_occupancy(z, 2).count() == 0
    one = np.zeros((4, 4, 4), dtype=np.uint8)
    one[3, 0, 2] = 1
    assert downsample_occupancy(OccupancyGrid(one), 2).count() == 1


def test_downsample_block_max(rng):
    for _ in range(20):
        occ = (rng.random((8, 8, 8)) < 0.05).astype(np.uint8)
        got = downsample_occupancy(OccupancyGrid(occ), 2).data
        assert np.array_equal(got, oracles.block_max(occ, 2))


def test_downsample_requires_divisible():
    with pytest.raises(InvalidArgumentError):
        downsample_occupancy(OccupancyGrid(np.zeros((3, 4, 4), dtype=np.uint8)), 2)


# --- binary formats

def _f32_grid(rng, dims, d):
    return VoxelGrid(rng.standard_normal(dims + (d,)).astype(np.float32).astype(np.float64),
                     float(np.float64(rng.uniform(0.1, 1.0))), tuple(rng.standard_normal(3)))


def test_round_trip_all_kinds(tmp_path, rng):
    for g in (_f32_grid(rng, (3, 2, 4), 2),
              OccupancyGrid((rng.random((2, 3, 4)) < 0.5).astype(np.uint8)),
              SemanticGrid(rng.integers(0, 20, (2, 2, 3)).astype(np.uint8), 20)):
        path = tmp_path / "g.bin"
        write_grid(path, g)
        back = read_grid(path)
        assert type(back) is type(g)
        assert encode_grid(back) == encode_grid(g)


@given(st.tuples(*[st.integers(1, 5)] * 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_voxel_round_trip_property(dims, d, seed):
    g = _f32_grid(np.random.default_rng(seed), dims, d)
    back = decode_grid(encode_grid(g))
    assert np.array_equal(back.data, g.data)
    assert back.voxel_size == g.voxel_size and back.origin == g.origin


def test_header_layout():
    g = SemanticGrid(np.zeros((2, 3, 4), dtype=np.uint8), 20)
    buf = encode_grid(g)
    assert buf[:4] == b"VXL1"
    assert struct.unpack("<4I", buf[4:20]) == (2, 3, 4, 20)
    assert len(buf) == 20 + 24


def test_wrong_magic():
    buf = bytearray(encode_grid(OccupancyGrid(np.zeros((1, 1, 1), dtype=np.uint8))))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        decode_grid(bytes(buf))


def test_payload_mismatch_names_lengths():
    buf = encode_grid(VoxelGrid(np.zeros((2, 2, 2, 1)), 0.4))
    with pytest.raises(FormatError, match="expected 32 bytes, got 28") as exc:
        decode_grid(buf[:-4])
    assert exc.value.offset == 52 + 28


def test_truncated_header():
    with pytest.raises(FormatError, match="truncated header"):
        decode_grid(b"VXG1" + b"\0" * 10)


def test_zero_dim_header():
    buf = b"VXO1" + struct.pack("<3I", 0, 1, 1)
    with pytest.raises(FormatError, match="zero dimension"):
        decode_grid(buf)


def test_invalid_occupancy_byte():
    buf = b"VXO1" + struct.pack("<3I", 1, 1, 2) + bytes([0, 7])
    with pytest.raises(FormatError) as exc:
        decode_grid(buf)
    assert exc.value.offset == 17


def test_read_grid_kind_check(tmp_path):
    p = tmp_path / "o.vxo"
    write_grid(p, OccupancyGrid(np.zeros((1, 1, 1), dtype=np.uint8)))
    with pytest.raises(FormatError):
        read_grid(p, VoxelGrid)
