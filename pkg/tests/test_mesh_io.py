import math
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from porous_city import mesh as M

from conftest import ALL_WALL

REF_TRI = M.build_mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [0, 0, 0])


def test_reference_triangle_area_and_gradients():
    assert REF_TRI.areas[0] == pytest.approx(0.5, abs=1e-15)
    g = REF_TRI.grads[0]
    np.testing.assert_allclose(g, [[-1, -1], [1, 0], [0, 1]], atol=1e-15)


def test_gradients_sum_to_zero_and_barycentrics_are_nodal(unit_square):
    m = unit_square
    np.testing.assert_allclose(m.grads.sum(axis=1), 0.0, atol=1e-12)
    # λ_i(x) = λ_i(x_0) + ∇λ_i·(x - x_0) with λ_i(x_0) = δ_i0
    for k in range(0, m.n_triangles, 7):
        p = m.nodes[m.triangles[k]]
        lam = np.eye(3)[0] + (p - p[0]) @ m.grads[k].T
        np.testing.assert_allclose(lam, np.eye(3), atol=1e-12)


def test_clockwise_triangle_is_flipped():
    m = M.build_mesh([[0, 0], [1, 0], [0, 1]], [[0, 2, 1]], [[0, 1], [1, 2], [2, 0]], [0, 0, 0])
    assert m.areas[0] == pytest.approx(0.5)
    x = m.nodes[m.triangles[0]]
    d1, d2 = x[1] - x[0], x[2] - x[0]
    assert d1[0] * d2[1] - d1[1] * d2[0] > 0


def test_build_mesh_errors():
    nodes = [[0, 0], [1, 0], [0, 1]]
    with pytest.raises(M.DanglingNodeReference):
        M.build_mesh(nodes, [[0, 1, 5]], [], [])
    with pytest.raises(M.OrphanNode):
        M.build_mesh(nodes + [[2, 2]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [0, 0, 0])
    with pytest.raises(M.NonPositiveArea):
        M.build_mesh([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [0, 0, 0])
    with pytest.raises(M.UntaggedBoundaryEdge):
        M.build_mesh(nodes, [[0, 1, 2]], [[0, 1], [1, 2]], [0, 0])
    with pytest.raises(M.ConflictingBoundaryTag):
        M.build_mesh(nodes, [[0, 1, 2]], [[0, 1], [1, 0], [1, 2], [2, 0]], [0, 1, 0, 0])


def test_boundary_normals_unit_and_outward(unit_square):
    m = unit_square
    n = m.edge_normals
    np.testing.assert_allclose(np.hypot(n[:, 0], n[:, 1]), 1.0, atol=1e-12)
    mid = 0.5 * (m.nodes[m.boundary_edges[:, 0]] + m.nodes[m.boundary_edges[:, 1]])
    # the adjacent triangle centroid lies on the inner side
    assert np.all(np.einsum("kd,kd->k", n, mid - np.array([0.5, 0.5])) > 0)


def test_tags_partition_the_boundary():
    m = M.rectangle_mesh(4, 1, 8, 2, side_tags={"left": "inlet", "right": "outlet"})
    counts = m.tag_counts()
    assert sum(counts.values()) == len(m.boundary_edges)
    assert counts["inlet"] == 2 and counts["outlet"] == 2 and counts["wall"] == 16
    perim = sum(m.edge_lengths[m.tag_edges(t)].sum() for t in counts)
    assert perim == pytest.approx(10.0, rel=1e-12)
    with pytest.raises(M.UnknownTag):
        m.tag_edges("exhaust")


def test_zone_map_full_and_half():
    m = M.rectangle_mesh(1, 1, 8, side_tags=ALL_WALL)
    full = M.build_zone_map(m, [("urban", [[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]])])
    assert full.zones[full.rural].triangles.size == 0
    half = M.build_zone_map(m, [("urban", [[0, 0], [0.5, 0], [0.5, 1], [0, 1], [0, 0]])])
    tri_area = m.areas.max()
    assert abs(half.zones[half.urban].area - 0.5) <= tri_area
    assert half.zones[half.urban].area + half.zones[half.rural].area == pytest.approx(1.0, rel=1e-12)


def test_zone_map_errors(unit_square):
    with pytest.raises(M.OpenPolygon):
        M.build_zone_map(unit_square, [("urban", [[0, 0], [1, 0], [1, 1]])])
    with pytest.raises(M.ZoneOutsideDomain):
        M.build_zone_map(unit_square, [("urban", [[0, 0], [2, 0], [2, 2], [0, 0]])])
    with pytest.raises(M.ZoneOutsideDomain):
        M.build_zone_map(unit_square, [("park", [[0, 0], [1, 0], [1, 1], [0, 0]])])


def test_synthetic_city_zones(cfg):
    m, zones = M.synthetic_city_mesh(cfg.geometry())
    assert len(zones.zones) == 7
    areas = [z.area for z in zones.zones]
    assert math.fsum(areas) == pytest.approx(m.total_area, rel=1e-12)
    for z in zones.zones:
        assert z.area == pytest.approx(float(m.areas[z.triangles].sum()), rel=1e-12)
    assigned = np.concatenate([z.triangles for z in zones.zones])
    assert np.array_equal(np.sort(assigned), np.arange(m.n_triangles))
    # rectangle minus the three disc holes
    holes = sum(math.pi * r * r for (_, _, r) in cfg.geometry().obstacles)
    assert m.total_area == pytest.approx(40 * 30 - holes, rel=0.02)


def test_rectangle_city_perimeter_and_refinement():
    g = M.CityGeometry(h=2.0)
    m, _ = M.synthetic_city_mesh(g)
    counts = m.tag_counts()
    assert counts["wall"] == 0
    perim = sum(m.edge_lengths[m.tag_edges(t)].sum() for t in counts)
    assert perim == pytest.approx(140.0, rel=1e-12)
    m2, _ = M.synthetic_city_mesh(M.CityGeometry(h=1.0))
    assert 0.75 * 4 <= m2.n_triangles / m.n_triangles <= 1.25 * 4


def test_obstacle_wall_loop_closes():
    m, _ = M.synthetic_city_mesh(M.CityGeometry(h=1.0, obstacles=((10.0, 10.0, 2.0),)))
    walls = m.tag_edges("wall")
    assert len(walls) > 0
    assert abs(M.turning_angle(m, walls)) == pytest.approx(2 * math.pi, abs=1e-9)


def test_degenerate_geometry():
    with pytest.raises(M.DegenerateGeometry):
        M.synthetic_city_mesh(M.CityGeometry(h=1.0, obstacles=((0.5, 10.0, 2.0),)))
    with pytest.raises(M.DegenerateGeometry):
        M.synthetic_city_mesh(M.CityGeometry(h=0.0))


@pytest.mark.parametrize("version", ["2.2", "4.1"])
def test_msh_round_trip(cfg, version):
    m, _ = M.synthetic_city_mesh(M.CityGeometry(h=3.0, obstacles=((10.0, 10.0, 2.0),),
                                                selected=(("park", 20.0, 15.0, 3.0),)))
    text = M.write_msh(m, version)
    back = M.parse_msh(text)
    assert back.n_nodes == m.n_nodes and back.n_triangles == m.n_triangles
    np.testing.assert_array_equal(back.nodes, m.nodes)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    assert back.tag_counts() == m.tag_counts()
    assert back.zone_names == m.zone_names
    np.testing.assert_array_equal(back.triangle_zone, m.triangle_zone)
    # a second pass is byte-stable
    assert M.write_msh(back, version) == text


def test_msh_errors():
    with pytest.raises(M.MalformedHeader):
        M.parse_msh("$Nodes\n0\n$EndNodes\n")
    with pytest.raises(M.MalformedHeader):
        M.parse_msh("$MeshFormat\n2.2 0 8\n")
    with pytest.raises(M.UnsupportedVersion):
        M.parse_msh("$MeshFormat\n3.0 0 8\n$EndMeshFormat\n$Nodes\n0\n$EndNodes\n$Elements\n0\n$EndElements\n")
    with pytest.raises(M.UnsupportedVersion):
        M.parse_msh("$MeshFormat\n4.1 1 8\n$EndMeshFormat\n")
    bad_group = M.write_msh(REF_TRI, "2.2").replace('"bnd:inlet"', '"edge:inlet"')
    with pytest.raises(M.UnknownPhysicalGroup):
        M.parse_msh(bad_group)


def test_msh_declared_counts_checked():
    text = M.write_msh(REF_TRI, "2.2").replace("$Nodes\n3\n", "$Nodes\n4\n")
    with pytest.raises(M.MeshError):
        M.parse_msh(text)


def test_identity_is_content_hash(unit_square):
    other = M.rectangle_mesh(1.0, 1.0, 8, side_tags=ALL_WALL)
    assert other.identity == unit_square.identity
    assert M.rectangle_mesh(1.0, 1.0, 9).identity != unit_square.identity


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.floats(0.1, 10), st.floats(0.1, 10))
def test_rectangle_area_property(nx, ny, w, h):
    m = M.rectangle_mesh(w, h, nx, ny)
    assert m.total_area == pytest.approx(w * h, rel=1e-12)
    assert np.all(m.areas > 0)
    assert m.n_triangles == 2 * nx * ny


REFERENCE_MESH_DIR = os.environ.get("POROUS_CITY_REFERENCE_MESHES")


@pytest.mark.skipif(not REFERENCE_MESH_DIR, reason="POROUS_CITY_REFERENCE_MESHES not set")
@pytest.mark.parametrize("name,nodes,tris", [("traffic.msh", 9232, 17893), ("transport.msh", 9363, 18258)])
def test_reference_city_meshes(name, nodes, tris):
    m = M.read_msh(Path(REFERENCE_MESH_DIR) / name)
    assert (m.n_nodes, m.n_triangles) == (nodes, tris)
