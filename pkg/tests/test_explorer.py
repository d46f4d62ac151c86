import numpy as np
import pytest

from vppregion.explorer import (TERMINATIONS, AnchorError, ExploreConfig, OutsideRegionError,
                                construct_subregion, explore, export_vertices_csv, load_atlas,
                                sample_soundness, save_atlas, select_start_points, verify_point)
from vppregion.geometry import PccPolygon
from vppregion.netmodel import newton_solve
from vppregion.networks import network_from_dict, network_to_dict, nominal_point, six_bus, two_bus

from test_netmodel import TWO_BUS_P, TWO_BUS_Q


def der_two_bus():
    return two_bus(gen=((0.0, 0.2), (-0.1, 0.1)))


@pytest.fixture(scope="module")
def der_region():
    net = der_two_bus()
    return net, construct_subregion(net, nominal_point(net))


def test_fixed_load_two_bus_starts_collapse_to_one_point():
    net = two_bus()
    starts = select_start_points(net, "extremes")
    assert len(starts) == 1
    assert starts[0].pcc == pytest.approx([TWO_BUS_P, TWO_BUS_Q], abs=1e-7)


def test_fixed_load_two_bus_is_a_point_region():
    atlas = explore(two_bus(), ExploreConfig(max_iterations=100, max_subregions=1000,
                                             max_points=10_000))
    assert len(atlas.subregions) == 1
    sr = atlas.subregions[0]
    assert sr.degenerate and sr.polygon.area == 0.0
    assert atlas.termination == "no-new-vertices" and atlas.iterations == 2
    assert verify_point(two_bus(), sr, sr.anchor.pcc).passed


def test_der_start_points():
    net = two_bus(gen=((0.0, 0.2), (0.0, 0.0)))
    starts = select_start_points(net, "extremes", margin=0.0)
    p = sorted(s.pcc[0] for s in starts)
    assert p[-1] == pytest.approx(TWO_BUS_P, abs=1e-6)
    # 0.2 export against a 0.1 load, plus the line losses
    assert p[0] == pytest.approx(-0.099, abs=2e-3)


def test_limit_violating_fixed_load_has_no_start():
    net = two_bus(i_max=0.005)
    with pytest.raises(AnchorError):
        select_start_points(net, "nominal")
    with pytest.raises(AnchorError):
        construct_subregion(net, newton_solve(net, net.u_nominal).point)


def test_der_region_has_area_and_verifies(der_region):
    net, sr = der_region
    assert not sr.degenerate and sr.polygon.area > 0
    assert sr.polygon.contains(sr.anchor.pcc)
    ok, total, fails = sample_soundness(net, sr, 50, np.random.default_rng(0))
    assert total >= 45 and ok == total, fails


def test_vertices_verify(der_region):
    net, sr = der_region
    for v in sr.polygon.vertices:
        assert verify_point(net, sr, v).passed


def test_outside_point_is_rejected(der_region):
    net, sr = der_region
    far = sr.polygon.vertices.max(axis=0) + 1.0
    with pytest.raises(OutsideRegionError):
        verify_point(net, sr, far)


def test_mutated_certificate_is_caught(der_region):
    """Loosening the certified image bounds lets unsafe points through, and verification sees it."""
    net, sr = der_region
    d = sr.to_dict()
    bmax = np.asarray(d["cert"]["b_max"]) + 0.1
    d["cert"]["b_max"] = bmax.tolist()
    from vppregion.explorer import SubRegion
    from vppregion.geometry import project_to_pcc
    bad = SubRegion.from_dict(d)
    bad.polygon = project_to_pcc(bad.omega(net), offset=bad.anchor.pcc)
    assert bad.polygon.area > sr.polygon.area
    ok, total, fails = sample_soundness(net, bad, 200, np.random.default_rng(1))
    assert fails


def test_max_subregions_cap():
    atlas = explore(six_bus(), ExploreConfig(max_subregions=1))
    assert len(atlas.subregions) == 1 and atlas.termination == "max-subregions"


def test_exploration_on_six_bus(tmp_path):
    net = six_bus()
    lines = []
    atlas = explore(net, ExploreConfig(max_iterations=2), progress=lines.append)
    assert atlas.termination in TERMINATIONS
    assert lines[0].startswith("iter 1:") and len(lines) == atlas.iterations
    assert len(atlas.subregions) >= 2
    for sr in atlas.subregions:
        assert sr.polygon.contains(sr.anchor.pcc)
    path = tmp_path / "a.json"
    save_atlas(atlas, path)
    back = load_atlas(path)
    assert len(back.subregions) == len(atlas.subregions)
    for a, b in zip(atlas.subregions, back.subregions):
        assert np.array_equal(a.polygon.vertices, b.polygon.vertices)
        assert np.array_equal(a.cert.b_max, b.cert.b_max)
        p = a.polygon.vertices.mean(axis=0)
        assert verify_point(net, b, p).passed
    csv = tmp_path / "v.csv"
    export_vertices_csv(atlas, csv)
    rows = csv.read_text().splitlines()
    assert rows[0] == "subregion,vertex,p_pcc,q_pcc"
    assert len(rows) == 1 + sum(len(s.polygon.vertices) for s in atlas.subregions)


def test_exploration_is_deterministic():
    a = explore(six_bus(), ExploreConfig(max_iterations=2))
    b = explore(six_bus(), ExploreConfig(max_iterations=2))
    assert len(a.subregions) == len(b.subregions)
    for x, y in zip(a.subregions, b.subregions):
        assert np.array_equal(x.polygon.vertices, y.polygon.vertices)


def test_anchor_at_voltage_bound_still_contains_anchor():
    net = six_bus()
    a = nominal_point(net)
    d = network_to_dict(net)
    d["nodes"][3]["v_max"] = float(a.V[3])
    tight = network_from_dict(d)
    sr = construct_subregion(tight, a)
    assert sr.polygon.contains(sr.anchor.pcc)
    assert isinstance(sr.polygon, PccPolygon)
