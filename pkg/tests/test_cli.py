import json
from pathlib import Path

import numpy as np
import pytest

from vppregion.cli import main
from vppregion.explorer import Atlas, construct_subregion, load_atlas, save_atlas
from vppregion.geometry import project_to_pcc
from vppregion.networks import nominal_point, save_network, six_bus, two_bus

DEMO_TRANSMISSION = Path(__file__).resolve().parents[1] / "demos" / "data" / "three_bus.json"


@pytest.fixture(scope="module")
def six_atlas(tmp_path_factory):
    d = tmp_path_factory.mktemp("six")
    out = d / "atlas.json"
    assert main(["characterize", "--network", "six-bus", "--out", str(out), "--iterations", "2",
                 "--strategy", "nominal"]) == 0
    return out


def test_characterize_writes_atlas_and_csv(six_atlas, capsys):
    atlas = load_atlas(six_atlas)
    assert len(atlas.subregions) >= 2
    assert set(atlas.cost_surfaces) == set(range(len(atlas.subregions)))
    assert six_atlas.with_suffix(".vertices.csv").exists()


def test_characterize_two_bus(tmp_path, capsys):
    out = tmp_path / "a.json"
    assert main(["characterize", "--network", "two-bus", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "iter 1:" in text and "termination: no-new-vertices" in text
    assert len(load_atlas(out).subregions) == 1


def test_usage_errors(tmp_path, capsys):
    assert main(["characterize", "--network", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "a.json")]) == 2
    assert main(["characterize", "--network", "two-bus", "--out", str(tmp_path / "a.json"),
                 "--iterations", "0"]) == 2
    assert main(["oracle", "--network", "two-bus", "--out", str(tmp_path / "g.csv"),
                 "--resolution", "0"]) == 2
    assert main(["verify", "--network", "two-bus", "--atlas", str(tmp_path / "missing.json")]) == 2
    assert main(["bogus"]) == 2
    assert main([]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    assert main(["verify", "--network", "two-bus", "--atlas", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_infeasible_anchor_is_a_domain_failure(tmp_path):
    net = tmp_path / "n.json"
    save_network(two_bus(i_max=0.005), net)
    assert main(["characterize", "--network", str(net), "--out", str(tmp_path / "a.json")]) == 1


def test_verify_passes_and_is_seeded(six_atlas, tmp_path, capsys):
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    assert main(["verify", "--network", "six-bus", "--atlas", str(six_atlas), "--samples", "30",
                 "--seed", "4", "--out", str(r1)]) == 0
    assert "overall: PASS" in capsys.readouterr().out
    main(["verify", "--network", "six-bus", "--atlas", str(six_atlas), "--samples", "30",
          "--seed", "4", "--out", str(r2)])
    assert r1.read_text() == r2.read_text()
    assert json.loads(r1.read_text())["pass"] is True


def test_verify_zero_samples_is_vacuous(six_atlas, capsys):
    assert main(["verify", "--network", "six-bus", "--atlas", str(six_atlas), "--samples", "0"]) == 0
    assert "vacuous" in capsys.readouterr().out


def test_verify_catches_a_mutated_atlas(tmp_path, capsys):
    net = two_bus(gen=((0.0, 0.2), (-0.1, 0.1)))
    path = tmp_path / "n.json"
    save_network(net, path)
    sr = construct_subregion(net, nominal_point(net))
    sr.cert.b_max = sr.cert.b_max + 0.1
    sr.polygon = project_to_pcc(sr.omega(net), offset=sr.anchor.pcc)
    bad = tmp_path / "bad.json"
    save_atlas(Atlas(net.name, [sr]), bad)
    assert main(["verify", "--network", str(path), "--atlas", str(bad), "--samples", "200"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "violating sample" in out


def test_atlas_roundtrip_is_value_identical(six_atlas, tmp_path):
    a = load_atlas(six_atlas)
    again = tmp_path / "again.json"
    save_atlas(a, again)
    assert json.loads(again.read_text()) == json.loads(six_atlas.read_text())


def test_coordinate_both_modes(six_atlas, tmp_path, capsys):
    out = tmp_path / "d.json"
    assert main(["coordinate", "--transmission", str(DEMO_TRANSMISSION), "--atlas", str(six_atlas),
                 "--mode", "both", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["gap"] <= 1e-6
    assert d["etp"]["status"] == "optimal"
    assert "gap:" in capsys.readouterr().out


def test_coordinate_infeasible_tie(six_atlas, tmp_path, capsys):
    t = json.loads(DEMO_TRANSMISSION.read_text())
    t["vpps"][0]["p_pcc"] = [50.0, None]
    path = tmp_path / "t.json"
    path.write_text(json.dumps(t))
    assert main(["coordinate", "--transmission", str(path), "--atlas", str(six_atlas)]) == 1
    assert "infeasible" in capsys.readouterr().out


def test_coordinate_usage(six_atlas, tmp_path):
    bad = tmp_path / "t.json"
    bad.write_text("[1, 2")
    assert main(["coordinate", "--transmission", str(bad), "--atlas", str(six_atlas)]) == 2
    # two atlases for a one-VPP network
    assert main(["coordinate", "--transmission", str(DEMO_TRANSMISSION), "--atlas", str(six_atlas),
                 str(six_atlas)]) == 2


def test_oracle_two_bus_and_coverage(tmp_path, capsys):
    csv = tmp_path / "g.csv"
    assert main(["oracle", "--network", "two-bus", "--out", str(csv), "--resolution", "101",
                 "--p-range", "-0.2", "0.2", "--q-range", "-0.2", "0.2"]) == 0
    assert "1 of 10201 cells" in capsys.readouterr().out
    atlas = tmp_path / "a.json"
    main(["characterize", "--network", "six-bus", "--out", str(atlas), "--iterations", "1"])
    capsys.readouterr()
    assert main(["oracle", "--network", "six-bus", "--out", str(csv), "--resolution", "9",
                 "--atlas", str(atlas)]) == 0
    line = [l for l in capsys.readouterr().out.splitlines() if l.startswith("coverage:")][0]
    assert 0.0 <= float(line.split()[1]) <= 1.0


def test_oracle_budget_refusal(tmp_path, capsys):
    assert main(["oracle", "--network", "six-bus", "--out", str(tmp_path / "g.csv"),
                 "--budget", "10"]) == 1
    assert "exceeds budget" in capsys.readouterr().err
