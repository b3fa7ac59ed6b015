import csv
import io
import json

import pytest

from whslab import cli
from whslab.errors import ConfigError


def base(**over):
    cfg = {"version": 1, "manifold": {"n": 1, "grid_res": None}, "morse": {"preset": "cosine_t1"},
           "t_grid": [8, 16], "seed": 0, "samples": 3}
    cfg.update(over)
    return cfg


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.mark.parametrize("mutate,path", [
    (lambda c: c.pop("version"), "version"),
    (lambda c: c.update(version=2), "version"),
    (lambda c: c.update(bogus=1), "bogus"),
    (lambda c: c["manifold"].update(grid_res=100), "manifold.grid_res"),
    (lambda c: c["manifold"].update(grid_res=8), "manifold.grid_res"),
    (lambda c: c.update(t_grid=[16, 8]), "t_grid"),
    (lambda c: c.update(t_grid=[8, -1]), "t_grid[1]"),
    (lambda c: c.update(degrees=[0, 3]), "degrees[1]"),
    (lambda c: c.update(morse={"terms": [{"freq": [1, 2], "amp": 1.0}]}), "morse.terms[0].freq"),
    (lambda c: c.update(morse={"terms": [{"freq": [1], "amp": "x"}]}), "morse.terms[0].amp"),
    (lambda c: c.update(morse={"preset": "nope"}), "morse.preset"),
    (lambda c: c.update(tolerances={"eigen": -1}), "tolerances.eigen"),
    (lambda c: c.update(eta=0.7), "eta"),
    (lambda c: c.update(seed="0"), "seed"),
])
def test_config_errors_name_the_field(mutate, path):
    cfg = base()
    mutate(cfg)
    with pytest.raises(ConfigError) as info:
        cli.parse_config(cfg)
    assert info.value.path == path


def test_config_parses_terms():
    cfg = cli.parse_config(base(morse={"terms": [{"freq": [2], "amp": 1, "phase": 0}]}, degrees=[0]))
    assert cfg.spec.terms[0].freq == (2,) and cfg.qs == (0,)


def test_error_record_on_bad_config(tmp_path, capsys):
    code = cli.main(["critical-points", write(tmp_path, base(t_grid=[]))])
    rec = json.loads(capsys.readouterr().err)
    assert code == cli.EXIT_CONFIG
    assert rec == {"error": "ConfigError", "module": "cli", "path": "t_grid",
                   "message": "t_grid: must be non-empty and strictly ascending"}


def test_error_record_on_unreadable_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert cli.main(["all", str(p)]) == cli.EXIT_CONFIG
    assert json.loads(capsys.readouterr().err)["path"] == "$"


def test_downstream_error_provenance(tmp_path, capsys):
    # a degenerate function fails inside the critical-point census
    cfg = base(morse={"terms": [{"freq": [1], "amp": 1.0}, {"freq": [2], "amp": 0.25}]})
    code = cli.main(["critical-points", write(tmp_path, cfg), "--out", str(tmp_path / "o")])
    rec = json.loads(capsys.readouterr().err)
    assert code == cli.EXIT_FAILURE
    assert rec["error"] == "DegenerateCritical" and rec["module"] == "geometry"


def test_critical_points_t2(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["critical-points", "--preset", "product_cosine_t2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "critical_points.csv").read_text())))
    assert [r["index"] for r in rows] == ["0", "1", "1", "2"]
    assert json.loads((out / "critical_points.json").read_text())["counts"] == [1, 2, 1]


def test_morse_complex_and_integrity_gate(tmp_path, monkeypatch, capsys):
    out = tmp_path / "o"
    assert cli.main(["morse-complex", "--preset", "double_well_t1", "--out", str(out)]) == 0
    assert json.loads((out / "betti.json").read_text())["betti"] == [1, 1]
    assert (out / "incidence_0.csv").read_text().startswith("x,c0_0,c0_1\n")
    from whslab import morse
    monkeypatch.setattr(morse, "incidence", lambda orbits: 1)
    capsys.readouterr()
    code = cli.main(["morse-complex", "--preset", "product_cosine_t2", "--out", str(tmp_path / "bad")])
    rec = json.loads(capsys.readouterr().err)
    assert code == cli.EXIT_INTEGRITY and rec["error"] == "BoundarySquareNonzero" and rec["module"] == "morse"


def test_derham_check_passes(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["derham-check", write(tmp_path, base()), "--out", str(out)]) == 0
    rows = list(csv.DictReader(io.StringIO((out / "derham_checks.csv").read_text())))
    assert rows and all(r["pass"] == "1" for r in rows)
    assert {r["check"] for r in rows} >= {"adjointness", "two_path_laplacian", "int_cochain_morphism"}


def test_gap_scan_and_compare_t1(tmp_path):
    out = tmp_path / "o"
    cfg = write(tmp_path, base(t_grid=[16, 24, 32]))
    assert cli.main(["gap-scan", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "gap_summary.json").read_text())
    assert [g["count_pass"] for g in summary["gap"]] == [True, True]
    assert cli.main(["whs-compare", cfg, "--out", str(out)]) == 0
    comp = json.loads((out / "comparison_summary.json").read_text())["comparison"]
    assert all(c["first_pass"] and c["monotone"] and c["ratio_pass"] for c in comp)
    header = (out / "comparison.csv").read_text().splitlines()[0]
    assert header == ",".join(cli.comparison_csv.__globals__["ComparisonReport"].COLUMNS)


def test_all_is_byte_reproducible(tmp_path):
    cfg = write(tmp_path, base(t_grid=[16, 32]))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["all", cfg, "--out", str(a), "--degrees", "1"]) == 0
    assert cli.main(["all", cfg, "--out", str(b), "--degrees", "1"]) == 0
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir()) and "summary.json" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_example_config_is_valid(capsys):
    assert cli.main(["example-config"]) == 0
    cfg = cli.parse_config(json.loads(capsys.readouterr().out))
    assert cfg.n == 2 and cfg.t_grid == (16.0, 24.0, 32.0)
