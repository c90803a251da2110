import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from gppi.errors import ConfigError
from gppi.experiments import cli
from gppi.experiments.config import config_from_dict, load_config, parse_config
from gppi.experiments.observations import choose_nodes, make_rng, synthesize_observations, uniform_points
from gppi.experiments.presets import PRESETS
from gppi.experiments.runner import build_experiment, compare_methods, report_dict, run_experiment, run_method

GOLDEN = Path(__file__).parent / "golden" / "presets.yaml"

# small stationary problem that both methods solve in well under a second
SMALL = """\
preset: mfg_stationary_forward
domain: {n: 50}
controls: {max_iter: 60, tol: 1.0e-7}
"""


def small_cfg(**over):
    cfg = parse_config(SMALL)
    return cfg.replace(**over) if over else cfg


# ---- config ----

def test_every_preset_parses():
    for name in PRESETS:
        cfg = load_config(None, name)
        assert cfg.problem == name
        assert cfg.method == "both"


def _leaves(tree, prefix=""):
    for k, v in tree.items():
        path = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            yield from _leaves(v, path)
        else:
            yield path, v


def test_presets_match_golden_file():
    golden = yaml.safe_load(GOLDEN.read_text())
    assert set(golden) == set(PRESETS)
    for name, tree in golden.items():
        cfg = load_config(None, name).to_dict()
        for path, want in _leaves(tree):
            got = cfg
            for key in path.split("."):
                got = got[key]
            if isinstance(want, list):
                want = [float(w) for w in want]
            assert got == want, (name, path)


def test_golden_derived_constants():
    golden = yaml.safe_load(GOLDEN.read_text())
    eq = golden["hjb_inverse"]["equation"]
    assert eq["sigma"] == math.sqrt(0.1)
    assert eq["R"] == 0.4 ** 1.5
    assert golden["mfg_timedep_inverse"]["equation"]["nu"] == 1 / 3


def test_override_merges_onto_preset():
    cfg = parse_config("preset: mfg_stationary_inverse_1d\nseed: 3\nobservations:\n  v: {count: 20}\n")
    assert cfg.seed == 3
    assert cfg.section("observations")["v"] == {"count": 20, "gamma": 1e-3}
    assert cfg.section("observations")["m"]["count"] == 3


@pytest.mark.parametrize("text, field, line", [
    ("preset: mfg_stationary_forward\nbogus: 1\n", "bogus", 2),
    ("preset: nope\n", "preset", 1),
    ("preset: mfg_stationary_forward\ndomain:\n  n: 30\n  nx: 4\n", "domain.nx", 4),
    ("preset: mfg_stationary_forward\nequation:\n  nu: fast\n", "equation.nu", 3),
    ("preset: mfg_stationary_forward\ncontrols:\n  max_iter: 2.5\n", "controls.max_iter", 3),
    ("preset: mfg_stationary_forward\nequation:\n  nu: -1\n", "equation.nu", 3),
    ("preset: hjb_inverse\nmethod: fastest\n", "method", 2),
    ("preset: hjb_inverse\nkernels:\n  u: {family: matern, lengthscales: [1]}\n", "kernels.u.family", 3),
    ("preset: hjb_inverse\nobservations:\n  u: {count: -2}\n", "observations.u.count", 3),
    ("problem: custom\n", "solver", 1),
])
def test_config_errors_name_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field
    assert info.value.line == line
    assert f"[field {field}]" in str(info.value)


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigError) as info:
        parse_config("preset: hjb_inverse\ndomain: {nx: 4\nseed: 1\n")
    assert info.value.line is not None


def test_bad_expression_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"preset": "mfg_stationary_forward",
                          "equation": {"V": "__import__('os')"}}).expression("V")


def test_method_alias():
    assert config_from_dict({"preset": "hjb_inverse", "method": "as_newton"}).method == "as"


def test_custom_problem_starts_from_solver_base():
    cfg = config_from_dict({"problem": "custom", "solver": "hjb", "domain": {"nx": 10}})
    assert cfg.solver == "hjb" and cfg.problem == "custom"
    assert cfg.section("domain")["nx"] == 10
    assert cfg.section("domain")["nt"] == 22


# ---- observations ----

def test_noiseless_observations_exact():
    pts = np.linspace(0, 1, 7)[:, None]
    f = lambda p: np.sin(2 * np.pi * p[:, 0])
    obs = synthesize_observations(f, pts, 0.0, seed=4)
    assert np.array_equal(obs.values, f(pts))


def test_same_seed_same_values():
    pts = np.random.default_rng(0).uniform(size=(12, 2))
    f = lambda p: p[:, 0] * p[:, 1]
    a = synthesize_observations(f, pts, 0.1, seed=9)
    b = synthesize_observations(f, pts, 0.1, seed=9)
    c = synthesize_observations(f, pts, 0.1, seed=10)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_noise_standard_deviation():
    n = 100_000
    obs = synthesize_observations(np.zeros(n), np.zeros((n, 1)), 1e-3, seed=2)
    assert abs(obs.values.std(ddof=1) - 1e-3) < 0.02 * 1e-3
    assert abs(obs.values.mean()) < 5 * 1e-3 / math.sqrt(n)


def test_default_precision_and_validation():
    assert synthesize_observations(np.zeros(2), np.zeros((2, 1)), 1e-3).precision == pytest.approx(1e6)
    with pytest.raises(ValueError):
        synthesize_observations(np.zeros(2), np.zeros((2, 1)), -1.0)


def test_choose_nodes_without_replacement():
    idx = choose_nodes(361, 40, make_rng(5))
    assert len(set(idx.tolist())) == 40
    assert idx.min() >= 0 and idx.max() < 361
    assert np.array_equal(np.sort(choose_nodes(10, 10, 1)), np.arange(10))
    with pytest.raises(ValueError):
        choose_nodes(5, 6, 0)


def test_uniform_points_in_box():
    p = uniform_points(500, 2, -0.5, 1.0, 3)
    assert p.shape == (500, 2)
    assert p.min() >= -0.5 and p.max() < 0.5


def test_pcg64_stream_is_pinned():
    # first draws of PCG64(0), fixed by numpy's stream-compatibility policy
    assert make_rng(0).standard_normal(2).tolist() == pytest.approx([0.12573022, -0.13210486], abs=1e-8)


# ---- running ----

def test_max_iter_zero_is_non_converged(tmp_path):
    reports = run_experiment(small_cfg(), method="both", out=tmp_path, write=True)
    assert reports[0].converged
    cfg = config_from_dict({"preset": "mfg_stationary_forward", "domain": {"n": 50},
                            "controls": {"max_iter": 0}})
    for r in run_experiment(cfg, out=tmp_path / "zero", write=True):
        assert not r.converged
        assert r.iterations == 0
        assert len(r.history) == 1


def test_both_methods_agree_on_small_problem():
    g, a = run_experiment(small_cfg(), write=False)
    assert g.method == "gppi" and a.method == "as"
    assert g.converged and a.converged
    assert abs(g.lam - a.lam) < 1e-5
    assert a.iterations < g.iterations


def test_output_files_and_headers(tmp_path):
    run_experiment(small_cfg(), out=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    for m in ("gppi", "as"):
        for suffix in ("errors.csv", "grid_m.csv", "grid_u.csv", "report.json"):
            assert f"mfg_stationary_forward_{m}_{suffix}" in names
    assert "mfg_stationary_forward_comparison.json" in names
    lines = (tmp_path / "mfg_stationary_forward_gppi_errors.csv").read_text().splitlines()
    assert lines[0] == "iteration,l2_error_m,l2_error_u,residual_norm,seconds"
    assert [int(r.split(",")[0]) for r in lines[1:]] == list(range(len(lines) - 1))
    grid = (tmp_path / "mfg_stationary_forward_as_grid_m.csv").read_text().splitlines()
    assert grid[0] == "x,value" and len(grid) == 51
    rep = json.loads((tmp_path / "mfg_stationary_forward_as_report.json").read_text())
    assert rep["method"] == "as" and rep["converged"] is True
    assert rep["config"]["domain"]["n"] == 50


def test_grid_dumps_reproducible(tmp_path):
    run_experiment(small_cfg(seed=7), out=tmp_path / "a")
    run_experiment(small_cfg(seed=7), out=tmp_path / "b")
    for f in sorted((tmp_path / "a").glob("*_grid_*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    # the error curves agree except for the wall-clock column
    for f in sorted((tmp_path / "a").glob("*_errors.csv")):
        strip = lambda p: [r.rsplit(",", 1)[0] for r in p.read_text().splitlines()]
        assert strip(f) == strip(tmp_path / "b" / f.name)


def test_inverse_data_depends_on_seed_only():
    base = {"preset": "mfg_stationary_inverse_1d", "domain": {"n": 30}}
    e1 = build_experiment(config_from_dict({**base, "seed": 1}))
    e2 = build_experiment(config_from_dict({**base, "seed": 1}))
    e3 = build_experiment(config_from_dict({**base, "seed": 2}))
    s1, s2, s3 = e1.solver_config, e2.solver_config, e3.solver_config
    assert np.array_equal(s1.obs_m.values, s2.obs_m.values)
    assert np.array_equal(s1.obs_v.points, s2.obs_v.points)
    assert not np.array_equal(s1.obs_v.points, s3.obs_v.points)
    assert s1.obs_m.size == 3 and s1.obs_v.size == 10


def test_hjb_seed_change_smoke():
    reps = []
    for seed in (0, 1):
        cfg = config_from_dict({"preset": "hjb_inverse", "seed": seed})
        reps.append(run_method(build_experiment(cfg), "gppi"))
    a, b = reps
    assert a.converged == b.converged
    ea, eb = a.history[-1].l2_error_u, b.history[-1].l2_error_u
    assert max(ea, eb) < 2 * min(ea, eb)


# ---- comparison ----

def test_compare_identical_reports():
    g, _ = run_experiment(small_cfg(), write=False)
    d = report_dict(g)
    c = compare_methods(d, d)
    assert c["delta_lambda"] == 0.0
    assert c["final_error_ratio"] == c["iteration_ratio"] == c["runtime_ratio"] == 1.0


def test_compare_mismatched_problems():
    a = {"problem": "hjb_inverse", "method": "gppi"}
    b = {"problem": "mfg_stationary_forward", "method": "as"}
    with pytest.raises(ConfigError):
        compare_methods(a, b)


# ---- CLI ----

def test_cli_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    out = capsys.readouterr().out
    for name in PRESETS:
        assert name in out


def test_cli_exit_codes(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text(SMALL)
    assert cli.main(["run", str(good), "--out", str(tmp_path / "o1")]) == 0
    short = tmp_path / "short.yaml"
    short.write_text(SMALL.replace("max_iter: 60", "max_iter: 1"))
    assert cli.main(["run", str(short), "--method", "gppi", "--out", str(tmp_path / "o2")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: mfg_stationary_forward\ndomain:\n  n: many\n")
    assert cli.main(["run", str(bad)]) == 1
    assert "line 3" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert cli.main(["run"]) == 1


def test_cli_compare(tmp_path, capsys):
    good = tmp_path / "good.yaml"
    good.write_text(SMALL)
    assert cli.main(["run", str(good), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    a = tmp_path / "mfg_stationary_forward_gppi_report.json"
    b = tmp_path / "mfg_stationary_forward_as_report.json"
    assert cli.main(["compare", str(a), str(b)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["methods"] == ["gppi", "as"]
    assert out["iteration_ratio"] < 1
