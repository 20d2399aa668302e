import json
import os

import numpy as np
import pytest

from ddro import bench, cli, sddip
from ddro.bench import (ExperimentSpec, enumerate_two_stage,
                        exact_multistage_value, make_pattern_instance,
                        run_experiment, solve_didr, spec_from_json)
from ddro.model import (from_json, generate_instance, load_instance,
                        replace_fields, save_instance, to_json, zero_lambda)


def permute_facilities(inst, perm):
    perm = np.asarray(perm)
    return replace_fields(
        inst,
        facility_xy=inst.facility_xy[perm],
        c=inst.c[perm, :],
        f=inst.f[:, perm],
        h=inst.h[:, perm],
        lambda_mu=inst.lambda_mu[:, perm],
        lambda_S=inst.lambda_S[:, perm],
        lambda_cov=inst.lambda_cov[perm],
    )


def test_enumeration_matches_exact_recursion():
    inst = generate_instance(44, 2, 3, 1, 5, 0.8)
    res = enumerate_two_stage(inst, 1)
    exact = exact_multistage_value(inst, 1)
    assert abs(res.objective - exact) <= 1e-7 * max(1.0, abs(exact))


def test_oracle_symmetry_under_relabeling():
    inst = generate_instance(15, 2, 3, 1, 6, 0.8)
    perm = [2, 0, 1]
    res = enumerate_two_stage(inst, 1)
    res_p = enumerate_two_stage(permute_facilities(inst, perm), 1)
    assert abs(res.objective - res_p.objective) <= 1e-7 * max(1.0, abs(res.objective))
    values = sorted(round(r.value, 6) for r in res.rows if r.value is not None)
    values_p = sorted(round(r.value, 6) for r in res_p.rows if r.value is not None)
    assert values == values_p


def test_single_candidate_when_budget_zero():
    inst = generate_instance(15, 2, 3, 1, 5, 0.8, budget=0.0)
    res = enumerate_two_stage(inst, 1)
    assert len(res.rows) == 1
    assert res.rows[0].x1 == (0, 0, 0)


def test_didr_reduction_identical_reports():
    inst = generate_instance(9, 2, 3, 1, 6, 0.8)
    zeroed = zero_lambda(inst)
    cfg = sddip.SddipConfig(max_iters=10, seed=5)
    direct = sddip.run(zeroed, 1, cfg)
    dedicated = solve_didr(inst, 1, cfg)
    assert direct.to_json() == dedicated.to_json()


def test_pattern_instances_have_nonempty_sets():
    from ddro.ambiguity import AmbiguityType, is_nonempty
    from ddro.bench import PATTERN_SUITES, budget_feasible_states

    for ttype, suite in PATTERN_SUITES.items():
        for pat in suite:
            inst = make_pattern_instance(pat, seed=1)
            for x in budget_feasible_states(inst, 1, np.zeros(inst.I)):
                assert is_nonempty(inst, AmbiguityType(ttype), x), (pat.name, x)


def test_pattern_solutions_follow_reference():
    for pat in bench.TYPE1_PATTERNS + bench.TYPE2_PATTERNS + bench.TYPE3_PATTERNS:
        inst = make_pattern_instance(pat, seed=1)
        res = enumerate_two_stage(inst, pat.ttype)
        assert res.status == "ok"
        didr = enumerate_two_stage(zero_lambda(inst), pat.ttype)
        assert res.objective <= didr.objective + 1e-6 * max(1.0, abs(didr.objective))
        if pat.name not in ("1-2", "2-3"):  # reference rows with ties
            assert res.best_x1 == pat.reference_x1, pat.name


def test_experiment_spec_validation():
    with pytest.raises(ValueError):
        spec_from_json('{"table": "nope", "seeds": [1]}')
    with pytest.raises(ValueError):
        spec_from_json('{"table": "support_sweep", "seeds": []}')
    with pytest.raises(ValueError):
        spec_from_json('{"table": "support_sweep", "seeds": [1], "K_grid": []}')
    with pytest.raises(ValueError):
        spec_from_json('{"table": "support_sweep", "seeds": [1], "bogus": 2}')
    spec = spec_from_json('{"table": "support_sweep", "seeds": [1, 2]}')
    assert spec.seeds == [1, 2]


def test_run_experiment_support_sweep(tmp_path):
    spec = ExperimentSpec(table="support_sweep", seeds=[1], K_grid=[4, 6],
                          J=1, max_iters=8)
    out = run_experiment(spec, str(tmp_path))
    assert out["cells"] == 2
    cells = (tmp_path / "cells.csv").read_text().splitlines()
    assert len(cells) == 3  # header + 2 cells
    plot = (tmp_path / "plotdata.csv").read_text().splitlines()
    assert plot[0] == "series,x,y"
    assert json.loads((tmp_path / "index.json").read_text())["cells"] == 2


def test_run_experiment_pattern_table(tmp_path):
    spec = ExperimentSpec(table="patterns_type1", seeds=[1], max_iters=10)
    out = run_experiment(spec, str(tmp_path))
    assert out["cells"] == 4
    text = (tmp_path / "cells.csv").read_text()
    assert "reference_obj" in text
    assert "dddr_le_didr" in text
    rows = text.splitlines()
    assert all("True" in r for r in rows[1:] if r)  # dddr <= didr on every row


def test_cli_gen_deterministic(tmp_path):
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    argv = ["gen", "--seed", "7", "--T", "2", "--I", "3", "--J", "1", "--out"]
    assert cli.main(argv + [str(a)]) == 0
    assert cli.main(argv + [str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_solve_then_enum_agree(tmp_path):
    inst_path = tmp_path / "inst.json"
    assert cli.main(["gen", "--seed", "7", "--T", "2", "--I", "3", "--J", "1",
                     "--K", "6", "--out", str(inst_path)]) == 0
    prefix = str(tmp_path / "run")
    assert cli.main(["solve", "--instance", str(inst_path), "--type", "1",
                     "--out-prefix", prefix]) == 0
    enum_out = tmp_path / "enum.json"
    assert cli.main(["enum", "--instance", str(inst_path), "--type", "1",
                     "--out", str(enum_out)]) == 0
    rep = json.loads(open(prefix + ".json").read())
    enum_doc = json.loads(enum_out.read_text())
    lb = rep["lb_per_iter"][-1]
    assert abs(lb - enum_doc["objective"]) <= 1e-6 * max(1.0, abs(lb))
    csv_lines = open(prefix + ".csv").read().splitlines()
    assert csv_lines[0] == "iter,lb,ub,gap,seconds"


def test_cli_type3_bounds_and_verify(tmp_path):
    inst = make_pattern_instance(bench.TYPE3_PATTERNS[0], seed=2)
    inst_path = tmp_path / "t3.json"
    save_instance(inst, inst_path)
    lb_prefix = str(tmp_path / "lb")
    ub_prefix = str(tmp_path / "ub")
    assert cli.main(["solve", "--instance", str(inst_path), "--type", "3",
                     "--bound", "lb", "--max-iters", "10",
                     "--out-prefix", lb_prefix]) == 0
    assert cli.main(["solve", "--instance", str(inst_path), "--type", "3",
                     "--bound", "ub", "--max-iters", "10",
                     "--out-prefix", ub_prefix]) == 0
    assert cli.main(["verify", "--lb-report", lb_prefix + ".json",
                     "--ub-report", ub_prefix + ".json"]) == 0


def test_cli_exit_codes(tmp_path):
    # validation error: missing file
    assert cli.main(["solve", "--instance", str(tmp_path / "nope.json"),
                     "--type", "1"]) == 1
    # validation error: bad arguments
    assert cli.main(["solve", "--type", "1"]) == 1
    # unbounded: empty ambiguity set
    inst = generate_instance(7, 2, 3, 1, 4, 0.8)
    from ddro.linalg import SymMatrix
    empty = replace_fields(
        inst,
        mu_bar=np.array([10.0]), sigma_bar=np.array([1.0]),
        eps_mu=np.array([1.0]), lambda_mu=np.zeros((1, 3)),
        lambda_S=np.zeros((1, 3)), Sigma_bar=SymMatrix(np.array([[1.0]])),
        support=(np.array([[10.0]]),
                 np.array([[20.0], [21.0], [22.0], [23.0]])),
    )
    p = tmp_path / "empty.json"
    save_instance(empty, p)
    assert cli.main(["solve", "--instance", str(p), "--type", "1"]) == 3
    assert cli.main(["enum", "--instance", str(p), "--type", "1"]) == 3


def test_cli_export_lp(tmp_path):
    inst_path = tmp_path / "inst.json"
    cli.main(["gen", "--seed", "3", "--T", "2", "--I", "2", "--J", "1",
              "--K", "4", "--out", str(inst_path)])
    out = tmp_path / "model.lp"
    assert cli.main(["export-lp", "--instance", str(inst_path), "--type", "1",
                     "--stage", "1", "--out", str(out)]) == 0
    text = out.read_text()
    assert "Minimize" in text and "Binaries" in text and "End" in text
    assert "th_" in text  # continuation proxies carry layout names


def test_cli_bench_subcommand(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "table": "variance_sweep", "seeds": [1], "rho_grid": [0.8, 1.0],
        "J": 1, "max_iters": 6,
    }))
    out_dir = tmp_path / "arts"
    assert cli.main(["bench", "--spec", str(spec_path),
                     "--out-dir", str(out_dir)]) == 0
    assert (out_dir / "index.json").exists()
    # invalid spec exits 1
    bad = tmp_path / "bad.json"
    bad.write_text('{"table": "support_sweep", "seeds": []}')
    assert cli.main(["bench", "--spec", str(bad), "--out-dir", str(out_dir)]) == 1


def test_tie_breaking_lexicographic_on_pattern_12():
    pat = bench.TYPE1_PATTERNS[1]  # equal mean impacts: three-way tie
    inst = make_pattern_instance(pat, seed=1)
    res = enumerate_two_stage(inst, 1)
    vals = [r.value for r in res.rows if r.x1 != (0, 0, 0)]
    assert max(vals) - min(vals) <= 1e-6 * max(1.0, abs(vals[0]))
    assert res.best_x1 == (0, 0, 1)  # lexicographically smallest tie
    rep = sddip.run(inst, 1, sddip.SddipConfig(max_iters=15))
    assert tuple(rep.first_stage_x) == (0, 0, 1)


def test_variance_sweep_records_unbounded_cells(tmp_path):
    spec = ExperimentSpec(table="variance_sweep", seeds=[1],
                          rho_grid=[0.2, 1.0], I=2, J=8, T=3, K_grid=[10],
                          max_iters=6)
    run_experiment(spec, str(tmp_path))
    text = (tmp_path / "cells.csv").read_text()
    assert "unbounded" in text  # the low-variance cell is empty-set
    assert "ok" in text


def test_cli_risk_flags(tmp_path):
    inst_path = tmp_path / "inst.json"
    cli.main(["gen", "--seed", "7", "--T", "2", "--I", "3", "--J", "1",
              "--K", "6", "--out", str(inst_path)])
    prefix = str(tmp_path / "risky")
    code = cli.main(["solve", "--instance", str(inst_path), "--type", "1",
                     "--risk-lambda", "0.0", "--risk-alpha", "0.9",
                     "--out-prefix", prefix])
    assert code == 0
    neutral_prefix = str(tmp_path / "neutral")
    cli.main(["solve", "--instance", str(inst_path), "--type", "1",
              "--out-prefix", neutral_prefix])
    rep_r = json.loads(open(prefix + ".json").read())
    rep_n = json.loads(open(neutral_prefix + ".json").read())
    assert abs(rep_r["lb_per_iter"][-1] - rep_n["lb_per_iter"][-1]) <= 1e-8 * max(
        1.0, abs(rep_n["lb_per_iter"][-1]))


def test_cli_type3_writes_eigencut_csv(tmp_path):
    inst = make_pattern_instance(bench.TYPE3_PATTERNS[0], seed=1)
    p = tmp_path / "t3.json"
    save_instance(inst, p)
    prefix = str(tmp_path / "lbrun")
    assert cli.main(["solve", "--instance", str(p), "--type", "3",
                     "--bound", "lb", "--max-iters", "6",
                     "--out-prefix", prefix]) == 0
    lines = open(prefix + ".eigencuts.csv").read().splitlines()
    assert lines[0] == "stage,eigen_cuts"
    assert len(lines) >= 2
