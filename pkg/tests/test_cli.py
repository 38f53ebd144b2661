import json
import shutil

import numpy as np
import pytest

from sepme.checkpoint import load_arrays, load_increment, load_params
from sepme.cli import DEFAULT_CONFIG, load_config, main
from sepme.weight_decoupling import EraserSet

# small budgets: these tests exercise wiring and artifacts, not erasure quality
SMOKE = {
    "max_iters": 40,
    "baseline_iters": 20,
    "classifier_n": 60,
    "eval_n": 60,
    "suite_probes": 10,
    "ablate_taus": [1e9, 0.0],
}


def write_config(path, extra=None):
    cfg = dict(SMOKE)
    if extra:
        cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    cfg = write_config(out / "cfg.json")
    argv = ["--config", cfg, "--out", str(out)]
    assert main(["train-dm", *argv]) == 0
    assert main(["erase", *argv]) == 0
    assert main(["compose", *argv]) == 0
    assert main(["evaluate", *argv]) == 0
    return out, cfg


def test_train_dm_writes_model_and_echo(run_dir):
    out, _ = run_dir
    assert (out / "theta_dm.ckpt").exists()
    assert (out / "theta_dm.ckpt.meta.json").exists()
    echoed = json.loads((out / "config.json").read_text())
    assert set(echoed) == set(DEFAULT_CONFIG)
    assert echoed["max_iters"] == 40


def test_config_echo_is_itself_a_valid_config(run_dir):
    out, _ = run_dir
    loaded = load_config(str(out / "config.json"), {})
    assert loaded == json.loads((out / "config.json").read_text())


def test_erase_writes_per_concept_artifacts(run_dir):
    out, _ = run_dir
    for name in ("A", "B", "C"):
        assert (out / f"inc_{name}.ckpt").exists()
        assert (out / f"trace_{name}.csv").exists()
        report = json.loads((out / f"report_{name}.json").read_text())
        assert report["method"] == "sepme"
        assert report["concepts"] == [name]
        assert report["iters_run"] == 40


def test_evaluate_writes_csv_and_clean_metadata(run_dir):
    out, _ = run_dir
    header = (out / "eval.csv").read_text().splitlines()[0]
    assert header == "concept,acc_before,acc_after,distance,corr,delta_norm"
    meta = json.loads((out / "eval_meta.json").read_text())
    assert meta["warnings"] == []
    assert meta["edited"] == "edited_A-B-C.ckpt"


def test_classifier_seed_mismatch_warning(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = write_config(tmp_path / "cfg.json", {"classifier_seed": 1})
    assert main(["evaluate", "--config", cfg, "--out", str(copy)]) == 0
    meta = json.loads((copy / "eval_meta.json").read_text())
    assert len(meta["warnings"]) == 1
    assert "seed" in meta["warnings"][0]


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "cfg.json",
                       {"dm_steps": 300, "max_iters": 8})
    outs = []
    for sub in ("one", "two"):
        out = tmp_path / sub
        argv = ["--config", cfg, "--out", str(out)]
        assert main(["train-dm", *argv]) == 0
        assert main(["erase", *argv]) == 0
        assert main(["compose", *argv]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_evaluate_rerun_is_byte_identical(run_dir):
    out, cfg = run_dir
    before = (out / "eval.csv").read_bytes()
    assert main(["evaluate", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "eval.csv").read_bytes() == before


def test_compose_empty_subset_matches_base(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["compose", "--config", cfg, "--out", str(copy),
                 "--subset", ""]) == 0
    base, _ = load_arrays(copy / "theta_dm.ckpt")
    edited, _ = load_arrays(copy / "edited_base.ckpt")
    assert set(base) == set(edited)
    for key in base:
        assert (base[key] == edited[key]).all()


def test_compose_subset_order_is_canonical(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["compose", "--config", cfg, "--out", str(copy),
                 "--subset", "B,A"]) == 0
    first = (copy / "edited_A-B.ckpt").read_bytes()
    assert main(["compose", "--config", cfg, "--out", str(copy),
                 "--subset", "A,B"]) == 0
    assert (copy / "edited_A-B.ckpt").read_bytes() == first


def test_compose_subset_matches_library_application(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["compose", "--config", cfg, "--out", str(copy),
                 "--subset", "A,B"]) == 0
    theta, _ = load_params(out / "theta_dm.ckpt")
    eraser = EraserSet(theta)
    for name in ("A", "B", "C"):
        inc, _ = load_increment(out / f"inc_{name}.ckpt")
        eraser.add(inc)
    for subset, fname in ((["A", "B", "C"], "edited_A-B-C.ckpt"),
                          (["A", "B"], "edited_A-B.ckpt")):
        expected = eraser.apply(subset)
        edited, _ = load_params(copy / fname)
        for key, arr in expected.values.items():
            np.testing.assert_array_equal(arr, edited.values[key])


def test_evaluate_identity_edit_reports_zero_delta(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    cfg = write_config(tmp_path / "cfg.json")
    argv = ["--config", cfg, "--out", str(copy), "--subset", ""]
    assert main(["compose", *argv]) == 0
    assert main(["evaluate", *argv]) == 0
    lines = (copy / "eval.csv").read_text().splitlines()[1:]
    for line in lines:
        concept, before, after, distance, _, delta = line.split(",")
        assert before == after, concept
        assert float(distance) == 0.0
        assert float(delta) == 0.0


def test_iters_and_tau_flags_override_config(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["erase", "--config", cfg, "--out", str(copy),
                 "--iters", "3", "--tau=-1e9"]) == 0
    echoed = json.loads((copy / "config.json").read_text())
    assert echoed["max_iters"] == 3 and echoed["tau"] == -1e9
    report = json.loads((copy / "report_A.json").read_text())
    assert report["iters_run"] == 3
    assert report["stop_reason"] == "max_iters"


def test_gcirs_default_config_early_stops(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["erase", "--config", cfg, "--out", str(copy),
                 "--method", "gcirs"]) == 0
    report = json.loads((copy / "report_A_B_C.json").read_text())
    assert report["stop_reason"] == "early_stop"
    assert report["iters_run"] < 40
    inc, meta = load_increment(copy / "inc_A_B_C.ckpt")
    assert inc.kind == "dense"
    assert meta["method"] == "gcirs"


def test_dense_increment_composes_whole_or_not_at_all(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json")
    argv = ["--config", cfg, "--out", str(copy)]
    assert main(["erase", *argv, "--method", "gcirs"]) == 0
    assert main(["compose", *argv]) == 0
    assert (copy / "edited_A-B-C.ckpt").exists()
    assert main(["compose", *argv, "--subset", ""]) == 0
    assert main(["compose", *argv, "--subset", "A,B"]) == 2
    assert main(["suite", *argv]) == 2


def test_iterative_mode_artifacts(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["erase", "--config", cfg, "--out", str(copy),
                 "--mode", "iterative"]) == 0
    inc_a, meta_a = load_increment(copy / "inc_A.ckpt")
    assert inc_a.kind == "dense"
    assert any("dense" in note for note in meta_a["notes"])
    inc_b, _ = load_increment(copy / "inc_B.ckpt")
    assert inc_b.kind == "decoupled"
    assert inc_b.preserved == ("A",)


def test_simultaneous_mode_joint_report(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json", {"max_iters": 5})
    assert main(["erase", "--config", cfg, "--out", str(copy),
                 "--mode", "simultaneous"]) == 0
    report = json.loads((copy / "report_A_B_C.json").read_text())
    assert report["concepts"] == ["A", "B", "C"]
    for name in ("A", "B", "C"):
        _, meta = load_increment(copy / f"inc_{name}.ckpt")
        assert meta["concepts"] == ["A", "B", "C"]


def test_suite_writes_all_subset_rows(run_dir, tmp_path):
    out, cfg = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert main(["suite", "--config", cfg, "--out", str(copy)]) == 0
    lines = (copy / "subsets.csv").read_text().splitlines()
    assert lines[0] == "subset,concept,check,value,bound,ok,note"
    # 8 subsets x (erased members + preserved members + blank) = 32 cells
    assert len(lines) == 33


def test_ablation_rows_follow_threshold_order(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json", {"max_iters": 6})
    assert main(["ablate-tau", "--config", cfg, "--out", str(copy)]) == 0
    lines = (copy / "ablation.csv").read_text().splitlines()
    assert lines[0] == "tau,iters_run,delta_norm,erased_acc,preserved_acc"
    first = lines[1].split(",")
    # a huge threshold stops before the first update: one iteration per
    # concept, no weight change
    assert float(first[0]) == 1e9
    assert int(first[1]) == 3
    assert float(first[2]) == 0.0


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["erase", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_invalid_json_exits_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{nope")
    assert main(["train-dm", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_unknown_method_in_config_exits_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"method": "pixie"}))
    assert main(["erase", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_forgotten_outside_concepts_exits_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"forgotten": ["A", "Z"]}))
    assert main(["erase", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_abconcept_without_anchors_exits_2(run_dir, tmp_path, capsys):
    out, cfg = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    assert main(["erase", "--config", cfg, "--out", str(copy),
                 "--method", "abconcept"]) == 2
    assert "anchors" in capsys.readouterr().err


def test_subset_outside_forgotten_exits_2(run_dir, tmp_path):
    out, cfg = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert main(["compose", "--config", cfg, "--out", str(copy),
                 "--subset", "A,Q"]) == 2


def test_missing_model_exits_4(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["erase", "--config", cfg, "--out", str(tmp_path)]) == 4
    assert "train-dm" in capsys.readouterr().err


def test_evaluate_before_compose_exits_4(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in out.iterdir():
        if not name.name.startswith("edited_"):
            shutil.copy(name, copy / name.name)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["evaluate", "--config", cfg, "--out", str(copy)]) == 4


def test_corrupt_checkpoint_exits_4(run_dir, tmp_path, capsys):
    out, cfg = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    blob = bytearray((copy / "theta_dm.ckpt").read_bytes())
    blob[0] ^= 0xFF
    (copy / "theta_dm.ckpt").write_bytes(bytes(blob))
    assert main(["erase", "--config", cfg, "--out", str(copy)]) == 4
    assert "i/o error" in capsys.readouterr().err


def test_increment_for_other_geometry_exits_4(run_dir, tmp_path, capsys):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    from sepme.checkpoint import save_increment
    from sepme.weight_decoupling import WeightIncrement

    for concept in ("A", "B", "C"):
        inc = WeightIncrement(concept=concept, kind="dense",
                              layers={"block9.to_k": np.zeros((4, 4))})
        save_increment(copy / f"inc_{concept}.ckpt", inc)
    cfg = write_config(tmp_path / "cfg.json")
    assert main(["compose", "--config", cfg, "--out", str(copy)]) == 4
    assert "incompatible" in capsys.readouterr().err


def test_negative_baseline_iters_exits_2(run_dir, tmp_path):
    out, _ = run_dir
    copy = tmp_path / "copy"
    copy.mkdir()
    for name in ("theta_dm.ckpt", "theta_dm.ckpt.meta.json"):
        shutil.copy(out / name, copy / name)
    cfg = write_config(tmp_path / "cfg.json", {"baseline_iters": -1})
    assert main(["erase", "--config", cfg, "--out", str(copy),
                 "--method", "sdd"]) == 2
