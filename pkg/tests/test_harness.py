import builtins
import json
import pathlib

import numpy as np
import pytest

from bsrnet import cli, pipeline
from bsrnet import segnet as sn
from bsrnet.config import ConfigError, RunConfig, load_config, parse_config
from conftest import small_config


# --- config ---------------------------------------------------------------------------

def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.batch_size, cfg.labeled_per_batch, cfg.unlabeled_per_batch) == (16, 8, 8)
    assert cfg.seeds == [0, 1, 2]
    assert (cfg.total_iters, cfg.learning_rate, cfg.momentum, cfg.ema_decay) == (2000, 1e-2, 0.9, 0.99)


def test_config_parse_and_echo():
    cfg = parse_config('k = 3\nmap_mode = "hard-argmax"  \n# comment\nwarm_start = false\nalpha = 0.2 # trailing\n')
    assert (cfg.k, cfg.map_mode, cfg.warm_start, cfg.alpha) == (3, "hard-argmax", False, 0.2)
    assert parse_config(cfg.to_text()) == cfg


def test_config_unknown_key():
    with pytest.raises(ConfigError, match="line 2.*bogus"):
        parse_config("k = 3\nbogus = 1\n")


@pytest.mark.parametrize("text", ["k = 1.5", "k = abc", "warm_start = maybe", "ablation_arm = Z",
                                  "labeled_per_batch = 16", "height = 30", "just a line"])
def test_config_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")


# --- phase I --------------------------------------------------------------------------

def test_phase1_rejects_empty_labeled(tmp_path):
    cfg = small_config(tmp_path)
    split = pipeline.build_split(pipeline.scene_spec(cfg), 1, 1, 1, 0)
    split.labeled.clear()
    with pytest.raises(ValueError):
        pipeline.phase1_train(cfg, split, write=False)


def test_phase1_loss_decreases_default_config(tmp_path):
    cfg = RunConfig(out_dir=str(tmp_path), phase1_iters=201)
    _, log = pipeline.phase1_train(cfg, pipeline.generate_data(cfg), write=False)
    sup = log.column("sup")
    assert sup[200] < sup[0]


def test_cluster_outputs(small_run):
    cfg, split, _ = small_run
    for balanced in (True, False):
        subs, smap = pipeline.load_subclasses(cfg, split, balanced)
        assert smap.k_sub == sum(smap.counts.values()) - 1
        assert pipeline.check_lossless(subs, [s.label for s in split.labeled], smap) == 0


def test_cluster_rerun_identical(small_run):
    cfg, split, backbone = small_run
    d = pipeline.subclass_dir(cfg)
    before = {p.name: p.read_bytes() for p in d.iterdir()}
    pipeline.phase1_cluster(cfg, backbone, split)
    assert before == {p.name: p.read_bytes() for p in d.iterdir()}


def test_cluster_needs_backbone(tmp_path):
    cfg = small_config(tmp_path)
    pipeline.generate_data(cfg)
    with pytest.raises(pipeline.MissingArtifact):
        pipeline.phase1_cluster(cfg)


# --- phase II -------------------------------------------------------------------------

def test_arm_a_logs_no_consistency(small_run):
    cfg, split, _ = small_run
    log = pipeline.phase2_train(cfg, "A", split=split, write=False).log
    assert not log.column("con_model").any() and not log.column("con_task").any()


def test_beta2_schedule_in_log(small_run):
    cfg, split, _ = small_run
    log = pipeline.phase2_train(cfg, "E", split=split, write=False).log
    b2 = log.column("active_beta2")
    q = int(0.25 * cfg.total_iters)
    assert (b2[:q] == 0).all() and (b2[q:] == 0.5).all()
    assert log.column("iteration").tolist() == list(range(cfg.total_iters))


def test_log_identity(small_run):
    cfg, split, _ = small_run
    rows = pipeline.phase2_train(cfg, "E", split=split, write=False).log.rows
    for r in rows:
        assert abs(r["total"] - (r["sup"] + cfg.beta1 * r["con_model"] + r["active_beta2"] * r["con_task"])) <= 1e-9


def test_arm_nesting(small_run):
    cfg, split, _ = small_run
    b = pipeline.phase2_train(cfg, "B", split=split, write=False).log.rows
    e_cfg = cfg.replace(alpha=0.0, beta2_final=0.0, detach_scs=True)
    e = pipeline.phase2_train(e_cfg, "E", split=split, write=False).log.rows
    assert b == e


def test_arms_c_to_e_need_subclasses(tmp_path):
    cfg = small_config(tmp_path)
    split = pipeline.generate_data(cfg)
    pipeline.phase1_train(cfg, split)
    with pytest.raises(pipeline.MissingArtifact):
        pipeline.phase2_train(cfg, "C", split=split)


def test_teacher_never_receives_gradient(small_run):
    cfg, split, _ = small_run
    res = pipeline.phase2_train(cfg, "E", split=split, write=False)
    assert all(not g.any() for g in res.teacher.grads.values())


def test_training_reproducible(small_run):
    cfg, split, _ = small_run
    a = pipeline.phase2_train(cfg, "D", split=split, write=False)
    b = pipeline.phase2_train(cfg, "D", split=split, write=False)
    assert a.log.rows == b.log.rows
    for k, v in a.teacher.params.arrays.items():
        assert v.tobytes() == b.teacher.params.arrays[k].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_iteration(small_run):
    cfg, split, _ = small_run
    with pytest.raises(pipeline.TrainingDiverged, match="iteration"):
        pipeline.phase2_train(cfg.replace(learning_rate=1e200), "A", split=split, write=False)


def test_no_label_leakage(small_run, monkeypatch):
    cfg, _, _ = small_run
    opened = []
    real_read_bytes, real_open = pathlib.Path.read_bytes, builtins.open

    def spy_read_bytes(self):
        opened.append(str(self))
        return real_read_bytes(self)

    def spy_open(file, *a, **kw):
        opened.append(str(file))
        return real_open(file, *a, **kw)

    monkeypatch.setattr(pathlib.Path, "read_bytes", spy_read_bytes)
    monkeypatch.setattr(builtins, "open", spy_open)
    for arm in "ABCDE":
        pipeline.phase2_train(cfg, arm)
    assert opened, "instrumentation saw no reads"
    assert any(p.endswith(".img") for p in opened)
    assert not [p for p in opened if p.endswith(".oracle")]
    assert (cfg.data_path / f"{pipeline.load_data(cfg).unlabeled[0].id}.lab.oracle").exists()


# --- evaluation -----------------------------------------------------------------------

def test_eval_fresh_model(small_run, tmp_path):
    cfg, split, _ = small_run
    ckpt = tmp_path / "fresh.ckpt"
    sn.save_checkpoint(ckpt, sn.pack_models(sn.init_params(sn.ArchSpec(cfg.k + 1, levels=2, base_channels=4), 0)))
    rep = pipeline.evaluate_cmd(cfg, ckpt)
    assert all(0 <= d <= 1 for d in rep.dice)
    assert (tmp_path / "eval_student" / "metrics.csv").exists()


def test_eval_round_trip_and_bytes(small_run):
    cfg, split, _ = small_run
    res = pipeline.phase2_train(cfg, "B", split=split)
    before = pipeline.evaluate_model(res.teacher.params, split.test, cfg.k)
    ckpt = pipeline.Path(cfg.out_dir) / "phase2_B" / "model.ckpt"
    rep = pipeline.evaluate_cmd(cfg, ckpt)
    assert rep.dice == before.dice and rep.ji == before.ji
    first = (ckpt.parent / "eval_teacher" / "metrics.csv").read_bytes()
    pipeline.evaluate_cmd(cfg, ckpt)
    assert (ckpt.parent / "eval_teacher" / "metrics.csv").read_bytes() == first
    stu = pipeline.evaluate_cmd(cfg, ckpt, use_student=True)
    assert stu.dice == pipeline.evaluate_model(res.student, split.test, cfg.k).dice
    assert json.loads((ckpt.parent / "eval_student" / "summary.json").read_text())["role"] == "student"


def test_eval_missing_checkpoint(small_run):
    cfg, _, _ = small_run
    with pytest.raises(pipeline.MissingArtifact):
        pipeline.evaluate_cmd(cfg, "nope.ckpt")


def test_smallest_classes(small_run):
    _, split, _ = small_run
    assert pipeline.smallest_classes(split, 4) == [3, 4]


def test_ablate_table(tmp_path):
    cfg = small_config(tmp_path / "abl", total_iters=3, phase1_iters=2)
    summary = pipeline.ablate(cfg)
    lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "arm,dice_1,dice_2,dice_3,dice_4,mean_dice,small_dice"
    assert [l.split(",")[0] for l in lines[1:]] == list("ABCDE")
    assert not summary["failures"]
    assert summary["cpu_seconds"] > 0


def test_ablate_records_failures(tmp_path, monkeypatch):
    cfg = small_config(tmp_path / "abl", total_iters=2, phase1_iters=1)
    real = pipeline.run_arm

    def flaky(cfg_, arm, *a, **kw):
        if arm == "C":
            raise RuntimeError("boom")
        return real(cfg_, arm, *a, **kw)

    monkeypatch.setattr(pipeline, "run_arm", flaky)
    summary = pipeline.ablate(cfg)
    assert [f["arm"] for f in summary["failures"]] == ["C"]
    assert {r["arm"] for r in summary["table"] if r["n_seeds"]} == set("ABDE")


# --- CLI ------------------------------------------------------------------------------

def write_cfg(tmp_path, cfg: RunConfig):
    p = tmp_path / "run.cfg"
    p.write_text(cfg.to_text())
    return str(p)


def test_cli_pipeline(tmp_path, capsys):
    c = write_cfg(tmp_path, small_config(tmp_path / "out"))
    assert cli.main(["gen-data", "--config", c]) == 0
    assert cli.main(["phase1", "--config", c]) == 0
    assert cli.main(["cluster", "--config", c]) == 0
    assert cli.main(["phase2", "--config", c, "--arm", "E"]) == 0
    out = tmp_path / "out"
    for f in ("config.txt", "phase1/backbone.ckpt", "phase2_E/log.csv", "phase2_E/metrics.csv",
              "phase2_E/summary.json", "subclass/balanced/subclass_map.json"):
        assert (out / f).exists(), f
    assert cli.main(["eval", "--config", c, "--checkpoint", str(out / "phase2_E/model.ckpt"), "--student"]) == 0
    assert capsys.readouterr().out.count("class,dice,ji") == 1


def test_cli_usage_errors(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["phase2", "--arm", "Q"]) == 1
    assert cli.main(["eval"]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense_key = 1\n")
    assert cli.main(["gen-data", "--config", str(bad)]) == 1
    assert "nonsense_key" in capsys.readouterr().err


def test_cli_runtime_errors(tmp_path, capsys):
    c = write_cfg(tmp_path, small_config(tmp_path / "out"))
    assert cli.main(["phase1", "--config", c]) == 2  # no data yet
    assert cli.main(["eval", "--config", c, "--checkpoint", str(tmp_path / "x.ckpt")]) == 2
    cli.main(["gen-data", "--config", c])
    img = next((tmp_path / "out" / "data").glob("*.img"))
    img.write_bytes(b"BAD!" + img.read_bytes()[4:])
    assert cli.main(["phase1", "--config", c]) == 2
    assert img.name in capsys.readouterr().err
