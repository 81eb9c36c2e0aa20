import json

import pytest

from mutual_eend.cli import load_run_config, main, preset_path

TINY_CONF = """\
n_train = 5
n_eval = 2
min_duration = 6
max_duration = 8
corpus_seed = 4
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
epochs = 2
distill_epochs = 2
finetune_epochs = 1
batch_size = 4
chunk_frames = 40
warmup_steps = 10
finetune_warmup_steps = 5
val_fraction = 0.2
rounds = 1
seeds = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "tiny.conf"
    conf.write_text(TINY_CONF)
    assert main(["simulate", "--config", str(conf), "--out", str(root / "corpus")]) == 0
    return root, conf


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_demo_preset_loads():
    rc = load_run_config(preset_path("demo"))
    assert (rc.corpus.n_train, rc.corpus.n_eval, rc.corpus.n_channels) == (200, 50, 4)
    assert (rc.train.d_model, rc.train.n_layers, rc.train.n_heads) == (64, 2, 4)
    assert rc.rounds == 2 and rc.seeds == (0, 1, 2)


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train"],
    ["score", "only-one.rttm"],
    ["eval", "x.ckpt", "corpus", "--channels", "0"],
    ["score", "missing.rttm", "missing.rttm"],
    ["train", "--mode", "single", "--config", "no-such.conf"],
    ["mutual", "--rounds", "-1", "--corpus", "."],
])
def test_usage_errors_exit_2(argv, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([*argv, "--out", str(tmp_path)] if argv and argv[0] != "bogus" else argv)
    assert exc.value.code == 2


def test_score_self_is_zero(workspace, capsys, tmp_path):
    root, _ = workspace
    ref = root / "corpus" / "eval" / "eval_00000.rttm"
    code, out = run(capsys, "score", ref, ref, "--out", tmp_path)
    assert code == 0
    assert out.out.splitlines()[-1].startswith("TOTAL\t0.000")
    assert json.loads((tmp_path / "score.json").read_text())["total"]["der"] == 0.0
    manifest = json.loads((tmp_path / "run_manifest.json").read_text())
    assert manifest["command"] == "score" and manifest["status"] == "ok"


def test_pipeline_commands(workspace, capsys):
    root, conf = workspace
    corpus = root / "corpus"
    common = ["--config", conf, "--corpus", corpus]
    assert run(capsys, "train", "--mode", "multi", *common, "--out", root / "multi")[0] == 0
    assert run(capsys, "distill", "--teacher", root / "multi" / "multi.ckpt", *common,
               "--out", root / "student")[0] == 0
    assert run(capsys, "finetune", "--init", root / "student" / "student.ckpt", *common,
               "--out", root / "ft")[0] == 0
    csv = (root / "ft" / "train_log.csv").read_text().splitlines()
    assert csv[0] == "phase,step,split,loss,lr" and len(csv) > 1

    # a 1-channel evaluation of a 4-channel corpus is allowed
    code, out = run(capsys, "eval", root / "ft" / "finetuned.ckpt", corpus, "--channels", 1,
                    "--median", "--config", conf, "--out", root / "ev")
    assert code == 0 and "1 ch, median" in out.out
    report = json.loads((root / "ev" / "eval.json").read_text())
    assert report["channels"] == 1 and len(report["sessions"]) == 2
    assert (root / "ev" / "hyp.rttm").exists()

    manifest = json.loads((root / "multi" / "run_manifest.json").read_text())
    assert manifest["resolved"]["train"]["d_model"] == 16
    assert manifest["resolved"]["corpus"]["seed"] == 4
    assert manifest["seed"] == 0 and manifest["status"] == "ok"
    assert {"build", "started", "finished", "output_dir", "argv"} <= set(manifest)


def test_replay_is_bit_exact(workspace, capsys):
    root, conf = workspace
    assert run(capsys, "train", "--mode", "single", "--config", conf, "--corpus",
               root / "corpus", "--seed", 7, "--out", root / "single")[0] == 0
    assert run(capsys, "replay", root / "single" / "run_manifest.json",
               "--out", root / "again")[0] == 0
    for name in ("single.ckpt", "train_log.csv"):
        assert (root / "single" / name).read_bytes() == (root / "again" / name).read_bytes()
    replayed = json.loads((root / "again" / "run_manifest.json").read_text())
    assert replayed["seed"] == 7 and replayed["command"] == "train"


def test_runtime_failure_exits_1(workspace, capsys, tmp_path):
    root, conf = workspace
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    code, out = run(capsys, "eval", tmp_path / "bad.ckpt", root / "corpus", "--config", conf,
                    "--out", tmp_path / "ev")
    assert code == 1
    assert "mutual-eend eval: error:" in out.err
    assert json.loads((tmp_path / "ev" / "run_manifest.json").read_text())["status"] == "failed"


def test_mutual_emits_table(workspace, capsys):
    root, conf = workspace
    code, out = run(capsys, "mutual", "--config", conf, "--corpus", root / "corpus",
                    "--out", root / "mutual")
    assert code == 0
    labels = ["Baseline 4-ch model", "Baseline 1-ch model", "Finetune (2) using 4-ch data",
              "Knowledge distillation from (1)", "Finetune (4) using 4-ch data"]
    for label in labels:
        assert label in out.out
    for name in ("table.txt", "summary.json", "der_by_model.png", "losses_seed0.png",
                 "seed0/results.json", "seed0/mutual/rounds.json"):
        assert (root / "mutual" / name).exists(), name
