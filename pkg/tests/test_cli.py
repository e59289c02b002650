import glob
import os

from evaluation import PoseReport
from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from run_config import RunConfig
from trainer import LOG_NAME, TrainLog


def tree_bytes(root):
    files = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


def test_gen_data_writes_dataset(qapp, tmp_path):
    out = str(tmp_path / "data")
    code = main(["gen-data", "--scenes", "2", "--views", "3", "--size", "8", "--seed", "1", "--out", out])
    assert code == EXIT_OK
    assert len(glob.glob(os.path.join(out, "*", "*", "manifest.json"))) == 2


def test_gen_data_rerun_gives_identical_bytes(qapp, tmp_path):
    trees = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["gen-data", "--scenes", "2", "--views", "3", "--size", "8", "--seed", "5", "--out", out]) == EXIT_OK
        trees.append(tree_bytes(out))
    assert trees[0] == trees[1]
    assert len(trees[0]) == 2 * (3 + 1)


def test_missing_required_argument_is_usage_error(qapp, capsys):
    assert main(["gen-data"]) == EXIT_USAGE
    assert "ERROR [cli]" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error(qapp):
    assert main(["fly"]) == EXIT_USAGE


def test_unknown_override_is_config_error(qapp, tiny_cfg_file, tmp_path, capsys):
    code = main(["eval", "--mode", "pose", "--config", tiny_cfg_file, "--override", "warp_speed=9",
                 "--out", str(tmp_path / "out")])
    assert code == EXIT_USAGE
    assert "warp_speed" in capsys.readouterr().err


def test_missing_config_file_is_config_error(qapp, tmp_path):
    code = main(["eval", "--mode", "pose", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)])
    assert code == EXIT_USAGE


def test_eval_pose_writes_report(qapp, tiny_cfg_file, tmp_path):
    out = str(tmp_path / "out")
    code = main(["eval", "--mode", "pose", "--oracle", "--variant", "oracle", "--traj-len", "3",
                 "--config", tiny_cfg_file, "--out", out])
    assert code == EXIT_OK
    reports = glob.glob(os.path.join(out, "*", "pose.csv"))
    assert len(reports) == 1
    report = PoseReport.load_from_file(reports[0])
    assert [r["phi_d"] for r in report.rows] == [15.0, 30.0, 45.0, 60.0, "avg"]
    assert os.path.isfile(os.path.join(os.path.dirname(reports[0]), "config.cfg"))


def test_eval_policy_writes_summary(qapp, tiny_cfg_file, tmp_path):
    out = str(tmp_path / "out")
    code = main(["eval", "--mode", "policy", "--trials", "1", "--config", tiny_cfg_file, "--out", out])
    assert code == EXIT_OK
    (path,) = glob.glob(os.path.join(out, "*", "policy.csv"))
    with open(path) as f:
        assert f.readline().strip() == "task,n_trials,success_rate,grasp_rate"


def test_pretrain_then_train(qapp, tiny_cfg_file, tmp_path):
    data = str(tmp_path / "data")
    assert main(["gen-data", "--scenes", "2", "--views", "3", "--size", "8", "--out", data]) == EXIT_OK
    out = str(tmp_path / "out")
    assert main(["pretrain", "--config", tiny_cfg_file, "--data", data, "--out", out]) == EXIT_OK
    (checkpoint,) = glob.glob(os.path.join(out, "*", "checkpoints", "pretrain_final.pt"))

    code = main(["train", "--config", tiny_cfg_file, "--override", f"pretrain_checkpoint={checkpoint}",
                 "--out", out])
    assert code == EXIT_OK
    logs = [TrainLog.load_from_file(p) for p in glob.glob(os.path.join(out, "*", LOG_NAME))]
    assert any("critic_loss" in log.metrics() for log in logs)


def test_plot_with_empty_log_fails(qapp, tmp_path):
    log_path = tmp_path / LOG_NAME
    log_path.write_text("")
    assert main(["plot", "--logs", str(log_path), "--out", str(tmp_path / "curve.png")]) == EXIT_RUNTIME


def test_plot_without_inputs_is_usage_error(qapp, tmp_path, capsys):
    assert main(["plot", "--out", str(tmp_path / "x.png")]) == EXIT_USAGE
    captured = capsys.readouterr()
    assert "ERROR [cli] nothing to plot" in captured.err
    assert "nothing to plot" not in captured.out


def test_plot_renders_curve(qapp, tmp_path):
    for seed in (0, 1):
        log = TrainLog()
        for step in (10, 20, 30):
            log.add(step, "success_rate", 0.1 * step / 10 + 0.05 * seed)
        log.save_to_file(str(tmp_path / f"run{seed}"))
    target = str(tmp_path / "curve.png")
    code = main(["plot", "--logs", str(tmp_path / "run0"), str(tmp_path / "run1"), "--out", target])
    assert code == EXIT_OK
    assert os.path.getsize(target) > 0


def test_plot_is_byte_identical_for_identical_logs(qapp, tmp_path):
    log = TrainLog()
    for step in (10, 20, 30):
        log.add(step, "success_rate", step / 40.0)
    log.save_to_file(str(tmp_path / "run"))
    images = []
    for name in ("first.png", "second.png"):
        target = str(tmp_path / name)
        assert main(["plot", "--logs", str(tmp_path / "run"), "--out", target]) == EXIT_OK
        with open(target, "rb") as f:
            images.append(f.read())
    assert images[0] == images[1]


def test_train_snapshot_records_override(qapp, tiny_cfg_file, tmp_path):
    out = str(tmp_path / "out")
    code = main(["train", "--config", tiny_cfg_file, "--override", "lambda_ft=0.1", "--override", "pretrain_3d=false",
                 "--out", out])
    assert code == EXIT_OK
    (snapshot,) = glob.glob(os.path.join(out, "*", "config.cfg"))
    config = RunConfig.load_from_file(snapshot)
    assert config.lambda_ft == 0.1
    assert config.lr_3d == 0.1 * config.lr_rl
