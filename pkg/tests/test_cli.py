import configparser
import json
import subprocess
import sys

import pytest

from mdsupcon.cli import load_config, main
from mdsupcon.data import read_bank
from mdsupcon.errors import ValidationError
from mdsupcon.evalsuite import read_report

TOY_CONFIG = """\
[data]
bank = {bank}

[model]
arch = small
widths = 4, 4, 8
feature_dim = 8
head_dim = 8

[optimizer]
lr = 0.05
batch_size = 16

[schedule]
epochs = {epochs}
warmup_epochs = 0
decay_epochs = none

[loss]
temperature = 0.1

[run]
seed = 3

[eval]
epochs = 2
runs = 2
lr = 0.1
batch_size = 8
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--classes", "2", "--domains", "1", "--per", "16", "--seed", "0",
                 "--test-fraction", "0.25", "--out", str(root / "toy.mdib")]) == 0
    cfg = root / "toy.ini"
    cfg.write_text(TOY_CONFIG.format(bank="toy.mdib", epochs=2))
    assert main(["pretrain", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


# -- gen-data ------------------------------------------------------------------

def test_gen_data_counts_and_determinism(tmp_path, capsys):
    args = ["gen-data", "--classes", "4", "--domains", "3", "--per", "100", "--seed", "42"]
    assert run(capsys, *args, "--out", tmp_path / "a.mdib")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b.mdib")[0] == 0
    assert len(read_bank(tmp_path / "a.mdib")) == 1200
    assert (tmp_path / "a.mdib").read_bytes() == (tmp_path / "b.mdib").read_bytes()
    echoed = configparser.ConfigParser()
    echoed.read(tmp_path / "a.mdib.ini")
    assert echoed["data"]["classes"] == "4" and echoed["data"]["seed"] == "42"


def test_gen_data_zero_domains_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--classes", "2", "--domains", "0", "--per", "1", "--seed", "0",
                       "--out", tmp_path / "x.mdib")
    assert code == 1
    assert json.loads(err)["exit_code"] == 1
    assert not (tmp_path / "x.mdib").exists()


# -- pretrain ------------------------------------------------------------------

def test_pretrain_outputs(toy):
    run_dir = toy / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"checkpoint.sckp", "history.csv", "resolved_config.ini"}
    assert len((run_dir / "history.csv").read_text().splitlines()) == 3
    echoed = load_config(run_dir / "resolved_config.ini")
    assert echoed["loss"] == {"type": "supcon", "temperature": 0.1}
    assert echoed["model"]["projection_head"] == "mlp"
    assert echoed["optimizer"]["momentum"] == 0.9 and echoed["optimizer"]["weight_decay"] == 1e-4


def test_rerun_from_echoed_config_is_identical(toy, tmp_path, capsys):
    code, _, _ = run(capsys, "pretrain", "--config", toy / "run" / "resolved_config.ini", "--out", tmp_path / "again")
    assert code == 0
    for name in ("checkpoint.sckp", "history.csv", "resolved_config.ini"):
        assert (tmp_path / "again" / name).read_bytes() == (toy / "run" / name).read_bytes()


def test_pretrain_ce_echo_omits_temperature(toy, tmp_path, capsys):
    code, _, _ = run(capsys, "pretrain", "--config", toy / "toy.ini", "--loss", "ce", "--out", tmp_path / "ce")
    assert code == 0
    text = (tmp_path / "ce" / "resolved_config.ini").read_text()
    assert "temperature" not in text and "head_dim" not in text
    echoed = load_config(tmp_path / "ce" / "resolved_config.ini")
    assert echoed["model"]["projection_head"] == "none" and echoed["loss"]["type"] == "ce"


def test_missing_bank_exits_1_with_json(tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--bank", tmp_path / "nope.mdib", "--out", tmp_path / "r")
    assert code == 1
    payload = json.loads(err)
    assert payload["exit_code"] == 1 and payload["error"] == "ValidationError" and "nope.mdib" in payload["message"]


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[optimizer]\nlr = 0.1\nnesterov = true\n")
    with pytest.raises(ValidationError, match="nesterov"):
        load_config(cfg)
    code, _, err = run(capsys, "pretrain", "--config", cfg, "--out", tmp_path / "r")
    assert code == 1 and "nesterov" in json.loads(err)["message"]


def test_bad_flag_exits_1(capsys):
    code, _, err = run(capsys, "pretrain", "--loss", "triplet", "--out", "x")
    assert code == 1 and json.loads(err)["exit_code"] == 1


def test_corrupt_checkpoint_exits_nonzero(toy, tmp_path, capsys):
    bad = tmp_path / "bad.sckp"
    bad.write_bytes((toy / "run" / "checkpoint.sckp").read_bytes()[:-5])
    code, _, err = run(capsys, "linear-eval", "--checkpoint", bad, "--bank", toy / "toy.mdib", "--out", tmp_path / "e")
    assert code == 1 and json.loads(err)["error"] == "TruncatedFileError"


# -- linear-eval ---------------------------------------------------------------

def test_linear_eval_fixed_report(toy, tmp_path, capsys):
    code, out, _ = run(capsys, "linear-eval", "--checkpoint", toy / "run" / "checkpoint.sckp", "--bank", toy / "toy.mdib",
                       "--config", toy / "toy.ini", "--out", tmp_path / "e")
    assert code == 0 and "toy supcon top1" in out
    (row,) = read_report(tmp_path / "e" / "report.csv")
    assert (row["dataset"], row["model"], row["lr"], row["batch"]) == ("toy", "supcon", 0.1, 8)
    assert len(row["runs"]) == 2 and row["std"] is not None
    assert not (tmp_path / "e" / "sweep_trace.csv").exists()


def test_linear_eval_sweep_trace_and_single_run(toy, tmp_path, capsys):
    code, _, _ = run(capsys, "linear-eval", "--checkpoint", toy / "run" / "checkpoint.sckp", "--bank", toy / "toy.mdib",
                     "--sweep", "--runs", "1", "--epochs", "1", "--out", tmp_path / "s")
    assert code == 0
    trace = (tmp_path / "s" / "sweep_trace.csv").read_text().splitlines()
    assert trace[0] == "lr,batch,val_accuracy" and len(trace) == 10
    (row,) = read_report(tmp_path / "s" / "report.csv")
    assert row["std"] is None and len(row["runs"]) == 1


def test_linear_eval_image_size_mismatch(toy, tmp_path, capsys):
    assert main(["gen-data", "--classes", "2", "--domains", "1", "--per", "4", "--seed", "0", "--size", "16",
                 "--out", str(tmp_path / "small.mdib")]) == 0
    code, _, err = run(capsys, "linear-eval", "--checkpoint", toy / "run" / "checkpoint.sckp",
                       "--bank", tmp_path / "small.mdib", "--out", tmp_path / "e")
    assert code == 1 and "do not fit" in json.loads(err)["message"]


# -- ablate --------------------------------------------------------------------

def ablate(capsys, toy, out, *extra):
    tiny = toy / "tiny.ini"
    tiny.write_text(TOY_CONFIG.format(bank="toy.mdib", epochs=1).replace("runs = 2", "runs = 1").replace("epochs = 2", "epochs = 1"))
    return run(capsys, "ablate", "--config", tiny, "--eval-bank", toy / "toy.mdib", "--out", out, *extra)


def test_ablate_temperature_default_grid(toy, tmp_path, capsys):
    code, _, _ = ablate(capsys, toy, tmp_path / "t", "--knob", "temperature")
    assert code == 0
    rows = read_report(tmp_path / "t" / "report.csv")
    assert [r["model"] for r in rows] == [f"temperature={t}" for t in (0.04, 0.07, 0.1, 0.13, 0.17)]
    assert (tmp_path / "t" / "temperature=0.04" / "checkpoint.sckp").is_file()


def test_ablate_encoder_values(toy, tmp_path, capsys):
    code, _, _ = ablate(capsys, toy, tmp_path / "e", "--knob", "encoder", "--values", "small,deep")
    assert code == 0
    assert [r["model"] for r in read_report(tmp_path / "e" / "report.csv")] == ["encoder=small", "encoder=deep"]


def test_ablate_augmentation_default_grid(toy, tmp_path, capsys):
    code, _, _ = ablate(capsys, toy, tmp_path / "a", "--knob", "augmentation")
    assert code == 0
    models = [r["model"] for r in read_report(tmp_path / "a" / "report.csv")]
    assert len(models) == 4 and "augmentation=stacked_randaugment" in models


def test_ablate_unknown_knob(toy, tmp_path, capsys):
    code, _, err = ablate(capsys, toy, tmp_path / "u", "--knob", "width")
    assert code == 1 and "width" in json.loads(err)["message"]


# -- verify --------------------------------------------------------------------

def test_verify_all_pass(capsys):
    code, out, _ = run(capsys, "verify")
    assert code == 0
    assert out.count("[PASS]") == 7 and "[FAIL]" not in out


def test_verify_detects_inside_log_mutant(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "oracle", "--inject", "inside-log")
    assert code == 1 and "[FAIL] oracle" in out


def test_verify_single_suite(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "schedule")
    assert code == 0 and out.strip().splitlines() == [line for line in out.strip().splitlines() if "schedule" in line]
    assert len(out.strip().splitlines()) == 1


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mdsupcon.cli", "verify", "--suite", "schedule"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "[PASS] schedule" in proc.stdout


def test_config_inline_comments(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\narch = deep   ; residual stages\nwidths = 4, 4, 8  # three stages\n")
    assert load_config(cfg)["model"] == {"arch": "deep", "widths": (4, 4, 8)}
