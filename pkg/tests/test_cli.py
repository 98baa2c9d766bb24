import json
import subprocess
import sys

import pytest

from darkreplay.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_run_probe_report(tmp_path, capsys, toy_mnist_dir):
    out_dir = str(tmp_path / "results")
    code, out, _ = run_cli(capsys, "run", "--setting", "seq_mnist_class", "--method", "der",
                           "--buffer", "50", "--data-dir", toy_mnist_dir, "--output-dir", out_dir)
    assert code == 0
    summary = json.loads(out)
    assert 0 <= summary["final_avg_accuracy"] <= 100
    code, out, _ = run_cli(capsys, "probe", "--record", summary["record"], "--probe", "ece",
                           "--data-dir", toy_mnist_dir)
    assert code == 0 and 0 <= json.loads(out)["ece"] <= 1
    code, out, _ = run_cli(capsys, "report", "--glob", f"{out_dir}/**/*.json", "--format", "csv")
    assert code == 0 and out.splitlines()[0] == "method,setting,buffer,seed,metric,value"


def test_run_from_config_file_with_seeds(tmp_path, capsys, toy_mnist_dir):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"setting": "seq_mnist_class", "method": {"kind": "sgd"},
                                  "data_dir": toy_mnist_dir}))
    code, out, _ = run_cli(capsys, "run", "--config", str(config), "--seeds", "2",
                           "--output-dir", str(tmp_path / "r"))
    assert code == 0
    res = json.loads(out)
    assert res["seeds"] == [0, 1] and len(res["records"]) == 2


def test_config_errors_exit_2_with_json(capsys):
    code, _, err = run_cli(capsys, "run", "--setting", "mnist360", "--method", "fdr", "--buffer", "200")
    assert code == 2
    payload = json.loads(err)
    assert payload["error"] == "ConfigError" and "boundaries" in payload["message"]


def test_missing_data_exits_1(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--setting", "seq_mnist_class", "--method", "sgd",
                           "--data-dir", str(tmp_path / "absent"))
    assert code == 1 and json.loads(err)["error"] == "FileNotFoundError"


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "darkreplay", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "run" in proc.stdout


def test_bad_arguments_exit_nonzero(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--method", "ewc"])
    assert exc.value.code == 2
