import re
import subprocess
import sys

import pytest

from saenet import zoo
from saenet.cli import build_parser, main


def run(argv):
    try:
        return main(argv)
    except SystemExit as e:
        return e.code


def test_params_csv(capsys):
    assert run(["params", "--preset", "sae-resnet50"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "layer,out_shape,params"
    assert out[-1] == f"total,,{zoo.param_count(zoo.Model(zoo.preset('sae-resnet50'))).total}"


def test_params_writes_under_out(tmp_path, capsys):
    assert run(["params", "--preset", "sae-tiny", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "params.csv").read_text() == capsys.readouterr().out


def test_gradcheck_block_sae_passes(capsys):
    assert run(["gradcheck", "--preset", "gate-sae", "--dtype", "f64", "--tol", "1e-4"]) == 0
    out = capsys.readouterr()
    assert out.out.startswith("name,max_rel_err,status\n")
    assert "branch3.weight" in out.out and "PASS" in out.err


def test_gradcheck_failure_exit_code(capsys):
    # float32 finite differences cannot reach 1e-12
    assert run(["gradcheck", "--preset", "gate-se", "--dtype", "f32", "--tol", "1e-12"]) == 2


@pytest.mark.parametrize("argv", [
    ["params", "--preset", "vgg16"],
    ["params", "--merge", "mean"],
    ["train", "--epochs", "two"],
    ["bogus"],
    [],
])
def test_invalid_arguments_exit_1(argv, capsys):
    assert run(argv) == 1
    assert "usage:" in capsys.readouterr().err


def test_train_needs_data(capsys):
    assert run(["train", "--preset", "sae-tiny"]) == 1
    assert "requires --data" in capsys.readouterr().err


def test_bad_data_dir_exit_1(tmp_path, capsys):
    (tmp_path / "train.bin").write_bytes(b"\0" * 100)
    (tmp_path / "test.bin").write_bytes(b"\0" * 3074)
    assert run(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 1
    assert "3074-byte record" in capsys.readouterr().err


def test_help_lists_every_flag_with_default():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                flag = action.option_strings[0]
                assert flag in text, (name, flag)
                after = text[text.index(flag):]
                assert re.search(r"\(default: [^)]*\)", after), (name, flag)


def test_help_exit_zero():
    for argv in (["--help"], ["train", "--help"]):
        res = subprocess.run([sys.executable, "-m", "saenet", *argv], capture_output=True, text=True)
        assert res.returncode == 0
        assert "--gate-placement" in res.stdout


@pytest.fixture(scope="module")
def synthetic_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["make-synthetic", "--out", str(d), "--classes", "4", "--per-class", "8"]) == 0
    return d


def test_train_twice_is_byte_identical(synthetic_dir, tmp_path):
    common = ["train", "--preset", "sae-tiny", "--data", str(synthetic_dir), "--epochs", "2", "--seed", "7",
              "--batch-size", "8"]
    assert run(common + ["--out", str(tmp_path / "a")]) == 0
    assert run(common + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a.count(b"\n") == 3
    for f in ("best.ckpt", "manifest.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_and_export_from_checkpoint(synthetic_dir, tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert run(["train", "--preset", "sae-tiny", "--data", str(synthetic_dir), "--epochs", "1",
                "--batch-size", "8", "--out", str(run_dir)]) == 0
    assert run(["eval", "--preset", "sae-tiny", "--data", str(synthetic_dir), "--ckpt", str(run_dir)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[-2] == "top1,top5,mean_loss"
    top1, top5, _ = (float(v) for v in lines[-1].split(","))
    assert 0 <= top1 <= top5 <= 1
    assert run(["export-filters", "--preset", "sae-tiny", "--ckpt", str(run_dir),
                "--out", str(tmp_path / "filters")]) == 0
    assert len(list((tmp_path / "filters").glob("stem_filter_*.pgm"))) == 32


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_training_exit_2(synthetic_dir, tmp_path, capsys):
    assert run(["train", "--preset", "sae-tiny", "--data", str(synthetic_dir), "--epochs", "1",
                "--lr", "1e30", "--batch-size", "8", "--out", str(tmp_path)]) == 2
    assert "numerical failure" in capsys.readouterr().err
