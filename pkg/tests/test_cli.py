import csv
import io
import os
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import pytest

from bcos.cli import build_parser, main, read_overlay, resolve
from bcos.encoding import write_image
from bcos.errors import ConfigError

SNAPSHOTS = Path(__file__).parent / "snapshots"
SMALL = ["--n-train", "64", "--n-test", "48", "--channels", "8", "--epochs", "1",
         "--batch-size", "32"]
COMMANDS = ["train", "explain", "neurons", "gridgame", "ablation"]


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def help_text(command=None):
    os.environ["COLUMNS"] = "100"
    parser = build_parser()
    if command is None:
        return parser.format_help()
    return next(a for a in parser._actions if a.dest == "command").choices[command].format_help()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code, stdout, err = run(["train", *SMALL, "--seed", 3, "--out-dir", out])
    assert code == 0, err
    return out


@pytest.fixture(scope="module")
def image(tmp_path_factory):
    from bcos.data import synth_shapes
    ds = synth_shapes(5, 4)
    path = tmp_path_factory.mktemp("img") / "in.png"
    write_image(ds.images[0, :3].transpose(1, 2, 0), path)
    return path


class TestHelp:
    @pytest.mark.parametrize("command", [None] + COMMANDS)
    def test_snapshot(self, command):
        name = f"help_{command or 'main'}.txt"
        assert help_text(command) == (SNAPSHOTS / name).read_text(encoding="utf-8")

    @pytest.mark.parametrize("command", COMMANDS)
    def test_every_flag_has_default(self, command):
        text = " ".join(help_text(command).split())
        sub = next(a for a in build_parser()._actions if a.dest == "command").choices[command]
        for act in sub._actions:
            if act.dest == "help":
                continue
            assert act.option_strings[0] in text
        assert text.count("(default:") == len(sub._actions) - 1

    def test_help_exit_zero(self):
        assert run(["train", "--help"])[0] == 0


class TestResolve:
    def test_provenance(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("# overlay\nepochs = 7\nbatch-size=16\nb = 1.5\n", encoding="utf-8")
        cfg = resolve(["train", "--config", str(cfg_file), "--b", "2.5"])
        assert (cfg.epochs, cfg.sources["epochs"]) == (7, "file")
        assert (cfg.batch_size, cfg.sources["batch_size"]) == (16, "file")
        assert (cfg.b, cfg.sources["b"]) == (2.5, "flag")
        assert cfg.sources["seed"] == "default"

    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("colour = red\n")
        with pytest.raises(ConfigError):
            resolve(["train", "--config", str(p)])

    def test_bad_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("epochs\n")
        with pytest.raises(ConfigError):
            read_overlay(p)

    def test_lists(self):
        cfg = resolve(["ablation", "--b-list", "1,2.5"])
        assert cfg.b_list == [1.0, 2.5]
        assert resolve(["gridgame", "--checkpoint", "x"]).methods == ["inherent", "grad", "ixg",
                                                                      "intgrad"]


class TestExitCodes:
    def test_missing_dataset_path(self, tmp_path):
        code, _, err = run(["train", "--dataset", "cifar10", "--data-dir", tmp_path / "none"])
        assert code == 2 and err.startswith("error:") and err.count("\n") == 1

    def test_missing_config(self, tmp_path):
        code, _, err = run(["train", "--config", tmp_path / "none.cfg"])
        assert code == 2 and err.startswith("error:")

    def test_bad_flag_value(self):
        assert run(["train", "--epochs", "x"])[0] == 2

    def test_unknown_command(self):
        assert run(["fly"])[0] == 2

    def test_nan_abort(self, tmp_path):
        code, _, err = run(["train", *SMALL, "--lr-init", "1e300", "--lr-final", "1e299",
                            "--out-dir", tmp_path])
        assert code == 3 and err.startswith("error: nan-abort")

    def test_invalid_class(self, trained, image, tmp_path):
        code, _, err = run(["explain", "--checkpoint", trained / "model.bcos", "--image", image,
                            "--class", 5, "--out", tmp_path / "e.ppm"])
        assert code == 2 and "class" in err

    def test_invalid_layer(self, trained, image, tmp_path):
        code, _, _ = run(["explain", "--checkpoint", trained / "model.bcos", "--image", image,
                          "--layer", 9, "--out", tmp_path / "e.ppm"])
        assert code == 2

    def test_corrupt_checkpoint(self, trained, image, tmp_path):
        bad = tmp_path / "bad.bcos"
        bad.write_bytes((trained / "model.bcos").read_bytes()[:-3])
        assert run(["explain", "--checkpoint", bad, "--image", image])[0] == 2


class TestTrain:
    def test_outputs(self, trained):
        assert {"model.bcos", "metrics.csv", "training.png"} <= set(os.listdir(trained))
        rows = list(csv.reader(open(trained / "metrics.csv")))
        assert rows[0] == ["epoch", "lr", "loss", "train_acc", "test_acc"] and len(rows) == 2

    def test_deterministic(self, trained, tmp_path):
        assert run(["train", *SMALL, "--seed", 3, "--out-dir", tmp_path])[0] == 0
        for name in ("model.bcos", "metrics.csv", "training.png"):
            assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name


class TestExplain:
    def test_completeness_line(self, trained, image, tmp_path):
        code, out, _ = run(["explain", "--checkpoint", trained / "model.bcos", "--image", image,
                            "--out", tmp_path / "e.ppm", "--figure", tmp_path / "f.png"])
        assert code == 0
        header, row = out.splitlines()
        assert header.split("\t") == ["target", "contrib_sum", "bias", "activation", "abs_error"]
        fields = row.split("\t")
        s, b, act = (float(v) for v in fields[1:4])
        assert abs(s + b - act) <= 1e-3 and float(fields[4]) <= 1e-3
        assert (tmp_path / "e.ppm").read_bytes().startswith(b"P6\n16 16\n255\n")
        assert (tmp_path / "f.png").stat().st_size > 0

    def test_byte_identical(self, trained, image, tmp_path):
        outs = []
        for name in ("a.png", "b.png"):
            code, out, _ = run(["explain", "--checkpoint", trained / "model.bcos", "--image", image,
                                "--class", 1, "--out", tmp_path / name])
            outs.append(out)
        assert outs[0] == outs[1]
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_hidden_neuron(self, trained, image, tmp_path):
        code, out, _ = run(["explain", "--checkpoint", trained / "model.bcos", "--image", image,
                            "--layer", 2, "--neuron", 3, "--position", "1,2",
                            "--out", tmp_path / "n.ppm"])
        assert code == 0 and out.splitlines()[1].startswith("layer=2,neuron=3")


def test_neurons(trained, tmp_path):
    code, out, _ = run(["neurons", "--checkpoint", trained / "model.bcos", "--layer", 1,
                        "--top-k", 2, "--n-test", 20, "--out-dir", tmp_path])
    assert code == 0
    assert len(out.splitlines()) == 1 + 8 * 2
    assert len(list(tmp_path.glob("*.png"))) == 16


class TestGridgame:
    def test_four_methods(self, trained, tmp_path):
        code, out, _ = run(["gridgame", "--checkpoint", trained / "model.bcos", "--n-test", 48,
                            "--n-grids", 4, "--steps", 5, "--seed", 2, "--out-dir", tmp_path])
        assert code == 0
        agg = list(csv.reader(open(tmp_path / "aggregate.csv")))
        assert agg[0] == ["method", "mean", "std", "n"]
        assert [r[0] for r in agg[1:]] == ["inherent", "grad", "ixg", "intgrad"]
        assert len(out.splitlines()) == 5
        assert (tmp_path / "localization.png").exists()
        first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        run(["gridgame", "--checkpoint", trained / "model.bcos", "--n-test", 48,
             "--n-grids", 4, "--steps", 5, "--seed", 2, "--out-dir", tmp_path])
        assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}

    def test_uniform_three_by_three(self, tmp_path):
        ck = tmp_path / "m"
        assert run(["train", *SMALL, "--classes", 9, "--n-train", 90, "--out-dir", ck])[0] == 0
        code, out, _ = run(["gridgame", "--checkpoint", ck / "model.bcos", "--classes", 9,
                            "--n-test", 90, "--grid-n", 3, "--n-grids", 5, "--methods", "uniform",
                            "--out-dir", tmp_path / "g"])
        assert code == 0
        row = out.splitlines()[1].split("\t")
        assert row[0] == "uniform" and float(row[1]) == 1 / 9

    def test_class_mismatch(self, trained, tmp_path):
        assert run(["gridgame", "--checkpoint", trained / "model.bcos", "--classes", 5,
                    "--out-dir", tmp_path])[0] == 2

    def test_unknown_method(self, trained, tmp_path):
        assert run(["gridgame", "--checkpoint", trained / "model.bcos", "--methods", "lime",
                    "--out-dir", tmp_path])[0] == 2


def test_ablation_rows(tmp_path):
    code, out, _ = run(["ablation", *SMALL, "--b-list", "1,1.5,2", "--n-grids", 3,
                        "--out-dir", tmp_path])
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "ablation.csv")))
    assert len(rows) == 4 and [float(r[0]) for r in rows[1:]] == [1.0, 1.5, 2.0]
    assert all(0 <= float(r[1]) <= 1 for r in rows[1:])
    assert (tmp_path / "ablation.png").exists()
