import io
import json

import pytest

from point_importance.cli import main
from point_importance.data import load_corpus


def run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("generate", "--count", 30, "--seed", 1, "--output", d / "train.jsonl")[0] == 0
    assert run("generate", "--count", 10, "--seed", 2, "--output", d / "test.jsonl")[0] == 0
    code, _ = run(
        "train", "--corpus", d / "train.jsonl", "--checkpoint", d / "model.json", "--epochs", 2,
        "--r", 2, "--loss-curve", d / "loss.csv",
    )
    assert code == 0
    return d


class TestGenerate:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            code, text = run("generate", "--count", 100, "--seed", 7, "--output", tmp_path / name)
            assert code == 0 and text.startswith("scenes=100 ")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_missing_output(self, capsys):
        assert run("generate", "--count", 5)[0] == 2

    def test_zero_count(self, tmp_path, caplog):
        code, text = run("generate", "--count", 0, "--output", tmp_path / "empty")
        assert code == 0 and "scenes=0" in text
        assert load_corpus(tmp_path / "empty") == []
        assert "empty" in caplog.text

    def test_invalid_spec(self, tmp_path):
        assert run("generate", "--n-min", 9, "--output", tmp_path / "x")[0] == 2

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# generator settings\ncount = 4\nseed = 3\nn-max = 5\n")
        code, text = run("generate", "--config", cfg, "--output", tmp_path / "c")
        assert code == 0 and text.startswith("scenes=4 ")
        assert max(s.n_persons for s in load_corpus(tmp_path / "c")) <= 5
        # flags override the file
        code, text = run("generate", "--config", cfg, "--count", 2, "--output", tmp_path / "d")
        assert text.startswith("scenes=2 ")

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("colour = red\n")
        assert run("generate", "--config", cfg, "--output", tmp_path / "x")[0] == 2

    def test_missing_config_file(self, tmp_path):
        assert run("generate", "--config", tmp_path / "nope.cfg", "--output", tmp_path / "x")[0] == 2


class TestPipeline:
    def test_loss_curve(self, workdir):
        lines = (workdir / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss" and len(lines) == 3

    def test_eval(self, workdir):
        code, text = run("eval", "--corpus", workdir / "test.jsonl", "--checkpoint", workdir / "model.json",
                         "--report", workdir / "report.json")
        assert code == 0 and "mAP" in text
        report = json.loads((workdir / "report.json").read_text())
        assert 0 <= report["mAP"] <= 100 and report["n_scenes"] == 10
        code, text = run("eval", "--corpus", workdir / "test.jsonl", "--checkpoint", workdir / "model.json", "--json")
        assert json.loads(text) == report

    def test_infer_unlabelled(self, workdir):
        scenes = load_corpus(workdir / "test.jsonl")
        from point_importance.data import save_corpus

        for s in scenes:
            s.labels = None
        save_corpus(workdir / "unlabelled.jsonl", scenes)
        code, text = run("infer", "--corpus", workdir / "unlabelled.jsonl", "--checkpoint", workdir / "model.json")
        assert code == 0
        rows = [json.loads(line) for line in text.splitlines()]
        assert len(rows) == 10 and "mAP" not in text
        first = rows[0]
        points = [p["point"] for p in first["ranking"]]
        assert points == sorted(points, reverse=True)
        assert first["most_important"] == first["ranking"][0]["person_id"]

    def test_d_f_mismatch(self, workdir, capsys):
        run("generate", "--count", 3, "--d-f", 48, "--output", workdir / "wide.jsonl")
        code, _ = run("eval", "--corpus", workdir / "wide.jsonl", "--checkpoint", workdir / "model.json")
        err = capsys.readouterr().err
        assert code == 2 and "d_f=48" in err and "d_f=40" in err

    def test_train_d_f_mismatch(self, workdir, capsys):
        code, _ = run("train", "--corpus", workdir / "train.jsonl", "--checkpoint", workdir / "x.json", "--d-f", 16)
        assert code == 2 and "d_f=16" in capsys.readouterr().err

    def test_missing_checkpoint(self, workdir):
        assert run("eval", "--corpus", workdir / "test.jsonl", "--checkpoint", workdir / "none.json")[0] == 2

    def test_malformed_corpus(self, workdir, capsys):
        bad = workdir / "bad.jsonl"
        bad.write_text('{"format":"point-corpus","version":1,"d_f":40}\n{oops\n')
        code, _ = run("eval", "--corpus", bad, "--checkpoint", workdir / "model.json")
        assert code == 3 and "line 2" in capsys.readouterr().err

    def test_r_must_divide(self, workdir):
        assert run("train", "--corpus", workdir / "train.jsonl", "--checkpoint", workdir / "x.json", "--r", 3)[0] == 2

    def test_divergence_exit(self, workdir):
        code, _ = run("train", "--corpus", workdir / "train.jsonl", "--checkpoint", workdir / "x.json",
                      "--r", 2, "--epochs", 20, "--lr", "1e150", "--momentum", 0)
        assert code == 1

    def test_reproducible_outputs(self, workdir):
        blobs = []
        for k in range(2):
            ck, rep = workdir / f"ck{k}.json", workdir / f"rep{k}.json"
            run("train", "--corpus", workdir / "train.jsonl", "--checkpoint", ck, "--epochs", 1, "--r", 2)
            run("eval", "--corpus", workdir / "test.jsonl", "--checkpoint", ck, "--report", rep)
            blobs.append((ck.read_bytes(), rep.read_bytes()))
        assert blobs[0] == blobs[1]

    def test_sweep(self, workdir):
        code, text = run(
            "sweep", "--corpus", workdir / "train.jsonl", "--test-corpus", workdir / "test.jsonl",
            "--axis", "fusion", "--values", "person_only,prior_importance", "--epochs", 1, "--r", 2,
            "--json-output", workdir / "sweep.json",
        )
        assert code == 0 and "POINT (prior importance)" in text
        assert len(json.loads((workdir / "sweep.json").read_text())["rows"]) == 2


class TestGradcheckCommand:
    def test_pass(self):
        code, text = run("gradcheck", "--configs", 4, "--coords", 20)
        assert code == 0 and text.startswith("PASS")

    def test_bad_count(self):
        assert run("gradcheck", "--configs", 0)[0] == 2


class TestUsage:
    def test_unknown_flag(self):
        assert run("generate", "--output", "x", "--bogus")[0] == 2

    def test_no_command(self):
        assert run()[0] == 2

    @pytest.mark.parametrize("cmd", ["generate", "train", "eval", "infer", "gradcheck", "sweep"])
    def test_help(self, cmd, capsys):
        assert run(cmd, "--help")[0] == 0
        text = capsys.readouterr().out
        assert "--threads" in text and "--config" in text
