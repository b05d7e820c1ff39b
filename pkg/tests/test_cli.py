import json

import pytest

from sianms.cli import EXIT_CODES, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_category(err):
    return json.loads(err.strip().splitlines()[-1])["error"]["category"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = {"sim": {"n_frames": 4, "objects_per_frame": [6, 10]},
           "benchmark": {"train_scenes": 1, "train_frames": 6},
           "encoder": {"epochs": 2, "batches_per_epoch": 10, "n_components": 16}}
    (d / "cfg.json").write_text(json.dumps(cfg))
    assert main(["simulate", "--config", str(d / "cfg.json"), "--seed", "3",
                 "--out", str(d / "scene.json")]) == 0
    assert main(["train-embed", "--config", str(d / "cfg.json"), "--seed", "1",
                 "--out", str(d / "enc.txt")]) == 0
    return d


def test_simulate_to_stdout(capsys):
    code, out, _ = run(capsys, "simulate", "--n-frames", 1, "--seed", 4)
    assert code == 0
    assert len(json.loads(out)["frames"]) == 1


def test_simulate_is_deterministic(workdir, capsys):
    out = workdir / "again.json"
    assert main(["simulate", "--config", str(workdir / "cfg.json"), "--seed", "3",
                 "--out", str(out)]) == 0
    assert out.read_bytes() == (workdir / "scene.json").read_bytes()


def test_train_embed_summary(workdir, capsys):
    code, out, _ = run(capsys, "train-embed", "--scene", workdir / "scene.json", "--epochs", 1,
                       "--out", workdir / "enc2.txt", "--config", workdir / "cfg.json")
    assert code == 0
    summary = json.loads(out)
    assert summary["n_components"] == 16 and summary["final_loss"] >= 0


def test_match(workdir, capsys):
    code, out, _ = run(capsys, "match", "--scene", workdir / "scene.json",
                       "--encoder", workdir / "enc.txt", "--mode", "optimal")
    assert code == 0
    rep = json.loads(out)
    assert rep["mode"] == "optimal" and len(rep["frames"]) == 4
    assert 0 <= rep["scores"]["f1"] <= 1


def test_pipeline_then_eval(workdir, capsys):
    det = workdir / "det.json"
    code, _, _ = run(capsys, "pipeline", "--scene", workdir / "scene.json", "--variant", "hybrid",
                     "--encoder", workdir / "enc.txt", "--out", det, "--threads", 2)
    assert code == 0
    code, out, _ = run(capsys, "eval", "--scene", workdir / "scene.json", "--detections", det,
                       "--out", workdir / "eval.json", "--name", "hybrid")
    assert code == 0 and "hybrid" in out and "Overlap" in out
    rep = json.loads((workdir / "eval.json").read_text())
    assert set(rep["variants"]["hybrid"]) == {"All", "Overlap"}


def test_benchmark_writes_json_and_table(workdir, capsys):
    out = workdir / "bench.json"
    code, stdout, _ = run(capsys, "benchmark", "--config", workdir / "cfg.json", "--n-frames", 3,
                          "--encoder", workdir / "enc.txt", "--out", out)
    assert code == 0
    rep = json.loads(out.read_text())
    assert set(rep["variants"]) == {"vanilla", "axis_nms", "sianms", "hybrid"}
    assert out.with_suffix(".txt").read_text() == stdout


@pytest.mark.parametrize("argv,category", [
    (["pipeline", "--scene", "{d}/scene.json", "--variant", "sianms"], "config"),
    (["eval", "--scene", "{d}/scene.json", "--detections", "{d}/missing.json"], "io"),
    (["pipeline", "--scene", "{d}/bad.json"], "format"),
    (["simulate", "--config", "{d}/badcfg.json"], "config"),
    (["simulate", "--n-frames", "0"], "config"),
    (["simulate", "--threads", "0"], "config"),
    (["pipeline", "--scene", "{d}/scene.json", "--variant", "nope"], "usage"),
])
def test_error_categories(workdir, capsys, argv, category):
    (workdir / "bad.json").write_text("{\n  oops")
    (workdir / "badcfg.json").write_text(json.dumps({"sim": {"hfov": 0.5}}))
    argv = [a.format(d=workdir) for a in argv]
    if category == "usage":
        with pytest.raises(SystemExit) as exc:
            main(argv)
        code = exc.value.code
    else:
        code = main(argv)
    err = capsys.readouterr().err
    assert code == EXIT_CODES[category]
    assert error_category(err) == category
