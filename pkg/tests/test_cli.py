import hashlib
import json

import pytest

from cocokit import cli

FAST = "arch=conv3x3:4,relu,maxpool2,flatten,dense:8\nimage_size=16\npretrain_epochs=2\nmax_epochs=2\n"


def digest(directory):
    h = hashlib.sha256()
    for p in sorted(directory.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--classes", "3", "--per-class", "10", "--size", "16",
                     "--seed", "1", "--out", str(out)]) == 0
    return out / "manifest.csv"


@pytest.fixture(scope="module")
def fast_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "fast.cfg"
    path.write_text(FAST)
    return path


def test_gen_data_defaults_and_repeatability(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr()
    assert json.loads(out.err.splitlines()[0])["classes"] == 8
    assert out.out.count("species") == 8 and "wrote 800 images" in out.out
    assert cli.main(["gen-data", "--out", str(tmp_path / "b")]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_gen_data_long_tail_table(tmp_path, capsys):
    cli.main(["gen-data", "--classes", "4", "--per-class", "40", "--long-tail", "--out", str(tmp_path)])
    rows = [l.split() for l in capsys.readouterr().out.splitlines() if l.startswith("species")]
    sizes = [int(r[1]) for r in rows]
    assert sizes == sorted(sizes, reverse=True) and sizes[0] > sizes[-1]


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["gen-data", "--out", str(blocker / "sub")]) == 2


def test_unknown_flag_rejected(capsys):
    assert cli.main(["sigtest", "--wins", "3", "--trials", "5", "--bogus"]) == 2


@pytest.mark.parametrize("mode", ["coconet", "softmax"])
def test_train_then_eval(tmp_path, data, fast_cfg, capsys, mode):
    run = tmp_path / "run"
    assert cli.main(["train", "--mode", mode, "--config", str(fast_cfg), "--data", str(data),
                     "--out", str(run)]) == 0
    echoed = json.loads(capsys.readouterr().err.splitlines()[0])
    assert echoed["max_epochs"] == 2 and echoed["image_size"] == 16
    assert (run / "model.ckpt").exists() and (run / "config.txt").exists()
    lines = (run / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,cost,accuracy,lr" and len(lines) == 5
    report = tmp_path / "eval.json"
    assert cli.main(["eval", "--model", str(run / "model.ckpt"), "--data", str(data),
                     "--out", str(report)]) == 0
    assert json.loads(report.read_text())["folds"][0] >= 0


def test_train_is_reproducible(tmp_path, data, fast_cfg):
    for name in ("a", "b"):
        assert cli.main(["train", "--config", str(fast_cfg), "--data", str(data),
                         "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_flags_override_config(tmp_path, data, fast_cfg, capsys):
    cli.main(["train", "--config", str(fast_cfg), "--epochs", "1", "--seed", "5", "--data", str(data),
              "--out", str(tmp_path)])
    echoed = json.loads(capsys.readouterr().err.splitlines()[0])
    assert echoed["max_epochs"] == 1 and echoed["seed"] == 5 and echoed["pretrain_epochs"] == 2
    assert echoed["enable_grad_Y"] is True and echoed["refit_A"] is True
    cli.main(["train", "--config", str(fast_cfg), "--no-enable-grad-y", "--data", str(data),
              "--out", str(tmp_path)])
    assert json.loads(capsys.readouterr().err.splitlines()[0])["enable_grad_Y"] is False


def test_missing_inputs_exit_2(tmp_path, fast_cfg, data):
    assert cli.main(["train", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2
    assert cli.main(["eval", "--model", str(tmp_path / "none.ckpt"), "--data", str(data)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "none.cfg"), "--data", str(data),
                     "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key=1\n")
    assert cli.main(["train", "--config", str(bad), "--data", str(data), "--out", str(tmp_path)]) == 2


def test_divergence_exit_3(tmp_path, data, fast_cfg):
    cfg = tmp_path / "div.cfg"
    cfg.write_text(FAST + "divergence_factor=1e-9\n")
    assert cli.main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path)]) == 3


def test_crossval_and_compare(tmp_path, data, fast_cfg, capsys):
    out = tmp_path / "cv.json"
    assert cli.main(["crossval", "--k", "5", "--mode", "cascade_crc", "--config", str(fast_cfg),
                     "--data", str(data), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["folds"]) == 5 and {"mean", "std", "config_hash"} <= doc.keys()
    capsys.readouterr()
    assert cli.main(["compare", "--k", "2", "--config", str(fast_cfg), "--data", str(data)]) == 0
    text = capsys.readouterr().out
    table = text.split("{", 1)[0]
    assert sum(label in table for label in ("CNN (softmax)", "CNN+CRC", "CNN+ProCRC", "CoCoNet")) == 4
    assert cli.main(["compare", "--modes", "softmax,svm", "--data", str(data)]) == 2


def test_crossval_reproducible(tmp_path, data, fast_cfg):
    for name in ("a.json", "b.json"):
        cli.main(["crossval", "--k", "2", "--config", str(fast_cfg), "--data", str(data),
                  "--out", str(tmp_path / name)])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_gradcheck(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("grad_W", "grad_A", "grad_X", "grad_Y", "featnet"):
        assert f"PASS {name}" in out
    assert cli.main(["gradcheck", "--sizes", "2,3,4"]) == 0
    assert cli.main(["gradcheck", "--sizes", "2,3"]) == 2


@pytest.mark.parametrize("target", ["grad_W", "featnet"])
def test_gradcheck_negative_control(capsys, target):
    assert cli.main(["gradcheck", "--corrupt", target]) == 1
    captured = capsys.readouterr()
    assert f"FAIL {target}" in captured.out and target in captured.err


def test_sigtest(capsys):
    assert cli.main(["sigtest", "--wins", "33", "--trials", "45"]) == 0
    out = capsys.readouterr().out
    assert "p = 0.001229" in out and "0.005556" in out and out.strip().endswith("significant")
    assert "not" not in out
    cli.main(["sigtest", "--wins", "22", "--trials", "45"])
    out = capsys.readouterr().out
    p = float(out.split("p = ")[1].split()[0])
    assert p > 0.5 and "not significant" in out
    assert cli.main(["sigtest", "--wins", "50", "--trials", "45"]) == 2


def test_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("COCOKIT_THREADS", "1")
    assert cli.main(["sigtest", "--wins", "1", "--trials", "2"]) == 0
    monkeypatch.setenv("COCOKIT_THREADS", "many")
    assert cli.main(["sigtest", "--wins", "1", "--trials", "2"]) == 2


def test_training_accuracy_not_below_held_out(tmp_path, data, fast_cfg, capsys):
    rows = data.read_text().splitlines()
    header, body = rows[0], rows[1:]
    train_m, test_m = data.parent / "train.csv", data.parent / "test.csv"
    train_m.write_text("\n".join([header] + body[::2]) + "\n")
    test_m.write_text("\n".join([header] + body[1::2]) + "\n")
    cfg = tmp_path / "conv.cfg"
    cfg.write_text(FAST.replace("max_epochs=2", "max_epochs=20"))
    assert cli.main(["train", "--mode", "cascade_crc", "--config", str(cfg), "--data", str(train_m),
                     "--out", str(tmp_path)]) == 0
    accs = []
    for m in (train_m, test_m):
        cli.main(["eval", "--model", str(tmp_path / "model.ckpt"), "--data", str(m),
                  "--out", str(tmp_path / "r.json")])
        accs.append(json.loads((tmp_path / "r.json").read_text())["mean"])
    assert accs[0] >= accs[1]
