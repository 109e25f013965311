import json

import numpy as np
import pytest

from paresseg.cli import main
from paresseg.config import write_kv
from paresseg.data import load_dataset, load_split, load_volume
from paresseg.gradsuite import GradReport

TRAIN_ARGS = ["--patch-size", "32", "--stage-channels", "4,8,8,8,8,8", "--batch-size", "2",
              "--epochs", "1", "--samples-per-epoch", "4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "phantom.cfg"
    write_kv({"n_cases": 4, "dims": (16, 40, 40), "tumor_radius_min": 2.5, "tumor_radius_max": 5.0}, spec)
    assert main(["synth", "--config", str(spec), "--out", str(root / "data"), "--seed", "5"]) == 0
    assert main(["split", "--data", str(root / "data"), "--k", "2", "--seed", "1",
                 "--out", str(root / "split.json")]) == 0
    return root


class TestCli:
    def test_synth_and_split(self, dataset):
        cases = load_dataset(dataset / "data")
        assert len(cases) == 4 and cases[0].dims == (16, 40, 40)
        folds = load_split(dataset / "split.json")
        assert sorted(c for f in folds for c in f) == [c.case_id for c in cases]

    def test_seed_is_mandatory(self, dataset, capsys):
        with pytest.raises(SystemExit):
            main(["synth", "--out", str(dataset / "x")])
        with pytest.raises(SystemExit):
            main(["train", "--data", str(dataset / "data"), "--out", str(dataset / "x")])

    def test_train_infer_eval(self, dataset, capsys):
        run = dataset / "run"
        cfg = dataset / "train.cfg"
        write_kv({"fusion": "msf", "lr": 0.002}, cfg)
        assert main(["train", "--config", str(cfg), "--data", str(dataset / "data"), "--out", str(run),
                     "--seed", "0", "--split", str(dataset / "split.json"), "--fold", "0", *TRAIN_ARGS]) == 0
        losses = json.loads((run / "losses.json").read_text())
        assert losses["config"]["network"]["fusion"] == "msf" and losses["config"]["lr"] == 0.002
        assert len(losses["step_losses"]) == 2

        case_dir = sorted((dataset / "data").glob("case_*"))[0]
        assert main(["infer", "--checkpoint", str(run / "model.ckpt"), "--case", str(case_dir),
                     "--out", str(dataset / "mask")]) == 0
        mask = load_volume(dataset / "mask")
        assert mask.dims == (16, 40, 40) and mask.dtype_code == "u8"

        assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(dataset / "data"),
                     "--split", str(dataset / "split.json"), "--fold", "0", "--out", str(dataset / "rep")]) == 0
        rep = json.loads((dataset / "rep.json").read_text())
        assert rep["aggregate"]["n_cases"] == 2
        assert "DPC" in (dataset / "rep.txt").read_text()

    def test_flags_override_config(self, dataset):
        cfg = dataset / "over.cfg"
        write_kv({"fusion": "msf", "lr": 0.002}, cfg)
        run = dataset / "over"
        assert main(["train", "--config", str(cfg), "--data", str(dataset / "data"), "--out", str(run),
                     "--seed", "0", "--fusion", "single", *TRAIN_ARGS]) == 0
        snap = json.loads((run / "losses.json").read_text())["config"]
        assert snap["network"]["fusion"] == "single" and snap["lr"] == 0.002

    def test_ablate(self, dataset, capsys):
        out = dataset / "ablate"
        assert main(["ablate", "--data", str(dataset / "data"), "--split", str(dataset / "split.json"),
                     "--fold", "0", "--out", str(out), "--strategies", "single,msf", "--loss-kinds", "ce",
                     "--seeds", "0", *TRAIN_ARGS]) == 0
        table = json.loads((out / "ablation.json").read_text())
        assert table["columns"] == ["DPC", "DG", "VOE", "RVD"]
        assert [r["strategy"] for r in table["rows"]] == ["single", "msf"]

    def test_errors_exit_nonzero(self, dataset, capsys):
        assert main(["eval", "--checkpoint", str(dataset / "missing.ckpt"), "--data", str(dataset / "data"),
                     "--out", str(dataset / "r")]) == 2
        assert "error:" in capsys.readouterr().err
        assert main(["ablate", "--data", str(dataset / "data"), "--out", str(dataset / "a")]) == 2

    def test_gradcheck_exit_code(self, monkeypatch, capsys):
        import paresseg.gradsuite as gs

        monkeypatch.setattr(gs, "run_suite", lambda seed=0, verbose=False: GradReport(errors={"ok": 1e-9}))
        assert main(["gradcheck"]) == 0
        monkeypatch.setattr(gs, "run_suite", lambda seed=0, verbose=False: GradReport(errors={"bad": 1e-2}))
        assert main(["gradcheck"]) == 1
        assert "FAILED bad" in capsys.readouterr().out
