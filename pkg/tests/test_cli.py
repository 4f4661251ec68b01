import struct

import numpy as np
import pytest

from edgewise import config as cfgmod
from edgewise.cli import main, report_rows, selftest_checks
from edgewise.formats import load_mbn
from edgewise.model import MlpModel, accuracy, load_mnist
from edgewise.numerics import make_rng


def write_idx(path, array, magic):
    dims = array.shape
    path.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims)
                     + array.astype(np.uint8).tobytes())


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    """Digit-shaped IDX files where each class lights one horizontal band."""
    root = tmp_path_factory.mktemp("idx")
    rng = make_rng(0)
    for name, n in (("train", 600), ("t10k", 200)):
        labels = rng.integers(0, 10, n)
        images = rng.integers(0, 40, (n, 28, 28))
        for i, c in enumerate(labels):
            images[i, 2 * c + 4:2 * c + 6, :] = 250
        write_idx(root / f"{name}-images-idx3-ubyte", images, 0x803)
        write_idx(root / f"{name}-labels-idx1-ubyte", labels, 0x801)
    return root


@pytest.fixture(scope="module")
def pretrained(tiny_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    code = main(["pretrain", "--data-dir", str(tiny_data), "--out-dir", str(out), "--sizes", "784,16,16,10",
                 "--epochs", "15", "--lr", "0.01", "--batch-size", "32"])
    assert code == 0
    return out / "model.npz"


class TestConfig:
    def test_parse_text(self):
        assert cfgmod.parse_text("# c\nk = 0.2  # note\n\nrounds=3\n") == {"k": "0.2", "rounds": "3"}

    def test_precedence(self):
        cfg = cfgmod.resolve("dpu", {"k": "0.2", "rounds": "3"}, {"k": "0.3"})
        assert cfg["k"] == 0.3 and cfg["rounds"] == 3 and cfg["arms"][0] == "FULL"

    def test_lists_and_bools(self):
        cfg = cfgmod.resolve("dress", {"levels": "0.5, 0.9", "layerwise": "no"}, {})
        assert cfg["levels"] == (0.5, 0.9) and cfg["layerwise"] is False

    def test_unknown_key(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve("dpu", {"nope": "1"}, {})

    def test_bad_value(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.resolve("dpu", {"rounds": "many"}, {})

    def test_csv_round_trip(self, tmp_path):
        cfgmod.write_csv(tmp_path / "t.csv", [{"a": 0.1, "b": [1, 2]}], ["a", "b"])
        assert cfgmod.read_csv(tmp_path / "t.csv") == [{"a": "0.1", "b": "1;2"}]


class TestExitCodes:
    def test_selftest(self, capsys):
        assert main(["selftest"]) == 0
        assert all(ok for _, ok in selftest_checks())
        assert "FAIL" not in capsys.readouterr().out

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("bogus = 1\n")
        assert main(["dpu", "--config", str(path), "--out-dir", str(tmp_path)]) == 2

    def test_invalid_value(self, tmp_path):
        assert main(["dpu", "--k", "0", "--out-dir", str(tmp_path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["dpu", "--config", str(tmp_path / "none.txt")]) == 2

    def test_missing_data(self, tmp_path):
        assert main(["pretrain", "--data-dir", str(tmp_path / "none"), "--out-dir", str(tmp_path)]) == 3

    def test_missing_model(self, tmp_path):
        assert main(["sketch", "--model", str(tmp_path / "none.npz"), "--out-dir", str(tmp_path)]) == 3


class TestCommands:
    def test_pretrain_learns(self, tiny_data, pretrained):
        _, test = load_mnist(tiny_data)
        assert accuracy(MlpModel.load(pretrained), test) >= 0.9

    def test_sketch_reconstructs(self, pretrained, tmp_path):
        assert main(["sketch", "--model", str(pretrained), "--out-dir", str(tmp_path), "--sigma", "0"]) == 0
        qm = load_mbn(tmp_path / "model.mbn")
        model = MlpModel.load(pretrained)
        for w, v in zip(model.weights, qm.weights()):
            assert np.linalg.norm(w - v) <= 0.05 * np.linalg.norm(w)
        rows = cfgmod.read_csv(tmp_path / "sketch_report.csv")
        assert all(r["bound_violations"] == "0" for r in rows)
        assert (tmp_path / "sketch_config.txt").exists()

    def test_alq(self, tiny_data, pretrained, tmp_path):
        args = ["alq", "--model", str(pretrained), "--data-dir", str(tiny_data), "--out-dir", str(tmp_path),
                "--rounds", "1", "--prune-iters", "5", "--bases-iters", "5", "--coords-iters", "5",
                "--init-iters", "5", "--final-iters", "5", "--i-max", "4"]
        assert main(args) == 0
        trace = cfgmod.read_csv(tmp_path / "alq_trace.csv")
        assert trace[-1]["stage"] == "final"
        assert load_mbn(tmp_path / "alq.mbn").model_bitwidth() <= 4.0

    def test_dress(self, tiny_data, pretrained, tmp_path):
        args = ["dress", "--model", str(pretrained), "--data-dir", str(tiny_data), "--out-dir", str(tmp_path),
                "--epochs", "1", "--lr", "0.005"]
        assert main(args) == 0
        rows = cfgmod.read_csv(tmp_path / "dress_results.csv")
        assert [r["level"] for r in rows] == ["0", "1", "2"]
        assert len(list(tmp_path.glob("layer*.dcsr"))) == 3

    def test_dpu_seed_repeat_and_report(self, tiny_data, tmp_path):
        common = ["dpu", "--data-dir", str(tiny_data), "--sizes", "784,8,10", "--d1", "60", "--dd", "60",
                  "--rounds", "3", "--epochs", "1", "--arms", "FULL,DPU,RPU", "--seeds", "0,1"]
        assert main(common + ["--out-dir", str(tmp_path / "a")]) == 0
        assert main(common + ["--out-dir", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "dpu_trace.csv").read_text()
        assert a == (tmp_path / "b" / "dpu_trace.csv").read_text()
        assert main(["report", "--traces", str(tmp_path / "a" / "dpu_trace.csv"),
                     "--out-dir", str(tmp_path / "r")]) == 0
        report = {r["arm"]: r for r in cfgmod.read_csv(tmp_path / "r" / "report.csv")}
        assert float(report["FULL"]["cost_ratio_mean"]) == 1.0 and report["DPU"]["seeds"] == "2"


class TestReport:
    def test_dress_aggregation(self, tmp_path):
        for seed, accs in ((0, (0.9, 0.8)), (1, (0.7, 0.6))):
            rows = [{"seed": seed, "level": k, "sparsity": s, "test_acc": a, "val_acc": a}
                    for k, (s, a) in enumerate(zip((0.5, 0.75), accs))]
            cfgmod.write_csv(tmp_path / f"d{seed}.csv", rows, ["seed", "level", "sparsity", "test_acc", "val_acc"])
        columns, out = report_rows([tmp_path / "d0.csv", tmp_path / "d1.csv"])
        assert columns[0] == "level"
        assert out[0]["test_acc_mean"] == pytest.approx(0.8) and out[0]["test_acc_std"] == pytest.approx(0.1)
        assert out[1]["runs"] == 2

    def test_dpu_aggregation(self, tmp_path):
        rows = []
        for seed, diff in ((0, -0.01), (1, 0.03)):
            for r in (1, 2):
                rows.append({"round": r, "arm": "FULL", "seed": seed, "test_acc": 0.9, "payload_bits": 100.0,
                             "acc_diff_vs_full": 0.0})
                rows.append({"round": r, "arm": "DPU", "seed": seed, "test_acc": 0.9 + diff,
                             "payload_bits": 10.0 if r > 1 else 100.0, "acc_diff_vs_full": diff})
        from edgewise.cli import DPU_COLUMNS
        cfgmod.write_csv(tmp_path / "t.csv", rows, DPU_COLUMNS)
        _, out = report_rows([tmp_path / "t.csv"])
        dpu = next(r for r in out if r["arm"] == "DPU")
        assert dpu["acc_diff_mean"] == pytest.approx(0.01) and dpu["acc_diff_std"] == pytest.approx(0.02)
        assert dpu["cost_ratio_mean"] == pytest.approx(0.1)

    def test_mixed_columns(self, tmp_path):
        cfgmod.write_csv(tmp_path / "a.csv", [{"x": 1}], ["x"])
        assert main(["report", "--traces", str(tmp_path / "a.csv"), "--out-dir", str(tmp_path)]) == 3
