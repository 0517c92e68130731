import json

import numpy as np
import pytest
from click.testing import CliRunner

from linident.analysis import ReprDump
from linident.cli import main
from linident.model import load_checkpoint

from test_experiments import tiny


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A generated radial dataset and two models trained on it."""
    root = tmp_path_factory.mktemp("cli")
    gen = _write(root / "gen.json", {"generator": "radial_gaussian",
                                      "params": {"n": 400, "n_classes": 6, "noise_dims": 2}})
    assert _invoke("gen-data", "--spec", gen, "--seed", 1, "--out", root).exit_code == 0
    data_path = root / "radial_gaussian.csv"
    model = {"f": {"type": "mlp", "sizes": [4, 12, 3], "activation": "tanh", "token_vocab": None},
             "g": {"type": "embedding_table", "n_labels": 6, "dim": 3}}
    for name, seed in (("a", 1), ("b", 2)):
        spec = _write(root / f"train_{name}.json", {
            "data": str(data_path), "model": model, "checkpoint_iters": [20],
            "config": {"max_iters": 40, "batch_size": 32, "eval_interval": 20}})
        res = _invoke("train", "--spec", spec, "--seed", seed, "--out", root / name)
        assert res.exit_code == 0, res.output
    return root, data_path


class TestGenData:
    @pytest.mark.parametrize("generator, params, rows", [
        ("radial_gaussian", {"n": 50, "n_classes": 4, "noise_dims": 1}, 50),
        ("markov_corpus", {"vocab": 8, "length": 30}, 30),
        ("patch_pairs", {"n": 10}, 10),
    ])
    def test_generators(self, tmp_path, generator, params, rows):
        spec = _write(tmp_path / "s.json", {"generator": generator, "params": params})
        res = _invoke("gen-data", "--spec", spec, "--out", tmp_path)
        assert res.exit_code == 0, res.output
        path = tmp_path / f"{generator}.csv"
        assert len(path.read_text().splitlines()) == rows + 1
        assert json.loads((tmp_path / f"{generator}.csv.json").read_text())["generator"] == generator

    def test_seed_flag_overrides(self, tmp_path):
        spec = _write(tmp_path / "s.json", {"generator": "radial_gaussian", "seed": 1,
                                            "params": {"n": 20, "noise_dims": 0}})
        _invoke("gen-data", "--spec", spec, "--out", tmp_path / "a")
        _invoke("gen-data", "--spec", spec, "--seed", 1, "--out", tmp_path / "b")
        _invoke("gen-data", "--spec", spec, "--seed", 2, "--out", tmp_path / "c")
        read = lambda d: (tmp_path / d / "radial_gaussian.csv").read_text()
        assert read("a") == read("b") != read("c")

    @pytest.mark.parametrize("spec", [
        {"generator": "mnist"},
        {"generator": "radial_gaussian", "params": {"bogus": 1}},
        {"generator": "patch_pairs", "params": {"bogus": 1}},
    ])
    def test_invalid_spec(self, tmp_path, spec):
        assert _invoke("gen-data", "--spec", _write(tmp_path / "s.json", spec),
                       "--out", tmp_path).exit_code == 2

    def test_missing_spec_file(self, tmp_path):
        assert _invoke("gen-data", "--spec", tmp_path / "none.json").exit_code == 2

    def test_spec_required(self):
        assert _invoke("gen-data").exit_code == 2


class TestTrain:
    def test_outputs(self, trained):
        root, _ = trained
        for name in ("model.ckpt", "trace.csv", "ckpt_20.ckpt"):
            assert (root / "a" / name).exists()
        model, header = load_checkpoint(root / "a" / "model.ckpt")
        assert header["seed"] == 1 and model.repr_dim == 3
        assert (root / "a" / "trace.csv").read_text().splitlines()[0] == "iteration,train_loss,val_loss"

    def test_generator_data(self, tmp_path):
        spec = _write(tmp_path / "t.json", {
            "data": {"generator": "markov_corpus", "params": {"vocab": 8, "length": 300, "context": 2}},
            "model": {"f": {"type": "log_bilinear", "vocab": 8, "context": 2, "dim": 2},
                      "g": {"type": "embedding_table", "n_labels": 8, "dim": 2}},
            "config": {"task": "next_token", "max_iters": 10, "batch_size": 16, "eval_interval": 5}})
        res = _invoke("train", "--spec", spec, "--out", tmp_path)
        assert res.exit_code == 0, res.output

    @pytest.mark.parametrize("spec", [
        {"model": {}},
        {"data": 3, "model": {"f": {"type": "mlp", "sizes": [2, 2]},
                              "g": {"type": "embedding_table", "n_labels": 2, "dim": 2}}},
        {"extra": 1},
        {"config": {"learning_rate": -1.0}},
    ])
    def test_invalid(self, tmp_path, spec):
        assert _invoke("train", "--spec", _write(tmp_path / "t.json", spec)).exit_code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_one(self, trained, tmp_path):
        _, data_path = trained
        spec = _write(tmp_path / "t.json", {
            "data": str(data_path),
            "model": {"f": {"type": "mlp", "sizes": [4, 12, 3]},
                      "g": {"type": "embedding_table", "n_labels": 6, "dim": 3}},
            "config": {"learning_rate": 1e200, "max_iters": 50, "batch_size": 32, "eval_interval": 10}})
        res = _invoke("train", "--spec", spec, "--out", tmp_path)
        assert res.exit_code == 1 and "DivergenceError" in res.output


class TestDumpAndAnalyze:
    def test_round_trip(self, trained, tmp_path):
        root, data_path = trained
        for name in ("a", "b"):
            res = _invoke("dump-repr", "--checkpoint", root / name / "model.ckpt", "--data", data_path,
                          "--limit", 100, "--out", tmp_path / name)
            assert res.exit_code == 0, res.output
        dump = ReprDump.load(tmp_path / "a" / "repr_model_f_output.csv")
        assert dump.data.shape == (100, 3) and dump.meta["side"] == "f"
        res = _invoke("analyze", tmp_path / "a" / "repr_model_f_output.csv",
                      tmp_path / "b" / "repr_model_f_output.csv", "--k", 2, "--out", tmp_path)
        assert res.exit_code == 0, res.output
        report = json.loads((tmp_path / "analysis.json").read_text())
        assert set(report["svcca"]) == {"2"} and 0 <= report["cca"]["mean_rho"] <= 1
        assert (tmp_path / "analysis.csv").read_text().startswith("measure,k,value")

    def test_hidden_layer_and_g_side(self, trained, tmp_path):
        root, data_path = trained
        ckpt = root / "a" / "model.ckpt"
        assert _invoke("dump-repr", "--checkpoint", ckpt, "--data", data_path, "--layer", 1,
                       "--out", tmp_path).exit_code == 0
        assert ReprDump.load(tmp_path / "repr_model_f_1.csv").data.shape == (400, 12)
        assert _invoke("dump-repr", "--checkpoint", ckpt, "--data", data_path, "--side", "g",
                       "--out", tmp_path).exit_code == 0
        assert ReprDump.load(tmp_path / "repr_model_g_g.csv").data.shape == (400, 3)

    def test_bad_layer(self, trained, tmp_path):
        root, data_path = trained
        res = _invoke("dump-repr", "--checkpoint", root / "a" / "model.ckpt", "--data", data_path,
                      "--layer", 7, "--out", tmp_path)
        assert res.exit_code == 2

    def test_analyze_constant_repr_fails(self, tmp_path):
        ReprDump(np.ones((5, 2))).save(tmp_path / "c.csv")
        ReprDump(np.arange(10.0).reshape(5, 2) ** 2).save(tmp_path / "d.csv")
        assert _invoke("analyze", tmp_path / "c.csv", tmp_path / "d.csv", "--out", tmp_path).exit_code == 1


class TestVerify:
    def test_self_check(self, tmp_path):
        res = _invoke("verify", "--out", tmp_path)
        assert res.exit_code == 0 and "passed: True" in res.output
        assert json.loads((tmp_path / "verify.json").read_text())["passed"] is True

    def test_checkpoint_pair(self, trained, tmp_path):
        root, data_path = trained
        res = _invoke("verify", "--checkpoint-a", root / "a" / "model.ckpt",
                      "--checkpoint-b", root / "b" / "model.ckpt", "--data", data_path, "--out", tmp_path)
        assert res.exit_code == 0, res.output
        report = json.loads((tmp_path / "verify.json").read_text())
        assert {"diversity", "theorem1", "context", "linear_fit"} <= set(report)

    def test_same_checkpoint_recovers_identity(self, trained, tmp_path):
        root, data_path = trained
        ckpt = root / "a" / "model.ckpt"
        _invoke("verify", "--checkpoint-a", ckpt, "--checkpoint-b", ckpt, "--data", data_path, "--out", tmp_path)
        report = json.loads((tmp_path / "verify.json").read_text())
        np.testing.assert_allclose(report["theorem1"]["map"], np.eye(3), atol=1e-8)

    def test_partial_arguments(self, trained):
        root, _ = trained
        assert _invoke("verify", "--checkpoint-a", root / "a" / "model.ckpt").exit_code == 2


class TestExperimentVerbs:
    def test_sweep(self, tmp_path):
        spec = _write(tmp_path / "s.json", tiny("contrastive_sweep_width"))
        res = _invoke("sweep", "--spec", spec, "--out", tmp_path, "--jobs", 2, "--svg")
        assert res.exit_code == 0, res.output
        assert "spearman_f" in res.output
        assert (tmp_path / "contrastive_sweep_width.svg").exists()

    def test_sweep_axis_conflict(self, tmp_path):
        spec = _write(tmp_path / "s.json", tiny("contrastive_sweep_width"))
        assert _invoke("sweep", "--spec", spec, "--axis", "data_size").exit_code == 2

    def test_sweep_needs_axis_or_spec(self):
        assert _invoke("sweep").exit_code == 2

    def test_layerwise(self, tmp_path):
        spec = _write(tmp_path / "s.json", tiny("layerwise"))
        res = _invoke("layerwise", "--spec", spec, "--out", tmp_path)
        assert res.exit_code == 0, res.output
        assert (tmp_path / "layerwise.csv").exists()

    def test_layerwise_wrong_experiment(self, tmp_path):
        spec = _write(tmp_path / "s.json", tiny("nplm_fig1"))
        assert _invoke("layerwise", "--spec", spec).exit_code == 2

    @pytest.mark.parametrize("exp", ["simulation", "nplm_fig1"])
    def test_report(self, tmp_path, exp):
        spec = _write(tmp_path / "s.json", tiny(exp))
        res = _invoke("report", "--spec", spec, "--seed", 3, "--out", tmp_path)
        assert res.exit_code == 0, res.output
        report = json.loads((tmp_path / f"{exp}_report.json").read_text())
        assert report["spec"]["seed"] == 3

    def test_report_experiment_failure(self, tmp_path):
        spec = _write(tmp_path / "s.json", tiny("nplm_fig1", vocab=2))
        res = _invoke("report", "--spec", spec, "--out", tmp_path)
        assert res.exit_code == 1 and "InsufficientTargetsError" in res.output

    @pytest.mark.parametrize("raw", [{"experiment": "simulation", "replicates": 1}, {"foo": 1}])
    def test_report_invalid_spec(self, tmp_path, raw):
        assert _invoke("report", "--spec", _write(tmp_path / "s.json", raw)).exit_code == 2

    def test_seed_out_of_range(self, tmp_path):
        spec = _write(tmp_path / "s.json", tiny("nplm_fig1"))
        assert _invoke("report", "--spec", spec, "--seed", 2 ** 64).exit_code == 2
