import json
import subprocess
import sys

import numpy as np
import pytest

from pfa import io as pio
from pfa.arch import simple_cnn_mini
from pfa.cli import main
from pfa.recipes import identity_recipe
from pfa.refnet.network import init_weights

from test_arch import SIMPLE_CNN_MINI_PARAMS


@pytest.fixture
def dump_dir(tmp_path):
    rng = np.random.default_rng(0)
    base = rng.normal(size=(40, 3))
    tensors = {
        "conv1": rng.normal(size=(40, 4, 4, 6)).astype(np.float32),
        "conv2": np.repeat(base, 3, axis=1)[:, None, None, :] + 0.01 * rng.normal(size=(40, 2, 2, 9)),
        "fc": rng.normal(size=(40, 5)),
    }
    pio.save_dump(tmp_path / "dump", tensors)
    return tmp_path / "dump"


@pytest.fixture
def mini(tmp_path):
    arch = simple_cnn_mini()
    pio.save_arch(arch, tmp_path / "mini.arch.json")
    pio.save_weights(init_weights(arch, 0), tmp_path / "mini.weights.pfaw")
    return arch, tmp_path / "mini.arch.json", tmp_path / "mini.weights.pfaw"


def run(*args):
    return main([str(a) for a in args])


class TestAnalyze:
    def test_three_layers(self, dump_dir, tmp_path):
        assert run("analyze", "--dump", dump_dir, "--out", tmp_path / "s.json") == 0
        doc = json.loads((tmp_path / "s.json").read_text())
        assert [e["id"] for e in doc["layers"]] == ["conv1", "conv2", "fc"]
        assert all(e["kl_to_uniform"] is not None for e in doc["layers"])

    def test_nan_dump(self, tmp_path, capsys):
        a = np.ones((5, 3))
        a[0, 0] = np.nan
        pio.save_tensor(a, tmp_path / "bad_layer.pfat")
        (tmp_path / "manifest.json").write_text(json.dumps({
            "format": "pfa/1", "kind": "activation_dump", "sample_count": 5,
            "layers": [{"id": "bad_layer", "file": "bad_layer.pfat", "shape": [5, 3], "dtype": "f64"}]}))
        assert run("analyze", "--dump", tmp_path, "--out", tmp_path / "s.json") == 2
        assert "bad_layer" in capsys.readouterr().err
        assert not (tmp_path / "s.json").exists()

    def test_rerun_byte_identical(self, dump_dir, tmp_path):
        run("analyze", "--dump", dump_dir, "--out", tmp_path / "a.json")
        run("analyze", "--dump", dump_dir, "--out", tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_missing_dump(self, tmp_path):
        assert run("analyze", "--dump", tmp_path / "nope", "--out", tmp_path / "s.json") == 2


class TestRecipe:
    @pytest.fixture
    def spectra(self, dump_dir, tmp_path):
        run("analyze", "--dump", dump_dir, "--out", tmp_path / "s.json")
        return tmp_path / "s.json"

    def test_energy(self, spectra, tmp_path):
        assert run("recipe", "--spectra", spectra, "--energy", 0.95, "--out", tmp_path / "r.json") == 0
        r = pio.load_recipe(tmp_path / "r.json")
        assert str(r.method) == "en(0.95)"
        assert r.entries["conv2"].kept_count <= 3

    def test_kl_uniform(self, tmp_path):
        from pfa.spectral import Spectrum

        pio.save_spectra([Spectrum("a", [0.25] * 4), Spectrum("b", [0.5, 0.5])], tmp_path / "u.json")
        assert run("recipe", "--spectra", tmp_path / "u.json", "--kl", "--out", tmp_path / "r.json") == 0
        r = pio.load_recipe(tmp_path / "r.json")
        assert all(e.gamma == 1.0 for e in r.entries.values())

    def test_target_full_size_is_identity(self, tmp_path, mini):
        arch, arch_path, _ = mini
        from pfa.spectral import Spectrum

        rng = np.random.default_rng(1)
        sp = []
        for k, c in arch.output_channels().items():
            v = np.sort(rng.exponential(size=c))[::-1]
            sp.append(Spectrum(k, v / v.sum()))
        pio.save_spectra(sp, tmp_path / "s.json")
        code = run("recipe", "--spectra", tmp_path / "s.json", "--target-params", SIMPLE_CNN_MINI_PARAMS,
                   "--arch", arch_path, "--out", tmp_path / "r.json")
        assert code == 0
        r = pio.load_recipe(tmp_path / "r.json")
        assert all(e.kept_count == e.channels for e in r.entries.values())
        code = run("recipe", "--spectra", tmp_path / "s.json", "--target-params", 10,
                   "--arch", arch_path, "--out", tmp_path / "r2.json")
        assert code == 2

    @pytest.mark.parametrize("flags", [[], ["--kl", "--energy", "0.9"], ["--target-params", "5"],
                                       ["--kl", "--arch", "x.json"]])
    def test_flag_conflicts(self, spectra, tmp_path, flags):
        assert run("recipe", "--spectra", spectra, *flags, "--out", tmp_path / "r.json") == 1

    def test_tau_out_of_range(self, spectra, tmp_path):
        assert run("recipe", "--spectra", spectra, "--energy", 1.5, "--out", tmp_path / "r.json") == 2


class TestSelectApplyCost:
    def test_select(self, dump_dir, tmp_path):
        run("analyze", "--dump", dump_dir, "--out", tmp_path / "s.json")
        run("recipe", "--spectra", tmp_path / "s.json", "--kl", "--out", tmp_path / "r.json")
        assert run("select", "--dump", dump_dir, "--recipe", tmp_path / "r.json",
                   "--out", tmp_path / "sel.json") == 0
        r = pio.load_recipe(tmp_path / "sel.json")
        assert all(len(e.kept_indices) == e.kept_count for e in r.entries.values())
        # three groups of near-copies: redundant copies go first, every group survives
        kept = r.entries["conv2"].kept_indices
        assert r.entries["conv2"].kept_count < 9
        assert {i // 3 for i in kept} == {0, 1, 2}

    def test_apply_identity_byte_identical(self, tmp_path, mini):
        arch, arch_path, w_path = mini
        pio.save_recipe(identity_recipe(arch.output_channels()), tmp_path / "id.json")
        assert run("apply", "--arch", arch_path, "--weights", w_path, "--recipe", tmp_path / "id.json",
                   "--out-prefix", tmp_path / "out") == 0
        assert (tmp_path / "out.weights.pfaw").read_bytes() == w_path.read_bytes()
        assert pio.load_arch(tmp_path / "out.arch.json") == arch

    def test_apply_without_indices(self, dump_dir, tmp_path, mini):
        arch, arch_path, w_path = mini
        from pfa.recipes import LayerRecipe, Method, Recipe

        pio.save_recipe(Recipe({"conv1": LayerRecipe.from_count(4, 16)}, Method("kl")), tmp_path / "r.json")
        assert run("apply", "--arch", arch_path, "--weights", w_path, "--recipe", tmp_path / "r.json",
                   "--out-prefix", tmp_path / "out") == 2

    def test_cost(self, mini, capsys):
        _, arch_path, _ = mini
        assert run("cost", "--arch", arch_path) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["params"] == SIMPLE_CNN_MINI_PARAMS
        assert sum(v["params"] for v in doc["per_layer"].values()) == doc["params"]

    def test_cost_input_shape(self, mini, capsys, tmp_path):
        _, arch_path, _ = mini
        run("cost", "--arch", arch_path)
        small = json.loads(capsys.readouterr().out)["flops"]
        assert run("cost", "--arch", arch_path, "--input-shape", "32,32,3", "--out", tmp_path / "c.json") == 0
        assert json.loads((tmp_path / "c.json").read_text())["flops"] == 4 * small
        assert run("cost", "--arch", arch_path, "--input-shape", "a,b") == 1


class TestUsage:
    def test_no_command(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["cost", "--bogus"]) == 1

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "analyze" in capsys.readouterr().out

    def test_console_script_exit_codes(self, tmp_path):
        ok = subprocess.run([sys.executable, "-m", "pfa.cli", "cost", "--arch", "nope.json"],
                            capture_output=True, text=True, cwd=tmp_path)
        assert ok.returncode == 2
        assert "nope.json" in ok.stderr


def test_demo_quick_deterministic(tmp_path, monkeypatch):
    monkeypatch.setenv("PFA_THREADS", "1")
    assert run("demo", "--seed", 3, "--out-dir", tmp_path / "a", "--quick") == 0
    assert run("demo", "--seed", 3, "--out-dir", tmp_path / "b", "--quick", "--summary") == 0
    csv_a = (tmp_path / "a" / "report.csv").read_text()
    assert csv_a == (tmp_path / "b" / "report.csv").read_text()
    assert csv_a.startswith("variant,init,mean_acc")
    assert (tmp_path / "a" / "summary.txt").read_text().startswith("full model")
