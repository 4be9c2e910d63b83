import json
import subprocess
import sys

import numpy as np
import pytest

from deepunfold.audio import Waveform, read_wav, write_wav
from deepunfold.cli import SCHEMAS, UsageError, dispatch, load_config, main
from deepunfold.evaluation import synthesize_mixture


def run(argv, capsys):
    code = dispatch(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("R,C,expected", [
    (200, 1, "P_D=40000 P=400000"),
    (200, 0, "P_D=0 P=360000"),
    (2000, 3, "P_D=1200000 P=4800000"),
])
def test_param_count(capsys, R, C, expected):
    code, out, _ = run(["param-count", "--T", "9", "--F", "200", "--R", str(R), "--C", str(C)], capsys)
    assert code == 0 and out.strip() == expected


def test_no_arguments_is_usage_error(capsys):
    code, _, err = run([], capsys)
    assert code == 1 and "usage" in err


def test_unknown_command(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1 and "usage" in err


def test_missing_required(capsys):
    code, _, err = run(["param-count", "--R", "5"], capsys)
    assert code == 1 and "--C" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "deepunfold", "param-count", "--R", "200", "--C", "1"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "P_D=40000 P=400000"


def test_main_accepts_argv(capsys):
    assert main(["param-count", "--R", "1", "--C", "1"]) == 0


# configuration


def test_config_verbatim_and_override(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"R": 200, "C": 1}))
    assert load_config(path, {}) == {"R": 200, "C": 1}
    assert load_config(path, {"C": 3, "R": None}) == {"R": 200, "C": 3}
    cfg = load_config(path, {"C": 2}, SCHEMAS["param-count"])
    assert cfg == {"T": 9, "F": 200, "R": 200, "C": 2}


def test_unknown_key_named(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"betaa1": 1.0, "R": 1, "C": 1}))
    with pytest.raises(UsageError, match="betaa1"):
        load_config(path, {}, SCHEMAS["param-count"])
    code, _, err = run(["param-count", "--config", str(path)], capsys)
    assert code == 1 and "betaa1" in err


def test_type_mismatch_and_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"R": "many", "C": 1}))
    with pytest.raises(UsageError, match="R"):
        load_config(path, {}, SCHEMAS["param-count"])
    path.write_text("{not json")
    with pytest.raises(UsageError, match="malformed"):
        load_config(path, {}, SCHEMAS["param-count"])


def test_seed_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("UNFOLD_SEED", "17")
    req = {"model": "m", "out": "o"}
    assert load_config(None, req, SCHEMAS["train-deep"])["seed"] == 17
    assert load_config(None, {**req, "seed": 3}, SCHEMAS["train-deep"])["seed"] == 3


# audio pipeline


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m"
    code = dispatch(["train-snmf", "--synthetic", "2", "--R", "4", "--T", "2", "--K", "3",
                     "--iters", "3", "--frames", "200", "--out", str(out)])
    assert code == 0
    return out


def test_separate_writes_wav(model_dir, tmp_path, capsys):
    fix = synthesize_mixture(99, 0.0, duration=1.0)
    write_wav(tmp_path / "mix.wav", fix.mixture)
    code, _, _ = run(["separate", "--model", str(model_dir), "--in", str(tmp_path / "mix.wav"),
                      "--out", str(tmp_path / "est.wav"), "--noise-out", str(tmp_path / "n.wav")], capsys)
    assert code == 0
    est = read_wav(tmp_path / "est.wav")
    assert len(est) == len(fix.mixture) and np.any(est.samples != 0)
    assert (tmp_path / "n.wav").exists()


def test_separate_is_reproducible(model_dir, tmp_path, capsys):
    write_wav(tmp_path / "mix.wav", synthesize_mixture(98, 3.0, duration=1.0).mixture)
    for name in ("a.wav", "b.wav"):
        assert dispatch(["separate", "--model", str(model_dir), "--in", str(tmp_path / "mix.wav"),
                         "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_separate_missing_model_is_data_error(tmp_path, capsys):
    write_wav(tmp_path / "mix.wav", Waveform(np.zeros(1000)))
    code, _, _ = run(["separate", "--model", str(tmp_path / "none"), "--in", str(tmp_path / "mix.wav"),
                      "--out", str(tmp_path / "o.wav")], capsys)
    assert code == 2


def test_train_deep(model_dir, tmp_path, capsys):
    code, _, _ = run(["train-deep", "--model", str(model_dir), "--synthetic", "2", "--K", "3", "--C", "1",
                      "--epochs", "2", "--frames", "5", "--out", str(tmp_path / "deep")], capsys)
    assert code == 0 and (tmp_path / "deep" / "manifest.json").exists()


def test_eval(tmp_path, capsys):
    s = np.random.default_rng(0).uniform(-0.5, 0.5, 2000)
    write_wav(tmp_path / "ref.wav", Waveform(s))
    write_wav(tmp_path / "est.wav", Waveform(0.5 * s))
    code, out, _ = run(["eval", "--ref", str(tmp_path / "ref.wav"), "--est", str(tmp_path / "est.wav")], capsys)
    assert code == 0
    assert float(out.strip().split("=")[1]) == pytest.approx(6.02, abs=0.01)
    (tmp_path / "bad.wav").write_bytes(b"junk")
    code, _, _ = run(["eval", "--ref", str(tmp_path / "ref.wav"), "--est", str(tmp_path / "bad.wav")], capsys)
    assert code == 2


def test_experiment_writes_reports(tmp_path, capsys):
    code, _, _ = run(["experiment", "--K-values", "2", "--C-values", "0,1", "--R-values", "3",
                      "--snr-list", "0", "--n-train", "2", "--n-eval", "1", "--duration", "0.5",
                      "--snmf-iters", "2", "--snmf-frames", "50", "--deep-epochs", "1", "--deep-frames", "5",
                      "--out-dir", str(tmp_path / "rep")], capsys)
    assert code == 0
    assert (tmp_path / "rep" / "report.csv").read_text().startswith("K,C,R,snr_db,sdr_db,P_D,P\n")
    assert (tmp_path / "rep" / "report.txt").exists()


def test_experiment_rejects_c_above_k(tmp_path, capsys):
    code, _, _ = run(["experiment", "--K-values", "1", "--C-values", "2", "--out-dir", str(tmp_path)], capsys)
    assert code in (1, 2)


# MRF commands


def chain_file(tmp_path):
    doc = {
        "hidden_states": [2, 2], "visible_states": [2],
        "hh_edges": [[0, 1]], "psi_hh": [np.log([[2.0, 1.0], [1.0, 2.0]]).tolist()],
        "hv_edges": [[0, 0]], "psi_hv": [np.log([[1.0, 1.0], [3.0, 3.0]]).tolist()],
        "visible": [0],
    }
    path = tmp_path / "chain.json"
    path.write_text(json.dumps(doc))
    return path


def test_mrf_infer(tmp_path, capsys):
    code, out, _ = run(["mrf-infer", "--mrf", str(chain_file(tmp_path)), "--iters", "4",
                        "--out", str(tmp_path / "b.json")], capsys)
    assert code == 0
    beliefs = json.loads(out)["beliefs"]
    assert beliefs[0][1] == pytest.approx(0.75, abs=1e-12)
    assert beliefs[1][1] == pytest.approx(7 / 12, abs=1e-12)
    assert json.loads((tmp_path / "b.json").read_text()) == json.loads(out)


def test_mrf_infer_bad_visible(tmp_path, capsys):
    code, _, _ = run(["mrf-infer", "--mrf", str(chain_file(tmp_path)), "--visible", "5"], capsys)
    assert code == 2


def test_mrf_train(tmp_path, capsys):
    zero = np.zeros((2, 2)).tolist()
    mrf = {"hidden_states": [2, 2], "visible_states": [2, 2], "hh_edges": [[0, 1]], "psi_hh": [zero],
           "hv_edges": [[0, 0], [0, 1], [1, 0], [1, 1]], "psi_hv": [zero] * 4}
    (tmp_path / "m.json").write_text(json.dumps(mrf))
    data = {"visible": [[0, 0], [0, 1], [1, 0], [1, 1]], "targets": [[-1, 0], [-1, 1], [-1, 1], [-1, 0]]}
    (tmp_path / "d.json").write_text(json.dumps(data))
    code, out, _ = run(["mrf-train", "--mrf", str(tmp_path / "m.json"), "--data", str(tmp_path / "d.json"),
                        "--epochs", "600", "--out", str(tmp_path / "net")], capsys)
    assert code == 0 and (tmp_path / "net" / "manifest.json").exists()
    final = float(out.split("->")[1].split(";")[0])
    assert final < 0.5


def test_experiment_defaults_match_config():
    from dataclasses import fields

    from deepunfold.evaluation import ExperimentConfig

    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    for key, (_, value) in SCHEMAS["experiment"].items():
        if key in defaults:
            expected = defaults[key]
            assert (list(expected) if isinstance(expected, tuple) else expected) == value, key
