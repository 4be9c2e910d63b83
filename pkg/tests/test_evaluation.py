import numpy as np
import pytest

from deepunfold import deep_nmf, snmf
from deepunfold.audio import F_BINS, Waveform, features, reconstruct_wave
from deepunfold.evaluation import (
    ExperimentConfig,
    ExperimentReport,
    ReportRow,
    run_experiment,
    sdr,
    snr_db,
    synthesize_mixture,
    train_source_bases,
)


def test_sdr_cap_and_closed_forms():
    s = np.random.default_rng(0).standard_normal(1000)
    assert sdr(s, s) == 100.0
    assert sdr(s, 0.5 * s) == pytest.approx(10 * np.log10(4), abs=1e-12)
    assert sdr(s, 0.5 * s) == pytest.approx(6.0206, abs=1e-4)
    for a in (0.5, 0.9, 2.0):
        assert sdr(s, a * s) == pytest.approx(-10 * np.log10((1 - a) ** 2), abs=1e-10)


def test_sdr_with_known_noise():
    rng = np.random.default_rng(1)
    s = rng.standard_normal(4000)
    n = rng.standard_normal(4000)
    ref = 10 * np.log10(np.sum(s**2) / np.sum(n**2))
    assert sdr(Waveform(s), Waveform(s + n)) == pytest.approx(ref, abs=1e-12)


def test_sdr_errors():
    with pytest.raises(ValueError):
        sdr(np.zeros(10), np.ones(10))
    with pytest.raises(ValueError):
        sdr(np.ones(10), np.ones(11))


@pytest.mark.parametrize("target", [-6.0, 0.0, 3.5, 9.0])
def test_fixture_snr_exact(target):
    fix = synthesize_mixture(7, target, duration=1.0)
    assert abs(snr_db(fix.speech, fix.noise) - target) < 1e-9
    np.testing.assert_array_equal(fix.mixture.samples, fix.speech.samples + fix.noise.samples)


def test_fixture_deterministic():
    a = synthesize_mixture(3, 0.0, duration=1.0)
    b = synthesize_mixture(3, 0.0, duration=1.0)
    assert a.mixture.samples.tobytes() == b.mixture.samples.tobytes()
    c = synthesize_mixture(4, 0.0, duration=1.0)
    assert not np.array_equal(a.speech.samples, c.speech.samples)


def test_mixture_sdr_at_zero_db():
    for seed in range(5):
        fix = synthesize_mixture(seed, 0.0)
        value = sdr(fix.speech, fix.mixture)
        assert np.isfinite(value) and value < 3.0


def test_speech_like_is_harmonic_and_noise_is_broadband():
    fix = synthesize_mixture(11, 0.0, duration=2.0)
    speech = np.abs(np.fft.rfft(fix.speech.samples))
    noise = np.abs(np.fft.rfft(fix.noise.samples))
    # tonal source concentrates energy in few bins
    top = np.sort(speech**2)[::-1]
    assert top[: speech.size // 100].sum() > 0.5 * top.sum()
    topn = np.sort(noise**2)[::-1]
    assert topn[: noise.size // 100].sum() < 0.5 * topn.sum()


def test_grid_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(K_values=(2,), C_values=(3,))
    with pytest.raises(ValueError):
        ExperimentConfig(n_eval=0)


TINY = dict(K_values=(2,), C_values=(0, 1), R_values=(4,), snr_list=(0,), n_train=2, n_eval=2,
            duration=0.5, snmf_iters=5, snmf_frames=100, deep_epochs=2, deep_frames=10)


@pytest.fixture(scope="module")
def tiny_report():
    return run_experiment(ExperimentConfig(**TINY))


def test_report_rows_and_counts(tiny_report):
    assert [(r.K, r.C, r.R) for r in tiny_report.rows] == [(2, 0, 8), (2, 1, 8)]
    for r in tiny_report.rows:
        assert (r.P_D, r.P) == deep_nmf.parameter_counts(9, F_BINS, r.R, r.C)
        assert r.P == (9 + r.C) * F_BINS * r.R


def test_csv_and_table(tiny_report):
    lines = tiny_report.to_csv().splitlines()
    assert lines[0] == "K,C,R,snr_db,sdr_db,P_D,P"
    assert len(lines) == 3
    assert "K=2" in tiny_report.to_table()


def test_experiment_deterministic(tiny_report):
    again = run_experiment(ExperimentConfig(**TINY))
    assert again.to_csv() == tiny_report.to_csv()


def test_c0_equals_snmf_pipeline(tiny_report):
    cfg = ExperimentConfig(**TINY)
    train = [synthesize_mixture(i, 0, cfg.duration) for i in range(cfg.n_train)]
    bases = train_source_bases(cfg, train, 4)
    conf = snmf.SnmfConfig(beta1=1.0, mu=cfg.mu, iters=2, seed=cfg.seed)
    scores = []
    for i in range(cfg.n_eval):
        fix = synthesize_mixture(500 + i, 0, cfg.duration)
        stack, spec = features(fix.mixture, cfg.T)
        est = snmf.separate(bases, stack.M_stacked, stack.M_last, conf)[0]
        scores.append(sdr(fix.speech, reconstruct_wave(est, spec.phase, spec.length)))
    assert tiny_report.mean_sdr(2, 0, R_per_source=4) == pytest.approx(np.mean(scores), abs=1e-12)


def test_table2_counts_in_report():
    report = ExperimentReport([ReportRow(4, 1, 200, 0.0, 5.0, *deep_nmf.parameter_counts(9, 200, 200, 1))])
    assert report.to_csv().splitlines()[1].endswith(",40000,400000")
    assert "40 K" in report.to_table() and "400 K" in report.to_table()
    with pytest.raises(KeyError):
        report.mean_sdr(25, 0, 200)


def test_shared_prefix_separation_matches_separate():
    from deepunfold.audio import SpectroFrameStack
    from deepunfold.evaluation import _separate_all
    from oracles import deep_instance

    nets = {C: deep_instance(0, K=4, C=C)[0] for C in range(5)}
    _, Ms, Ml, _, _ = deep_instance(0, K=4, C=0)
    out = _separate_all(nets, SpectroFrameStack(Ms, Ml, 2, 5))
    for C, net in nets.items():
        np.testing.assert_array_equal(out[C], deep_nmf.separate(net, Ms, Ml)[net.speech])
