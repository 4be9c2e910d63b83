"""SDR scoring, synthetic speech-plus-noise fixtures and the grid experiment.

The experiment trains per-source sparse-NMF bases on clean synthetic
sources, unfolds them into deep NMF networks with the last ``C`` layers
untied and trained, separates held-out mixtures at several SNRs and reports
the mean SDR of the speech estimate per grid cell.
"""

from __future__ import annotations

import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import deep_nmf, snmf
from .audio import CONTEXT, F_BINS, RATE, Waveform, features, reconstruct_wave
from .snmf import SnmfConfig, SourceBases, train_bases

log = logging.getLogger(__name__)

SDR_CAP = 100.0


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64).ravel()


def sdr(ref, est) -> float:
    """``10 log10(|ref|^2 / |ref - est|^2)`` in dB, capped at +100 dB."""
    r, e = _samples(ref), _samples(est)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.size} vs {e.size}")
    energy = float(np.dot(r, r))
    if energy == 0:
        raise ValueError("reference signal is all zeros")
    dist = float(np.sum((r - e) ** 2))
    if dist == 0:
        return SDR_CAP
    return min(SDR_CAP, 10.0 * np.log10(energy / dist))


def snr_db(speech, noise) -> float:
    s, n = _samples(speech), _samples(noise)
    return 10.0 * np.log10(np.dot(s, s) / np.dot(n, n))


@dataclass
class MixtureFixture:
    speech: Waveform
    noise: Waveform
    mixture: Waveform
    snr_db: float
    seed: int


def _speech_like(rng: np.random.Generator, n: int, rate: int) -> np.ndarray:
    """Three harmonic tone complexes with random pitch, glide and onset."""
    t = np.arange(n) / rate
    out = np.zeros(n)
    for _ in range(3):
        f0 = rng.uniform(110.0, 260.0)
        glide = rng.uniform(-0.15, 0.15)
        longest = 0.5 * n / rate
        dur = rng.uniform(min(0.4, longest), longest)
        onset = rng.uniform(0.0, n / rate - dur)
        active = (t >= onset) & (t < onset + dur)
        local = t[active] - onset
        env = np.sin(np.pi * local / dur) ** 2
        # frequency glides linearly over the note
        phase = 2 * np.pi * f0 * (local + 0.5 * glide * local**2 / dur)
        n_harm = int(4000 // (f0 * (1 + abs(glide))))
        tilt = rng.uniform(0.8, 1.4)
        note = np.zeros(local.size)
        for h in range(1, n_harm + 1):
            note += np.cos(h * phase + rng.uniform(0, 2 * np.pi)) / h**tilt
        out[active] += env * note
    rms = np.sqrt(np.mean(out**2))
    return 0.1 * out / rms if rms > 0 else out


def _noise_like(rng: np.random.Generator, n: int, rate: int) -> np.ndarray:
    """Coloured noise (two-pole resonator plus lowpass) under a slow envelope."""
    white = rng.standard_normal(n)
    pole = rng.uniform(0.85, 0.97)
    centre = rng.uniform(300.0, 3000.0)
    theta = 2 * np.pi * centre / rate
    x = lfilter([1.0], [1.0, -2 * pole * np.cos(theta), pole**2], white)
    x = x + lfilter([1.0], [1.0, -rng.uniform(0.6, 0.95)], white)
    t = np.arange(n) / rate
    env = 1.0 + 0.6 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    x = x * env
    return 0.1 * x / np.sqrt(np.mean(x**2))


def synthesize_mixture(seed: int, snr: float, duration: float = 3.0, rate: int = RATE) -> MixtureFixture:
    """Deterministic speech-like plus noise-like fixture at an exact SNR."""
    n = int(round(duration * rate))
    rng = np.random.default_rng(seed)
    s = _speech_like(rng, n, rate)
    noise = _noise_like(rng, n, rate)
    noise = noise * np.sqrt(np.dot(s, s) / (np.dot(noise, noise) * 10.0 ** (snr / 10.0)))
    return MixtureFixture(Waveform(s, rate), Waveform(noise, rate), Waveform(s + noise, rate), float(snr), int(seed))


@dataclass
class ExperimentConfig:
    K_values: tuple = (4, 25)
    C_values: tuple = (0, 1, 2, 3, 4)
    R_values: tuple = (20, 100)  # bases per source
    snr_list: tuple = (-6, -3, 0, 3, 6, 9)
    n_train: int = 60
    n_eval: int = 20
    duration: float = 3.0
    T: int = CONTEXT
    mu: float = 5.0
    snmf_iters: int = 50
    snmf_frames: int = 4000  # frames per source used to learn the bases
    deep_epochs: int = 100
    deep_frames: int = 40  # frames per training mixture used by deep training
    seed: int = 0

    def __post_init__(self):
        for name in ("K_values", "C_values", "R_values", "snr_list"):
            setattr(self, name, tuple(getattr(self, name)))
        for K in self.K_values:
            for C in self.C_values:
                if C > K:
                    raise ValueError(f"invalid grid entry C={C} > K={K}")
        if min(self.C_values, default=0) < 0 or min(self.K_values, default=1) < 1:
            raise ValueError("K must be >= 1 and C >= 0")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("need at least one training and one evaluation fixture")


@dataclass
class ReportRow:
    K: int
    C: int
    R: int  # total bases over both sources
    snr_db: float
    sdr_db: float
    P_D: int
    P: int


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)
    seconds: float = 0.0

    def mean_sdr(self, K: int, C: int, R: int | None = None, R_per_source: int | None = None) -> float:
        if R is None:
            R = 2 * R_per_source
        vals = [r.sdr_db for r in self.rows if (r.K, r.C, r.R) == (K, C, R)]
        if not vals:
            raise KeyError(f"no rows for K={K}, C={C}, R={R}")
        return float(np.mean(vals))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("K,C,R,snr_db,sdr_db,P_D,P\n")
        for r in self.rows:
            buf.write(f"{r.K},{r.C},{r.R},{r.snr_db:g},{r.sdr_db:.4f},{r.P_D},{r.P}\n")
        return buf.getvalue()

    def to_table(self) -> str:
        snrs = sorted({r.snr_db for r in self.rows})
        lines = []
        for R in sorted({r.R for r in self.rows}):
            head = f"R^l={R // 2:<5d}" + "".join(f"{s:>8g}" for s in snrs) + f"{'Avg.':>8}{'P_D':>10}{'P':>10}"
            lines += [head, "-" * len(head)]
            cells = sorted({(r.K, r.C) for r in self.rows if r.R == R})
            for K, C in cells:
                sel = {r.snr_db: r for r in self.rows if (r.K, r.C, r.R) == (K, C, R)}
                label = f"K={K:<3d}C={C}"
                vals = "".join(f"{sel[s].sdr_db:8.2f}" if s in sel else f"{'':8}" for s in snrs)
                any_row = next(iter(sel.values()))
                pd = "-" if C == 0 else _human(any_row.P_D)
                lines.append(f"{label:<11}{vals}{np.mean([r.sdr_db for r in sel.values()]):8.2f}"
                             f"{pd:>10}{_human(any_row.P):>10}")
            lines.append("")
        return "\n".join(lines)


def _human(n: int) -> str:
    if n >= 1_000_000:
        return f"{n / 1e6:g} M"
    if n >= 1000:
        return f"{n / 1e3:g} K"
    return str(n)


def _source_features(w: Waveform, T: int):
    stack, _ = features(w, T)
    return stack


def _subsample(rng, n: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


def train_source_bases(cfg: ExperimentConfig, fixtures, R: int) -> SourceBases:
    """Sparse-NMF bases for speech (source 0) and noise (source 1)."""
    rng = np.random.default_rng([cfg.seed, R, 1])
    speech = np.hstack([_source_features(f.speech, cfg.T).M_stacked for f in fixtures])
    noise = np.hstack([_source_features(f.noise, cfg.T).M_stacked for f in fixtures])
    bases = []
    for l, S in enumerate((speech, noise)):
        S = S[:, _subsample(rng, S.shape[1], cfg.snmf_frames)]
        conf = SnmfConfig(beta1=1.0, mu=cfg.mu, iters=cfg.snmf_iters, seed=cfg.seed + 7 * l + R)
        bases.append(train_bases(S, R, conf))
    return SourceBases(bases, ["speech", "noise"])


def _mixture_features(fix: MixtureFixture, T: int):
    stack, spec = features(fix.mixture, T)
    return stack, spec


def _separate_all(nets: dict, stack) -> dict:
    """Speech estimates of several networks that share K, bases and seed.

    The tied updates are identical across C, so they run once and each
    network continues from its first untied layer.
    """
    any_net = next(iter(nets.values()))
    Ms, Ml = stack.M_stacked, stack.M_last
    H = snmf.init_activations(any_net.R, Ml.shape[1], any_net.seed)
    starts = {C: min(net.K - net.C + 1, net.K) for C, net in nets.items()}
    out = {}
    for k in range(max(starts.values()) + 1):
        for C, start in starts.items():
            if start == k:
                out[C] = deep_nmf._forward_from(nets[C], k, H, Ms, Ml).Shat[any_net.speech]
        if k < any_net.K:
            H = snmf.h_update_step(any_net.Wbar.stacked, Ms, H, any_net.beta1, any_net.mu, any_net.eps)
    return out


def run_experiment(cfg: ExperimentConfig | None = None, progress=None) -> ExperimentReport:
    """Train and evaluate every (K, C, R) cell of the grid.

    Training fixtures use seeds ``1000 * seed + i`` with SNRs cycling through
    ``snr_list``; every evaluation fixture (seeds offset by 500) is mixed at
    every SNR of the list.
    """
    cfg = ExperimentConfig() if cfg is None else cfg
    start = time.perf_counter()
    say = progress or (lambda msg: log.info(msg))
    base = 1000 * cfg.seed
    train_fix = [synthesize_mixture(base + i, cfg.snr_list[i % len(cfg.snr_list)], cfg.duration)
                 for i in range(cfg.n_train)]
    eval_fix = [[synthesize_mixture(base + 500 + i, snr, cfg.duration) for snr in cfg.snr_list]
                for i in range(cfg.n_eval)]

    # training triples (stacked mixture, last-frame mixture, clean speech frame)
    rng = np.random.default_rng([cfg.seed, 2])
    train_set = []
    for fix in train_fix:
        stack, _ = _mixture_features(fix, cfg.T)
        target = _source_features(fix.speech, 1).M_last
        cols = _subsample(rng, stack.M_last.shape[1], cfg.deep_frames)
        train_set.append((stack.M_stacked[:, cols], stack.M_last[:, cols], target[:, cols]))
    eval_feats = [[_mixture_features(f, cfg.T) for f in row] for row in eval_fix]

    report = ExperimentReport()
    for R in cfg.R_values:
        say(f"training sparse NMF bases, R^l={R}")
        Wbar = train_source_bases(cfg, train_fix, R)
        for K in cfg.K_values:
            nets = {}
            for C in cfg.C_values:
                net = deep_nmf.build_network(Wbar, K, C, mu=cfg.mu, F=F_BINS, seed=cfg.seed)
                nets[C] = deep_nmf.train(net, train_set, cfg.deep_epochs).net if C > 0 else net
            scores = {C: {snr: [] for snr in cfg.snr_list} for C in cfg.C_values}
            for row, feats in zip(eval_fix, eval_feats):
                for fix, (stack, spec) in zip(row, feats):
                    for C, est in _separate_all(nets, stack).items():
                        wave = reconstruct_wave(est, spec.phase, spec.length)
                        scores[C][fix.snr_db].append(sdr(fix.speech, wave))
            for C in cfg.C_values:
                P_D, P = deep_nmf.parameter_counts(cfg.T, F_BINS, 2 * R, C)
                for snr in cfg.snr_list:
                    report.rows.append(ReportRow(K, C, 2 * R, float(snr), float(np.mean(scores[C][snr])), P_D, P))
                say(f"K={K} C={C} R^l={R}: mean SDR {report.mean_sdr(K, C, 2 * R):.2f} dB "
                    f"({time.perf_counter() - start:.0f} s)")
    report.seconds = time.perf_counter() - start
    return report


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
