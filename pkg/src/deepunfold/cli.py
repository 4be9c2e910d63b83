"""Command-line entry point.

Every command reads an optional JSON config (``--config``) whose keys are
the command's option names; explicit flags override the file. Unknown keys
and wrongly typed values are rejected. ``UNFOLD_SEED`` supplies the seed when
neither the file nor a flag sets it.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import audio, deep_nmf, evaluation
from .archive import atomic_write_text
from .mrf import core as mrf_core
from .mrf import unfold
from .snmf import SnmfConfig, SourceBases, train_bases

log = logging.getLogger("deepunfold")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# option schemas: name -> (type, default); default None with required=True
# means the key must come from the file or a flag

_LIST_STR, _LIST_INT, _LIST_FLOAT = "list[str]", "list[int]", "list[float]"

SCHEMAS = {
    "train-snmf": {
        "speech": (_LIST_STR, []), "noise": (_LIST_STR, []), "synthetic": (int, 0),
        "R": (int, 100), "T": (int, audio.CONTEXT), "K": (int, 25), "mu": (float, 5.0),
        "iters": (int, 50), "frames": (int, 4000), "seed": (int, 0), "out": (str, None),
    },
    "train-deep": {
        "model": (str, None), "mixtures": (_LIST_STR, []), "targets": (_LIST_STR, []),
        "synthetic": (int, 0), "K": (int, 4), "C": (int, 1), "epochs": (int, 25),
        "frames": (int, 40), "seed": (int, 0), "out": (str, None),
    },
    "separate": {"model": (str, None), "in": (str, None), "out": (str, None), "noise_out": (str, "")},
    "eval": {"ref": (str, None), "est": (str, None)},
    "experiment": {
        "K_values": (_LIST_INT, [4, 25]), "C_values": (_LIST_INT, [0, 1, 2, 3, 4]),
        "R_values": (_LIST_INT, [20, 100]), "snr_list": (_LIST_FLOAT, [-6, -3, 0, 3, 6, 9]),
        "n_train": (int, 60), "n_eval": (int, 20), "duration": (float, 3.0), "mu": (float, 5.0),
        "snmf_iters": (int, 50), "snmf_frames": (int, 4000), "deep_epochs": (int, 100),
        "deep_frames": (int, 40), "seed": (int, 0), "out_dir": (str, None),
    },
    "mrf-infer": {
        "mrf": (str, None), "visible": (_LIST_INT, []), "lam": (float, 1.0), "kappa": (float, 1.0),
        "iters": (int, 20), "z": (float, float("inf")), "rho": (float, None), "out": (str, ""),
    },
    "mrf-train": {
        "mrf": (str, None), "data": (str, None), "K": (int, 2), "lam": (float, 0.0), "kappa": (float, 1.0),
        "loss": (str, "ce"), "epochs": (int, 1000), "step": (float, 0.5), "noise": (float, 0.5),
        "train_alpha": (bool, False), "train_lambda": (bool, False), "seed": (int, 0), "out": (str, None),
    },
    "param-count": {"T": (int, audio.CONTEXT), "F": (int, audio.F_BINS), "R": (int, None), "C": (int, None)},
}

HELP = {
    "train-snmf": "learn per-source sparse NMF bases from clean WAVs (or synthetic fixtures)",
    "train-deep": "unfold SNMF bases into a deep NMF network and train its last C layers",
    "separate": "separate a mixture WAV with a model archive",
    "eval": "print the SDR of an estimate against a reference WAV",
    "experiment": "run the synthetic (K, C, R) grid and write CSV and table reports",
    "mrf-infer": "run message passing on an MRF description file",
    "mrf-train": "train an unfolded MRF network on (visible, target) pairs",
    "param-count": "print the deep NMF parameter counts P_D and P",
}


def _coerce(key, kind, value):
    """Check a config value against its declared type."""
    if value is None:
        return None
    if kind in (_LIST_STR, _LIST_INT, _LIST_FLOAT):
        if not isinstance(value, list):
            raise UsageError(f"config key {key!r} must be a list")
        elem = {_LIST_STR: str, _LIST_INT: int, _LIST_FLOAT: float}[kind]
        return [_coerce(key, elem, v) for v in value]
    if kind is bool:
        if not isinstance(value, bool):
            raise UsageError(f"config key {key!r} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise UsageError(f"config key {key!r} must be a string, got {value!r}")
    return value


def load_config(path, overrides: dict | None = None, schema: dict | None = None) -> dict:
    """Merge a JSON config file with flag overrides (flags win).

    With a ``schema`` unknown keys and type mismatches are rejected, defaults
    fill the gaps and required keys are checked.
    """
    data = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config {path} must hold a JSON object")
    merged = dict(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if schema is None:
        return merged
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in merged:
            out[key] = _coerce(key, kind, merged[key])
        elif key == "seed" and os.environ.get("UNFOLD_SEED"):
            try:
                out[key] = int(os.environ["UNFOLD_SEED"])
            except ValueError as exc:
                raise UsageError("UNFOLD_SEED must be an integer") from exc
        else:
            out[key] = default
    missing = [k for k, (_, d) in schema.items() if out[k] is None and d is None and k != "rho"]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return out


def _flag_type(kind):
    if kind in (_LIST_STR, _LIST_INT, _LIST_FLOAT):
        elem = {_LIST_STR: str, _LIST_INT: int, _LIST_FLOAT: float}[kind]
        return lambda s: [elem(x) for x in s.split(",") if x != ""]
    if kind is bool:
        return lambda s: {"1": True, "true": True, "0": False, "false": False}[s.lower()]
    return kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepunfold", description="Deep unfolding toolkit: deep NMF and unfolded MRFs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="JSON file with option values")
        for key, (kind, default) in schema.items():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=_flag_type(kind), default=None,
                           help=f"default: {default!r}" if default is not None else "required")
    return parser


# commands


def _read_wav(path) -> audio.Waveform:
    try:
        return audio.read_wav(path)
    except (OSError, EOFError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _source_waves(cfg, key, synth_attr):
    if cfg["synthetic"]:
        return [getattr(evaluation.synthesize_mixture(cfg["seed"] * 1000 + i, 0.0), synth_attr)
                for i in range(cfg["synthetic"])]
    if not cfg[key]:
        raise UsageError(f"--{key} WAV list or --synthetic N required")
    return [_read_wav(p) for p in cfg[key]]


def cmd_train_snmf(cfg) -> int:
    rng = np.random.default_rng(cfg["seed"])
    bases = []
    for l, (key, attr) in enumerate((("speech", "speech"), ("noise", "noise"))):
        waves = _source_waves(cfg, key, attr)
        S = np.hstack([audio.features(w, cfg["T"])[0].M_stacked for w in waves])
        if S.shape[1] > cfg["frames"]:
            S = S[:, np.sort(rng.choice(S.shape[1], cfg["frames"], replace=False))]
        conf = SnmfConfig(beta1=1.0, mu=cfg["mu"], iters=cfg["iters"], seed=cfg["seed"] + l)
        log.info("training %s bases on %d frames", key, S.shape[1])
        bases.append(train_bases(S, cfg["R"], conf))
    net = deep_nmf.build_network(SourceBases(bases, ["speech", "noise"]), cfg["K"], 0, mu=cfg["mu"],
                                 F=audio.F_BINS, seed=cfg["seed"])
    deep_nmf.save_network(net, cfg["out"], {"T": cfg["T"]})
    print(f"wrote {cfg['out']}")
    return EXIT_OK


def _load_model(path):
    try:
        return deep_nmf.load_network(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def cmd_train_deep(cfg) -> int:
    base, manifest = _load_model(cfg["model"])
    T = int(manifest.get("T", audio.CONTEXT))
    if cfg["synthetic"]:
        fixtures = [evaluation.synthesize_mixture(cfg["seed"] * 1000 + i, [-6, -3, 0, 3, 6, 9][i % 6])
                    for i in range(cfg["synthetic"])]
        pairs = [(f.mixture, f.speech) for f in fixtures]
    else:
        if not cfg["mixtures"] or len(cfg["mixtures"]) != len(cfg["targets"]):
            raise UsageError("--mixtures and --targets must list the same number of WAVs")
        pairs = [(_read_wav(m), _read_wav(t)) for m, t in zip(cfg["mixtures"], cfg["targets"])]
    rng = np.random.default_rng(cfg["seed"])
    dataset = []
    for mix, target in pairs:
        if len(mix) != len(target):
            raise DataError("mixture and target lengths differ")
        stack, _ = audio.features(mix, T)
        S = audio.stft(target).magnitude
        n = S.shape[1]
        cols = np.sort(rng.choice(n, min(n, cfg["frames"]), replace=False))
        dataset.append((stack.M_stacked[:, cols], stack.M_last[:, cols], S[:, cols]))
    net = deep_nmf.build_network(base.Wbar, cfg["K"], cfg["C"], mu=base.mu, F=base.F, seed=cfg["seed"])
    if cfg["C"] > 0:
        result = deep_nmf.train(net, dataset, cfg["epochs"])
        net = result.net
        log.info("loss %.6g -> %.6g", result.losses[0], result.losses[-1])
    deep_nmf.save_network(net, cfg["out"], {"T": T})
    print(f"wrote {cfg['out']}")
    return EXIT_OK


def cmd_separate(cfg) -> int:
    net, manifest = _load_model(cfg["model"])
    T = int(manifest.get("T", audio.CONTEXT))
    mix = _read_wav(cfg["in"])
    if len(mix) < audio.WIN:
        raise DataError(f"{cfg['in']} is shorter than one analysis window")
    stack, spec = audio.features(mix, T)
    if stack.M_stacked.shape[0] != net.Wbar.rows:
        raise DataError("model context size does not match the features")
    est = deep_nmf.separate(net, stack.M_stacked, stack.M_last)
    audio.write_wav(cfg["out"], audio.reconstruct_wave(est[net.speech], spec.phase, spec.length, rate=mix.rate))
    if cfg["noise_out"]:
        other = 1 - net.speech if net.Wbar.n_sources == 2 else net.speech
        audio.write_wav(cfg["noise_out"], audio.reconstruct_wave(est[other], spec.phase, spec.length, rate=mix.rate))
    print(f"wrote {cfg['out']}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    ref, est = _read_wav(cfg["ref"]), _read_wav(cfg["est"])
    try:
        value = evaluation.sdr(ref, est)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"SDR={value:.4f}")
    return EXIT_OK


def cmd_experiment(cfg) -> int:
    names = {f.name for f in fields(evaluation.ExperimentConfig)}
    ecfg = evaluation.ExperimentConfig(**{k: v for k, v in cfg.items() if k in names})
    report = evaluation.run_experiment(ecfg, progress=log.info)
    out = Path(cfg["out_dir"])
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "report.txt", report.to_table() + "\n")
    print(report.to_table())
    return EXIT_OK


def _load_mrf(path):
    try:
        return mrf_core.load_mrf(path)
    except (OSError, KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load MRF {path}: {exc}") from exc


def cmd_mrf_infer(cfg) -> int:
    mrf, doc = _load_mrf(cfg["mrf"])
    v = cfg["visible"] or doc.get("visible", [0] * mrf.n_visible)
    if len(v) != mrf.n_visible:
        raise DataError(f"need {mrf.n_visible} visible values, got {len(v)}")
    for l, (value, s) in enumerate(zip(v, mrf.visible_states)):
        if not 0 <= value < s:
            raise DataError(f"visible node {l} value {value} out of range")
    try:
        style = mrf_core.MessageStyle(cfg["lam"], cfg["kappa"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    state = mrf_core.run_inference(mrf, v, style, mrf_core.ScheduleParams(cfg["z"], cfg["rho"]), cfg["iters"])
    text = json.dumps({"beliefs": [b.tolist() for b in state.beliefs], "iterations": state.iterations},
                      indent=2, sort_keys=True) + "\n"
    if cfg["out"]:
        atomic_write_text(cfg["out"], text)
    print(text, end="")
    return EXIT_OK


def cmd_mrf_train(cfg) -> int:
    mrf, _ = _load_mrf(cfg["mrf"])
    try:
        doc = json.loads(Path(cfg["data"]).read_text())
        V = np.asarray(doc["visible"], dtype=int)
        T = np.asarray(doc["targets"], dtype=int)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load training data {cfg['data']}: {exc}") from exc
    if V.ndim != 2 or V.shape[1] != mrf.n_visible or T.shape != (V.shape[0], mrf.n_hidden):
        raise DataError("training data shapes do not match the MRF")
    try:
        style = mrf_core.MessageStyle(cfg["lam"], cfg["kappa"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    net = unfold.UnfoldedMrfNet.from_mrf(mrf, cfg["K"], style, noise=cfg["noise"], seed=cfg["seed"],
                                         z=0.0 if cfg["train_alpha"] else None)
    result = unfold.train_unfolded(net, (V, T), cfg["loss"], cfg["epochs"], cfg["step"],
                                   cfg["train_alpha"], cfg["train_lambda"])
    unfold.save_unfolded(result.net, cfg["out"])
    final = unfold.evaluate_loss(result.net, V, T, cfg["loss"])
    print(f"loss {result.losses[0]:.6g} -> {final:.6g}; wrote {cfg['out']}")
    return EXIT_OK


def cmd_param_count(cfg) -> int:
    try:
        P_D, P = deep_nmf.parameter_counts(cfg["T"], cfg["F"], cfg["R"], cfg["C"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"P_D={P_D} P={P}")
    return EXIT_OK


COMMANDS = {
    "train-snmf": cmd_train_snmf, "train-deep": cmd_train_deep, "separate": cmd_separate,
    "eval": cmd_eval, "experiment": cmd_experiment, "mrf-infer": cmd_mrf_infer,
    "mrf-train": cmd_mrf_train, "param-count": cmd_param_count,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        if not argv:
            raise UsageError("no command given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no command given")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        schema = SCHEMAS[args.command]
        overrides = {k: getattr(args, k) for k in schema}
        cfg = load_config(args.config, overrides, schema)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
