"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import PRESETS, RunConfig
from .errors import (ConsistencyError, DimensionError, FormatError, NumericError, SizingError,
                     UsageError)

log = logging.getLogger("deepcasa")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _threads() -> int:
    raw = os.environ.get("DCASA_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DCASA_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError("DCASA_THREADS must be >= 1")
    return n


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config, args.preset)
    else:
        cfg = RunConfig.for_preset(args.preset or "desk")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _train_cfg(tc, seed):
    return replace(tc, seed=seed)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus(cfg: RunConfig, manifest, split, limit=None):
    from .corpus import Corpus
    path = Path(manifest) if manifest else cfg.data.manifest
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return Corpus.from_manifest(path, split, limit, cfg.stft)


# -- commands -----------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> int:
    from .data import make_dataset
    d = cfg.data
    out = _out_dir(args, d.root)
    records = make_dataset(out, d.n_train, d.n_valid, d.n_test, d.n_speakers,
                           d.n_test_speakers, d.duration, cfg.seed, workers=_threads())
    print(f"wrote {len(records)} mixtures to {out / 'manifest.jsonl'}")
    return 0


def cmd_train_simul(args, cfg: RunConfig) -> int:
    from .simul import train_simultaneous
    out = _out_dir(args, f"runs/simul-{args.objective}-{args.mode}")
    train = _corpus(cfg, args.data, "train", args.limit)
    valid = _corpus(cfg, args.data, "valid", args.limit)
    _, mlog = train_simultaneous(train, valid, args.objective, args.mode, cfg.model,
                                 _train_cfg(cfg.train_simul, cfg.seed), out, cfg.crop_samples)
    best = min(r["valid"] for r in mlog.rows)
    print(f"best validation loss {best:.4f}; checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_train_seq(args, cfg: RunConfig) -> int:
    from .seq import train_sequential
    from .simul import load_simul
    out = _out_dir(args, "runs/seq")
    stage1 = load_simul(args.simul)
    train = _corpus(cfg, args.data, "train", args.limit)
    valid = _corpus(cfg, args.data, "valid", args.limit)
    crop = None if cfg.crop_samples is None else cfg.stft.n_frames(cfg.crop_samples)
    _, mlog = train_sequential(train, valid, stage1, cfg.tcn,
                               _train_cfg(cfg.train_seq, cfg.seed), out, crop)
    best = min(r["valid"] for r in mlog.rows)
    print(f"best validation loss {best:.4f}; checkpoint {out / 'best.ckpt'}")
    return 0


def cmd_finetune_joint(args, cfg: RunConfig) -> int:
    from .seq import joint_finetune, load_tcn
    from .simul import load_simul
    from .trainer import module_state, save_checkpoint, config_meta
    out = _out_dir(args, "runs/joint")
    stage1, tcn = load_simul(args.simul), load_tcn(args.seq)
    train = _corpus(cfg, args.data, "train", args.limit)
    valid = _corpus(cfg, args.data, "valid", args.limit)
    lrs = (cfg.train_simul.initial_lr, cfg.train_seq.initial_lr)
    stage1, tcn, mlog = joint_finetune(train, valid, stage1, tcn,
                                       _train_cfg(cfg.train_joint, cfg.seed), lrs, out,
                                       cfg.crop_samples)
    # separate per-stage checkpoints so the other commands can load them
    save_checkpoint(out / "simul.ckpt", module_state(stage1, "simul."),
                    config_meta(kind="simul", model=stage1.cfg))
    save_checkpoint(out / "seq.ckpt", module_state(tcn, "seq."),
                    config_meta(kind="seq", tcn=tcn.cfg))
    best = min(r["valid"] for r in mlog.rows)
    print(f"best validation loss {best:.4f}; checkpoints in {out}")
    return 0


def _separator(args, cfg: RunConfig):
    from .pipeline import Separator
    from .seq import load_tcn
    from .simul import load_simul
    stage1 = load_simul(args.simul) if args.simul else None
    tcn = load_tcn(args.seq) if args.seq else None
    if args.mode not in ("oracle", "reference") and stage1 is None:
        raise UsageError(f"mode {args.mode!r} needs --simul")
    if args.mode == "kmeans" and tcn is None:
        raise UsageError("mode 'kmeans' needs --seq")
    return Separator(stage1, tcn, cfg.stft, cfg.seed)


def _plot(path: Path, mixture, streams, cfg):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from .dsp import stft

    sigs = [("mixture", mixture), ("stream 1", streams[0]), ("stream 2", streams[1])]
    fig, axes = plt.subplots(len(sigs), 1, figsize=(8, 7), sharex=True)
    for ax, (title, s) in zip(axes, sigs):
        mag = stft(torch.as_tensor(s), cfg).abs().numpy()
        ax.imshow(20 * np.log10(mag.T + 1e-8), origin="lower", aspect="auto",
                  cmap="magma", vmin=-80, vmax=20)
        ax.set_title(title)
        ax.set_ylabel("bin")
    axes[-1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_separate(args, cfg: RunConfig) -> int:
    from .dsp import read_wav, write_wav
    from .metrics import snr
    sep = _separator(args, cfg)
    y = read_wav(args.mixture, cfg.stft.sample_rate)
    refs = None
    if args.refs:
        refs = np.stack([read_wav(p, cfg.stft.sample_rate) for p in args.refs])
        if refs.shape[-1] != len(y):
            raise FormatError("reference lengths differ from the mixture")
    elif args.mode in ("optimal", "oracle", "reference"):
        raise UsageError(f"mode {args.mode!r} needs --refs")
    streams = sep.separate(y, args.mode, refs)
    out = _out_dir(args, ".")
    stem = Path(args.mixture).stem
    for i, s in enumerate(streams, 1):
        write_wav(out / f"{stem}.s{i}.wav", s, cfg.stft.sample_rate)
    if args.plot:
        _plot(out / f"{stem}.png", y, streams, cfg.stft)
    print(f"wrote {out / (stem + '.s1.wav')} and {out / (stem + '.s2.wav')}")
    if refs is not None:
        a = [snr(streams[0], refs[0]), snr(streams[1], refs[1])]
        b = [snr(streams[1], refs[0]), snr(streams[0], refs[1])]
        best = a if sum(a) >= sum(b) else b
        print(f"snr_db {best[0]:.2f} {best[1]:.2f}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .pipeline import evaluate
    sep = _separator(args, cfg)
    corpus = _corpus(cfg, args.data, args.split, args.limit)
    report = evaluate(sep, corpus, args.mode)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report-{args.mode}.jsonl").write_text(report.to_jsonl())
    sys.stdout.write(report.table())
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .gradsuite import run
    results = run(cfg.seed, include_models=not args.ops_only)
    for r in results:
        print(f"{r.name:28s} max_rel_err {r.error:.3e}  tol {r.tol:.0e}  "
              f"{'ok' if r.ok else 'FAIL'}")
    return 0 if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_config(args, cfg: RunConfig) -> int:
    if args.dump:
        sys.stdout.write(cfg.dumps())
    else:
        print(f"config ok (preset {cfg.preset})")
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--preset", choices=PRESETS, help="base preset (default desk)")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deepcasa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", parents=[common], help="generate the synthetic corpus")

    def data_args(sp):
        sp.add_argument("--data", help="manifest path (default <data.root>/manifest.jsonl)")
        sp.add_argument("--limit", type=int, help="use only the first N items per split")

    sp = sub.add_parser("train-simul", parents=[common], help="train a simultaneous-grouping model")
    sp.add_argument("--objective", choices=("PSA", "CA", "SNR"), default="SNR")
    sp.add_argument("--mode", choices=("tPIT", "uPIT"), default="tPIT")
    data_args(sp)

    sp = sub.add_parser("train-seq", parents=[common], help="train the sequential-grouping TCN")
    sp.add_argument("--simul", required=True, help="stage-1 checkpoint")
    data_args(sp)

    sp = sub.add_parser("finetune-joint", parents=[common], help="fine-tune both stages jointly")
    sp.add_argument("--simul", required=True)
    sp.add_argument("--seq", required=True)
    data_args(sp)

    def sep_args(sp, default_mode):
        sp.add_argument("--simul", help="stage-1 checkpoint")
        sp.add_argument("--seq", help="sequential-grouping checkpoint")
        sp.add_argument("--mode", default=default_mode,
                        choices=("default", "kmeans", "optimal", "oracle", "reference"))

    sp = sub.add_parser("separate", parents=[common], help="separate one mixture WAV")
    sp.add_argument("mixture")
    sp.add_argument("--refs", nargs=2, metavar=("S1", "S2"), help="reference WAVs")
    sp.add_argument("--plot", action="store_true", help="also write <stem>.png")
    sep_args(sp, "kmeans")

    sp = sub.add_parser("evaluate", parents=[common], help="score a manifest split")
    sp.add_argument("--split", default="test", choices=("train", "valid", "test"))
    sep_args(sp, "kmeans")
    data_args(sp)

    sp = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    sp.add_argument("--ops-only", action="store_true", help="skip the micro models")

    sp = sub.add_parser("config", parents=[common], help="validate or print the configuration")
    sp.add_argument("--dump", action="store_true", help="print the full configuration")
    return p


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-simul": cmd_train_simul,
    "train-seq": cmd_train_seq,
    "finetune-joint": cmd_finetune_joint,
    "separate": cmd_separate,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    "config": cmd_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(_threads())
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, SizingError, DimensionError, ConsistencyError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # remaining value errors come from inputs (empty splits, zero-energy sources)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
