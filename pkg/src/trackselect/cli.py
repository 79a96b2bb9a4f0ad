"""``trackselect`` command line.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfgmod
from . import tensor as tc
from .checkpoint import CheckpointError, write_atomic
from .data import (Corpus, CorpusError, CorpusFormatError, Video, directory_digest, encode_tracks,
                   load_corpus, save_corpus)
from .evaluation import (ablation_sweep, ablation_table, corpus_similarity_analysis, evaluate, predict)
from .masks import MaskFormatError, GeometryError, dedup_tracks
from .supervision import make_pseudo_labels
from .synth import SynthError, generate_synthetic
from .trainer import TrainingError, gradcheck_fixture, load_state, resume, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("trackselect")


def _jsonl(records) -> bytes:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records).encode()


def _write(path: Path, data: bytes | str) -> None:
    write_atomic(path, data.encode() if isinstance(data, str) else data)


def _load_corpus(path) -> Corpus:
    if path is None:
        raise cfgmod.ConfigError("--corpus is required")
    return load_corpus(path)


def _run_config(args) -> cfgmod.RunConfig:
    if args.paper_defaults:
        if args.config or args.set or args.preset != "paper":
            raise cfgmod.ConfigError("--paper-defaults cannot be combined with --config, --set or --preset")
        return cfgmod.paper_defaults()
    overrides = cfgmod.parse_assignments(args.set)
    for flag, key in getattr(args, "flag_keys", {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return cfgmod.build(args.config, overrides, preset=args.preset)


def _print_echo(run: cfgmod.RunConfig) -> None:
    print("config: " + json.dumps(run.echo(), sort_keys=True))


# --- commands ----------------------------------------------------------------

def cmd_synth(args, run) -> int:
    corpus = generate_synthetic(run.synth_config(), args.seed)
    corpus.meta["run"] = run.echo()
    root = save_corpus(corpus, args.out)
    n_tracks = sum(len(v.tracks) for v in corpus.videos)
    print(f"wrote {len(corpus.videos)} videos, {corpus.n_expressions} expressions, {n_tracks} tracks to {root}")
    print(f"digest {directory_digest(root)}")
    return EXIT_OK


def cmd_pseudo_label(args, run) -> int:
    corpus = _load_corpus(args.corpus)
    tau = run.get("supervision", "tau_label")
    out = Path(args.out)
    pos = neg = 0
    records = []
    for video, expr in corpus.pairs():
        lab = make_pseudo_labels(video.tracks, expr.gt_track, tau)
        p = int(lab.y.sum())
        pos += p
        neg += len(lab.y) - p
        records.append({"expression_id": expr.expression_id, "video_id": video.video_id,
                        "track_ids": [t.track_id for t in video.tracks],
                        "miou": [float(m) for m in lab.miou], "y": [int(v) for v in lab.y], "tau_label": tau})
    for r in records:
        _write(out / f"{r['expression_id']}.labels.json", json.dumps(r, sort_keys=True) + "\n")
    summary = {"type": "summary", "positives": pos, "negatives": neg, "tau_label": tau, "config": run.echo()}
    _write(out / "labels_summary.json", json.dumps(summary, sort_keys=True) + "\n")
    print(f"positives {pos}  negatives {neg}  balance {pos / max(pos + neg, 1):.4f}  (tau_label={tau})")
    return EXIT_OK


def cmd_train(args, run) -> int:
    corpus = _load_corpus(args.corpus)
    tcfg = run.train_config()
    if args.resume:
        state = load_state(args.resume, tcfg)
        state = resume(state, corpus, tcfg, args.out)
    else:
        state = train(corpus, run.selector_config(), tcfg, args.out, until=args.until, run=run.echo())
    last = state.history[-1] if state.history else {}
    print(f"epoch {state.epoch}/{tcfg.epochs}  step {state.step}  mean loss {last.get('mean_loss', float('nan')):.4f}")
    print(f"checkpoint {Path(args.out) / 'final.solp'}")
    return EXIT_OK


def _eval_state(args, run):
    state = load_state(args.checkpoint)
    scfg = replace(state.selector_cfg, tau_select=run.get("selector", "tau_select"),
                   fallback_argmax=run.get("selector", "fallback_argmax"))
    return state, scfg


def cmd_eval(args, run) -> int:
    corpus = _load_corpus(args.corpus)
    state, scfg = _eval_state(args, run)
    rep = evaluate(state.store, corpus, scfg, run.get("supervision", "tau_label"), run.get("eval", "jobs"))
    rep.config = {"run": run.echo(), "checkpoint": {"selector": state.selector_cfg.echo(),
                                                    "train": state.train_cfg.echo(), "epoch": state.epoch}}
    out = Path(args.out)
    _write(out / "report.jsonl", "\n".join(rep.records()) + "\n")
    _write(out / "report.txt", rep.table() + "\n")
    _print_echo(run)
    print(f"J {rep.J:.1f}  F {rep.F:.1f}  J&F {rep.JF:.1f}  exact-set accuracy {rep.accuracy:.3f}  "
          f"({len(rep.rows)} expressions)")
    return EXIT_OK


def cmd_select(args, run) -> int:
    corpus = _load_corpus(args.corpus)
    state, scfg = _eval_state(args, run)
    results = predict(state.store, scfg, corpus, run.get("supervision", "tau_label"), run.get("eval", "jobs"))
    out = Path(args.out)
    records = [{"type": "config", "run": run.echo(), "selector": scfg.echo()}]
    for res, sel, _, scores in results:
        _write(out / f"{res.expression_id}.rle", encode_tracks([sel.merged_track]))
        records.append({"type": "selection", "expression_id": res.expression_id, "video_id": res.video_id,
                        "selected": sel.selected_track_ids, "scores": [float(s) for s in scores]})
    _write(out / "selection.jsonl", _jsonl(records))
    print(f"wrote {len(results)} merged tracks to {out}")
    return EXIT_OK


def cmd_dedup(args, run) -> int:
    corpus = _load_corpus(args.corpus)
    theta = run.get("data", "dedup_theta")
    frame = run.get("data", "prompt_frame")
    videos = []
    dropped = 0
    for v in corpus.videos:
        kept = dedup_tracks(v.tracks, frame, theta)
        keep_ids = {t.track_id for t in kept}
        rows = [i for i, t in enumerate(v.tracks) if t.track_id in keep_ids]
        dropped += len(v.tracks) - len(rows)
        kinds = [v.track_kinds[i] for i in rows] if v.track_kinds else []
        exprs = [replace(e, target_ids=tuple(t for t in e.target_ids if t in keep_ids)) for e in v.expressions]
        attrs = {k: a for k, a in v.attributes.items() if k in keep_ids}
        videos.append(Video(v.video_id, kept, v.tokens.subset(rows), exprs, kinds, attrs))
    meta = dict(corpus.meta)
    meta["dedup"] = {"theta": theta, "prompt_frame": frame, "run": run.echo()}
    save_corpus(Corpus(videos, meta), args.out)
    print(f"dropped {dropped} tracks (theta={theta}); wrote {args.out}")
    return EXIT_OK


def cmd_analyze(args, run) -> int:
    corpus = _load_corpus(args.corpus)
    curve = corpus_similarity_analysis(corpus, run.get("eval", "pooling"), run.get("eval", "bins"))
    out = Path(args.out)
    _write(out / "similarity.json", json.dumps({**curve.record(), "config": run.echo()}, sort_keys=True) + "\n")
    _write(out / "similarity.txt", curve.table() + "\n")
    print(curve.table())
    return EXIT_OK


def cmd_gradcheck(args, run) -> int:
    objective, store = gradcheck_fixture(seed=args.seed)
    err = tc.grad_check(objective, store, n_samples=None if args.full else args.samples, seed=args.seed)
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} over {'all' if args.full else args.samples} coordinates "
          f"({'ok' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args, run) -> int:
    train_corpus = _load_corpus(args.corpus)
    eval_corpus = load_corpus(args.eval_corpus) if args.eval_corpus else train_corpus
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()]
    rows = ablation_sweep(train_corpus, eval_corpus, run.selector_config(), run.train_config(),
                          toggles, seeds, run.get("eval", "jobs"))
    table = ablation_table(rows)
    if args.out:
        out = Path(args.out)
        recs = [{"type": "config", "run": run.echo(), "seeds": seeds}]
        recs += [{"type": "row", "name": r.name, "JF": r.per_seed, "accuracy": r.accuracy,
                  "reference_JF": r.reference} for r in rows]
        _write(out / "ablation.jsonl", _jsonl(recs))
        _write(out / "ablation.txt", table + "\n")
    print(table)
    return EXIT_OK


# --- parser ------------------------------------------------------------------

COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic corpus"),
    "pseudo-label": (cmd_pseudo_label, "write IoU pseudo-labels for every expression"),
    "train": (cmd_train, "train the selector"),
    "eval": (cmd_eval, "evaluate a checkpoint (J, F, J&F)"),
    "select": (cmd_select, "write the merged selected track per expression"),
    "dedup": (cmd_dedup, "drop candidate tracks overlapping a kept one on the prompt frame"),
    "analyze": (cmd_analyze, "token similarity vs track mIoU"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the selector and loss"),
    "ablate": (cmd_ablate, "train/evaluate ablation rows"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (section.key = default):\n" + cfgmod.describe_keys()
    parser = argparse.ArgumentParser(prog="trackselect", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, epilog=keys)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [data] [selector] [supervision] [train] [eval]")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one key")
    common.add_argument("--preset", default="paper", choices=cfgmod.PRESETS)
    common.add_argument("--paper-defaults", action="store_true",
                        help="use the reference defaults only (no file, environment or overrides)")

    def add(name, **kw):
        fn, help_ = COMMANDS[name]
        p = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=keys,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn, flag_keys=kw.pop("flag_keys", {}))
        return p

    p = add("synth", flag_keys={"scenes": ("data", "scenes")})
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int)
    p.add_argument("--out", required=True)

    p = add("pseudo-label", flag_keys={"tau_label": ("supervision", "tau_label")})
    p.add_argument("--corpus", required=True)
    p.add_argument("--tau-label", type=float)
    p.add_argument("--out", required=True)

    p = add("train", flag_keys={"seed": ("train", "seed"), "epochs": ("train", "epochs")})
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--until", type=int, help="stop after this epoch (resume later)")
    p.add_argument("--resume", help="checkpoint to continue from")

    for name in ("eval", "select"):
        p = add(name, flag_keys={"jobs": ("eval", "jobs")})
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--corpus", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--jobs", type=int)

    p = add("dedup", flag_keys={"theta": ("data", "dedup_theta")})
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta", type=float)

    p = add("analyze", flag_keys={"pooling": ("eval", "pooling"), "bins": ("eval", "bins")})
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pooling", choices=("mean", "last"))
    p.add_argument("--bins", type=int)

    p = add("gradcheck")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--full", action="store_true", help="check every coordinate")

    p = add("ablate", flag_keys={"jobs": ("eval", "jobs")})
    p.add_argument("--corpus", required=True, help="training corpus")
    p.add_argument("--eval-corpus")
    p.add_argument("--seeds", default="0")
    p.add_argument("--toggles", default="no_align,no_inter_object,no_motion_attn")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = _run_config(args)
        return args.func(args, run)
    except (cfgmod.ConfigError, ValueError) as exc:
        if isinstance(exc, (CorpusFormatError, CorpusError, CheckpointError, MaskFormatError,
                            GeometryError, tc.ShapeError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (tc.NumericalError, TrainingError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SynthError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
