"""``dygait`` command line: synth | prep | train | eval | heatmap | gradcheck | dump-embeddings.

Exit codes: 0 success, 1 check failure, 2 usage, 3 I/O, 4 divergence,
5 empty protocol (no gallery or probe sequence).
"""
import argparse
import logging
import os
import sys

import numpy as np

from dygait import config as cfg
from dygait import evaluation, gradsuite, synthgait, train
from dygait.pgm import PGMFormatError, read_pgm, write_pgm
from dygait.preprocess import (
    DatasetManifest,
    EmptySequenceError,
    ManifestError,
    gallery_probe_split,
    load_sequence,
    scan_dataset,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_EMPTY = 0, 1, 2, 3, 4, 5

log = logging.getLogger("dygait")


class UsageError(Exception):
    pass


def _pair(text):
    try:
        h, w = (int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}") from None
    return h, w


def _assignment(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _set_threads(n):
    if not n:
        return
    try:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    except ImportError:  # pragma: no cover
        pass


def _run_config(args, **overrides):
    """Config file (or the desk preset) + ``--set`` pairs + dedicated flags, validated together."""
    values = dict(getattr(args, "set", None) or [])
    for key, value in overrides.items():
        if value is not None:
            values[key] = str(value)
    try:
        return cfg.load(args.config or "desk", values)
    except cfg.ConfigError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.ids < 2:
        raise UsageError("--ids must be at least 2")
    if args.seqs < 1 or args.frames < 1:
        raise UsageError("--seqs and --frames must be positive")
    if args.gallery + args.probe > args.seqs:
        raise UsageError("--gallery + --probe exceeds --seqs")
    if not 0 <= args.bag_rate <= 1:
        raise UsageError("--bag-rate must lie in [0, 1]")
    try:
        synthgait.generate_dataset(
            args.out, args.ids, args.seqs, args.frames, args.policy, args.seed, tuple(args.size),
            args.noise, args.gallery, args.probe, args.bag_rate,
        )
    except synthgait.SpecInvalidError as exc:
        raise UsageError(str(exc)) from None
    print(os.path.join(args.out, "manifest.csv"))
    return EXIT_OK


def cmd_prep(args):
    run = _run_config(args, normalize=args.normalize)
    size = tuple(args.size) if args.size else run.model.input_size
    rule = gallery_probe_split(args.gallery, args.probe) if args.gallery or args.probe else None
    if not os.path.isdir(args.root):
        raise FileNotFoundError(f"dataset root not found: {args.root}")
    manifest = scan_dataset(args.root, rule)
    rows, dropped = [], 0
    for row in manifest.rows:
        try:
            seq = load_sequence(manifest.abspath(row), size, run.normalize)
        except EmptySequenceError as exc:
            log.warning("skipped sequence: %s", exc)
            continue
        dropped += len(seq.dropped)
        rel = os.path.join("silhouettes", row.path)
        for t, frame in enumerate(seq.frames):
            write_pgm(os.path.join(args.out, rel, f"{t:04d}.pgm"), frame * 255)
        rows.append(row.__class__(row.subject, row.condition, row.view, rel, len(seq), row.partition))
    out_manifest = DatasetManifest(args.out, rows)
    path = os.path.join(args.out, "manifest.csv")
    out_manifest.write(path)
    print(path)
    print(f"sequences: {len(rows)}  dropped frames: {dropped}", file=sys.stderr)
    return EXIT_OK


def _manifest(path):
    if not path:
        raise UsageError("a manifest is required (--manifest or manifest= in the config)")
    return DatasetManifest.read(path)


def cmd_train(args):
    if args.blocks is not None and args.blocks < 1:
        raise UsageError("--blocks must be at least 1")
    run = _run_config(args, ablation=args.ablation, iterations=args.iters, seed=args.seed, out=args.out,
                      manifest=args.manifest)
    if args.blocks is not None:
        try:
            run.model = run.model.with_blocks(args.blocks)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if not run.out:
        raise UsageError("an output directory is required (--out)")
    _set_threads(args.threads or run.threads)
    manifest = _manifest(run.manifest)
    if args.resume:
        state = train.load_checkpoint(args.resume)
        if args.iters is not None:
            state.train_config.iterations = args.iters
        run.model = state.model_config
    else:
        state = None
    sequences = train.load_training_sequences(manifest, run.model, run.normalize)
    classes = sorted(sequences)
    if state is None:
        state = train.new_state(run.model, run.train, classes)
    elif state.classes != classes:
        raise UsageError("the manifest's training subjects differ from the checkpoint's")
    state.extra = {"normalize": run.normalize}
    os.makedirs(run.out, exist_ok=True)
    stream = sys.stdout
    if args.log:
        stream = open(args.log, "a" if args.resume else "w", encoding="utf-8")
    try:
        train.train(state, sequences, stream, run.out, run.prefetch)
    except train.DivergenceError as exc:
        print(f"error: {exc}; last good checkpoint kept in {run.out}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        if stream is not sys.stdout:
            stream.close()
    print(f"checkpoint: {os.path.join(run.out, 'last.dygt')}")
    return EXIT_OK


def _load_model(path):
    state = train.load_checkpoint(path)
    return state, state.extra.get("normalize", "crop")


def _embed_partition(manifest, partition, state, normalize):
    seqs = []
    for row in manifest.partition(partition):
        seqs.append(load_sequence(manifest.abspath(row), state.model_config.input_size, normalize,
                                  row.subject, row.condition, row.view))
    return evaluation.embed_all(seqs, state.params, state.model_config)


def cmd_eval(args):
    state, normalize = _load_model(args.checkpoint)
    normalize = args.normalize or normalize
    _set_threads(args.threads)
    manifest = _manifest(args.manifest)
    gallery = _embed_partition(manifest, args.gallery_partition, state, normalize)
    probe = _embed_partition(manifest, args.probe_partition, state, normalize)
    try:
        report = evaluation.cross_view_protocol(probe, gallery, args.protocol, args.distance == "strip_sum")
    except evaluation.EmptyProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        evaluation.write_report(report, os.path.join(args.out, "report_"))
    sys.stdout.write(report.summary())
    return EXIT_OK


def _sequence_name(path):
    parts = os.path.normpath(os.path.abspath(path)).split(os.sep)
    return "_".join(parts[-3:])


def _region_masks(region_dir, n_frames, size):
    masks = {}
    for part in ("legs", "bag"):
        frames = []
        for t in range(n_frames):
            p = os.path.join(region_dir, f"{t:04d}_{part}.pgm")
            m = read_pgm(p) > 0
            h, w = m.shape
            rows = (np.arange(size[0]) * h) // size[0]
            cols = (np.arange(size[1]) * w) // size[1]
            frames.append(m[np.ix_(rows, cols)])
        masks[part] = np.stack(frames)
    return masks


def cmd_heatmap(args):
    from dygait.model import activation_heatmap

    state, normalize = _load_model(args.checkpoint)
    normalize = args.normalize or normalize
    mc = state.model_config
    block = mc.num_dam_blocks - 1 if args.block is None else args.block
    if not 0 <= block < mc.num_dam_blocks:
        raise UsageError(f"--block {block} outside 0..{mc.num_dam_blocks - 1}")
    if args.regions and normalize != "resize":
        raise UsageError("--regions needs frames normalised with normalize=resize so masks stay aligned")
    _set_threads(args.threads)
    seq = load_sequence(args.sequence, mc.input_size, normalize)
    heat = activation_heatmap(seq.frames.astype(np.float32), state.params, mc, block)
    name = _sequence_name(args.sequence)
    out = args.out or "."
    for t, frame in enumerate(heat):
        write_pgm(os.path.join(out, f"{name}_{block}_{t:04d}.pgm"), frame * 255)
    print(f"frames: {len(heat)}")
    if args.regions:
        masks = _region_masks(args.regions, len(heat), mc.input_size)
        if any(p for p, _ in seq.dropped):
            raise UsageError("--regions cannot be aligned with a sequence that dropped frames")
        legs = float(heat[masks["legs"]].mean()) if masks["legs"].any() else float("nan")
        bag = float(heat[masks["bag"]].mean()) if masks["bag"].any() else float("nan")
        print(f"heat_legs={legs:.6f}")
        print(f"heat_bag={bag:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradsuite.run_suite(perturb=set(args.perturb or ()), seed=args.seed or 0)
    print(gradsuite.format_report(results))
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_dump(args):
    state, normalize = _load_model(args.checkpoint)
    normalize = args.normalize or normalize
    manifest = _manifest(args.manifest)
    embs = []
    for part in args.partition or ("gallery", "probe"):
        embs.extend(_embed_partition(manifest, part, state, normalize))
    out = args.out or "embeddings.csv"
    evaluation.dump_embeddings(evaluation.EmbeddingSet(embs), out)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="config file or preset name (default: desk)")
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("--threads", type=int, default=0, help="cap on worker threads (0: runtime default)")

    p = argparse.ArgumentParser(prog="dygait", description="Dynamic-feature gait recognition toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic walker dataset")
    s.add_argument("--ids", type=int, default=16)
    s.add_argument("--seqs", type=int, default=8)
    s.add_argument("--frames", type=int, default=40)
    s.add_argument("--policy", choices=synthgait.POLICIES, default="random")
    s.add_argument("--noise", type=float, default=0.005)
    s.add_argument("--bag-rate", type=float, default=0.5)
    s.add_argument("--size", type=_pair, default=(64, 44))
    s.add_argument("--gallery", type=int, default=2)
    s.add_argument("--probe", type=int, default=2)
    s.set_defaults(func=cmd_synth, seed=0)

    s = sub.add_parser("prep", parents=[common], help="normalise a raw silhouette tree and write a manifest")
    s.add_argument("--root", required=True)
    s.add_argument("--normalize", choices=("crop", "resize"), default=None)
    s.add_argument("--size", type=_pair, default=None)
    s.add_argument("--gallery", type=int, default=0)
    s.add_argument("--probe", type=int, default=0)
    s.add_argument("--set", type=_assignment, action="append")
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--manifest")
    s.add_argument("--iters", type=int)
    s.add_argument("--ablation", choices=("both", "gfe_only", "dfe_only"))
    s.add_argument("--blocks", type=int)
    s.add_argument("--log", help="CSV log path (default: standard output)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--set", type=_assignment, action="append", help="config override key=value")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "gallery/probe evaluation"),
        ("dump-embeddings", cmd_dump, "write embeddings as CSV"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest", required=True)
        s.add_argument("--normalize", choices=("crop", "resize"))
        if name == "eval":
            s.add_argument("--protocol", choices=evaluation.PROTOCOLS, default="plain")
            s.add_argument("--distance", choices=("concat", "strip_sum"), default="concat")
            s.add_argument("--gallery-partition", default="gallery")
            s.add_argument("--probe-partition", default="probe")
        else:
            s.add_argument("--partition", action="append", help="partition to dump (repeatable)")
        s.set_defaults(func=func)

    s = sub.add_parser("heatmap", parents=[common], help="per-frame activation heatmaps for one sequence")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--sequence", required=True, help="directory of NNNN.pgm frames")
    s.add_argument("--block", type=int, help="DAM block (default: last)")
    s.add_argument("--regions", help="directory of NNNN_legs.pgm / NNNN_bag.pgm masks")
    s.add_argument("--normalize", choices=("crop", "resize"))
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--perturb", action="append", help=argparse.SUPPRESS)  # test hook: break an op's gradient
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, PGMFormatError, EmptySequenceError, train.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
