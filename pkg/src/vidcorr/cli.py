"""Command-line entry point for the whole pipeline.

Verbs: gen-data, train, distill, track, propagate-mask, eval,
export-features, bench. Configuration is a flat key=value file plus
repeatable ``-o key=value`` overrides; unknown keys are rejected. The
global flags --seed, --deterministic, and --threads apply to every verb
(--threads must be set before numpy loads, so heavy imports happen inside
the handlers).
"""

from __future__ import annotations

import argparse
import os
import sys
import time


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidcorr", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--deterministic", action="store_true", help="force single-threaded math")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, default=None)
        p.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("gen-data", help="write synthetic pair directories")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="pair count (default: config pairs)")

    p = sub.add_parser("train", help="run the pretrain-self or joint stage")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("distill", help="train the coarse-to-fine student")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("track", help="propagate query points through a clip")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--points", required=True, help="text file: point_id,u,v per line")
    p.add_argument("--out", required=True, help="output track file")
    p.add_argument("--fig", default=None, help="optional trajectory figure (png)")

    p = sub.add_parser("propagate-mask", help="propagate a first-frame mask")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--mask", required=True, help="first-frame PGM with class indices")
    p.add_argument("--out", required=True, help="output directory for per-frame PGMs")

    p = sub.add_parser("eval", help="run metrics on a checkpoint or external files")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--pred-tracks", default=None)
    p.add_argument("--gt-tracks", default=None)
    p.add_argument("--pred-masks", default=None, help="directory of per-frame PGMs")
    p.add_argument("--gt-masks", default=None)
    p.add_argument("--scale", type=float, default=None, help="PCK scale A (external tracks)")
    p.add_argument("--alpha", type=float, default=0.1)

    p = sub.add_parser("export-features", help="encode clip frames to CPXT files")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench", help="time fine matching against the student")
    common(p)
    p.add_argument("--out", default=None)
    p.add_argument("--repeats", type=int, default=5)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    threads = args.threads
    if args.deterministic:
        threads = 1
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)

    try:
        handler = _HANDLERS[args.verb]
        return handler(args)
    except (ValueError, OSError, KeyError, FloatingPointError) as exc:
        print(f"error: {args.verb}: {exc}", file=sys.stderr)
        return 1


def _load_cfg(args):
    from .config import load_config

    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _cmd_gen_data(args) -> int:
    import numpy as np

    from .data import gen_pair, make_rng, write_flow, write_pgm, write_ppm
    from .trainer import generator_config

    cfg = _load_cfg(args)
    count = args.count if args.count is not None else cfg.pairs
    gen = generator_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    for i in range(count):
        rng = make_rng(cfg.seed * 1000003 + i)
        pair = gen_pair(gen, rng)
        pair_dir = os.path.join(args.out, f"pair_{i:04d}")
        os.makedirs(pair_dir, exist_ok=True)
        write_ppm(os.path.join(pair_dir, "frame1.ppm"), pair.frame1)
        write_ppm(os.path.join(pair_dir, "frame2.ppm"), pair.frame2)
        write_flow(os.path.join(pair_dir, "flow.cpxf"), pair.gt_flow)
        write_pgm(os.path.join(pair_dir, "covered.pgm"), pair.covered.astype(np.uint8) * 255)
    print(f"wrote {count} pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .figures import plot_loss_curves
    from .trainer import run_stage

    cfg = _load_cfg(args)
    if cfg.stage == "distill":
        raise ValueError("use the distill verb for the distill stage")
    result = run_stage(cfg, args.out)
    plot_loss_curves(result["loss_log"], os.path.join(args.out, "loss_curves.png"))
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _cmd_distill(args) -> int:
    from .figures import plot_loss_curves
    from .trainer import run_stage

    cfg = _load_cfg(args)
    cfg.stage = "distill"
    result = run_stage(cfg, args.out)
    plot_loss_curves(result["loss_log"], os.path.join(args.out, "loss_curves.png"))
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _read_points(path):
    import numpy as np

    ids, coords = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            pid, u, v = line.split(",")
            ids.append(int(pid))
            coords.append((float(u), float(v)))
    return ids, np.asarray(coords, dtype=np.float64)


def _mapping_from_meta(cfg, meta):
    from .correspondence import MappingConfig

    r = int(meta.get("r", cfg.r))
    tau = float(meta.get("tau", cfg.tau))
    return MappingConfig(r=r, tau=tau), meta.get("use_lab", "1") == "1"


def _cmd_track(args) -> int:
    from .data import load_clip, rgb_to_lab
    from .inference import TrackProtocol, track_points, write_tracks
    from .trainer import load_encoder_checkpoint

    cfg = _load_cfg(args)
    encoder, meta = load_encoder_checkpoint(args.ckpt)
    mapping, use_lab = _mapping_from_meta(cfg, meta)
    frames = load_clip(args.clip)
    if use_lab:
        frames = [rgb_to_lab(f) for f in frames]
    ids, coords = _read_points(args.points)
    protocol = TrackProtocol(memory=cfg.memory, topk=cfg.topk)
    tracks = track_points(encoder, frames, coords, mapping, protocol)
    for track, pid in zip(tracks, ids):
        track.point_id = pid
    write_tracks(args.out, tracks)
    if args.fig:
        from .data import load_clip as _lc
        from .figures import plot_tracks

        plot_tracks(_lc(args.clip)[0], tracks, args.fig)
    print(f"wrote tracks for {len(tracks)} points to {args.out}")
    return 0


def _cmd_propagate_mask(args) -> int:
    from .data import load_clip, read_pgm, rgb_to_lab, write_pgm
    from .inference import TrackProtocol, propagate_mask
    from .trainer import load_encoder_checkpoint

    cfg = _load_cfg(args)
    encoder, meta = load_encoder_checkpoint(args.ckpt)
    mapping, use_lab = _mapping_from_meta(cfg, meta)
    frames = load_clip(args.clip)
    if use_lab:
        frames = [rgb_to_lab(f) for f in frames]
    mask0 = read_pgm(args.mask).astype(int)
    protocol = TrackProtocol(memory=cfg.memory, topk=cfg.topk)
    masks = propagate_mask(encoder, frames, mask0, mapping, protocol)
    os.makedirs(args.out, exist_ok=True)
    for t, mask in enumerate(masks):
        write_pgm(os.path.join(args.out, f"mask_{t:04d}.pgm"), mask.astype("uint8"))
    print(f"wrote {len(masks)} masks to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from .figures import plot_metric_bars
    from .metrics import (
        VideoTracks,
        boundary_f,
        delta_avg,
        jaccard,
        pck,
        write_report_kv,
        write_report_table,
    )

    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    reports = []
    if args.ckpt:
        from .trainer import eval_checkpoint

        reports.extend(eval_checkpoint(args.ckpt, cfg))
    if args.pred_tracks and args.gt_tracks:
        from .inference import read_tracks

        pred = read_tracks(args.pred_tracks)
        gt = read_tracks(args.gt_tracks)
        if len(pred) != len(gt):
            raise ValueError("prediction/ground-truth track counts differ")
        video = VideoTracks(
            pred=np.stack([t.positions for t in pred]),
            gt=np.stack([t.positions for t in gt]),
            visible=np.stack([t.visible for t in gt]),
            scale=args.scale if args.scale is not None else 1.0,
            name="external",
        )
        reports.append(delta_avg([video], mode="all-points"))
        reports.append(delta_avg([video], mode="per-video-mean"))
        if args.scale is not None:
            reports.append(pck([video], args.alpha, mode="all-points"))
    if args.pred_masks and args.gt_masks:
        from .data import read_pgm

        def load_dir(d):
            names = sorted(n for n in os.listdir(d) if n.lower().endswith(".pgm"))
            if not names:
                raise ValueError(f"no PGM masks in {d}")
            return np.stack([read_pgm(os.path.join(d, n)).astype(int) for n in names])

        pred = load_dir(args.pred_masks)
        gt = load_dir(args.gt_masks)
        reports.append(jaccard([pred], [gt]))
        reports.append(boundary_f([pred], [gt]))
    if not reports:
        raise ValueError("nothing to evaluate: pass --ckpt or external files")
    write_report_table(os.path.join(args.out, "metrics.txt"), reports)
    write_report_kv(os.path.join(args.out, "metrics.kv"), reports)
    plot_metric_bars(reports, os.path.join(args.out, "metrics.png"))
    for rep in reports:
        print(f"{rep.name} [{rep.mode}] = {rep.value:.6f}")
    return 0


def _cmd_export_features(args) -> int:
    from .data import load_clip, rgb_to_lab
    from .encoder import encode
    from .numerics.tensorfile import save_tensor
    from .trainer import load_encoder_checkpoint

    cfg = _load_cfg(args)
    encoder, meta = load_encoder_checkpoint(args.ckpt)
    _mapping, use_lab = _mapping_from_meta(cfg, meta)
    frames = load_clip(args.clip)
    if use_lab:
        frames = [rgb_to_lab(f) for f in frames]
    os.makedirs(args.out, exist_ok=True)
    for t, frame in enumerate(frames):
        feat = encode(encoder, frame)
        save_tensor(os.path.join(args.out, f"features_{t:04d}.cpxt"), feat.values.data)
    with open(os.path.join(args.out, "features.meta"), "w") as f:
        f.write(f"stride\t{encoder.stride}\nchannels\t{encoder.channels}\nframes\t{len(frames)}\n")
    print(f"exported {len(frames)} feature maps to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    from .coarse2fine import init_student, student_forward
    from .correspondence import MappingConfig, local_correlation
    from .data import gen_pair, make_rng
    from .encoder import arch_for_stride, encode, init_params
    from .trainer import generator_config, preprocess

    cfg = _load_cfg(args)
    mapping = MappingConfig(r=cfg.r, tau=cfg.tau)
    encoder = init_params(cfg.seed, arch_for_stride(cfg.stride, cfg.channel_tuple()))
    student = init_student(
        cfg.seed,
        coarse_stride=cfg.coarse_stride,
        channels=cfg.channel_tuple(),
        r_coarse=cfg.r_coarse,
        r_fine=cfg.r,
        factor=cfg.upsample_factor,
    )
    pair = gen_pair(generator_config(cfg), make_rng(cfg.seed))
    i1 = preprocess(pair.frame1, cfg)
    i2 = preprocess(pair.frame2, cfg)

    def run_fine():
        return local_correlation(encode(encoder, i1), encode(encoder, i2), mapping)

    def run_student():
        return student_forward(student, i1, i2, tau=cfg.tau)

    run_fine(), run_student()  # warm-up
    t0 = time.perf_counter()
    for _ in range(args.repeats):
        run_fine()
    fine_s = (time.perf_counter() - t0) / args.repeats
    t0 = time.perf_counter()
    for _ in range(args.repeats):
        run_student()
    student_s = (time.perf_counter() - t0) / args.repeats
    ratio = fine_s / student_s
    line = f"fine_ms={fine_s * 1e3:.3f} student_ms={student_s * 1e3:.3f} ratio={ratio:.3f}"
    print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.txt"), "w") as f:
            f.write(line + "\n")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "distill": _cmd_distill,
    "track": _cmd_track,
    "propagate-mask": _cmd_propagate_mask,
    "eval": _cmd_eval,
    "export-features": _cmd_export_features,
    "bench": _cmd_bench,
}


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
