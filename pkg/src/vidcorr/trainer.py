"""Training orchestration: reconstruction pretraining of the soft labeler,
joint three-loss training, and coarse-to-fine distillation, plus the
checkpoint evaluation harness.

Every stage is seed-deterministic: data, dropout, and initialization draw
from dedicated PCG64 streams derived from the config seed, and steps run
strictly one at a time.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import losses as L
from .config import TrainConfig
from .coarse2fine import StudentParams, distill_loss, init_student, save_student, student_forward
from .correspondence import (
    FlowField,
    MappingConfig,
    ProbMap,
    argmax_flow,
    correlation_probs,
    local_correlation,
    occlusion_mask,
    window_validity,
)
from .data import (
    Clip,
    GeneratorConfig,
    VideoPair,
    channel_dropout,
    clip_gt_tracks,
    gen_clip,
    gen_pair,
    jittered,
    make_rng,
    rgb_to_lab,
)
from .encoder import (
    EncoderParams,
    arch_for_stride,
    encode,
    from_named_tensors,
    init_params,
    to_named_tensors,
)
from .inference import TrackProtocol, propagate_mask, track_points
from .metrics import EvalReport, VideoTracks, delta_avg, epe, jaccard, boundary_f, pck
from .numerics import Tape, Tensor, backward, cosine_lr, init_adam
from .numerics.optim import adam_step
from .numerics.tensorfile import load_checkpoint, save_checkpoint


def generator_config(cfg: TrainConfig, seed_offset: int = 0) -> GeneratorConfig:
    return GeneratorConfig(
        size=cfg.image_size,
        sprite_count=(cfg.gen_sprites_min, cfg.gen_sprites_max),
        sprite_size=(cfg.gen_sprite_min, cfg.gen_sprite_max),
        max_disp=cfg.gen_max_disp,
        integer_disp=cfg.gen_integer_disp,
        texture=cfg.gen_texture,
        texture_scale=cfg.gen_texture_scale,
        frame_noise=cfg.gen_noise,
        background_moves=cfg.gen_background_moves,
        gap=cfg.gen_gap,
        seed=cfg.seed + seed_offset,
    )


def real_config(cfg: TrainConfig) -> GeneratorConfig:
    return jittered(generator_config(cfg), jitter=cfg.real_jitter, noise=cfg.real_noise)


def flow_to_feature_grid(flow: FlowField, stride: int) -> FlowField:
    """Average-pool the image-resolution flow into feature cells and rescale
    displacements into feature-grid units."""
    v = flow.vectors
    h, w, _ = v.shape
    hf, wf = h // stride, w // stride
    pooled = v[: hf * stride, : wf * stride].reshape(hf, stride, wf, stride, 2).mean(axis=(1, 3))
    return FlowField((pooled / stride).astype(np.float32))


def covered_to_feature_grid(covered: np.ndarray, stride: int) -> np.ndarray:
    """A feature cell counts as covered when any of its pixels is covered."""
    h, w = covered.shape
    hf, wf = h // stride, w // stride
    blocks = covered[: hf * stride, : wf * stride].reshape(hf, stride, wf, stride)
    return blocks.any(axis=(1, 3))


def preprocess(frame: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    return rgb_to_lab(frame) if cfg.use_lab else frame.astype(np.float32)


def _resize_to_grid(image: np.ndarray, stride: int) -> np.ndarray:
    """Box-average an image down to the feature grid (constant target)."""
    h, w, c = image.shape
    hf, wf = h // stride, w // stride
    return (
        image[: hf * stride, : wf * stride]
        .reshape(hf, stride, wf, stride, c)
        .mean(axis=(1, 3))
        .astype(np.float32)
    )


def make_label(
    cfg: TrainConfig,
    theta_self: EncoderParams | None,
    pair: VideoPair,
    frame2_proc: np.ndarray,
    mapping: MappingConfig,
) -> L.LabelDist:
    flow_feat = flow_to_feature_grid(pair.gt_flow, cfg.stride)
    covered_feat = covered_to_feature_grid(pair.covered, cfg.stride)
    if cfg.label_mode == "dirac":
        return L.dirac_label(flow_feat, mapping, occluded=covered_feat)
    if cfg.label_mode == "gaussian":
        return L.gaussian_label(flow_feat, (cfg.sigma_u, cfg.sigma_v), mapping, occluded=covered_feat)
    if theta_self is None:
        raise ValueError("soft labeling requires a theta_self checkpoint")
    return L.soft_label(theta_self, frame2_proc, flow_feat, mapping, occluded=covered_feat)


@dataclass
class StepReport(L.LossReport):
    pass


def _log_line(step: int, report: L.LossReport, valid: int) -> str:
    return (
        f"{step},{report.kl:.6f},{report.rec:.6f},{report.adv:.6f},"
        f"{report.total:.6f},{valid}"
    )


def _save_joint(path, encoder, disc, cfg: TrainConfig, stage: str) -> None:
    tensors, meta = to_named_tensors(encoder, prefix="enc")
    if disc is not None:
        for i, layer in enumerate(disc.layers):
            tensors[f"disc.{i}.weight"] = layer.weight.data
            tensors[f"disc.{i}.bias"] = layer.bias.data
        meta["disc.count"] = str(len(disc.layers))
    meta["stage"] = stage
    meta["stride"] = str(cfg.stride)
    meta["r"] = str(cfg.r)
    meta["tau"] = repr(cfg.tau)
    meta["image_size"] = str(cfg.image_size)
    meta["use_lab"] = "1" if cfg.use_lab else "0"
    save_checkpoint(path, tensors, meta)


def load_encoder_checkpoint(path: str, requires_grad: bool = False) -> tuple[EncoderParams, dict]:
    tensors, meta = load_checkpoint(path)
    return from_named_tensors(tensors, meta, prefix="enc", requires_grad=requires_grad), meta


def _rec_terms(
    f1t, f2t, target1, target2, mapping, backward_feats=None
) -> tuple[Tensor | None, int, ProbMap]:
    """Reconstruction loss for one unlabeled pair; returns (term, count, P_t).

    The backward map for the occlusion check is computed off-tape. A step
    whose forward-backward check rejects every pixel contributes nothing.
    """
    p_t = local_correlation(f1t, f2t, mapping)
    probs_back = correlation_probs(
        f2t.values.data, f1t.values.data, mapping.r, mapping.tau
    )
    p_back = ProbMap(
        Tensor(probs_back), mapping.r, window_validity(f2t.height, f2t.width, mapping.r)
    )
    occ = occlusion_mask(p_t, p_back)
    count = int(occ.flags.sum())
    if count == 0:
        return None, 0, p_t
    i_rec = L.reconstruct(p_t, target2)
    term = L.reconstruction_loss(i_rec, target1, occ)
    return term, count, p_t


def run_stage(cfg: TrainConfig, out_dir: str) -> dict[str, str]:
    """Run one training stage; returns paths of the checkpoint and loss log."""
    os.makedirs(out_dir, exist_ok=True)
    if cfg.stage == "distill":
        return _run_distill(cfg, out_dir)
    return _run_encoder_stage(cfg, out_dir)


def _run_encoder_stage(cfg: TrainConfig, out_dir: str) -> dict[str, str]:
    stage = cfg.stage
    mapping = MappingConfig(r=cfg.r, tau=cfg.tau)
    arch = arch_for_stride(cfg.stride, cfg.channel_tuple())
    arch.normalize = cfg.normalize
    encoder = init_params(cfg.seed, arch)

    theta_self = None
    theta_self_snapshot = None
    if stage == "joint" and cfg.loss_kl and cfg.label_mode == "soft":
        if not cfg.theta_self:
            raise ValueError("joint stage with soft labeling requires theta_self=")
        theta_self, _ = load_encoder_checkpoint(cfg.theta_self, requires_grad=False)
        theta_self_snapshot = [p.data.copy() for p in theta_self.parameters()]

    disc = None
    use_kl = stage == "joint" and cfg.loss_kl
    use_rec = cfg.loss_rec or stage == "pretrain-self"
    use_adv = stage == "joint" and cfg.loss_adv
    if use_adv:
        disc = L.init_discriminator(cfg.seed + 101, (2 * cfg.r + 1) ** 2)

    params = encoder.parameters() + (disc.parameters() if disc else [])
    state = init_adam(params)

    syn_cfg = generator_config(cfg)
    real_cfg = real_config(cfg)
    rng_syn = make_rng(cfg.seed * 1000003 + 1)
    rng_real = make_rng(cfg.seed * 1000003 + 2)
    rng_drop = make_rng(cfg.seed * 1000003 + 3)

    steps_per_epoch = max(1, cfg.pairs // cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    log_lines: list[str] = []
    opt_step = 0

    for _epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            for p in params:
                p.zero_grad()
            agg = L.LossReport()
            for _b in range(cfg.batch):
                report = _train_pair(
                    cfg, stage, mapping, encoder, theta_self, disc,
                    syn_cfg, real_cfg, rng_syn, rng_real, rng_drop,
                    use_kl, use_rec, use_adv,
                )
                agg.kl += report.kl
                agg.rec += report.rec
                agg.adv += report.adv
                agg.kl_pixels += report.kl_pixels
                agg.rec_pixels += report.rec_pixels
            grads = [p.grad / cfg.batch for p in params]
            lr = cosine_lr(cfg.lr, opt_step, total_steps)
            adam_step(params, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
            opt_step += 1
            agg.kl /= cfg.batch
            agg.rec /= cfg.batch
            agg.adv /= cfg.batch
            valid = agg.kl_pixels if use_kl else agg.rec_pixels
            if opt_step % cfg.log_every == 0:
                log_lines.append(_log_line(opt_step, agg, valid))
            if cfg.ckpt_every and opt_step % cfg.ckpt_every == 0:
                _save_joint(
                    os.path.join(out_dir, f"model_step{opt_step}.ckpt"),
                    encoder, disc, cfg, stage,
                )

    if theta_self_snapshot is not None:
        for p, snap in zip(theta_self.parameters(), theta_self_snapshot):
            if not np.array_equal(p.data, snap):
                raise AssertionError("frozen soft-labeler parameters changed")

    ckpt = os.path.join(out_dir, "model.ckpt")
    _save_joint(ckpt, encoder, disc, cfg, stage)
    log_path = os.path.join(out_dir, "loss_log.txt")
    with open(log_path, "w") as f:
        f.write("\n".join(log_lines) + "\n")
    return {"checkpoint": ckpt, "loss_log": log_path}


def _train_pair(
    cfg, stage, mapping, encoder, theta_self, disc,
    syn_cfg, real_cfg, rng_syn, rng_real, rng_drop,
    use_kl, use_rec, use_adv,
) -> L.LossReport:
    """One labeled + one unlabeled pair through the enabled objectives."""
    report = L.LossReport()

    pair_s = gen_pair(syn_cfg, rng_syn) if (use_kl or stage == "pretrain-self" or use_adv) else None
    pair_t = gen_pair(real_cfg, rng_real, domain="real") if (stage == "joint" and (use_rec or use_adv)) else None

    label = None
    if pair_s is not None:
        f1s_img = preprocess(pair_s.frame1, cfg)
        f2s_img = preprocess(pair_s.frame2, cfg)
        if use_kl:
            label = make_label(cfg, theta_self, pair_s, f2s_img, mapping)
        x1s = channel_dropout(f1s_img, rng_drop, cfg.dropout_p)
        x2s = channel_dropout(f2s_img, rng_drop, cfg.dropout_p)
    if pair_t is not None:
        f1t_img = preprocess(pair_t.frame1, cfg)
        f2t_img = preprocess(pair_t.frame2, cfg)
        x1t = channel_dropout(f1t_img, rng_drop, cfg.dropout_p)
        x2t = channel_dropout(f2t_img, rng_drop, cfg.dropout_p)
        target1 = _resize_to_grid(f1t_img, cfg.stride)
        target2 = _resize_to_grid(f2t_img, cfg.stride)

    terms: list[Tensor] = []
    with Tape() as tape:
        p_s = None
        if pair_s is not None:
            fs1 = encode(encoder, x1s)
            fs2 = encode(encoder, x2s)
            p_s = local_correlation(fs1, fs2, mapping)
            if use_kl:
                kl_term = L.kl_supervision_loss(p_s, label)
                terms.append(kl_term)
                report.kl = float(kl_term.data)
                report.kl_pixels = int(label.valid.sum())
        if stage == "pretrain-self":
            # reconstruction on the labeled stream is the whole objective
            t1 = _resize_to_grid(f1s_img, cfg.stride)
            t2 = _resize_to_grid(f2s_img, cfg.stride)
            term, count, _ = _rec_terms(fs1, fs2, t1, t2, mapping)
            if term is not None:
                terms.append(term)
                report.rec = float(term.data)
                report.rec_pixels = count
        p_t = None
        if pair_t is not None:
            ft1 = encode(encoder, x1t)
            ft2 = encode(encoder, x2t)
            if use_rec:
                term, count, p_t = _rec_terms(ft1, ft2, target1, target2, mapping)
                if term is not None:
                    terms.append(term)
                    report.rec = float(term.data)
                    report.rec_pixels = count
            else:
                p_t = local_correlation(ft1, ft2, mapping)
        if use_adv and p_s is not None and p_t is not None:
            adv_val, adv_term = L.adversarial_losses(disc, p_s, p_t, cfg.lambda_adv)
            terms.append(adv_term)
            report.adv = adv_val
        if not terms:
            raise ValueError("no enabled loss produced a term this step")
        total = terms[0]
        for t in terms[1:]:
            from .numerics import ops

            total = ops.add(total, t)
        if not np.isfinite(total.data).all():
            raise FloatingPointError("training diverged: non-finite loss")
        backward(tape, total)
    return report


def _run_distill(cfg: TrainConfig, out_dir: str) -> dict[str, str]:
    if not cfg.teacher:
        raise ValueError("distill stage requires teacher=")
    teacher, meta = load_encoder_checkpoint(cfg.teacher, requires_grad=False)
    mapping = MappingConfig(r=cfg.r, tau=cfg.tau)
    student = init_student(
        cfg.seed,
        coarse_stride=cfg.coarse_stride,
        channels=cfg.channel_tuple(),
        r_coarse=cfg.r_coarse,
        r_fine=cfg.r,
        factor=cfg.upsample_factor,
    )
    params = student.parameters()
    state = init_adam(params)
    real_cfg = real_config(cfg)
    rng = make_rng(cfg.seed * 1000003 + 7)

    steps_per_epoch = max(1, cfg.pairs // cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    log_lines = []
    opt_step = 0
    for _epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            for p in params:
                p.zero_grad()
            agg = L.LossReport()
            for _b in range(cfg.batch):
                pair = gen_pair(real_cfg, rng, domain="real")
                i1 = preprocess(pair.frame1, cfg)
                i2 = preprocess(pair.frame2, cfg)
                tf1 = encode(teacher, i1)
                tf2 = encode(teacher, i2)
                teacher_map = local_correlation(tf1, tf2, mapping)
                with Tape() as tape:
                    student_map = student_forward(student, i1, i2, tau=cfg.tau)
                    loss = distill_loss(student_map, teacher_map)
                    backward(tape, loss)
                agg.kl += float(loss.data)
                agg.kl_pixels += student_map.height * student_map.width
            grads = [p.grad / cfg.batch for p in params]
            lr = cosine_lr(cfg.lr, opt_step, total_steps)
            adam_step(params, grads, state, lr, (cfg.beta1, cfg.beta2), cfg.adam_eps)
            opt_step += 1
            agg.kl /= cfg.batch
            if opt_step % cfg.log_every == 0:
                log_lines.append(_log_line(opt_step, agg, agg.kl_pixels))

    ckpt = os.path.join(out_dir, "student.ckpt")
    save_student(ckpt, student)
    log_path = os.path.join(out_dir, "loss_log.txt")
    with open(log_path, "w") as f:
        f.write("\n".join(log_lines) + "\n")
    return {"checkpoint": ckpt, "loss_log": log_path}


# ---------------------------------------------------------------------------
# evaluation harness


def _eval_gen_config(cfg: TrainConfig) -> GeneratorConfig:
    base = generator_config(cfg)
    if cfg.eval_jitter > 0:
        base = jittered(base, jitter=cfg.eval_jitter, noise=cfg.gen_noise)
    return base


def eval_flow_epe(encoder: EncoderParams, cfg: TrainConfig) -> float:
    """Argmax-flow endpoint error (feature px) on held-out synthetic pairs,
    scored on non-covered pixels whose true displacement fits the window."""
    mapping = MappingConfig(r=cfg.r, tau=cfg.tau)
    gen = _eval_gen_config(cfg)
    errors: list[np.ndarray] = []
    for i in range(cfg.eval_pairs):
        rng = make_rng(cfg.eval_seed + i)
        pair = gen_pair(gen, rng)
        i1 = preprocess(pair.frame1, cfg)
        i2 = preprocess(pair.frame2, cfg)
        f1 = encode(encoder, i1)
        f2 = encode(encoder, i2)
        pred = argmax_flow(local_correlation(f1, f2, mapping)).vectors
        gt = flow_to_feature_grid(pair.gt_flow, cfg.stride).vectors
        covered = covered_to_feature_grid(pair.covered, cfg.stride)
        in_range = (np.abs(gt[:, :, 0]) <= cfg.r) & (np.abs(gt[:, :, 1]) <= cfg.r)
        mask = in_range & ~covered
        if mask.any():
            err = np.linalg.norm(pred - gt, axis=-1)
            errors.append(err[mask])
    if not errors:
        raise ValueError("no valid evaluation pixels")
    return float(np.concatenate(errors).mean())


def _sample_queries(clip: Clip, count: int, rng: np.random.Generator) -> np.ndarray:
    lay0 = clip.layers[0]
    size = lay0.shape[0]
    margin = 4
    inner = lay0[margin : size - margin, margin : size - margin]
    sprite_idx = np.argwhere(inner > 0) + margin
    bg_idx = np.argwhere(inner == 0) + margin
    n_sprite = min(len(sprite_idx), max(1, (3 * count) // 4))
    picks = []
    if len(sprite_idx):
        sel = rng.choice(len(sprite_idx), size=n_sprite, replace=False)
        picks.append(sprite_idx[sel])
    n_bg = count - sum(len(p) for p in picks)
    if n_bg > 0 and len(bg_idx):
        sel = rng.choice(len(bg_idx), size=min(n_bg, len(bg_idx)), replace=False)
        picks.append(bg_idx[sel])
    return np.concatenate(picks, axis=0).astype(np.float64)


def eval_tracking(encoder: EncoderParams, cfg: TrainConfig) -> list[EvalReport]:
    mapping = MappingConfig(r=cfg.r, tau=cfg.tau)
    protocol = TrackProtocol(memory=cfg.memory, topk=cfg.topk)
    gen = _eval_gen_config(cfg)
    videos = []
    for c in range(cfg.eval_clips):
        rng = make_rng(cfg.eval_seed + 5000 + c)
        clip = gen_clip(gen, rng, cfg.eval_clip_len)
        queries = _sample_queries(clip, cfg.eval_points, rng)
        gt_pos, gt_vis = clip_gt_tracks(clip, queries)
        frames = [preprocess(f, cfg) for f in clip.frames]
        tracks = track_points(encoder, frames, queries, mapping, protocol)
        pred = np.stack([t.positions for t in tracks], axis=0)  # (N, T, 2)
        videos.append(
            VideoTracks(
                pred=pred,
                gt=np.transpose(gt_pos, (1, 0, 2)),
                visible=np.transpose(gt_vis, (1, 0)),
                scale=float(cfg.image_size * cfg.image_size),
                name=f"clip{c}",
            )
        )
    return [
        delta_avg(videos, mode="all-points"),
        delta_avg(videos, mode="per-video-mean"),
        pck(videos, cfg.pck_alpha, mode="all-points"),
    ]


def eval_masks(encoder: EncoderParams, cfg: TrainConfig) -> list[EvalReport]:
    mapping = MappingConfig(r=cfg.r, tau=cfg.tau)
    protocol = TrackProtocol(memory=cfg.memory, topk=cfg.topk)
    gen = _eval_gen_config(cfg)
    preds, gts = [], []
    for c in range(cfg.eval_clips):
        rng = make_rng(cfg.eval_seed + 7000 + c)
        clip = gen_clip(gen, rng, cfg.eval_clip_len)
        lay0 = clip.layers[0]
        ids, counts = np.unique(lay0[lay0 > 0], return_counts=True)
        if ids.size == 0:
            continue
        target = int(ids[counts.argmax()])
        mask0 = (lay0 == target).astype(np.int32)
        frames = [preprocess(f, cfg) for f in clip.frames]
        pred = propagate_mask(encoder, frames, mask0, mapping, protocol)
        gt = [(lay == target).astype(np.int32) for lay in clip.layers]
        preds.append(np.stack(pred))
        gts.append(np.stack(gt))
    return [jaccard(preds, gts), boundary_f(preds, gts, tolerance=2)]


def eval_checkpoint(ckpt_path: str, cfg: TrainConfig) -> list[EvalReport]:
    """Inference + metrics pipeline on the configured synthetic eval set."""
    encoder, _meta = load_encoder_checkpoint(ckpt_path)
    reports = [EvalReport("epe", eval_flow_epe(encoder, cfg), "all-points", "px")]
    reports.extend(eval_tracking(encoder, cfg))
    reports.extend(eval_masks(encoder, cfg))
    return reports
