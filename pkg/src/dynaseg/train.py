"""Teacher-student training loop (CAM seeds -> fusion -> PAR pseudo labels).

Each step: (1) teacher forward (no gradients) decodes a mask; (2) CAM over
the teacher's token grid seeds initial labels; (3) the two masks are fused;
(4) PAR refines the fusion against the image (detached); (5) the student
trains on the refined pseudo label through the four-loss total; (6) SGD
with momentum updates the student; (7) the teacher follows by EMA.

CAM weights are maintained as unit-norm class prototypes: an EMA of
pseudo-label-weighted mean teacher features per class, which keeps the
whole pipeline label-free and deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aspp import AsppParams, init_aspp_params
from .checkpoint import ModelState, checkpoint_save
from .config import TrainConfig, config_to_dict, save_config
from .conv import bilinear_upsample
from .data import synth_dataset
from .decoder import (
    PseudoLabelMask,
    cam,
    cam_to_initial_labels,
    decode_masks,
    full_res_logits,
    full_res_probs,
    fuse_masks,
    mask_logits,
    masks_to_full_res,
)
from .encoder import encoder_forward, init_encoder_params
from .losses import LossWeights, ce_loss, cls_loss, seg_loss, total_loss, uncertainty_loss
from .metrics import EvalReport, confusion_matrix, evaluate, report_from_confusion
from .netpbm import write_pgm
from .par import par_refine
from .tensor import Tensor, backward, narrow, new_tape, softmax

CSV_HEADER = "step,epoch,seg,ce,un,cls,total,miou,acc"

_ASPP_KEYS = (
    "aspp.point_pw",
    "aspp.dil0.dw",
    "aspp.dil0.pw",
    "aspp.dil1.dw",
    "aspp.dil1.pw",
    "aspp.dil2.dw",
    "aspp.dil2.pw",
    "aspp.pool_pw",
    "aspp.fuse_w",
    "aspp.fuse_b",
)


def aspp_view(params: dict[str, Tensor]) -> AsppParams:
    """AsppParams referencing the flat parameter tree (gradients stay shared)."""
    return AsppParams(
        point_pw=params["aspp.point_pw"],
        dil_dw=tuple(params[f"aspp.dil{i}.dw"] for i in range(3)),
        dil_pw=tuple(params[f"aspp.dil{i}.pw"] for i in range(3)),
        pool_pw=params["aspp.pool_pw"],
        fuse_w=params["aspp.fuse_w"],
        fuse_b=params["aspp.fuse_b"],
    )


def init_model_state(cfg: TrainConfig) -> ModelState:
    """Seeded student/teacher trees (identical at start), zero moments, unit prototypes."""
    rng = np.random.default_rng(cfg.seed)
    enc = cfg.encoder
    student = init_encoder_params(enc, rng)
    aspp = init_aspp_params(enc.num_patches, rng)
    for key, tensor in zip(
        _ASPP_KEYS,
        (aspp.point_pw, *[t for pair in zip(aspp.dil_dw, aspp.dil_pw) for t in pair],
         aspp.pool_pw, aspp.fuse_w, aspp.fuse_b),
    ):
        student[key] = tensor
    student["classemb"] = Tensor(
        0.5 * rng.standard_normal((cfg.num_classes, enc.embed_dim)), requires_grad=True
    )

    teacher = {k: Tensor(v.data, requires_grad=True) for k, v in student.items()}
    momentum = {k: np.zeros(v.shape) for k, v in student.items()}
    alpha = rng.standard_normal((cfg.num_classes, enc.embed_dim))
    alpha /= np.linalg.norm(alpha, axis=1, keepdims=True)
    return ModelState(student=student, teacher=teacher, momentum=momentum,
                      alpha=alpha, epoch=0, step=0)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], mu: float = 0.99) -> dict[str, Tensor]:
    """teacher' = mu * teacher + (1 - mu) * student, elementwise."""
    if not 0.0 <= mu < 1.0:
        raise ValueError(f"EMA momentum must be in [0, 1), got {mu}")
    if set(teacher) != set(student):
        raise ValueError("teacher and student trees have different keys")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        out[name] = Tensor(mu * t.data + (1.0 - mu) * s.data, requires_grad=True)
    return out


def _sgd(params, grads, moments, lr: float, beta: float):
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads.get(p)
        step = beta * moments[name] + (g.data if g is not None else 0.0)
        new_moments[name] = step
        new_params[name] = Tensor(p.data - lr * step, requires_grad=True)
    return new_params, new_moments


def _student_outputs(image, state, cfg, epoch, schedule):
    enc = cfg.encoder
    h, w = image.shape[1], image.shape[2]
    tokens, _ = encoder_forward(
        image, enc, state.student, epoch,
        aspp_params=aspp_view(state.student), aspp_on=cfg.aspp_on,
        aspp_residual=cfg.aspp_residual, schedule=schedule,
    )
    patch_tokens = narrow(tokens, 0, 1, enc.num_patches)
    logits_tok = mask_logits(patch_tokens, state.student["classemb"])
    probs = full_res_probs(softmax(logits_tok, axis=1), h, w)
    logits = full_res_logits(logits_tok, h, w)
    return probs, logits


def _teacher_features(image, state, cfg, epoch, schedule) -> np.ndarray:
    """Teacher patch-token features (N, D), detached."""
    tokens, _ = encoder_forward(
        image, cfg.encoder, state.teacher, epoch,
        aspp_params=aspp_view(state.teacher), aspp_on=cfg.aspp_on,
        aspp_residual=cfg.aspp_residual, schedule=schedule,
    )
    return narrow(tokens, 0, 1, cfg.encoder.num_patches).data


def _pseudo_from_features(image, feats: np.ndarray, alpha: np.ndarray, state, cfg,
                          beta: float | None = None) -> PseudoLabelMask:
    """Teacher mask + CAM seed, fused and (optionally) PAR-refined; detached."""
    enc = cfg.encoder
    h, w = image.shape[1], image.shape[2]
    teacher_mask = masks_to_full_res(
        decode_masks(Tensor(feats), state.teacher["classemb"]), h, w
    )
    grid_feats = feats.T.reshape(enc.embed_dim, enc.grid, enc.grid)
    cam_full = bilinear_upsample(Tensor(cam(grid_feats, alpha, normalize=cfg.cam_normalize)), h, w).data
    cam_mask = cam_to_initial_labels(cam_full, cfg.cam_threshold)
    fused = fuse_masks(cam_mask, teacher_mask, cfg.beta if beta is None else beta)
    return par_refine(fused, image, cfg.par) if cfg.par_on else fused


def _effective_beta(cfg, step: int) -> float:
    # cold teacher masks poison the fusion; lean fully on CAM while warm
    return 1.0 if step < cfg.cam_warmup_steps else cfg.beta


def make_pseudo_label(image, state, cfg, epoch: int | None = None) -> PseudoLabelMask:
    epoch = epoch if epoch is not None else max(state.epoch, 1)
    schedule = cfg.schedule()
    feats = _teacher_features(image, state, cfg, epoch, schedule)
    return _pseudo_from_features(image, feats, state.alpha, state, cfg,
                                 beta=_effective_beta(cfg, state.step))


def _bootstrap_alpha(features: np.ndarray, num_classes: int, seed: int,
                     iters: int = 15) -> np.ndarray:
    """Cosine k-means over token features; largest cluster becomes background.

    Deterministic given the seed. This seeds the CAM prototype head before
    any pseudo label exists; the per-step EMA keeps refining it.
    """
    x = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    rng = np.random.default_rng([seed, 271])
    centers = [x[rng.integers(len(x))]]
    while len(centers) < num_classes:  # farthest-point init
        sims = np.max(np.stack([x @ c for c in centers]), axis=0)
        centers.append(x[np.argmin(sims)])
    centers = np.stack(centers)
    assign = np.zeros(len(x), dtype=np.int64)
    for _ in range(iters):
        assign = np.argmax(x @ centers.T, axis=1)
        for c in range(num_classes):
            members = assign == c
            if members.any():
                v = x[members].mean(axis=0)
                centers[c] = v / max(np.linalg.norm(v), 1e-12)
    sizes = np.bincount(assign, minlength=num_classes)
    return centers[np.argsort(-sizes, kind="stable")]


def _refit_alpha(features: np.ndarray, alpha: np.ndarray, momentum: float,
                 iters: int = 5) -> np.ndarray:
    """Warm-started k-means refit of the prototypes on current features.

    Initializing from the previous prototypes keeps cluster identities
    stable while tracking the drifting feature space; empty clusters keep
    their previous center. `momentum` blends old and refit centers.
    """
    x = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    centers = alpha.copy()
    for _ in range(iters):
        assign = np.argmax(x @ centers.T, axis=1)
        for c in range(alpha.shape[0]):
            members = assign == c
            if members.any():
                v = x[members].mean(axis=0)
                centers[c] = v / max(np.linalg.norm(v), 1e-12)
    blended = momentum * alpha + (1.0 - momentum) * centers
    norms = np.maximum(np.linalg.norm(blended, axis=1, keepdims=True), 1e-12)
    return blended / norms


def train_step(batch, state: ModelState, cfg: TrainConfig, epoch: int | None = None,
               rng: np.random.Generator | None = None):
    """One optimization step over a batch of (image, gt) pairs.

    Returns (new state, metrics row). Ground truth is used only for the
    logged batch mIoU/Acc, never for training.
    """
    epoch = epoch if epoch is not None else max(state.epoch, 1)
    schedule = cfg.schedule()
    enc = cfg.encoder
    c = cfg.num_classes

    feats_list = [_teacher_features(image, state, cfg, epoch, schedule) for image, _ in batch]
    all_feats = np.concatenate(feats_list, axis=0)
    if state.step == 0:  # seed the CAM prototypes from the first batch's features
        alpha = _bootstrap_alpha(all_feats, c, cfg.seed)
    else:                # track the drifting feature space
        alpha = _refit_alpha(all_feats, state.alpha, cfg.alpha_momentum)

    pseudos = []
    beta = _effective_beta(cfg, state.step)
    for (image, _gt), feats in zip(batch, feats_list):
        pseudos.append(_pseudo_from_features(image, feats, alpha, state, cfg, beta=beta))
    new_alpha = alpha

    weights = cfg.loss_weights if cfg.losses_on else LossWeights(
        seg=0.0, ce=cfg.loss_weights.ce, un=0.0, cls=0.0
    )
    comp = {"seg": 0.0, "ce": 0.0, "un": 0.0, "cls": 0.0}
    batch_conf = np.zeros((c, c), dtype=np.int64)
    with new_tape():
        total = None
        for (image, gt), pseudo in zip(batch, pseudos):
            if rng is not None and cfg.flip_augment and rng.random() < 0.5:
                image = Tensor(image.data[:, :, ::-1].copy())
                pseudo = PseudoLabelMask(pseudo.probs[:, :, ::-1].copy())
                gt = gt[:, ::-1]
            probs, logits = _student_outputs(image, state, cfg, epoch, schedule)
            l_seg = seg_loss(probs, pseudo)
            l_ce = ce_loss(probs, pseudo)
            l_un = uncertainty_loss(logits)
            l_cls = cls_loss(probs)
            loss_i = total_loss(l_seg, l_ce, l_un, l_cls, weights)
            total = loss_i if total is None else total + loss_i
            for name, val in zip(("seg", "ce", "un", "cls"), (l_seg, l_ce, l_un, l_cls)):
                comp[name] += val.item()
            batch_conf += confusion_matrix(probs.data.argmax(axis=0), gt, c)
        total = total * (1.0 / len(batch))
        grads = backward(total)

    new_student, new_moments = _sgd(
        state.student, grads, state.momentum, cfg.learning_rate, cfg.sgd_momentum
    )
    new_teacher = ema_update(state.teacher, new_student, cfg.ema_momentum)
    new_state = ModelState(
        student=new_student, teacher=new_teacher, momentum=new_moments,
        alpha=new_alpha, epoch=epoch, step=state.step + 1,
    )

    report = report_from_confusion(batch_conf, use_matching=True)
    metrics = {
        "step": state.step + 1,
        "epoch": epoch,
        **{k: v / len(batch) for k, v in comp.items()},
        "total": total.item(),
        "miou": report.miou,
        "acc": report.accuracy,
    }
    return new_state, metrics


def predict_labels(state: ModelState, image, cfg: TrainConfig, epoch: int | None = None) -> np.ndarray:
    epoch = epoch if epoch is not None else max(state.epoch, 1)
    probs, _ = _student_outputs(image, state, cfg, epoch, cfg.schedule())
    return probs.data.argmax(axis=0)


def evaluate_model(state: ModelState, data, cfg: TrainConfig, use_matching: bool = True) -> EvalReport:
    """Whole-dataset mIoU/Acc with a single dataset-level class matching."""
    conf = np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64)
    for image, gt in data:
        conf += confusion_matrix(predict_labels(state, image, cfg), gt, cfg.num_classes)
    return report_from_confusion(conf, use_matching=use_matching)


def _format_row(m: dict) -> str:
    cells = [str(m["step"]), str(m["epoch"])]
    cells += [f"{m[k]:.10g}" for k in ("seg", "ce", "un", "cls", "total", "miou", "acc")]
    return ",".join(cells)


@dataclass
class TrainResult:
    rows: list[dict]
    csv_text: str
    final_report: EvalReport | None
    state: ModelState

    def steps_to(self, threshold: float) -> int | None:
        """First step whose logged batch mIoU reached the threshold."""
        for row in self.rows:
            if row["miou"] >= threshold:
                return row["step"]
        return None


def run_training(cfg: TrainConfig, out_dir=None, stop_miou: float | None = None,
                 final_eval: bool = True, on_step=None) -> TrainResult:
    """Full deterministic run; optionally writes CSV, checkpoints, sample PGMs."""
    ds = cfg.dataset
    if ds.height != cfg.encoder.image_size or ds.width != cfg.encoder.image_size:
        raise ValueError(
            f"dataset {ds.height}x{ds.width} does not match encoder image size "
            f"{cfg.encoder.image_size}"
        )
    data = synth_dataset(cfg.seed, n_images=ds.n_images, height=ds.height,
                         width=ds.width, num_classes=cfg.num_classes)
    state = init_model_state(cfg)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)

    out_path = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_path / "config.json")

    rows: list[dict] = []
    lines = [CSV_HEADER]
    perm = None
    for step in range(1, cfg.steps + 1):
        epoch = (step - 1) // steps_per_epoch + 1
        within = (step - 1) % steps_per_epoch
        if within == 0:
            perm = np.random.default_rng([cfg.seed, 104729, epoch]).permutation(len(data))
        idx = perm[within * cfg.batch_size : (within + 1) * cfg.batch_size]
        batch = [data[i] for i in idx]
        rng = np.random.default_rng([cfg.seed, 3, step]) if cfg.flip_augment else None
        state, metrics = train_step(batch, state, cfg, epoch, rng=rng)
        rows.append(metrics)
        lines.append(_format_row(metrics))
        if on_step is not None:
            on_step(metrics)

        epoch_done = within == steps_per_epoch - 1 or step == cfg.steps
        if out_path is not None and epoch_done:
            checkpoint_save(state, out_path / f"epoch{epoch:04d}.ckpt")
            sample = predict_labels(state, data[0][0], cfg, epoch)
            write_pgm(out_path / f"epoch{epoch:04d}_sample.pgm", sample, cfg.num_classes - 1)
        if stop_miou is not None and metrics["miou"] >= stop_miou:
            break

    csv_text = "\n".join(lines) + "\n"
    report = evaluate_model(state, data, cfg) if final_eval else None
    if out_path is not None:
        (out_path / "metrics.csv").write_text(csv_text)
        checkpoint_save(state, out_path / "final.ckpt")
        if report is not None:
            (out_path / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return TrainResult(rows=rows, csv_text=csv_text, final_report=report, state=state)
