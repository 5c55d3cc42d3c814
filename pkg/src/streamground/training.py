"""Losses, optimizer, training loop, and checkpoint persistence.

The loss couples a KL divergence between target frame distributions and the
sequence-softmaxed start/end scores with smooth-L1 and (G)IoU box terms,
weighted ``lambda_k``/``lambda_l``/``lambda_u`` (defaults 10/5/3). Boxes are
supervised only on frames inside the ground-truth segment. Training streams
one episode per step end to end (gradients flow through the memory banks and
the box -> pooled-motion cascade), clips the global gradient norm, and
applies Adam.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig, TrainConfig, dump_config, parse_config_text
from .engine import stream_episode_train
from .model import GroundingModel, build_model
from .synthworld import SyntheticEpisode
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_k: float = 10.0
    lambda_l: float = 5.0
    lambda_u: float = 3.0

    @staticmethod
    def from_train_config(cfg: TrainConfig) -> "LossWeights":
        return LossWeights(cfg.lambda_k, cfg.lambda_l, cfg.lambda_u)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def kl_target(n_frames: int, frame_idx: int, sigma: float) -> np.ndarray:
    """Target distribution over frames: one-hot, optionally Gaussian-smoothed."""
    if not 0 <= frame_idx < n_frames:
        raise ValueError(f"target frame {frame_idx} outside 0..{n_frames - 1}")
    if sigma <= 0:
        t = np.zeros(n_frames)
        t[frame_idx] = 1.0
        return t
    idx = np.arange(n_frames)
    t = np.exp(-0.5 * ((idx - frame_idx) / sigma) ** 2)
    return t / t.sum()


def kl_loss(target: np.ndarray, scores: Tensor, tau: float = 1.0) -> Tensor:
    """KL(target || softmax over frames of scores / tau).

    The temperature sharpens the frame distribution; per-frame scores are
    sigmoid-bounded in (0, 1), so without it the softmax contrast across
    frames is capped at e and the loss has a large floor.
    """
    target = np.asarray(target, dtype=float).reshape(-1)
    if scores.data.size != target.size:
        raise T.ShapeError(
            f"target has {target.size} frames, scores {scores.data.size}")
    if abs(target.sum() - 1.0) > 1e-9 or (target < 0).any():
        raise ValueError("target must be a distribution over frames")
    logp = T.log_softmax(T.reshape(scores, (1, target.size)) * (1.0 / tau),
                         axis=-1)
    nz = target > 0
    entropy = float((target[nz] * np.log(target[nz])).sum())
    cross = T.tsum(logp * Tensor(target.reshape(1, -1)))
    return entropy - cross


def _selection_matrix(mask: np.ndarray) -> np.ndarray:
    idx = np.nonzero(mask)[0]
    sel = np.zeros((idx.size, mask.size))
    sel[np.arange(idx.size), idx] = 1.0
    return sel


def _corners(boxes: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    cx = T.narrow(boxes, 1, 0, 1)
    cy = T.narrow(boxes, 1, 1, 1)
    w = T.narrow(boxes, 1, 2, 1)
    h = T.narrow(boxes, 1, 3, 1)
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise smooth-L1 against a constant target, averaged."""
    d = pred - Tensor(target)
    a = T.absolute(d)
    quad_mask = (a.data < 1.0).astype(float)
    quad = d * d * 0.5
    lin = a - 0.5
    return T.tmean(quad * Tensor(quad_mask) + lin * Tensor(1.0 - quad_mask))


def giou_loss(pred: Tensor, target: np.ndarray, use_giou: bool = True) -> Tensor:
    """mean(1 - GIoU) (or 1 - IoU) between (T,4) cxcywh boxes."""
    gt = np.asarray(target, dtype=float).reshape(-1, 4)
    gx1 = Tensor((gt[:, 0] - gt[:, 2] / 2).reshape(-1, 1))
    gy1 = Tensor((gt[:, 1] - gt[:, 3] / 2).reshape(-1, 1))
    gx2 = Tensor((gt[:, 0] + gt[:, 2] / 2).reshape(-1, 1))
    gy2 = Tensor((gt[:, 1] + gt[:, 3] / 2).reshape(-1, 1))
    garea = (gt[:, 2] * gt[:, 3]).reshape(-1, 1)

    px1, py1, px2, py2 = _corners(pred)
    parea = (px2 - px1) * (py2 - py1)
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = parea + Tensor(garea) - inter
    iou = inter / union
    if not use_giou:
        return T.tmean(1.0 - iou)
    ew = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    eh = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    earea = ew * eh
    giou = iou - (earea - union) / earea
    return T.tmean(1.0 - giou)


def box_losses(gt_boxes: np.ndarray, pred_boxes: Tensor,
               inside_mask: np.ndarray, use_giou: bool = True,
               counters=None) -> tuple[Tensor, Tensor]:
    """(smooth-L1, IoU-term) over supervised frames only."""
    inside_mask = np.asarray(inside_mask, dtype=bool).reshape(-1)
    if not inside_mask.any():
        if counters is not None:
            counters["empty_supervision_mask"] += 1
        zero = Tensor(np.zeros(()))
        return zero, zero
    sel = Tensor(_selection_matrix(inside_mask))
    pred_sup = T.matmul(sel, pred_boxes)
    gt_sup = np.asarray(gt_boxes, dtype=float)[inside_mask]
    return (smooth_l1(pred_sup, gt_sup),
            giou_loss(pred_sup, gt_sup, use_giou=use_giou))


def total_loss(boxes: Tensor, start_scores: Tensor, end_scores: Tensor,
               episode: SyntheticEpisode, weights: LossWeights,
               kl_sigma: float = 1.0, use_giou: bool = True,
               seq_tau: float = 1.0, counters=None) -> tuple[Tensor, dict]:
    """Weighted sum of the temporal KL terms and the spatial box terms."""
    t = episode.n_frames
    if boxes.shape[0] != t:
        raise T.ShapeError(f"prediction covers {boxes.shape[0]} of {t} frames")
    s, e = episode.gt_segment
    kl_s = kl_loss(kl_target(t, s, kl_sigma), start_scores, tau=seq_tau)
    kl_e = kl_loss(kl_target(t, e, kl_sigma), end_scores, tau=seq_tau)
    mask = np.zeros(t, dtype=bool)
    mask[s:e + 1] = True
    l1, iou = box_losses(episode.gt_boxes, boxes, mask, use_giou=use_giou,
                         counters=counters)
    loss = (kl_s + kl_e) * weights.lambda_k + l1 * weights.lambda_l \
        + iou * weights.lambda_u
    parts = {"kl_s": kl_s.item(), "kl_e": kl_e.item(),
             "l1": l1.item(), "iou": iou.item()}
    return loss, parts


def episode_loss(model: GroundingModel, episode: SyntheticEpisode,
                 weights: LossWeights, kl_sigma: float = 1.0,
                 use_giou: bool = True) -> tuple[Tensor, dict]:
    """Stream an episode with gradients and compute its training loss."""
    box_list, score_list = stream_episode_train(model, episode)
    boxes = T.concat(box_list, axis=0)
    scores = T.concat(score_list, axis=0)            # (T, 2)
    hs = T.reshape(T.narrow(scores, 1, 0, 1), (episode.n_frames,))
    he = T.reshape(T.narrow(scores, 1, 1, 1), (episode.n_frames,))
    return total_loss(boxes, hs, he, episode, weights, kl_sigma=kl_sigma,
                      use_giou=use_giou, seq_tau=model.cfg.seq_tau,
                      counters=model.counters)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

CSV_HEADER = "step,loss,kl_s,kl_e,l1,iou"


def train(model: GroundingModel, episodes: list[SyntheticEpisode],
          cfg: TrainConfig, seed: int = 0, log_path=None,
          checkpoint_path=None, run_cfg: RunConfig | None = None,
          optimizer: Adam | None = None, order_rng=None,
          start_step: int = 0) -> list[dict]:
    """Run cfg.steps optimizer steps, one episode per step.

    Deterministic given (model init, episodes, cfg, seed). Returns the
    per-step history; optionally appends CSV rows and writes checkpoints.
    """
    if not episodes:
        raise ValueError("need at least one training episode")
    params = model.named_params()
    opt = optimizer or Adam(params, lr=cfg.lr, beta1=cfg.beta1,
                            beta2=cfg.beta2, eps=cfg.eps)
    rng = order_rng or np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([0x7EA1, seed])))
    weights = LossWeights.from_train_config(cfg)
    history = []
    log_file = open(log_path, "a") if log_path else None
    try:
        if log_file is not None and start_step == 0:
            log_file.write(CSV_HEADER + "\n")
        for step_i in range(start_step, cfg.steps):
            ep = episodes[int(rng.integers(len(episodes)))]
            model.zero_grad()
            with T.Tape() as tape:
                try:
                    loss, parts = episode_loss(
                        model, ep, weights, kl_sigma=cfg.kl_sigma,
                        use_giou=model.cfg.giou)
                except T.NonFiniteError as err:
                    raise TrainingDiverged(
                        f"non-finite forward at step {step_i}: {err}",
                        {"step": step_i}) from err
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"non-finite loss at step {step_i}",
                        {"step": step_i, "parts": parts})
                tape.backward(loss)
            clip_global_norm(params, cfg.clip_norm)
            opt.step()
            row = {"step": step_i, "loss": loss_val, **parts}
            history.append(row)
            if log_file is not None:
                log_file.write(
                    f"{step_i},{loss_val:.10g},{parts['kl_s']:.10g},"
                    f"{parts['kl_e']:.10g},{parts['l1']:.10g},"
                    f"{parts['iou']:.10g}\n")
            if (checkpoint_path and cfg.checkpoint_every
                    and (step_i + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(checkpoint_path, model, opt, rng,
                                step_i + 1, run_cfg)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, opt, rng, cfg.steps, run_cfg)
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ARTC"
CHECKPOINT_VERSION = 1


def _write_tensor_table(buf, arrays: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_tensor_table(buf) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).copy()
    return out


def save_checkpoint(path, model: GroundingModel, optimizer: Adam | None,
                    rng, step: int, run_cfg: RunConfig | None) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    cfg_text = dump_config(run_cfg).encode() if run_cfg is not None else b""
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<Q", step))
    rng_json = json.dumps(rng.bit_generator.state, sort_keys=True).encode() \
        if rng is not None else b""
    buf.write(struct.pack("<I", len(rng_json)))
    buf.write(rng_json)
    _write_tensor_table(buf, {k: p.data for k, p in model.named_params().items()})
    if optimizer is not None:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", optimizer.t))
        _write_tensor_table(buf, optimizer.m)
        _write_tensor_table(buf, optimizer.v)
    else:
        buf.write(struct.pack("<B", 0))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


@dataclass
class Checkpoint:
    config_text: str
    step: int
    rng_state: dict | None
    params: dict[str, np.ndarray]
    opt_t: int | None
    opt_m: dict[str, np.ndarray] | None
    opt_v: dict[str, np.ndarray] | None

    def run_config(self) -> RunConfig:
        if not self.config_text:
            raise ValueError("checkpoint carries no run config")
        return parse_config_text(self.config_text)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", buf.read(4))
    cfg_text = buf.read(clen).decode()
    (step,) = struct.unpack("<Q", buf.read(8))
    (rlen,) = struct.unpack("<I", buf.read(4))
    rng_state = json.loads(buf.read(rlen).decode()) if rlen else None
    params = _read_tensor_table(buf)
    (has_opt,) = struct.unpack("<B", buf.read(1))
    opt_t = opt_m = opt_v = None
    if has_opt:
        (opt_t,) = struct.unpack("<Q", buf.read(8))
        opt_m = _read_tensor_table(buf)
        opt_v = _read_tensor_table(buf)
    return Checkpoint(cfg_text, step, rng_state, params, opt_t, opt_m, opt_v)


def restore_model(checkpoint: Checkpoint) -> GroundingModel:
    model = build_model(checkpoint.run_config())
    model.load_state(checkpoint.params)
    return model


def restore_optimizer(checkpoint: Checkpoint, model: GroundingModel,
                      cfg: TrainConfig) -> Adam:
    opt = Adam(model.named_params(), lr=cfg.lr, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps)
    if checkpoint.opt_t is not None:
        opt.t = checkpoint.opt_t
        for k in opt.m:
            opt.m[k][...] = checkpoint.opt_m[k]
            opt.v[k][...] = checkpoint.opt_v[k]
    return opt
