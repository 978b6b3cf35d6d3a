"""Joint denoiser training: noising, condition dropout, loss, checkpointing.

Every step noises a batch of normalized sequences to uniformly random levels,
masks the condition on a random tenth of the examples, and takes an Adam step
on the combined body/object/contact objective. Validation selects the
checkpoint minimizing generation FID against the held-out split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data
from . import diffkit as dk
from . import diffusion
from .denoiser import Denoiser, DenoiserOutput


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good weights are retained."""


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 1e-4
    lambda_h: float = 1.0
    lambda_o: float = 0.9
    lambda_c: float = 0.9
    cond_dropout: float = 0.1
    seed: int = 0
    timesteps: int = 100
    validation_every: int = 1000
    val_samples: int = 8

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")


def joint_loss(pred: DenoiserOutput, gt_frames, lambda_h: float = 1.0,
               lambda_o: float = 0.9, lambda_c: float = 0.9):
    """Weighted sum of mean-L1 body/object and mean-squared contact errors.

    gt_frames is the normalized (F, 216) target. The object term is computed
    on the aggregated object prediction. Returns (total, components) where
    components holds float values for logging.
    """
    gt = gt_frames if isinstance(gt_frames, dk.Tensor) else dk.Tensor(gt_frames)
    if gt.shape[0] != pred.body_pred.shape[0] or gt.shape[1] != data.FRAME_DIM:
        raise dk.ShapeMismatchError(
            f"ground truth {gt.shape} does not match prediction "
            f"({pred.body_pred.shape[0]}, {data.FRAME_DIM})")
    gt_body = dk.narrow(gt, 1, 0, data.BODY_DIM)
    gt_contact = dk.narrow(gt, 1, data.BODY_DIM, data.CONTACT_DIM)
    gt_obj = dk.narrow(gt, 1, data.BODY_DIM + data.CONTACT_DIM, data.OBJECT_DIM)
    l_h = dk.reduce_mean(dk.abs_(pred.body_pred - gt_body))
    l_o = dk.reduce_mean(dk.abs_(pred.object_pred - gt_obj))
    diff_c = pred.contact_pred - gt_contact
    l_c = dk.reduce_mean(diff_c * diff_c)
    total = lambda_h * l_h + lambda_o * l_o + lambda_c * l_c
    parts = {"loss_h": float(l_h.values), "loss_o": float(l_o.values),
             "loss_c": float(l_c.values)}
    return total, parts


def mask_condition(rng: np.random.Generator, prob: float) -> bool:
    """Bernoulli draw deciding whether this example trains condition-free."""
    return bool(rng.random() < prob)


class Adam:
    """Adam with a fixed (sorted-name) update order for determinism."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, dk.Tensor],
             grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name in sorted(params):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (self.lr * (m / bias1)
                      / (np.sqrt(v / bias2) + self.eps)).astype(np.float32)
            params[name] = dk.Tensor(params[name].values - update,
                                     requires_grad=True)


@dataclass
class TrainExample:
    frames_norm: np.ndarray  # (F, 216) normalized
    tokens: list[int]
    cloud: np.ndarray  # (256, 3)


def make_examples(sequences, normalizer: data.Normalizer) -> list[TrainExample]:
    return [TrainExample(normalizer.normalize(s.frames),
                         list(s.condition.text_tokens),
                         np.asarray(s.condition.object_cloud, dtype=np.float32))
            for s in sequences]


def train_step(model: Denoiser, batch: list[TrainExample],
               schedule: diffusion.NoiseSchedule, rng: np.random.Generator,
               opt: Adam, config: TrainConfig) -> dict:
    """One optimizer update over a batch; returns the loss record.

    Each example runs on its own tape; gradients merge in example order and
    average over the batch, so results are deterministic given the seed.
    """
    total = 0.0
    parts_sum = {"loss_h": 0.0, "loss_o": 0.0, "loss_c": 0.0}
    grad_sum: dict[str, np.ndarray] = {}
    for ex in batch:
        t = int(rng.integers(1, schedule.timesteps))
        eps = rng.standard_normal(ex.frames_norm.shape).astype(np.float32)
        z_t = diffusion.forward_sample(schedule, ex.frames_norm, t, eps)
        masked = mask_condition(rng, config.cond_dropout)
        with dk.Tape() as tape:
            if masked:
                cond = None
            else:
                cond = (model.encode_text(ex.tokens),
                        model.encode_geometry(ex.cloud))
            out = model.denoise(z_t, t, cond)
            loss, parts = joint_loss(out, ex.frames_norm, config.lambda_h,
                                     config.lambda_o, config.lambda_c)
        if not np.isfinite(loss.values):
            raise TrainingDiverged(f"non-finite loss at noise level {t}")
        grads = tape.backward(loss)
        for name, p in model.params.items():
            g = grads.of(p)
            if name in grad_sum:
                grad_sum[name] += g
            else:
                grad_sum[name] = g.copy()
        total += float(loss.values)
        for k in parts_sum:
            parts_sum[k] += parts[k]
    n = len(batch)
    for name in grad_sum:
        grad_sum[name] /= n
    opt.step(model.params, grad_sum)
    record = {"loss": total / n}
    record.update({k: v / n for k, v in parts_sum.items()})
    return record


@dataclass
class FitResult:
    best_arrays: dict
    best_fid: float
    history: list = field(default_factory=list)
    fid_history: list = field(default_factory=list)
    diverged: bool = False


def fit(model: Denoiser, dataset: data.Dataset, config: TrainConfig,
        out_dir=None, extractors=None) -> FitResult:
    """Train and keep the checkpoint that minimized validation FID.

    Writes `loss.csv` and `ckpt_best.cgw` / `ckpt_last.cgw` under out_dir
    when given. Validation samples val-conditioned sequences with the
    current weights and compares them to the real val split in extractor
    feature space; with no val split the last checkpoint wins.
    """
    from . import metrics

    train_seqs = dataset.split("train")
    val_seqs = dataset.split("val")
    if not train_seqs:
        raise ValueError("dataset has no train split")
    normalizer = data.fit_normalizer(train_seqs)
    if model.contact_stats is None:
        model.contact_stats = (normalizer.mean[data.CONTACT_SLICE].copy(),
                               normalizer.std[data.CONTACT_SLICE].copy())
    examples = make_examples(train_seqs, normalizer)
    schedule = diffusion.NoiseSchedule.linear(config.timesteps)
    rng = np.random.default_rng(config.seed)
    opt = Adam(lr=config.learning_rate)
    if extractors is None and val_seqs:
        extractors = metrics.train_extractors(dataset, seed=config.seed)

    def checkpoint_arrays():
        arrays = {name: p.values.copy() for name, p in model.params.items()}
        arrays["stats.contact_mean"] = model.contact_stats[0]
        arrays["stats.contact_std"] = model.contact_stats[1]
        arrays["norm.mean"] = normalizer.mean
        arrays["norm.std"] = normalizer.std
        return arrays

    def validation_fid(step):
        sampler = diffusion.Sampler(model, schedule, normalizer,
                                    dataset.template)
        guidance = diffusion.GuidanceConfig(contact_guidance_enabled=False)
        gen = []
        for k in range(config.val_samples):
            ref = val_seqs[k % len(val_seqs)]
            res = sampler.sample(ref.condition, len(ref), guidance,
                                 seed=config.seed * 100003 + step + k,
                                 seq_id=f"val_{step}_{k}")
            gen.append(res.sequence)
        real_feats = metrics.motion_features(extractors, val_seqs)
        gen_feats = metrics.motion_features(extractors, gen)
        return metrics.fid_from_features(real_feats, gen_feats)

    history, fid_history = [], []
    best_fid = np.inf
    best_arrays = checkpoint_arrays()
    diverged = False
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(examples), size=min(config.batch_size,
                                                 len(examples)), replace=False)
        batch = [examples[i] for i in idx]
        try:
            record = train_step(model, batch, schedule, rng, opt, config)
        except TrainingDiverged:
            diverged = True
            break
        record["step"] = step
        history.append(record)
        if val_seqs and extractors and (step % config.validation_every == 0
                                        or step == config.steps):
            fid = validation_fid(step)
            fid_history.append((step, fid))
            if fid < best_fid:
                best_fid = fid
                best_arrays = checkpoint_arrays()
    if not fid_history:
        best_arrays = checkpoint_arrays()
        best_fid = float("nan")
    result = FitResult(best_arrays, best_fid, history, fid_history, diverged)
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        with open(f"{out_dir}/loss.csv", "w", encoding="utf-8") as fh:
            fh.write("step,loss,loss_h,loss_o,loss_c\n")
            for rec in history:
                fh.write(f"{rec['step']},{rec['loss']:.6f},{rec['loss_h']:.6f},"
                         f"{rec['loss_o']:.6f},{rec['loss_c']:.6f}\n")
        dk.save_weights(f"{out_dir}/ckpt_best.cgw", result.best_arrays)
        dk.save_weights(f"{out_dir}/ckpt_last.cgw", checkpoint_arrays())
    return result
