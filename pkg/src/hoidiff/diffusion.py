"""Noise schedule, forward noising, and guided reverse sampling.

The sampler works in normalized frame space. Each reverse step combines the
conditional and condition-masked clean-sample predictions (classifier-free
guidance), optionally shifts the mean down the gradient of a contact
consistency cost evaluated on the denormalized prediction, then re-noises to
the next level. Trajectory conditioning overwrites the object channels with
the forward-noised given track after every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import body as bodymod
from . import data
from . import diffkit as dk
from . import geom


class ScheduleError(ValueError):
    """Timestep outside the schedule or invalid schedule parameters."""


class SamplingError(RuntimeError):
    """Non-finite model output or inconsistent sampling inputs."""


@dataclass
class NoiseSchedule:
    """Per-step noise variances and their running products.

    beta[0] is zero, so level 0 is the clean data manifold; alpha_bar is
    strictly decreasing from 1.
    """

    beta: np.ndarray  # (T,)
    alpha_bar: np.ndarray  # (T,)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.beta[0] != 0.0:
            raise ScheduleError("beta[0] must be 0")
        if np.any(self.beta < 0.0) or np.any(self.beta >= 1.0):
            raise ScheduleError("beta values must lie in [0, 1)")
        if abs(self.alpha_bar[0] - 1.0) > 1e-12:
            raise ScheduleError("alpha_bar[0] must be 1")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing")

    @property
    def timesteps(self) -> int:
        return len(self.beta)

    @staticmethod
    def linear(timesteps: int = 100) -> "NoiseSchedule":
        """Linear betas scaled for the step count, with beta[0] forced to 0."""
        scale = 1000.0 / timesteps
        beta = np.linspace(1e-4 * scale, 0.02 * scale, timesteps)
        beta[0] = 0.0
        alpha_bar = np.cumprod(1.0 - beta)
        return NoiseSchedule(beta, alpha_bar)

    def check_step(self, t: int, low: int = 0) -> int:
        t = int(t)
        if not low <= t < self.timesteps:
            raise ScheduleError(
                f"step {t} outside [{low}, {self.timesteps})")
        return t


@dataclass
class GuidanceConfig:
    cfg_scale: float = 2.5
    contact_scale: float = 100.0
    contact_guidance_enabled: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.cfg_scale) and np.isfinite(self.contact_scale)):
            raise ValueError("guidance scales must be finite")
        if self.cfg_scale < 0 or self.contact_scale < 0:
            raise ValueError("guidance scales must be nonnegative")


def forward_sample(schedule: NoiseSchedule, z0, t: int, eps) -> np.ndarray:
    """Noise a clean sample directly to level t."""
    t = schedule.check_step(t)
    ab = schedule.alpha_bar[t]
    z0 = np.asarray(z0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)


def assemble_prediction(out) -> np.ndarray:
    """Flatten a denoiser output into the (F, 216) channel layout."""
    return np.concatenate([out.body_pred.values, out.contact_pred.values,
                           out.object_pred.values], axis=1)


def cfg_combine(pred_cond, pred_uncond, scale: float) -> np.ndarray:
    """uncond + scale * (cond - uncond), channelwise on the flat prediction.

    Written in lerp form so scale 0 and 1 reproduce the unconditional and
    conditional predictions exactly.
    """
    cond = pred_cond if isinstance(pred_cond, np.ndarray) \
        else assemble_prediction(pred_cond)
    uncond = pred_uncond if isinstance(pred_uncond, np.ndarray) \
        else assemble_prediction(pred_uncond)
    if cond.shape != uncond.shape:
        raise dk.ShapeMismatchError(
            f"prediction shapes differ: {cond.shape} vs {uncond.shape}")
    s = np.float32(scale)
    return (uncond * (np.float32(1.0) - s) + cond * s).astype(np.float32)


# ---------------------------------------------------------------------------
# contact-consistency guidance
# ---------------------------------------------------------------------------

def _guidance_graph(body_t, obj_t, contact_t, template, cloud32):
    markers = bodymod.marker_positions_graph(template, body_t)  # (F, 128, 3)
    f = body_t.shape[0]
    rot = geom.rot6d_to_matrix_t(dk.narrow(obj_t, 1, 3, 6))  # (F, 3, 3)
    tvec = dk.reshape(dk.narrow(obj_t, 1, 0, 3), (f, 1, 3))
    pts = dk.matmul(dk.Tensor(cloud32[None]), dk.transpose(rot, (0, 2, 1)))
    pts = pts + tvec  # (F, 256, 3)
    dists = dk.pairwise_min_distance(markers, pts)  # (F, 128)
    diff = dists - contact_t
    return dk.reduce_mean(diff * diff)


def guidance_cost(body_mat, obj_mat, contact_pred, template, object_cloud) -> float:
    """Mean squared gap between recomputed and predicted contact distances.

    All inputs are denormalized: body (F, 79), object (F, 9), predicted
    contact (F, 128) in meters; the cloud is the object's canonical sample.
    """
    cloud32 = np.asarray(object_cloud, dtype=np.float32)
    g = _guidance_graph(dk.Tensor(body_mat), dk.Tensor(obj_mat),
                        dk.Tensor(contact_pred), template, cloud32)
    return float(g.values)


def guidance_cost_grad(body_mat, obj_mat, contact_pred, template,
                       object_cloud):
    """Cost plus gradients w.r.t. the body, object, and contact channels."""
    cloud32 = np.asarray(object_cloud, dtype=np.float32)
    with dk.Tape() as tape:
        body_t = dk.Tensor(body_mat, requires_grad=True)
        obj_t = dk.Tensor(obj_mat, requires_grad=True)
        contact_t = dk.Tensor(contact_pred, requires_grad=True)
        g = _guidance_graph(body_t, obj_t, contact_t, template, cloud32)
    grads = tape.backward(g)
    return (float(g.values), grads.of(body_t), grads.of(obj_t),
            grads.of(contact_t))


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

@dataclass
class SampleResult:
    sequence: data.Sequence  # contact channels recomputed from body/object
    predicted_frames: np.ndarray  # raw denormalized network prediction (F, 216)
    guidance_cost: float | None = None


class Sampler:
    """Bundle of everything reverse diffusion needs at inference time."""

    def __init__(self, denoiser, schedule: NoiseSchedule,
                 normalizer: data.Normalizer,
                 template: bodymod.BodyTemplate):
        self.denoiser = denoiser
        self.schedule = schedule
        self.normalizer = normalizer
        self.template = template

    # -- single step ----------------------------------------------------------

    def reverse_step(self, z_t: np.ndarray, t: int, cond,
                     guidance: GuidanceConfig, rng: np.random.Generator,
                     object_cloud=None) -> np.ndarray:
        """One reverse-diffusion step from level t to level t-1.

        cond is the (text_vec, geom_vec) pair for the conditional branch;
        the masked branch always runs for classifier-free guidance.
        object_cloud enables the contact-guidance mean shift.
        """
        t = self.schedule.check_step(t, low=1)
        out_cond = self.denoiser.denoise(z_t, t, cond)
        out_uncond = self.denoiser.denoise(z_t, t, None)
        x0 = cfg_combine(out_cond, out_uncond, guidance.cfg_scale)
        if not np.all(np.isfinite(x0)):
            raise SamplingError(
                f"non-finite denoiser output at step {t}: "
                f"|z_t|max={np.abs(z_t).max():.3g}")
        ab_prev = self.schedule.alpha_bar[t - 1]
        mu = np.float32(np.sqrt(ab_prev)) * x0
        if (guidance.contact_guidance_enabled and guidance.contact_scale > 0
                and object_cloud is not None):
            raw = self.normalizer.denormalize(x0)
            body_mat, contact_mat, obj_mat = data.split_frames(raw)
            _, g_body, g_obj, g_contact = guidance_cost_grad(
                body_mat, obj_mat, contact_mat, self.template, object_cloud)
            grad = np.concatenate([g_body, g_contact, g_obj], axis=1)
            grad = grad * self.normalizer.std  # back through normalization
            mu = mu - np.float32(guidance.contact_scale) * grad
        noise = rng.standard_normal(z_t.shape).astype(np.float32)
        if t == 1:
            return mu.astype(np.float32)
        return (mu + np.float32(np.sqrt(1.0 - ab_prev)) * noise).astype(np.float32)

    # -- full trajectories ------------------------------------------------------

    def _encode_condition(self, condition: data.ConditionSpec):
        text_vec = self.denoiser.encode_text(condition.text_tokens)
        geom_vec = self.denoiser.encode_geometry(
            np.asarray(condition.object_cloud, dtype=np.float32))
        return text_vec, geom_vec

    def _finish(self, z0: np.ndarray, condition: data.ConditionSpec,
                seq_id: str, fps: int, object_track=None) -> SampleResult:
        raw = self.normalizer.denormalize(z0)
        if object_track is not None:
            raw[:, data.OBJECT_SLICE] = object_track  # exact replacement
        body_mat, _, obj_mat = data.split_frames(raw)
        contact = data.contact_channels_for(
            self.template, body_mat.astype(np.float64),
            obj_mat.astype(np.float64), condition.object_cloud)
        frames = data.pack_frames(body_mat, contact, obj_mat)
        seq = data.Sequence(frames, fps, condition, seq_id)
        cost = guidance_cost(body_mat, obj_mat,
                             raw[:, data.CONTACT_SLICE],
                             self.template, condition.object_cloud)
        return SampleResult(seq, raw, cost)

    def sample(self, condition: data.ConditionSpec, frames: int,
               guidance: GuidanceConfig, seed: int,
               seq_id: str = "sample", fps: int = 20) -> SampleResult:
        """Generate a sequence from pure noise under the given condition."""
        rng = np.random.default_rng(seed)
        cond = self._encode_condition(condition)
        cloud = condition.object_cloud
        z = rng.standard_normal((frames, data.FRAME_DIM)).astype(np.float32)
        for t in range(self.schedule.timesteps - 1, 0, -1):
            z = self.reverse_step(z, t, cond, guidance, rng, cloud)
        return self._finish(z, condition, seq_id, fps)

    def sample_with_trajectory(self, condition: data.ConditionSpec,
                               object_track: np.ndarray,
                               guidance: GuidanceConfig, seed: int,
                               seq_id: str = "sample-traj",
                               fps: int = 20) -> SampleResult:
        """Sample with the object channels pinned to a given track.

        After every reverse step the object channels are overwritten with the
        forward-noised track at the new level, so the final output's object
        channels equal the track exactly.
        """
        track = np.asarray(object_track, dtype=np.float32)
        if track.ndim != 2 or track.shape[1] != data.OBJECT_DIM:
            raise SamplingError(f"object track must be (F, 9), got {track.shape}")
        frames = track.shape[0]
        if not np.all(np.isfinite(track)):
            raise SamplingError("non-finite object track")
        rng = np.random.default_rng(seed)
        cond = self._encode_condition(condition)
        cloud = condition.object_cloud
        mean_o = self.normalizer.mean[data.OBJECT_SLICE]
        std_o = self.normalizer.std[data.OBJECT_SLICE]
        track_norm = ((track - mean_o) / std_o).astype(np.float32)

        def inject(state, level):
            ab = self.schedule.alpha_bar[level]
            eps = rng.standard_normal(track_norm.shape).astype(np.float32)
            noised = (np.float32(np.sqrt(ab)) * track_norm
                      + np.float32(np.sqrt(1.0 - ab)) * eps)
            state[:, data.OBJECT_SLICE] = noised
            return state

        z = rng.standard_normal((frames, data.FRAME_DIM)).astype(np.float32)
        z = inject(z, self.schedule.timesteps - 1)
        for t in range(self.schedule.timesteps - 1, 0, -1):
            z = self.reverse_step(z, t, cond, guidance, rng, cloud)
            z = inject(z, t - 1)
        return self._finish(z, condition, seq_id, fps, object_track=track)
