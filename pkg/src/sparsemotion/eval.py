"""Pose metrics, distribution metrics and dataset evaluation reports.

Positions are metres internally; reported values are centimetres (and cm/s).
MPJPE and Legs MPJPE are pelvis-relative: joint 0 is subtracted per frame
before comparing. Global MPJPE places the predicted skeleton so that its head
joint sits on the tracked head position.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InsufficientFrames, InsufficientSamples, SamePriorError, ShapeError
from .kinematics import FullPose, SkeletonModel, forward_kinematics, head_aligned_root
from .prior import FullMotionPrior, encode_full, module_hash

log = logging.getLogger(__name__)

CM = 100.0
TABLE_COLUMNS = ["method", "MPJPE", "Legs MPJPE", "Global MPJPE", "MPJVE", "Motion Distance", "FID"]


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim < 2 or pred.shape[-1] != 3:
        raise ShapeError(f"positions must share a (..., J, 3) shape, got {pred.shape} and {gt.shape}")
    return pred, gt


def pelvis_relative(pos):
    pos = np.asarray(pos, dtype=np.float64)
    return pos - pos[..., :1, :]


def mpjpe(pred, gt, joint_set=None):
    """Mean per-joint position error in cm over frames x joints.

    Inputs are positions ``(..., J, 3)`` in metres, already root aligned.
    ``joint_set`` restricts the mean to those joint indices.
    """
    pred, gt = _check_pair(pred, gt)
    if joint_set is not None:
        idx = list(joint_set)
        pred, gt = pred[..., idx, :], gt[..., idx, :]
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * CM)


def global_positions(skeleton: SkeletonModel, local_rot, head_positions):
    """Head-aligned FK positions ``(n, J, 3)`` for predicted local rotations."""
    root, rel = head_aligned_root(skeleton, local_rot, head_positions)
    return rel + root[..., None, :]


def global_mpjpe(skeleton: SkeletonModel, pred_rot, gt_rot, gt_trans, head_positions=None):
    """Global MPJPE (cm) with the predicted skeleton anchored at the head.

    ``head_positions`` defaults to the ground-truth head, which is what the
    tracking device reports.
    """
    gt_pos, _ = forward_kinematics(skeleton, FullPose(gt_rot, gt_trans))
    if head_positions is None:
        head_positions = gt_pos[..., skeleton.head, :]
    pred_pos = global_positions(skeleton, pred_rot, head_positions)
    return mpjpe(pred_pos, gt_pos)


def mpjve(pred, gt, fps=30.0):
    """Mean per-joint velocity error in cm/s; velocities are frame deltas times fps."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim < 3 or pred.shape[-3] < 2:
        raise InsufficientFrames(f"velocity error needs at least 2 frames, got shape {pred.shape}")
    dv = np.diff(pred, axis=-3) - np.diff(gt, axis=-3)
    return float(np.linalg.norm(dv * fps, axis=-1).mean() * CM)


def motion_distance(eval_prior: FullMotionPrior, pred_rot, pred_trans, gt_rot, gt_trans,
                    training_prior_hash=None):
    """Mean ``1 - cos`` between eval-prior latents of predicted and true windows.

    Windows are ``(N, 60, J, 6)`` rotations with ``(N, 60, 3)`` translations.
    The eval prior must differ from the prior the model was trained with.
    """
    if training_prior_hash is not None and module_hash(eval_prior) == training_prior_hash:
        raise SamePriorError("the evaluation prior is the training prior; use an independently trained one")
    a = encode_full(eval_prior, pred_rot, pred_trans)
    b = encode_full(eval_prior, gt_rot, gt_trans)
    return float(np.mean(_cos_dist(a, b)))


def _cos_dist(a, b):
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    cos = (a * b).sum(-1) / np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), 1e-12)
    return 1.0 - cos


def _sqrtm_psd(s, what="covariance"):
    """Symmetric square root; negative eigenvalues (rounding) are clamped to 0 and logged."""
    w, v = np.linalg.eigh((s + s.T) / 2)
    neg = w[w < 0]
    if neg.size:
        log.debug("fid: clamped %d negative eigenvalue(s) of %s, total %.3g", neg.size, what, neg.sum())
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(latents_a, latents_b):
    """Frechet distance between Gaussian fits of two latent sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``. The trace of the
    square root equals the sum of square roots of the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which are the singular values
    of ``S_a^(1/2) S_b^(1/2)``; the latter form keeps rounding noise in
    rank-deficient covariances from being square-rooted into the result.
    Negative covariance eigenvalues are clamped to zero (logged). With fewer
    samples than dimensions the covariances are rank deficient and the value
    is a noisier estimate of the population distance.
    """
    a = np.asarray(latents_a, dtype=np.float64)
    b = np.asarray(latents_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"latent sets must be (n, d) with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples(f"FID needs at least 2 samples per set, got {len(a)} and {len(b)}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    s_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    s_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])
    tr_sqrt = np.linalg.svd(_sqrtm_psd(s_a, "set a") @ _sqrtm_psd(s_b, "set b"), compute_uv=False).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2 * tr_sqrt)


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    mpjpe_cm: float
    legs_mpjpe_cm: float
    global_mpjpe_cm: float
    mpjve_cm_per_s: float
    motion_distance: float
    fid: float
    per_action: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    method: str = "model"
    comparison: dict | None = None

    METRICS = ("mpjpe_cm", "legs_mpjpe_cm", "global_mpjpe_cm", "mpjve_cm_per_s", "motion_distance", "fid")

    def metrics(self):
        return {k: getattr(self, k) for k in self.METRICS}

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def table_row(self):
        m = self.metrics()
        return [self.method] + [f"{m[k]:.6g}" for k in self.METRICS]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        w.writerow(self.table_row())
        if self.comparison:
            w.writerow([self.comparison["method"]] +
                       [f"{self.comparison['metrics'][k]:.6g}" for k in self.METRICS])
        return buf.getvalue()

    def write(self, out_dir, stem="eval_report"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(self.to_json() + "\n")
        (out / f"{stem}.csv").write_text(self.to_csv())
        return out / f"{stem}.json"


class GroundTruthChain:
    """Identity oracle: returns each clip's ground-truth rotations."""

    name = "ground-truth"

    def predict(self, skeleton, clip):
        return clip.local_rot


class ModelChain:
    """Sparse encoder + sequence model, run through offline inference."""

    def __init__(self, model, encoder, name="model", exact=False):
        self.model, self.encoder, self.name, self.exact = model, encoder, name, exact

    def predict(self, skeleton, clip):
        from .sequence import infer_motion
        from .signals import signals_from_clip

        return infer_motion(self.model, self.encoder, skeleton, signals_from_clip(skeleton, clip),
                            exact=self.exact).local_rot


def _clip_predictions(chain, skeleton, clips):
    out = []
    for c in clips:
        rot = np.asarray(chain.predict(skeleton, c), dtype=np.float64)
        gt_pos, _ = forward_kinematics(skeleton, FullPose(c.local_rot, c.root_translation))
        pred_glob = global_positions(skeleton, rot, gt_pos[:, skeleton.head])
        pred_rel, _ = forward_kinematics(skeleton, FullPose(rot))
        out.append({"rot": rot, "pred_rel": pred_rel, "pred_glob": pred_glob,
                    "gt_pos": gt_pos, "gt_rel": pelvis_relative(gt_pos), "clip": c})
    return out


def _aggregate(preds, skeleton, eval_prior, training_prior_hash, window_stride, fps):
    legs = list(skeleton.leg_joints)
    err = np.concatenate([np.linalg.norm(p["pred_rel"] - p["gt_rel"], axis=-1) for p in preds])
    gerr = np.concatenate([np.linalg.norm(p["pred_glob"] - p["gt_pos"], axis=-1) for p in preds])
    verr = [np.linalg.norm(np.diff(p["pred_rel"] - p["gt_rel"], axis=0) * fps, axis=-1)
            for p in preds if len(p["rot"]) > 1]
    if not verr:
        raise InsufficientFrames("MPJVE needs at least one clip with 2 frames")
    verr = np.concatenate(verr)
    Tw = eval_prior.cfg.window
    pr, pt, gr, gt = [], [], [], []
    for p in preds:
        c = p["clip"]
        root = p["pred_glob"][:, 0]  # joint 0 sits at the root translation
        for s in range(0, c.n_frames - Tw + 1, window_stride):
            pr.append(p["rot"][s:s + Tw])
            pt.append(root[s:s + Tw])
            gr.append(c.local_rot[s:s + Tw])
            gt.append(c.root_translation[s:s + Tw])
    if not pr:
        raise InsufficientFrames(f"motion distance and FID need clips of at least {Tw} frames")
    if training_prior_hash is not None and module_hash(eval_prior) == training_prior_hash:
        raise SamePriorError("the evaluation prior is the training prior; use an independently trained one")
    la = encode_full(eval_prior, np.stack(pr), np.stack(pt))
    lb = encode_full(eval_prior, np.stack(gr), np.stack(gt))
    return {
        "mpjpe_cm": float(err.mean() * CM),
        "legs_mpjpe_cm": float(err[:, legs].mean() * CM),
        "global_mpjpe_cm": float(gerr.mean() * CM),
        "mpjve_cm_per_s": float(verr.mean() * CM),
        "motion_distance": float(_cos_dist(la, lb).mean()),
        "fid": fid(la, lb) if len(la) >= 2 else float("nan"),
    }


def _per_action(preds, skeleton):
    legs = list(skeleton.leg_joints)
    groups: dict[str, list] = {}
    for p in preds:
        groups.setdefault(p["clip"].action_label, []).append(
            np.linalg.norm(p["pred_rel"] - p["gt_rel"], axis=-1))
    out = {}
    for label in sorted(groups):
        e = np.concatenate(groups[label])
        out[label] = {"mpjpe": float(e.mean() * CM), "legs_mpjpe": float(e[:, legs].mean() * CM),
                      "n_frames": int(len(e))}
    return out


def evaluate_dataset(chain, clips, skeleton: SkeletonModel, eval_prior: FullMotionPrior,
                     training_prior_hash=None, baseline=None, window_stride=1, fps=None) -> EvalReport:
    """All six metrics over ``clips`` plus per-action MPJPE / Legs MPJPE.

    With ``baseline`` (a second chain) the per-action table also carries the
    baseline's numbers and is ordered by improvement (baseline minus model,
    Legs MPJPE first).
    """
    if not clips:
        raise InsufficientSamples("no clips to evaluate")
    fps = fps or clips[0].fps
    preds = _clip_predictions(chain, skeleton, clips)
    metrics = _aggregate(preds, skeleton, eval_prior, training_prior_hash, window_stride, fps)
    per_action = _per_action(preds, skeleton)
    comparison = None
    if baseline is not None:
        bpreds = _clip_predictions(baseline, skeleton, clips)
        bmetrics = _aggregate(bpreds, skeleton, eval_prior, training_prior_hash, window_stride, fps)
        bper = _per_action(bpreds, skeleton)
        for label, row in per_action.items():
            row["baseline_mpjpe"] = bper[label]["mpjpe"]
            row["baseline_legs_mpjpe"] = bper[label]["legs_mpjpe"]
            row["legs_improvement"] = bper[label]["legs_mpjpe"] - row["legs_mpjpe"]
            row["mpjpe_improvement"] = bper[label]["mpjpe"] - row["mpjpe"]
        per_action = dict(sorted(per_action.items(),
                                 key=lambda kv: (-kv[1]["legs_improvement"], -kv[1]["mpjpe_improvement"])))
        comparison = {"method": getattr(baseline, "name", "baseline"), "metrics": bmetrics}
    config = {
        "leg_joints": list(skeleton.leg_joints),
        "fps": fps,
        "eval_prior_hash": module_hash(eval_prior),
        "training_prior_hash": training_prior_hash,
        "alignment": "MPJPE and Legs MPJPE pelvis-relative; Global MPJPE head-anchored",
        "units": {"position": "cm", "velocity": "cm/s"},
        "n_clips": len(clips),
        "n_frames": int(sum(c.n_frames for c in clips)),
        "window_stride": window_stride,
    }
    return EvalReport(**metrics, per_action=per_action, config=config,
                      method=getattr(chain, "name", "model"), comparison=comparison)
