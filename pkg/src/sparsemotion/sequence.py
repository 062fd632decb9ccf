"""Motion embedding, LSTM sequence model, sequence loss, training and inference.

Per output frame ``t`` the model reads ``S`` horizontally normalised augmented
frames together with ``S`` motion embeddings ``E = W M*`` and predicts the 22
local rotations at ``t``. ``M*_t`` comes from the frozen sparse encoder applied
to the raw 60-frame window ending at ``t``. Root translation is not predicted:
global placement puts the predicted head joint on the tracked head.

All windows are causal. A prediction at ``t`` only sees frames ``0..t``; frames
before 0 are filled by repeating frame 0, and at ``t = 0`` the augmented row is
the single-frame one (no velocity known yet). Streaming and offline inference
therefore see identical inputs.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, InsufficientContext, MissingCheckpoint, ShapeError
from .kinematics import IDENTITY_6D, FullPose, SkeletonModel, forward_kinematics, head_aligned_root, rot6d_encode
from .nn import layers as L
from .nn import tensor as T
from .nn.optim import ParamStore, adam_step, clip_grad_norm, save_checkpoint
from .nn.tensor import Tensor, no_grad
from .prior import (
    FullMotionPrior,
    SparseMotionEncoder,
    TrainLog,
    encode_full,
    learning_rate,
    module_hash,
    motion_features_tensor,
)
from .signals import SIGNAL_DIM, SparseSignals, augment, normalize_horizontal, signals_from_clip, window_indices

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-motion-prior", "no-motion-loss")


@dataclass
class SequenceConfig:
    n_joints: int = 22
    hidden: int = 256
    n_layers: int = 3
    embed_dim: int = 64
    seq_len: int = 40
    latent_dim: int = 512
    use_motion_prior: bool = True

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sequence model key(s): {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.seq_len < 1 or cfg.hidden < 1 or cfg.n_layers < 1:
            raise ConfigError("seq_len, hidden and n_layers must be positive")
        return cfg


@dataclass
class SequenceTrainConfig:
    steps: int = 2000
    batch_size: int = 4          # chunks of `window` consecutive target frames
    lr: float = 1e-3
    warmup_steps: int = 0
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    lambda_rot: float = 1.0
    lambda_pos: float = 1.0
    lambda_vel: float = 1.0
    lambda_mo: float = 0.1
    vel_mode: str = "position"
    window: int = 60
    log_every: int = 50
    model: dict = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sequence training key(s): {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.vel_mode not in ("position", "rotation"):
            raise ConfigError(f"vel_mode must be 'position' or 'rotation', got {cfg.vel_mode!r}")
        if cfg.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {cfg.lr_schedule!r}")
        if cfg.steps < 0 or cfg.batch_size < 1 or cfg.lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr > 0 are required")
        SequenceConfig.from_dict(cfg.model)
        return cfg


def apply_ablation(train_cfg: SequenceTrainConfig, name):
    """Returns a copy of ``train_cfg`` configured for the named ablation.

    ``no-motion-prior`` zeroes the motion-embedding input and drops the motion
    loss; ``no-motion-loss`` only drops the motion loss.
    """
    if name not in ABLATIONS and name is not None:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {ABLATIONS[1:]}")
    d = asdict(train_cfg)
    d["model"] = dict(d["model"] or {})
    if name in ("no-motion-prior", "no-motion-loss"):
        d["lambda_mo"] = 0.0
    if name == "no-motion-prior":
        d["model"]["use_motion_prior"] = False
    return SequenceTrainConfig.from_dict(d)


class SequenceModel(L.Module):
    def __init__(self, cfg: SequenceConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = L.Linear(rng, cfg.latent_dim, cfg.embed_dim)
        self.lstm = L.LSTM(rng, SIGNAL_DIM + cfg.embed_dim, cfg.hidden, cfg.n_layers)
        self.head = L.Linear(rng, cfg.hidden, cfg.n_joints * 6)
        self.head.bias.data[:] = np.tile(IDENTITY_6D, cfg.n_joints)


def motion_embedding(model: SequenceModel, m):
    """Linear 512 -> 64 projection of unit-normalised motion latent(s).

    Latents only carry meaning up to scale (every latent loss is a cosine), and
    their raw norm (tens) would let each Adam step swing the embedding by
    ``lr * sum|m|``, so the direction is projected. Latents are frozen inputs,
    hence no gradient through the normalisation.
    """
    m = T.as_tensor(m).data
    n = np.linalg.norm(m, axis=-1, keepdims=True)
    return model.embed(m / np.maximum(n, 1e-12))


def predict_pose(model: SequenceModel, x_norm, e):
    """Final-step prediction ``(B, J, 6)`` from ``x_norm (B, S, 54)`` and ``e (B, S, 64)``."""
    cfg = model.cfg
    x_norm, e = T.as_tensor(x_norm), T.as_tensor(e)
    if x_norm.ndim != 3 or x_norm.shape[2] != SIGNAL_DIM:
        raise ShapeError(f"x_norm must be (B, S, 54), got {x_norm.shape}")
    if e.shape != x_norm.shape[:2] + (cfg.embed_dim,):
        raise ShapeError(f"embeddings must be {x_norm.shape[:2] + (cfg.embed_dim,)}, got {e.shape}")
    if not cfg.use_motion_prior:
        e = Tensor(np.zeros(e.shape))
    h = model.lstm.last_hidden(T.concat([x_norm, e], axis=-1))
    return model.head(h).reshape(x_norm.shape[0], cfg.n_joints, 6)


# ----------------------------------------------------------------------------
# loss


_L2_EPS = 1e-24  # gradient defined at 0, offset of 1e-12 elsewhere


def _mean_l2(d):
    """Mean over leading axes of the last-axis norm, smoothed at 0 and exactly 0 there."""
    return T.mean(T.sqrt(T.tsum(d * d, axis=-1) + _L2_EPS)) - np.sqrt(_L2_EPS)


def loss_seq(pred_rot6d, gt_rot6d, skeleton: SkeletonModel, lambda_rot=1.0, lambda_pos=1.0,
             lambda_vel=1.0, lambda_mo=0.1, prior: FullMotionPrior | None = None, gt_trans=None,
             gt_latent=None, vel_mode="position"):
    """Sequence loss over chunks of consecutive predictions.

    ``pred_rot6d``, ``gt_rot6d``: ``(B, W, J, 6)``. The rotation, position and
    velocity terms are per-joint Euclidean (L2) distances averaged over joints
    and frames. Positions are pelvis-relative FK positions; the velocity term
    compares per-frame deltas of positions (or of 6D rotations with
    ``vel_mode="rotation"``). The motion term encodes the
    last ``prior.cfg.window`` predicted frames (Gram-Schmidt normalised, with
    ground-truth root translation) and the matching ground-truth frames with
    the frozen full encoder and takes ``1 - cos``. Returns ``(loss, terms)``.
    """
    pred = T.as_tensor(pred_rot6d)
    gt_rot6d = np.asarray(gt_rot6d, dtype=np.float64)
    if pred.ndim != 4 or pred.shape != gt_rot6d.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt_rot6d.shape} must both be (B, W, J, 6)")
    B, W = pred.shape[:2]
    zero = np.zeros((B, W, 3))
    mats = T.rot6d_to_matrix(pred)
    pos, _ = T.forward_kinematics(mats, zero, skeleton)
    gt_pos, _ = forward_kinematics(skeleton, FullPose(gt_rot6d, zero))

    l_rot = _mean_l2(pred - gt_rot6d)
    l_pos = _mean_l2(pos - gt_pos)
    total = lambda_rot * l_rot + lambda_pos * l_pos
    terms = {"rot": float(l_rot.data), "pos": float(l_pos.data)}
    if W > 1:
        if vel_mode == "rotation":
            dv = (pred[:, 1:] - pred[:, :-1]) - (gt_rot6d[:, 1:] - gt_rot6d[:, :-1])
        else:
            dv = (pos[:, 1:] - pos[:, :-1]) - (gt_pos[:, 1:] - gt_pos[:, :-1])
        l_vel = _mean_l2(dv)
    else:
        l_vel = Tensor(np.array(0.0))
    total = total + lambda_vel * l_vel
    terms["vel"] = float(l_vel.data)
    if lambda_mo:
        if prior is None:
            raise ConfigError("lambda_mo > 0 requires the frozen full motion prior")
        Tw = prior.cfg.window
        if W < Tw:
            raise InsufficientContext(f"motion loss needs {Tw} consecutive predictions, got {W}")
        if gt_trans is None:
            raise ConfigError("motion loss needs the ground-truth root translation")
        gt_trans = np.asarray(gt_trans, dtype=np.float64)[:, -Tw:]
        unit6d = T.concat([mats[:, -Tw:, :, :, 0], mats[:, -Tw:, :, :, 1]], axis=-1)
        m_hat = prior.encoder(motion_features_tensor(unit6d, gt_trans))
        if gt_latent is None:
            gt_latent = encode_full(prior, gt_rot6d[:, -Tw:], gt_trans)
        l_mo = T.mean(1.0 - T.cosine_similarity(m_hat, gt_latent))
        total = total + lambda_mo * l_mo
        terms["mo"] = float(l_mo.data)
    terms["total"] = float(total.data)
    return total, terms


# ----------------------------------------------------------------------------
# sparse latents, cached per clip


def causal_rows(x_full, x_first, ends, length):
    """Causal windows ``(len(ends), length, D)`` over augmented rows.

    ``x_first`` is the single-frame augmented row used for ``t = 0``.
    """
    idx = window_indices(ends, length)
    out = x_full[idx]
    ends = np.atleast_1d(ends)
    out[ends == 0] = x_first
    return out


def stream_latents(encoder: SparseMotionEncoder, x_full, x_first, exact=True, batch=128):
    """``M*_t`` for every frame of one stream, shape ``(n, latent_dim)``.

    ``exact`` evaluates one window at a time, which is what streaming does and
    keeps the two bitwise equal; otherwise windows are batched (same values up
    to BLAS rounding).
    """
    n = len(x_full)
    Tw = encoder.cfg.window
    out = np.empty((n, encoder.cfg.latent_dim))
    step = 1 if exact else batch
    with no_grad():
        for s in range(0, n, step):
            ends = np.arange(s, min(n, s + step))
            out[ends] = encoder(causal_rows(x_full, x_first, ends, Tw)).data
    return out


class LatentCache:
    """Disk cache of per-clip sparse latents keyed by (encoder hash, clip id, frame).

    Files live under ``root/<encoder hash>/<clip id>.npy``; row ``t`` holds
    ``M*_t``. A different encoder hash never sees another encoder's latents.
    """

    def __init__(self, root, encoder_hash):
        self.encoder_hash = encoder_hash
        self.dir = Path(root) / encoder_hash[:16] if root else None
        self.hits = 0
        self.misses = 0
        self._mem = {}

    def path(self, clip_id):
        return self.dir / f"{clip_id}.npy" if self.dir else None

    def get(self, clip_id, compute):
        if clip_id in self._mem:
            self.hits += 1
            return self._mem[clip_id]
        p = self.path(clip_id)
        if p is not None and p.is_file():
            self.hits += 1
            arr = np.load(p)
        else:
            self.misses += 1
            arr = compute()
            if p is not None:
                p.parent.mkdir(parents=True, exist_ok=True)
                np.save(p, arr)
        self._mem[clip_id] = arr
        return arr


@dataclass
class _Stream:
    x_full: np.ndarray     # raw augmented rows
    x_first: np.ndarray    # single-frame row for t = 0
    xn_full: np.ndarray    # normalised rows
    xn_first: np.ndarray


def _prepare_stream(signals: SparseSignals) -> _Stream:
    x_full = augment(signals).x
    x_first = augment(signals[0:1]).x[0]
    return _Stream(x_full, x_first, normalize_horizontal(x_full), normalize_horizontal(x_first))


# ----------------------------------------------------------------------------
# training


class SequenceTrainer:
    def __init__(self, clips, skeleton: SkeletonModel, encoder: SparseMotionEncoder | None,
                 prior: FullMotionPrior | None, cfg: SequenceTrainConfig, seed=0, cache_dir=None,
                 log_path=None):
        if encoder is None or prior is None:
            raise MissingCheckpoint("sequence training needs the trained sparse encoder and full prior")
        mcfg = SequenceConfig.from_dict(cfg.model)
        if mcfg.n_joints != skeleton.n_joints:
            raise ConfigError(f"model n_joints {mcfg.n_joints} != skeleton joints {skeleton.n_joints}")
        if cfg.window != prior.cfg.window:
            raise ConfigError(f"window {cfg.window} != prior window {prior.cfg.window}")
        self.cfg, self.seed, self.skeleton = cfg, seed, skeleton
        self.model = SequenceModel(mcfg, seed)
        self.store = ParamStore.from_module(self.model)
        if not mcfg.use_motion_prior:
            self.store.freeze("embed")
        self.encoder, self.prior = encoder, prior
        self.frozen = {"sparse_encoder": ParamStore.from_module(encoder),
                       "full_prior": ParamStore.from_module(prior)}
        for st in self.frozen.values():
            st.freeze(list(st.params))
        self.frozen_hashes = {k: st.hash() for k, st in self.frozen.items()}
        self.cache = LatentCache(cache_dir, self.frozen_hashes["sparse_encoder"])
        self.clips = [c for c in clips if c.n_frames >= cfg.window]
        if not self.clips:
            raise InsufficientContext(f"no training clip has {cfg.window} frames")
        self.streams, self.latents = [], []
        for c in self.clips:
            st = _prepare_stream(signals_from_clip(skeleton, c))
            self.streams.append(st)
            self.latents.append(self.cache.get(
                c.clip_id, lambda st=st: stream_latents(encoder, st.x_full, st.x_first, exact=False)))
        self.rng = np.random.default_rng(seed + 1)
        self.step = 0
        self.log = TrainLog(log_path)

    def gather(self, picks):
        """Inputs for chunks ``(clip, start)``: normalised windows, latent rows, targets."""
        W, S = self.cfg.window, self.model.cfg.seq_len
        xs, lat, rot, trans, idx = [], [], [], [], []
        for i, s in picks:
            st, c = self.streams[i], self.clips[i]
            ends = np.arange(s, s + W)
            xs.append(causal_rows(st.xn_full, st.xn_first, ends, S))
            lo = max(0, s - S + 1)
            rows = np.arange(lo, s + W)
            lat.append(self.latents[i][rows])
            idx.append(window_indices(ends, S) - lo)
            rot.append(c.local_rot[s:s + W])
            trans.append(c.root_translation[s:s + W])
        return xs, lat, idx, np.stack(rot), np.stack(trans)

    def batch_loss(self, rng):
        W = self.cfg.window
        picks = []
        for _ in range(self.cfg.batch_size):
            i = int(rng.integers(len(self.clips)))
            picks.append((i, int(rng.integers(0, self.clips[i].n_frames - W + 1))))
        xs, lat, idx, rot, trans = self.gather(picks)
        es = [motion_embedding(self.model, m)[ix] for m, ix in zip(lat, idx)]
        pred = predict_pose(self.model, np.concatenate(xs), T.concat(es, axis=0))
        pred = pred.reshape(len(picks), W, self.model.cfg.n_joints, 6)
        c = self.cfg
        return loss_seq(pred, rot, self.skeleton, c.lambda_rot, c.lambda_pos, c.lambda_vel, c.lambda_mo,
                        self.prior, trans, vel_mode=c.vel_mode)

    def train(self, steps=None):
        steps = self.cfg.steps if steps is None else steps
        last = None
        for _ in range(steps):
            self.store.zero_grad()
            self.frozen["full_prior"].zero_grad()
            loss, terms = self.batch_loss(self.rng)
            loss.backward()
            gnorm = clip_grad_norm(self.store, self.cfg.clip_norm)
            adam_step(self.store, learning_rate(self.cfg, self.step), self.cfg.beta1, self.cfg.beta2)
            self.step += 1
            last = terms
            if not np.isfinite(terms["total"]):
                raise FloatingPointError(f"sequence model: non-finite loss at step {self.step}")
            if self.step == 1 or self.step % self.cfg.log_every == 0:
                self.log.write(step=self.step, grad_norm=round(gnorm, 6), **terms)
        self.frozen["full_prior"].zero_grad()
        return last

    def check_frozen(self):
        now = {k: st.hash() for k, st in self.frozen.items()}
        if now != self.frozen_hashes:
            raise RuntimeError("a frozen component changed during sequence training")
        return now

    def header(self):
        return {
            "kind": "sequence_model",
            "model": asdict(self.model.cfg),
            "train": asdict(self.cfg),
            "seed": self.seed,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "param_hash": self.store.hash(),
            "sparse_encoder_hash": self.frozen_hashes["sparse_encoder"],
            "prior_hash": self.frozen_hashes["full_prior"],
            "skeleton": self.skeleton.hash,
        }

    def save(self, path):
        self.check_frozen()
        return save_checkpoint(path, self.header(), self.store.state_arrays())

    def restore(self, header, arrays):
        self.store.load_state_arrays(arrays)
        self.step = int(header["step"])
        self.rng.bit_generator.state = header["rng_state"]


def load_sequence_model(path):
    from .nn.optim import load_checkpoint

    header, arrays = load_checkpoint(path)
    if header.get("kind") != "sequence_model":
        raise ConfigError(f"{path}: expected a sequence_model checkpoint, found {header.get('kind')!r}")
    model = SequenceModel(SequenceConfig.from_dict(header["model"]))
    ParamStore.from_module(model).load_state_arrays(arrays, with_optimizer=False)
    return model, header


# ----------------------------------------------------------------------------
# inference


@dataclass
class InferenceResult:
    local_rot: np.ndarray      # (n, J, 6), orthonormal columns
    root_translation: np.ndarray
    positions: np.ndarray      # (n, J, 3) global
    latents: np.ndarray        # (n, 512) sparse latents M*_t


def _finish(skeleton, raw6d, head):
    with no_grad():
        rot = rot6d_encode(T.rot6d_to_matrix(raw6d).data)
    root, rel = head_aligned_root(skeleton, rot, head)
    return rot, root, rel + root[..., None, :]


def infer_motion(model: SequenceModel, encoder: SparseMotionEncoder, skeleton: SkeletonModel,
                 signals: SparseSignals, exact=True, batch=128) -> InferenceResult:
    """Offline inference over a whole stream.

    ``exact=True`` evaluates every frame on its own, reproducing
    :class:`StreamingInference` bit for bit. ``exact=False`` batches windows.
    """
    st = _prepare_stream(signals)
    n, S = len(signals), model.cfg.seq_len
    lat = stream_latents(encoder, st.x_full, st.x_first, exact=exact, batch=batch)
    step = 1 if exact else batch
    with no_grad():
        emb = np.concatenate([motion_embedding(model, lat[s:s + step]).data for s in range(0, n, step)])
        raw = np.empty((n, model.cfg.n_joints, 6))
        for s in range(0, n, step):
            ends = np.arange(s, min(n, s + step))
            x = causal_rows(st.xn_full, st.xn_first, ends, S)
            e = emb[window_indices(ends, S)]
            raw[ends] = predict_pose(model, x, e).data
    rot, root, pos = _finish(skeleton, raw, signals.head)
    return InferenceResult(rot, root, pos, lat)


class StreamingInference:
    """One-frame-at-a-time inference with bounded history.

    ``push(g (3, 3), r (3, 6))`` returns ``(local_rot (J, 6), root (3,), positions (J, 3))``.
    """

    def __init__(self, model: SequenceModel, encoder: SparseMotionEncoder, skeleton: SkeletonModel):
        self.model, self.encoder, self.skeleton = model, encoder, skeleton
        self.keep = max(encoder.cfg.window, model.cfg.seq_len)
        self.t = 0
        self.prev = None
        self.last_latent = None
        self.first = {}     # frame-0 rows (raw, normalised, embedding)
        self.x, self.xn, self.e = [], [], []

    def _window(self, rows, first, length):
        # the same causal rule as offline: frame 0 fills positions before the stream start
        avail = rows[-length:]
        pad = length - len(avail)
        return np.stack([first] * pad + avail) if pad > 0 else np.stack(avail)

    def push(self, g, r):
        g = np.asarray(g, dtype=np.float64)[None]
        r = np.asarray(r, dtype=np.float64)[None]
        if self.t == 0:
            row = augment(SparseSignals(g, r)).x[0]
            self.first["x_single"] = row
        else:
            pair = augment(SparseSignals(np.concatenate([self.prev[0], g]), np.concatenate([self.prev[1], r]))).x
            row = pair[1]
            if self.t == 1:
                # offline rows give frame 0 the velocity of frame 1
                self.first["x"] = pair[0]
                self.first["xn"] = normalize_horizontal(pair[0])
                self.x[0] = pair[0]
                self.xn[0] = self.first["xn"]
        self.prev = (g, r)
        self.x.append(row)
        self.xn.append(normalize_horizontal(row))
        Tw, S = self.encoder.cfg.window, self.model.cfg.seq_len
        with no_grad():
            if self.t == 0:
                win = np.tile(row, (Tw, 1))[None]
            else:
                win = self._window(self.x, self.first["x"], Tw)[None]
            m = self.encoder(win).data
            self.last_latent = m[0]
            e = motion_embedding(self.model, m).data[0]
            self.e.append(e)
            if self.t == 0:
                self.first["e"] = e
                xw = np.tile(self.xn[0], (S, 1))[None]
            else:
                xw = self._window(self.xn, self.first["xn"], S)[None]
            ew = self._window(self.e, self.first["e"], S)[None]
            raw = predict_pose(self.model, xw, ew).data
        for buf in (self.x, self.xn, self.e):
            if len(buf) > self.keep:
                del buf[0]
        self.t += 1
        rot, root, pos = _finish(self.skeleton, raw[0], g[0, 0])
        return rot, root, pos

    def run(self, signals: SparseSignals) -> InferenceResult:
        out, lat = [], []
        for t in range(len(signals)):
            out.append(self.push(signals.g3[t], signals.r3[t]))
            lat.append(self.last_latent)
        rot, root, pos = (np.stack(z) for z in zip(*out))
        return InferenceResult(rot, root, pos, np.stack(lat))
