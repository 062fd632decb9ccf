"""Full motion prior (transformer autoencoder) and the sparse motion encoder.

The full encoder reads a ``T``-frame full-body window (per frame: ``J`` local
6D rotations plus root translation), prepends a learned summary token, and
projects that token's output to a 512-d motion latent. The decoder attends
from ``T`` learned query positions to memory tokens derived from the latent
and emits the window back. Root translation is canonicalised per window:
the first frame's x and z are subtracted, y is kept.

The sparse encoder is the same encoder stack with a 54-d input projection;
it reads raw (not per-frame normalised) augmented signals, with each window
shifted so its last-frame head sits at x = z = 0.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataio import MotionClip
from .errors import ConfigError, DataError, MissingCheckpoint, ShapeError
from .kinematics import IDENTITY_6D, SkeletonModel, rot6d_encode
from .nn import layers as L
from .nn import tensor as T
from .nn.optim import ParamStore, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint
from .nn.tensor import Tensor, no_grad
from .signals import SIGNAL_DIM, augment, signals_from_clip, window_indices

log = logging.getLogger(__name__)

LATENT_DIM = 512


def _from_dict(cls, d, what):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {sorted(unknown)}")
    return cls(**d)


@dataclass
class PriorConfig:
    n_joints: int = 22
    window: int = 60
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 1024
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    latent_dim: int = LATENT_DIM
    memory_tokens: int = 1

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d, "prior model config")

    @property
    def feature_dim(self):
        return self.n_joints * 6 + 3


class MotionEncoder(L.Module):
    def __init__(self, rng, d_in, cfg: PriorConfig):
        self.in_proj = L.Linear(rng, d_in, cfg.d_model)
        self.summary = Tensor(rng.normal(0, 0.02, (1, 1, cfg.d_model)), requires_grad=True)
        self.stack = L.TransformerEncoder(rng, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_enc_layers)
        self.to_latent = L.Linear(rng, cfg.d_model, cfg.latent_dim)
        # learned temporal pooling of the frame outputs, alongside the summary token
        self.pool = Tensor(rng.normal(0, 1 / np.sqrt(cfg.window), (cfg.memory_tokens, cfg.window)),
                           requires_grad=True)
        self.pool_proj = L.Linear(rng, cfg.d_model * cfg.memory_tokens, cfg.latent_dim, bias=False)
        self.d_in = d_in
        self.window = cfg.window

    def forward(self, x):
        """``x``: ``(B, T, d_in)`` -> latent ``(B, latent_dim)``."""
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1:] != (self.window, self.d_in):
            raise ShapeError(f"encoder expects (B, {self.window}, {self.d_in}), got {x.shape}")
        h = self.in_proj(x)
        tok = self.summary + np.zeros((x.shape[0], 1, h.shape[2]))
        h = L.positional_encoding(T.concat([tok, h], axis=1))
        h = self.stack(h)
        pooled = T.matmul(self.pool, h[:, 1:]).reshape(x.shape[0], -1)
        return self.to_latent(h[:, 0]) + self.pool_proj(pooled)


class MotionDecoder(L.Module):
    def __init__(self, rng, cfg: PriorConfig):
        self.from_latent = L.Linear(rng, cfg.latent_dim, cfg.d_model * cfg.memory_tokens)
        # learned time mixing of the memory tokens: query_t += sum_k mix[t, k] mem_k
        self.mix = Tensor(rng.normal(0, 1 / np.sqrt(cfg.memory_tokens), (cfg.window, cfg.memory_tokens)),
                          requires_grad=True)
        self.queries = Tensor(rng.normal(0, 0.02, (1, cfg.window, cfg.d_model)), requires_grad=True)
        self.stack = L.TransformerDecoder(rng, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_dec_layers)
        self.out_proj = L.Linear(rng, cfg.d_model, cfg.feature_dim)
        # start from a rest pose so Gram-Schmidt is well conditioned from step 0
        self.out_proj.bias.data[: cfg.n_joints * 6] = np.tile(IDENTITY_6D, cfg.n_joints)
        self.cfg = cfg

    def forward(self, latent):
        latent = T.as_tensor(latent)
        B = latent.shape[0]
        mem = self.from_latent(latent).reshape(B, self.cfg.memory_tokens, self.cfg.d_model)
        # the bilinear time-by-latent path lets phase-shifted periodic motion decode
        # linearly instead of through attention alone
        q = L.positional_encoding(self.queries + T.matmul(self.mix, mem))
        return self.out_proj(self.stack(q, mem))


class FullMotionPrior(L.Module):
    def __init__(self, cfg: PriorConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = MotionEncoder(rng, cfg.feature_dim, cfg)
        self.decoder = MotionDecoder(rng, cfg)


class SparseMotionEncoder(L.Module):
    def __init__(self, cfg: PriorConfig, seed=0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = MotionEncoder(rng, SIGNAL_DIM, cfg)

    def forward(self, x):
        return self.encoder(canonical_sparse(x))

    def init_from(self, prior: FullMotionPrior):
        """Copy every encoder weight except the input projection from ``prior``."""
        src = dict(prior.encoder.named_parameters())
        for name, p in self.encoder.named_parameters():
            if not name.startswith("in_proj."):
                p.data = src[name].data.copy()


# ----------------------------------------------------------------------------
# features


def canonical_translation(trans):
    """Subtract each window's first-frame x and z; ``trans``: ``(..., T, 3)``."""
    trans = np.array(trans, dtype=np.float64)
    first = trans[..., :1, :].copy()
    first[..., 1] = 0.0
    return trans - first


def motion_features(local_rot, trans):
    """``(..., T, J, 6)`` and ``(..., T, 3)`` -> ``(..., T, J*6 + 3)``, canonicalised."""
    local_rot = np.asarray(local_rot, dtype=np.float64)
    lead = local_rot.shape[:-2]
    return np.concatenate([local_rot.reshape(lead + (-1,)), canonical_translation(trans)], axis=-1)


def motion_features_tensor(local_rot, trans):
    """Differentiable variant of :func:`motion_features`."""
    local_rot, trans = T.as_tensor(local_rot), T.as_tensor(trans)
    lead = local_rot.shape[:-2]
    first = trans[..., :1, :] * np.array([1.0, 0.0, 1.0])
    return T.concat([local_rot.reshape(lead + (local_rot.shape[-2] * 6,)), trans - first], axis=-1)


def canonical_sparse(x):
    """Express each window's tracked positions relative to its last-frame head x/z.

    ``x``: ``(..., T, 54)`` raw augmented windows. The trajectory inside the
    window is kept as is (no per-frame normalisation), only the absolute
    horizontal placement is removed.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    ref = x[..., -1:, [0, 2]]
    for j in range(3):
        x[..., [3 * j, 3 * j + 2]] -= ref
    return x


def split_features(feat, n_joints):
    lead = feat.shape[:-1]
    return feat[..., : n_joints * 6].reshape(lead + (n_joints, 6)), feat[..., n_joints * 6:]


def encode_full(prior: FullMotionPrior, local_rot, trans):
    """Motion latent(s) for full-body window(s); unbatched input gives ``(512,)``."""
    local_rot = np.asarray(local_rot, dtype=np.float64)
    single = local_rot.ndim == 3
    feat = motion_features(local_rot, trans)
    if single:
        feat = feat[None]
    with no_grad():
        m = prior.encoder(feat).data
    return m[0] if single else m


def decode_full(prior: FullMotionPrior, latent):
    """Decode latent(s) to ``(local_rot (..., T, J, 6), trans (..., T, 3))``.

    Rotations are Gram-Schmidt normalised; translation is in the window's
    canonical frame.
    """
    latent = np.asarray(latent, dtype=np.float64)
    single = latent.ndim == 1
    with no_grad():
        out = prior.decoder(latent[None] if single else latent)
        rot6d, trans = split_features(out, prior.cfg.n_joints)
        rot = rot6d_encode(T.rot6d_to_matrix(rot6d).data)
    trans = trans.data
    return (rot[0], trans[0]) if single else (rot, trans)


def encode_sparse(encoder: SparseMotionEncoder, x):
    """Motion latent(s) from ``(..., T, 54)`` unnormalised augmented signals."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    with no_grad():
        m = encoder(x[None] if single else x).data
    return m[0] if single else m


# ----------------------------------------------------------------------------
# losses


def cosine_distance(a, b):
    """``1 - cos`` along the last axis (tensor-aware)."""
    return 1.0 - T.cosine_similarity(a, b)


def reconstruction_loss(pred_feat, gt_rot, gt_pos, skeleton: SkeletonModel, lambda_p=1.0):
    """6D MSE plus ``lambda_p`` times FK position MSE.

    ``pred_feat``: ``(B, T, J*6+3)`` tensor; ``gt_rot`` ``(B, T, J, 6)``;
    ``gt_pos`` ``(B, T, J, 3)`` in the canonical frame.
    """
    rot6d, trans = split_features(T.as_tensor(pred_feat), skeleton.n_joints)
    l_rot = T.mean((rot6d - gt_rot) ** 2)
    pos, _ = T.forward_kinematics(T.rot6d_to_matrix(rot6d), trans, skeleton)
    l_pos = T.mean((pos - gt_pos) ** 2)
    return l_rot + lambda_p * l_pos, {"rot": float(l_rot.data), "pos": float(l_pos.data)}


def combine_fm_loss(recon, latent, text_emb, image_emb, lambda_text, lambda_image):
    """``L_fm = L_recon + lt (1 - cos(text, M)) + li (1 - cos(image, M))``, batch-averaged."""
    l_text = T.mean(cosine_distance(text_emb, latent))
    l_image = T.mean(cosine_distance(image_emb, latent))
    return recon + lambda_text * l_text + lambda_image * l_image, {
        "text": float(l_text.data), "image": float(l_image.data)}


def loss_fm(prior: FullMotionPrior, skeleton, local_rot, trans, text_emb, image_emb,
            lambda_text=0.01, lambda_image=0.01, lambda_p=1.0):
    """Full-prior training loss on a batch of windows. Returns ``(loss, terms)``."""
    local_rot = np.asarray(local_rot, dtype=np.float64)
    feat = motion_features(local_rot, trans)
    gt_pos = window_positions(skeleton, local_rot, trans)
    latent = prior.encoder(feat)
    recon, terms = reconstruction_loss(prior.decoder(latent), local_rot, gt_pos, skeleton, lambda_p)
    total, t2 = combine_fm_loss(recon, latent, text_emb, image_emb, lambda_text, lambda_image)
    terms.update(t2, recon=float(recon.data), total=float(total.data))
    return total, terms


def loss_sm(m_star, text_emb, image_emb, m_target=None, lambda_text=0.01, lambda_image=0.01,
            lambda_latent=0.0):
    """Sparse-encoder loss; ``lambda_latent = 0`` is the two-term form.

    With ``lambda_latent > 0`` a latent-matching term ``1 - cos(M_target, M*)``
    against the frozen full encoder's latent is added.
    """
    l_text = T.mean(cosine_distance(text_emb, m_star))
    l_image = T.mean(cosine_distance(image_emb, m_star))
    total = lambda_text * l_text + lambda_image * l_image
    terms = {"text": float(l_text.data), "image": float(l_image.data)}
    if lambda_latent:
        if m_target is None:
            raise ConfigError("lambda_latent > 0 requires a target latent")
        l_lat = T.mean(cosine_distance(m_target, m_star))
        total = total + lambda_latent * l_lat
        terms["latent"] = float(l_lat.data)
    terms["total"] = float(total.data)
    return total, terms


def window_positions(skeleton, local_rot, trans):
    """FK positions in each window's canonical frame."""
    from .kernels import fk_forward
    from .kinematics import rot6d_decode

    _, pos = fk_forward(rot6d_decode(local_rot), canonical_translation(trans),
                        skeleton.offsets, skeleton.parents)
    return pos


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    warmup_steps: int = 0
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    lambda_text: float = 0.01
    lambda_image: float = 0.01
    lambda_p: float = 1.0
    lambda_latent: float = 0.0
    window_stride: int = 1
    log_every: int = 50
    init_from_prior: bool = True
    model: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        cfg = _from_dict(cls, d, "training config")
        if cfg.steps < 0 or cfg.batch_size < 1 or cfg.lr <= 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr > 0 are required")
        if cfg.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {cfg.lr_schedule!r}")
        PriorConfig.from_dict(cfg.model)
        return cfg


def learning_rate(cfg: TrainConfig, step):
    """Learning rate for 0-based ``step``: linear warmup, then constant or cosine to 10%."""
    lr = cfg.lr
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "cosine" and cfg.steps > cfg.warmup_steps:
        frac = min(1.0, (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps))
        lr *= 0.1 + 0.45 * (1 + np.cos(np.pi * frac))
    return lr


class TrainLog:
    """Append-only JSON-lines training log."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        self.t0 = time.perf_counter()

    def write(self, **row):
        row = {**row, "wall_s": round(time.perf_counter() - self.t0, 3)}
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row) + "\n")


def _clip_arrays(skeleton, clips, need_embeddings=True):
    usable = [c for c in clips if c.has_embeddings or not need_embeddings]
    dropped = len(clips) - len(usable)
    if dropped:
        log.warning("excluding %d clip(s) without label embeddings", dropped)
    if not usable:
        raise DataError("no clips with label embeddings available for training")
    return usable, dropped


def _check_embedding_dim(clips, latent_dim):
    dim = len(clips[0].text_embedding)
    if dim != latent_dim:
        raise ConfigError(f"model.latent_dim {latent_dim} must equal the label embedding size {dim}")


class _Trainer:
    """Shared loop: sampling RNG, optimizer, logging, checkpoint/resume."""

    kind = ""

    def __init__(self, module, cfg: TrainConfig, seed, log_path=None):
        self.module = module
        self.cfg = cfg
        self.seed = seed
        self.rng = np.random.default_rng(seed + 1)
        self.store = ParamStore.from_module(module)
        self.step = 0
        self.log = TrainLog(log_path)

    def batch_loss(self, batch_rng):  # pragma: no cover - abstract
        raise NotImplementedError

    def train(self, steps=None):
        steps = self.cfg.steps if steps is None else steps
        last = None
        for _ in range(steps):
            self.store.zero_grad()
            loss, terms = self.batch_loss(self.rng)
            loss.backward()
            gnorm = clip_grad_norm(self.store, self.cfg.clip_norm)
            adam_step(self.store, learning_rate(self.cfg, self.step), self.cfg.beta1, self.cfg.beta2)
            self.step += 1
            last = terms
            if not np.isfinite(terms["total"]):
                raise FloatingPointError(f"{self.kind}: non-finite loss at step {self.step}")
            if self.step == 1 or self.step % self.cfg.log_every == 0:
                self.log.write(step=self.step, grad_norm=round(gnorm, 6), **terms)
        return last

    def header(self, **extra):
        return {
            "kind": self.kind,
            "model": asdict(self.module.cfg),
            "train": asdict(self.cfg),
            "seed": self.seed,
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "param_hash": self.store.hash(),
            **extra,
        }

    def restore(self, header, arrays):
        self.store.load_state_arrays(arrays)
        self.step = int(header["step"])
        self.rng.bit_generator.state = header["rng_state"]


class FullPriorTrainer(_Trainer):
    kind = "full_prior"

    def __init__(self, clips, skeleton, cfg: TrainConfig, seed=0, log_path=None, prior=None):
        mcfg = PriorConfig.from_dict(cfg.model)
        if mcfg.n_joints != skeleton.n_joints:
            raise ConfigError(f"model n_joints {mcfg.n_joints} != skeleton joints {skeleton.n_joints}")
        super().__init__(prior or FullMotionPrior(mcfg, seed), cfg, seed, log_path)
        self.skeleton = skeleton
        self.clips, self.dropped = _clip_arrays(skeleton, clips)
        _check_embedding_dim(self.clips, mcfg.latent_dim)
        Tw = mcfg.window
        self.index = [(i, s) for i, c in enumerate(self.clips)
                      for s in range(0, c.n_frames - Tw + 1, cfg.window_stride)]
        if not self.index:
            raise DataError(f"no clip is at least {Tw} frames long")

    def sample(self, rng, n=None):
        n = n or self.cfg.batch_size
        picks = rng.integers(0, len(self.index), size=n)
        return [self.index[p] for p in picks]

    def gather(self, picks):
        Tw = self.module.cfg.window
        rot = np.stack([self.clips[i].local_rot[s:s + Tw] for i, s in picks])
        trans = np.stack([self.clips[i].root_translation[s:s + Tw] for i, s in picks])
        text = np.stack([self.clips[i].text_embedding for i, _ in picks])
        image = np.stack([self.clips[i].image_embedding for i, _ in picks])
        return rot, trans, text, image

    def batch_loss(self, rng):
        rot, trans, text, image = self.gather(self.sample(rng))
        return loss_fm(self.module, self.skeleton, rot, trans, text, image,
                       self.cfg.lambda_text, self.cfg.lambda_image, self.cfg.lambda_p)

    def save(self, path, skeleton_hash=None):
        return save_checkpoint(path, self.header(skeleton=skeleton_hash or self.skeleton.hash,
                                                 dropped_clips=self.dropped),
                               self.store.state_arrays())


def reconstruction_error_cm(prior: FullMotionPrior, skeleton, local_rot, trans):
    """Mean per-joint position error (cm) of ``decode(encode(x))`` over windows."""
    latent = encode_full(prior, local_rot, trans)
    rot_hat, trans_hat = decode_full(prior, latent)
    gt = window_positions(skeleton, local_rot, trans)
    pred = window_positions(skeleton, rot_hat, trans_hat)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * 100)


class SparseEncoderTrainer(_Trainer):
    kind = "sparse_encoder"

    def __init__(self, clips, skeleton, prior: FullMotionPrior, cfg: TrainConfig, seed=0, log_path=None,
                 prior_hash=None):
        if prior is None:
            raise MissingCheckpoint("the sparse motion encoder is trained after the full motion prior; "
                                    "no prior given")
        mcfg = prior.cfg
        enc = SparseMotionEncoder(mcfg, seed)
        if cfg.init_from_prior:
            enc.init_from(prior)
        super().__init__(enc, cfg, seed, log_path)
        self.prior = prior
        # the full decoder stays attached but frozen; its hash is checked after training
        self.prior_store = ParamStore.from_module(prior)
        self.prior_store.freeze(list(self.prior_store.params))
        self.prior_hash = prior_hash or self.prior_store.hash()
        self.skeleton = skeleton
        self.clips, self.dropped = _clip_arrays(skeleton, clips)
        _check_embedding_dim(self.clips, mcfg.latent_dim)
        self.signals = [augment(signals_from_clip(skeleton, c)).x for c in self.clips]
        self.index = [(i, t) for i, c in enumerate(self.clips) for t in range(c.n_frames)]

    def gather(self, picks):
        Tw = self.module.cfg.window
        xs, rots, transs = [], [], []
        for i, t in picks:
            idx = window_indices([t], Tw)[0]
            xs.append(self.signals[i][idx])
            rots.append(self.clips[i].local_rot[idx])
            transs.append(self.clips[i].root_translation[idx])
        text = np.stack([self.clips[i].text_embedding for i, _ in picks])
        image = np.stack([self.clips[i].image_embedding for i, _ in picks])
        return np.stack(xs), np.stack(rots), np.stack(transs), text, image

    def batch_loss(self, rng):
        picks = [self.index[p] for p in rng.integers(0, len(self.index), size=self.cfg.batch_size)]
        x, rot, trans, text, image = self.gather(picks)
        m_star = self.module(x)
        target = encode_full(self.prior, rot, trans) if self.cfg.lambda_latent else None
        loss, terms = loss_sm(m_star, text, image, target, self.cfg.lambda_text, self.cfg.lambda_image,
                              self.cfg.lambda_latent)
        if self.step % self.cfg.log_every == 0:
            # the frozen decoder only reports how well M* reconstructs the window
            rot_hat, trans_hat = decode_full(self.prior, m_star.data)
            err = np.linalg.norm(window_positions(self.skeleton, rot_hat, trans_hat)
                                 - window_positions(self.skeleton, rot, trans), axis=-1).mean()
            terms["decoded_pos_err_cm"] = float(err * 100)
        return loss, terms

    def save(self, path):
        if self.prior_store.hash() != self.prior_hash:
            raise RuntimeError("frozen full motion prior changed during sparse encoder training")
        mode = "extended" if self.cfg.lambda_latent else "paper"
        return save_checkpoint(path, self.header(prior_hash=self.prior_hash, mode=mode,
                                                 skeleton=self.skeleton.hash),
                               self.store.state_arrays())


# ----------------------------------------------------------------------------
# checkpoint loading


def load_prior(path) -> tuple[FullMotionPrior, dict]:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "full_prior":
        raise ConfigError(f"{path}: expected a full_prior checkpoint, found {header.get('kind')!r}")
    prior = FullMotionPrior(PriorConfig.from_dict(header["model"]))
    ParamStore.from_module(prior).load_state_arrays(arrays, with_optimizer=False)
    return prior, header


def load_sparse_encoder(path) -> tuple[SparseMotionEncoder, dict]:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "sparse_encoder":
        raise ConfigError(f"{path}: expected a sparse_encoder checkpoint, found {header.get('kind')!r}")
    enc = SparseMotionEncoder(PriorConfig.from_dict(header["model"]))
    ParamStore.from_module(enc).load_state_arrays(arrays, with_optimizer=False)
    return enc, header


def module_hash(module) -> str:
    return ParamStore.from_module(module).hash()


def clip_windows(clips: list[MotionClip], window, stride=1):
    """Stacked ``(rot, trans, labels)`` for every full window in ``clips``."""
    rot, trans, labels = [], [], []
    for c in clips:
        for s in range(0, c.n_frames - window + 1, stride):
            rot.append(c.local_rot[s:s + window])
            trans.append(c.root_translation[s:s + window])
            labels.append(c.action_label)
    if not rot:
        return np.zeros((0, window, 0, 6)), np.zeros((0, window, 3)), []
    return np.stack(rot), np.stack(trans), labels
