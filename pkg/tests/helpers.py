"""Small shared builders for tests (tiny models, quantised streams)."""
import numpy as np

from sparsemotion.dataio import SynthConfig, synth_generate
from sparsemotion.prior import FullMotionPrior, PriorConfig, SparseMotionEncoder
from sparsemotion.sequence import SequenceConfig, SequenceModel
from sparsemotion.signals import SparseSignals, signals_from_clip

GRID = 2.0 ** -30  # about 1e-9 m


def tiny_prior_cfg(window=8, **kw):
    base = dict(window=window, d_model=16, n_heads=2, d_ff=32, n_enc_layers=1, n_dec_layers=1,
                latent_dim=512, memory_tokens=2)
    base.update(kw)
    return PriorConfig(**base)


def tiny_models(seed=0, window=8, seq_len=6, hidden=8, use_motion_prior=True):
    pcfg = tiny_prior_cfg(window)
    prior = FullMotionPrior(pcfg, seed)
    enc = SparseMotionEncoder(pcfg, seed + 1)
    enc.init_from(prior)
    model = SequenceModel(SequenceConfig(hidden=hidden, n_layers=2, embed_dim=5, seq_len=seq_len,
                                         latent_dim=pcfg.latent_dim, use_motion_prior=use_motion_prior), seed + 2)
    return prior, enc, model


def synth_clips(seed=0, frames=None, **classes):
    clips = synth_generate(SynthConfig(classes=classes or {"walk": 1}), seed)
    return [c.slice(0, frames) for c in clips] if frames else clips


def quantised_signals(skeleton, clip):
    """Device stream with positions snapped to a power-of-two grid, so grid shifts are exact."""
    s = signals_from_clip(skeleton, clip)
    return SparseSignals(np.round(s.g3 / GRID) * GRID, s.r3, s.fps)
