"""Parameter store with Adam state, freezing, hashing and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import MissingCheckpoint, MissingGrad, ParseError, UnknownParam, VersionError
from .tensor import Tensor

CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameters plus per-parameter Adam moments and step counts.

    Frozen parameters are skipped by :func:`adam_step` entirely: neither the
    values nor the optimizer state change.
    """

    def __init__(self, params):
        self.params: dict[str, Tensor] = dict(params)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}
        self.frozen: set[str] = set()

    @classmethod
    def from_module(cls, module, prefix=""):
        return cls(module.named_parameters(prefix))

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _resolve(self, names):
        """Exact names or dotted prefixes (``"decoder"`` matches ``decoder.*``)."""
        if isinstance(names, str):
            names = [names]
        out = []
        for n in names:
            hits = [k for k in self.params if k == n or k.startswith(n + ".")]
            if not hits:
                raise UnknownParam(f"no parameter named or prefixed {n!r}")
            out.extend(hits)
        return out

    def freeze(self, names):
        self.frozen.update(self._resolve(names))

    def unfreeze(self, names):
        self.frozen.difference_update(self._resolve(names))

    def trainable(self):
        return [k for k in self.params if k not in self.frozen]

    def hash(self, prefix=None) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            if prefix is None or k == prefix or k.startswith(prefix + "."):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for k, p in self.params.items()
                                   if k not in self.frozen and p.grad is not None)))

    # -- serialisation -------------------------------------------------------

    def state_arrays(self):
        out = {}
        for k, p in self.params.items():
            out[f"param/{k}"] = p.data
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
            out[f"adam_t/{k}"] = np.array(self.t[k], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays, with_optimizer=True):
        for k, p in self.params.items():
            key = f"param/{k}"
            if key not in arrays:
                raise ParseError(f"checkpoint lacks parameter {k!r}")
            if arrays[key].shape != p.data.shape:
                raise ParseError(f"parameter {k!r}: checkpoint shape {arrays[key].shape} != {p.data.shape}")
            p.data = np.array(arrays[key], dtype=np.float64)
            if with_optimizer and f"adam_m/{k}" in arrays:
                self.m[k] = np.array(arrays[f"adam_m/{k}"], dtype=np.float64)
                self.v[k] = np.array(arrays[f"adam_v/{k}"], dtype=np.float64)
                self.t[k] = int(arrays[f"adam_t/{k}"])


def adam_step(store: ParamStore, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update over every non-frozen parameter."""
    for k in sorted(store.params):
        if k in store.frozen:
            continue
        p = store.params[k]
        if p.grad is None:
            raise MissingGrad(f"parameter {k!r} has no gradient")
        g = p.grad
        store.t[k] += 1
        t = store.t[k]
        store.m[k] = beta1 * store.m[k] + (1 - beta1) * g
        store.v[k] = beta2 * store.v[k] + (1 - beta2) * g * g
        m_hat = store.m[k] / (1 - beta1 ** t)
        v_hat = store.v[k] / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


def clip_grad_norm(store: ParamStore, max_norm):
    norm = store.grad_norm()
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k, p in store.params.items():
            if k not in store.frozen and p.grad is not None:
                p.grad = p.grad * scale
    return norm


# ----------------------------------------------------------------------------
# checkpoints: an .npz archive with a JSON header under "__header__"


def save_checkpoint(path, header: dict, arrays: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": CHECKPOINT_VERSION, **header}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=blob, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(header, arrays)``."""
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (ValueError, OSError) as exc:
        raise ParseError(f"{path}: unreadable checkpoint ({exc})") from None
    if "__header__" not in arrays:
        raise ParseError(f"{path}: checkpoint has no header")
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    return header, arrays
