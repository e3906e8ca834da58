"""Optimisation loop shared by both stages: Adam, plateau LR halving,
early stopping and the binary checkpoint format.

Checkpoint layout (little-endian)::

    b"DCASA1"  u16 version  u32 n_entries
    per entry: u16 name_len, name (utf-8), u8 dtype code, u8 ndim,
               ndim x u32 dims, raw element data

Run metadata (configs) travels as a ``uint8`` entry named ``__meta__``
holding JSON.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from .errors import DimensionError, FormatError, NumericError, ParameterError

log = logging.getLogger(__name__)

MAGIC = b"DCASA1"
VERSION = 1
META_KEY = "__meta__"
_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8, 4: np.int32}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


@dataclass
class TrainConfig:
    initial_lr: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    max_steps: int | None = None
    lr_halving_patience: int = 2
    early_stop_patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int | None = None  # steps between validations; default one epoch

    def __post_init__(self):
        if self.initial_lr < 0:
            raise ParameterError("learning rate must be non-negative")
        if self.lr_halving_patience < 1 or self.early_stop_patience < 1:
            raise ParameterError("patiences must be >= 1")


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}


def adam_step(params: dict[str, torch.Tensor], state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """One bias-corrected Adam update of every parameter with a gradient."""
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    for n, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}")
    state.step += 1
    t = state.step
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    with torch.no_grad():
        for n, g in grads.items():
            p = params[n]
            m = state.m.setdefault(n, torch.zeros_like(p))
            v = state.v.setdefault(n, torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            if lr == 0:
                continue
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)


def lr_schedule_and_stop(history: list[float], halving_patience: int = 2,
                         stop_patience: int = 5) -> str:
    """``"stop"`` after ``stop_patience`` epochs without a new best validation
    loss, ``"halve_lr"`` every ``halving_patience`` such epochs, else ``"continue"``."""
    if not history:
        return "continue"
    best = min(range(len(history)), key=lambda i: (history[i], i))
    since = len(history) - 1 - best
    if since >= stop_patience:
        return "stop"
    if since > 0 and since % halving_patience == 0:
        return "halve_lr"
    return "continue"


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> None:
    entries = {k: v.detach().cpu().numpy() for k, v in tensors.items()}
    if meta is not None:
        entries[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(entries)))
        for name, arr in entries.items():
            arr = np.require(arr, requirements="C")
            if arr.dtype not in _CODES:
                raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
            raw_name = name.encode()
            f.write(struct.pack("<H", len(raw_name)) + raw_name)
            f.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(6) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    tensors, meta = {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = np.dtype(_DTYPES[code]).newbyteorder("<")
        arr = np.frombuffer(take(dt.itemsize * math.prod(shape)), dtype=dt).reshape(shape)
        if name == META_KEY:
            meta = json.loads(arr.tobytes().decode())
        else:
            tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after {count} entries")
    return tensors, meta


def module_state(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def load_into(module: nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy checkpoint tensors into ``module``; shape/name mismatches raise
    ``DimensionError`` naming the first offending entry."""
    own = module.state_dict()
    for name, ref in own.items():
        key = prefix + name
        if key not in tensors:
            raise DimensionError(f"checkpoint lacks entry {key!r}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise DimensionError(
                f"entry {key!r}: checkpoint shape {tuple(tensors[key].shape)} "
                f"!= model shape {tuple(ref.shape)}")
    module.load_state_dict({n: tensors[prefix + n].to(own[n].dtype) for n in own})


def adam_tensors(state: AdamState, prefix: str = "adam.") -> dict[str, torch.Tensor]:
    out = {f"{prefix}step": torch.tensor([state.step], dtype=torch.int64)}
    out.update({f"{prefix}m.{k}": v for k, v in state.m.items()})
    out.update({f"{prefix}v.{k}": v for k, v in state.v.items()})
    return out


def adam_from_tensors(tensors: dict[str, torch.Tensor], prefix: str = "adam.") -> AdamState:
    st = AdamState()
    if f"{prefix}step" in tensors:
        st.step = int(tensors[f"{prefix}step"][0])
    for k, v in tensors.items():
        if k.startswith(f"{prefix}m."):
            st.m[k[len(prefix) + 2:]] = v.clone()
        elif k.startswith(f"{prefix}v."):
            st.v[k[len(prefix) + 2:]] = v.clone()
    return st


# -- loop -------------------------------------------------------------------

class MetricsLog:
    """Line-delimited JSON metrics file (optional) plus an in-memory copy."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **row):
        self.rows.append(row)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(row) + "\n")


def fit(modules: dict[str, nn.Module],
        step_loss: Callable[[list[int]], torch.Tensor],
        valid_loss: Callable[[], float],
        n_train: int,
        cfg: TrainConfig,
        out_dir=None,
        meta: dict | None = None,
        lr_scale: float = 1.0,
        module_lrs: dict[str, float] | None = None) -> MetricsLog:
    """Mini-batch training with Adam over the parameters of ``modules``.

    ``step_loss(batch_indices)`` returns the scalar loss of one mini-batch;
    ``valid_loss()`` the validation loss (lower is better).  Validation runs
    every ``cfg.eval_every`` steps (one epoch by default) and drives LR halving
    and early stopping; the best parameters are restored at the end and saved
    to ``out_dir/best.ckpt``.  A non-finite loss aborts training after
    restoring the last good parameters.  ``module_lrs`` gives each module its
    own initial learning rate (halving applies to all of them together).
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = {f"{m}.{n}": p for m, mod in modules.items() for n, p in mod.named_parameters()}
    groups = {m: {f"{m}.{n}": p for n, p in mod.named_parameters()} for m, mod in modules.items()}
    states = {m: AdamState() for m in modules}
    base_lrs = {m: (module_lrs or {}).get(m, cfg.initial_lr) * lr_scale for m in modules}
    lr = cfg.initial_lr * lr_scale
    factor = 1.0
    out = Path(out_dir) if out_dir else None
    mlog = MetricsLog(out / "metrics.jsonl" if out else None)
    steps_per_epoch = max(1, n_train // cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch
    max_steps = cfg.max_steps if cfg.max_steps is not None else cfg.max_epochs * steps_per_epoch

    def snapshot():
        return {k: p.detach().clone() for k, p in params.items()}

    def restore(snap):
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(snap[k])

    for mod in modules.values():
        mod.eval()
    history = [valid_loss()]
    best = snapshot()
    mlog.write(step=0, valid=history[0], lr=lr)
    step = 0
    order: list[int] = []
    t0 = time.time()
    stopped = False
    while step < max_steps and not stopped:
        if len(order) < cfg.batch_size:
            order += list(rng.permutation(n_train))
        batch, order = order[:cfg.batch_size], order[cfg.batch_size:]
        for mod in modules.values():
            mod.train()
        for p in params.values():
            p.grad = None
        loss = step_loss(batch)
        if not torch.isfinite(loss):
            restore(best)
            if out:
                save_checkpoint(out / "best.ckpt", _all_state(modules), meta)
            raise NumericError(f"loss diverged at step {step}")
        loss.backward()
        for m in modules:
            adam_step(groups[m], states[m], base_lrs[m] * factor, cfg.beta1, cfg.beta2, cfg.eps)
        step += 1
        if step % eval_every == 0 or step == max_steps:
            for mod in modules.values():
                mod.eval()
            v = valid_loss()
            history.append(v)
            if v <= min(history[:-1]):
                best = snapshot()
            decision = lr_schedule_and_stop(history, cfg.lr_halving_patience,
                                            cfg.early_stop_patience)
            lr = cfg.initial_lr * lr_scale * factor
            mlog.write(step=step, train=float(loss.detach()), valid=v, lr=lr, decision=decision)
            log.info("step %d train %.4f valid %.4f lr %.2e %s (%.0f s)", step,
                     float(loss.detach()), v, lr, decision, time.time() - t0)
            if decision == "halve_lr":
                factor /= 2
            elif decision == "stop":
                stopped = True
    restore(best)
    for mod in modules.values():
        mod.eval()
    if out:
        tensors = _all_state(modules)
        for m in modules:
            tensors.update(adam_tensors(states[m], f"adam.{m}."))
        save_checkpoint(out / "best.ckpt", tensors, meta)
    return mlog


def _all_state(modules: dict[str, nn.Module]) -> dict[str, torch.Tensor]:
    out = {}
    for name, mod in modules.items():
        out.update(module_state(mod, f"{name}."))
    return out


def batches(n: int, size: int) -> Iterable[list[int]]:
    for i in range(0, n, size):
        yield list(range(i, min(n, i + size)))


def config_meta(**configs) -> dict:
    return {k: asdict(v) if hasattr(v, "__dataclass_fields__") else v for k, v in configs.items()}
