"""Training loop: truncated BPTT over document windows, Adam, plateau decay with
checkpoint restoration, and the binary checkpoint format."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from lrlm import lattice as lat_mod
from lrlm.backbone import DTYPE, AdamState, adam_step
from lrlm.exceptions import CheckpointVersionError, CorruptCheckpointError, DivergenceError
from lrlm.model import LRLM, PreparedDoc, lattice_nll

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    window: int = 150
    lr: float = 1e-3
    decay: float = 0.9
    batch_size: int = 1
    max_epochs: int = 20
    seed: int = 0
    patience: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# windows


def windows(prep: PreparedDoc, window: int) -> list[tuple[int, int]]:
    """Consecutive ``(lo, hi)`` ranges of roughly ``window`` positions.

    A window is stretched until its end is a cut point of the lattice, so a
    relation span is always scored whole, in the window where it starts.
    """
    cuts = prep.lattice.cut_points()
    N = prep.length
    out = []
    lo = 1
    ci = 0
    while lo <= N:
        target = min(lo + window - 1, N)
        while cuts[ci] < target:
            ci += 1
        out.append((lo, cuts[ci]))
        lo = cuts[ci] + 1
    return out


def window_lattice(prep: PreparedDoc, lo: int, hi: int, arcs) -> lat_mod.Lattice:
    shift = lo - 1
    rel = [prep.lattice.rel_arcs[j] for j in arcs]
    return lat_mod.Lattice(
        hi - lo + 1,
        [lat_mod.RelArc(a.start - shift, a.end - shift, a.edge, a.alias_index) for a in rel],
    )


def window_losses(model: LRLM, prep: PreparedDoc, window: int, state=None):
    """Yield ``(summed NLL, token count)`` per window; state is detached between windows."""
    for lo, hi in windows(prep, window):
        word_lp, rel_lp, arcs, state = model.potentials(prep, lo, hi, state)
        yield lattice_nll(word_lp, rel_lp, window_lattice(prep, lo, hi, arcs)), hi - lo + 1
        state = tuple(s.detach() for s in state)


# ---------------------------------------------------------------------------
# evaluation helper


def corpus_nll(model: LRLM, preps) -> tuple[float, int]:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for prep in preps:
            total += float(model.document_nll(prep))
            count += prep.length
    model.train(was_training)
    return total, count


def _snapshot(model: LRLM, adam: AdamState):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}, adam.clone()


def train(model: LRLM, train_docs, dev_docs, cfg: TrainConfig, dev_scorer=None, on_epoch=None):
    """Fit ``model`` in place; returns ``(model, history)`` with best-dev parameters loaded.

    ``dev_scorer(model) -> per-token NLL`` overrides the default development
    evaluation. After an epoch whose dev NLL is not strictly lower than the
    best so far, the learning rate is multiplied by ``cfg.decay`` and both the
    parameters and the optimizer state are reset to the best checkpoint.
    """
    if not train_docs or not dev_docs:
        raise ValueError("training and development corpora must be non-empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    adam = AdamState()
    lr = cfg.lr
    best_nll = math.inf
    best = _snapshot(model, adam)
    history = []
    stale = 0

    if dev_scorer is None:
        def dev_scorer(m):
            total, count = corpus_nll(m, dev_docs)
            return total / count

    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(len(train_docs))
        ep_loss, ep_tokens = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            batch = [train_docs[i] for i in order[b:b + cfg.batch_size]]
            streams = [window_losses(model, prep, cfg.window) for prep in batch]
            while streams:
                losses, tokens, alive = [], 0, []
                for stream in streams:
                    item = next(stream, None)
                    if item is None:
                        continue
                    losses.append(item[0])
                    tokens += item[1]
                    alive.append(stream)
                streams = alive
                if not losses:
                    break
                loss = torch.stack(losses).sum()
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss {value} in epoch {epoch} (documents {[p.doc.id for p in batch]}, lr {lr})"
                    )
                ep_loss += value
                ep_tokens += tokens
                grads = torch.autograd.grad(loss / tokens, params, allow_unused=True)
                adam_step(params, grads, adam, lr, cfg.beta1, cfg.beta2, cfg.eps)

        dev_nll = float(dev_scorer(model))
        improved = dev_nll < best_nll
        row = {"epoch": epoch, "train_nll": ep_loss / max(ep_tokens, 1), "dev_nll": dev_nll, "lr": lr, "improved": improved}
        history.append(row)
        logger.info("epoch %d train %.4f dev %.4f lr %.3g%s", epoch, row["train_nll"], dev_nll, lr, "" if improved else " (restored)")
        if improved:
            best_nll = dev_nll
            best = _snapshot(model, adam)
            stale = 0
        else:
            lr *= cfg.decay
            model.load_state_dict(best[0])
            adam = best[1].clone()
            stale += 1
        if on_epoch is not None:
            on_epoch(row, model)
        if cfg.patience is not None and stale >= cfg.patience:
            break

    model.load_state_dict(best[0])
    model.eval()
    return model, history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_nll", "dev_nll", "lr"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_nll"]), repr(row["dev_nll"]), repr(row["lr"])])


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LRLMCKPT"
VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


def save_checkpoint(tensors: dict, path, meta: dict | None = None) -> None:
    """Named float64 tensors behind a JSON header (names, shapes, SHA-256)."""
    table, chunks = [], []
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    payload = b"".join(chunks)
    header = json.dumps(
        {"tensors": table, "sha256": hashlib.sha256(payload).hexdigest(), "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def read_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise CorruptCheckpointError(f"{path}: file too short")
    magic, version, hlen = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {VERSION}")
    start = _PREAMBLE.size
    if len(data) < start + hlen:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = data[start + hlen:]
    expected = 8 * sum(int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    return header, payload


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    header, payload = _read(path)
    out = {}
    offset = 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        out[t["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(t["shape"]).copy()
        offset += 8 * count
    return out, header["meta"]


def model_tensors(model: torch.nn.Module, adam: AdamState | None = None, prefix="") -> dict:
    tensors = {prefix + k: v for k, v in model.state_dict().items()}
    if adam is not None and adam.exp_avg:
        tensors["optim/step"] = torch.tensor(float(adam.step), dtype=DTYPE)
        for i, (m, v) in enumerate(zip(adam.exp_avg, adam.exp_avg_sq)):
            tensors[f"optim/m/{i}"] = m
            tensors[f"optim/v/{i}"] = v
    return tensors


def restore_adam(tensors: dict) -> AdamState | None:
    if "optim/step" not in tensors:
        return None
    n = sum(1 for k in tensors if k.startswith("optim/m/"))
    return AdamState(
        int(np.asarray(tensors["optim/step"]).item()),
        [torch.from_numpy(tensors[f"optim/m/{i}"]) for i in range(n)],
        [torch.from_numpy(tensors[f"optim/v/{i}"]) for i in range(n)],
    )


def load_state(module: torch.nn.Module, tensors: dict, prefix="") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix) and not k.startswith("optim/")}
    module.load_state_dict(state)
