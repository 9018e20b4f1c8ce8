"""Self-describing checkpoints: one .npz holding 64-bit parameter values,
optimizer state, and the full resolved config and vocabulary texts, bound by
hashes that are verified on load."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class CheckpointData:
    params: dict[str, np.ndarray]
    opt_state: dict[str, dict[str, np.ndarray]]
    meta: dict

    @property
    def config_text(self) -> str:
        return self.meta["config_text"]

    @property
    def vocab_text(self) -> str:
        return self.meta["vocab_text"]

    @property
    def epoch(self) -> int:
        return self.meta["epoch"]


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    *,
    config_text: str,
    vocab_text: str,
    epoch: int,
    global_step: int = 0,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = {}
    param_names = []
    for name, param in model.named_parameters():
        arrays[f"param/{name}"] = param.detach().numpy().astype(np.float64)
        param_names.append(name)

    opt_names = []
    if optimizer is not None:
        trainable = [n for n, p in model.named_parameters() if p.requires_grad]
        state = optimizer.state_dict()["state"]
        for idx, name in enumerate(trainable):
            if idx not in state:
                continue  # no update has touched this parameter yet
            opt_names.append(name)
            entry = state[idx]
            arrays[f"opt/{name}/step"] = np.asarray(float(entry["step"]))
            arrays[f"opt/{name}/exp_avg"] = entry["exp_avg"].numpy().astype(np.float64)
            arrays[f"opt/{name}/exp_avg_sq"] = entry["exp_avg_sq"].numpy().astype(np.float64)

    meta = {
        "format": FORMAT_VERSION,
        "epoch": int(epoch),
        "global_step": int(global_step),
        "config_sha256": text_sha256(config_text),
        "vocab_sha256": text_sha256(vocab_text),
        "config_text": config_text,
        "vocab_text": vocab_text,
        "param_names": param_names,
        "opt_names": opt_names,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)

    path = Path(path)
    tmp = path.with_suffix(".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> CheckpointData:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    with np.load(path) as data:
        try:
            meta = json.loads(bytes(data["meta"]).decode())
        except Exception as exc:
            raise CheckpointError(f"checkpoint {path} has no readable metadata") from exc
        if meta.get("format") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
        if text_sha256(meta["config_text"]) != meta["config_sha256"]:
            raise CheckpointError("checkpoint config hash mismatch: file is corrupt")
        if text_sha256(meta["vocab_text"]) != meta["vocab_sha256"]:
            raise CheckpointError("checkpoint vocabulary hash mismatch: file is corrupt")
        params = {name: data[f"param/{name}"] for name in meta["param_names"]}
        opt_state = {
            name: {
                "step": data[f"opt/{name}/step"],
                "exp_avg": data[f"opt/{name}/exp_avg"],
                "exp_avg_sq": data[f"opt/{name}/exp_avg_sq"],
            }
            for name in meta["opt_names"]
        }
    return CheckpointData(params=params, opt_state=opt_state, meta=meta)


def verify_compatibility(
    data: CheckpointData, *, config_text: str | None = None, vocab_text: str | None = None
) -> None:
    """Refuse mismatched configs/vocabularies before any state is touched."""
    if config_text is not None and text_sha256(config_text) != data.meta["config_sha256"]:
        raise CheckpointError(
            "config hash mismatch: the checkpoint was produced by a different resolved config"
        )
    if vocab_text is not None and text_sha256(vocab_text) != data.meta["vocab_sha256"]:
        raise CheckpointError(
            "vocabulary hash mismatch: the checkpoint binds a different vocabulary"
        )


def restore_model(data: CheckpointData, model: torch.nn.Module) -> None:
    expected = [name for name, _ in model.named_parameters()]
    if sorted(expected) != sorted(data.params.keys()):
        raise CheckpointError("checkpoint parameters do not match the model architecture")
    state = {name: torch.from_numpy(array.copy()) for name, array in data.params.items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    leftovers = [k for k in missing if not k.endswith("causal_mask")]
    if leftovers or unexpected:
        raise CheckpointError(f"checkpoint state mismatch: missing={leftovers}")


def restore_optimizer(
    data: CheckpointData, model: torch.nn.Module, optimizer: torch.optim.Optimizer
) -> None:
    trainable = [n for n, p in model.named_parameters() if p.requires_grad]
    state = {}
    for idx, name in enumerate(trainable):
        if name not in data.opt_state:
            continue
        entry = data.opt_state[name]
        state[idx] = {
            "step": torch.tensor(float(entry["step"])),
            "exp_avg": torch.from_numpy(entry["exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(entry["exp_avg_sq"].copy()),
        }
    base = optimizer.state_dict()
    optimizer.load_state_dict({"state": state, "param_groups": base["param_groups"]})
