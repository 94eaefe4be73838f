"""Versioned binary checkpoint container with byte-stable serialization.

Layout: magic, format version, header length, JSON header (sorted keys,
compact separators), then raw little-endian array payloads in name order.
Nothing in the file depends on wall time or dict insertion order, so saving
a freshly loaded checkpoint reproduces the original file byte for byte.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SOGVGCKPT"
FORMAT_VERSION = 1


@dataclass
class CheckpointPayload:
    """Everything a run needs to continue or evaluate.

    arrays holds model parameters and optimizer state as numpy arrays;
    config/meta/rng are JSON-serializable dicts (config snapshot, dataset
    vocabulary + anchors + image size, rng stream states).
    """

    epoch: int
    global_step: int
    config: dict
    meta: dict
    rng: dict
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path: str, payload: CheckpointPayload) -> None:
    names = sorted(payload.arrays)
    entries, blobs = [], []
    for name in names:
        src = payload.arrays[name]
        # ascontiguousarray promotes 0-d to 1-d, so take the shape from the
        # source array to keep scalars round-tripping as scalars
        arr = np.ascontiguousarray(src)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(src.shape),
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
    header = {
        "epoch": payload.epoch,
        "global_step": payload.global_step,
        "config": payload.config,
        "meta": payload.meta,
        "rng": payload.rng,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<I", FORMAT_VERSION))
        handle.write(struct.pack("<Q", len(header_bytes)))
        handle.write(header_bytes)
        for blob in blobs:
            handle.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> CheckpointPayload:
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    prefix = len(MAGIC) + 4 + 8
    if len(raw) < prefix or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported, this build reads {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC) + 4)
    if len(raw) < prefix + header_len:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a malformed header: {exc}") from exc

    arrays = {}
    offset = prefix + header_len
    for entry in header["arrays"]:
        end = offset + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path} is truncated inside array {entry['name']!r}")
        arr = np.frombuffer(raw[offset:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset = end
    return CheckpointPayload(
        epoch=header["epoch"],
        global_step=header["global_step"],
        config=header["config"],
        meta=header["meta"],
        rng=header["rng"],
        arrays=arrays,
    )


def model_to_arrays(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {
        f"model.{name}": tensor.detach().cpu().numpy().copy()
        for name, tensor in model.state_dict().items()
    }


def arrays_to_model(model: torch.nn.Module, arrays: Dict[str, np.ndarray]) -> None:
    state = {}
    for name, tensor in model.state_dict().items():
        key = f"model.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        loaded = torch.from_numpy(arrays[key].copy())
        if loaded.shape != tensor.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(loaded.shape)} in the checkpoint, "
                f"model expects {tuple(tensor.shape)}"
            )
        state[name] = loaded
    model.load_state_dict(state)


_OPTIM_KEYS = ("step", "exp_avg", "exp_avg_sq")


def optimizer_to_arrays(
    optimizer: torch.optim.Optimizer, named_params: List[Tuple[str, torch.nn.Parameter]]
) -> Dict[str, np.ndarray]:
    arrays = {}
    for name, param in named_params:
        state = optimizer.state.get(param)
        if not state:
            continue
        for key in _OPTIM_KEYS:
            value = state[key]
            if isinstance(value, torch.Tensor):
                arrays[f"optim.{name}.{key}"] = value.detach().cpu().numpy().copy()
            else:
                arrays[f"optim.{name}.{key}"] = np.asarray(value, dtype=np.float64)
    return arrays


def arrays_to_optimizer(
    optimizer: torch.optim.Optimizer,
    named_params: List[Tuple[str, torch.nn.Parameter]],
    arrays: Dict[str, np.ndarray],
) -> None:
    for name, param in named_params:
        step_key = f"optim.{name}.step"
        if step_key not in arrays:
            continue
        state = {}
        for key in _OPTIM_KEYS:
            arr = arrays[f"optim.{name}.{key}"]
            if key == "step":
                state[key] = torch.tensor(float(arr.reshape(-1)[0]), dtype=torch.float32)
            else:
                state[key] = torch.from_numpy(arr.copy()).to(param.dtype)
        optimizer.state[param] = state
