"""Binary model checkpoints with a JSON text header.

Layout: one UTF-8 JSON line (terminated by ``\\n``) describing version,
config, vocabularies, array descriptors and bookkeeping, followed by the
raw array payloads concatenated in descriptor order. Arrays are
little-endian IEEE-754 (``<f4``/``<f8``) or little-endian integers, so
the file rereads bitwise-identically on any platform.
"""

from __future__ import annotations

import base64
import dataclasses
import json
from dataclasses import dataclass

import numpy as np
import torch

from .config import TrainConfig
from .errors import DataError
from .model import Model
from .store import TripleStore

FORMAT_VERSION = "kgfusion-checkpoint-v1"


@dataclass
class ModelCheckpoint:
    version: str
    config: TrainConfig
    entities: list[str]
    relations: list[str]
    arrays: dict[str, np.ndarray]
    rng_state: dict | None = None
    best_valid_mrr: float | None = None

    @classmethod
    def from_model(
        cls,
        model: Model,
        rng_state: dict | None = None,
        best_valid_mrr: float | None = None,
        arrays: dict[str, np.ndarray] | None = None,
    ) -> "ModelCheckpoint":
        return cls(
            version=FORMAT_VERSION,
            config=model.config,
            entities=model.store.entities.labels,
            relations=model.store.relations.labels,
            arrays=arrays if arrays is not None else model.state_arrays(),
            rng_state=rng_state,
            best_valid_mrr=best_valid_mrr,
        )


def _dtype_tag(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f" and arr.dtype.itemsize in (4, 8):
        return f"<f{arr.dtype.itemsize}"
    if kind == "i" and arr.dtype.itemsize in (4, 8):
        return f"<i{arr.dtype.itemsize}"
    raise DataError(f"unsupported array dtype {arr.dtype}")


def save_checkpoint(path: str, ckpt: ModelCheckpoint) -> None:
    descriptors = []
    payloads = []
    for name in sorted(ckpt.arrays):
        arr = ckpt.arrays[name]
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr.astype(tag, copy=False))
        descriptors.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        payloads.append(data.tobytes())
    header = {
        "version": ckpt.version,
        "config": dataclasses.asdict(ckpt.config),
        "entities": ckpt.entities,
        "relations": ckpt.relations,
        "arrays": descriptors,
        "rng_state": ckpt.rng_state,
        "best_valid_mrr": ckpt.best_valid_mrr,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path: str) -> ModelCheckpoint:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: not a checkpoint file") from None
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {version!r} not supported "
            f"(expected {FORMAT_VERSION!r})"
        )
    config_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    raw_cfg = {k: v for k, v in header["config"].items() if k in config_fields}
    config = TrainConfig(**raw_cfg)
    arrays = {}
    offset = 0
    for desc in header["arrays"]:
        dtype = np.dtype(desc["dtype"])
        shape = tuple(desc["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        arrays[desc["name"]] = arr.copy()
        offset += nbytes
    if offset != len(blob):
        raise DataError(f"{path}: payload size mismatch (corrupt checkpoint)")
    return ModelCheckpoint(
        version=version,
        config=config,
        entities=header["entities"],
        relations=header["relations"],
        arrays=arrays,
        rng_state=header.get("rng_state"),
        best_valid_mrr=header.get("best_valid_mrr"),
    )


def torch_rng_state_b64() -> str:
    return base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode("ascii")


def model_from_checkpoint(ckpt: ModelCheckpoint, store: TripleStore) -> Model:
    """Rebuild a model over ``store``, verifying vocabulary agreement."""
    if store.entities.labels != ckpt.entities:
        raise DataError("checkpoint entity vocabulary does not match the dataset")
    if store.relations.labels != ckpt.relations:
        raise DataError("checkpoint relation vocabulary does not match the dataset")
    model = Model(store, ckpt.config)
    model.load_state_arrays(ckpt.arrays)
    return model
