"""Binary checkpoint container: bit-exact round-trip of model parameters.

Layout: magic ``AFLW``, u32 format version, u32 header length, JSON header
(kind, architecture descriptor, dataset descriptor, seed, array index), raw
little-endian float64 array payloads, then a sha256 digest over everything
preceding it. The digest is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .flow import MlpVelocityField, SyntheticDataset
from .nets import Mlp
from .objectives import ClassifierFamily, NoiseAwareObjective

MAGIC = b"AFLW"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class Checkpoint:
    def __init__(self, kind: str, descriptor: dict, arrays: dict[str, np.ndarray]):
        self.kind = kind
        self.descriptor = descriptor
        self.arrays = arrays

    @property
    def seed(self):
        return self.descriptor.get("seed")


def save_checkpoint(path, kind: str, descriptor: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    index = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    header = json.dumps(
        {"kind": kind, "descriptor": descriptor, "arrays": index},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", FORMAT_VERSION, len(header))
    blob += header
    for v in arrays.values():
        blob += np.ascontiguousarray(v, dtype="<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 44 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, header_len = struct.unpack("<II", body[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(body[12:12 + header_len].decode())
    offset = 12 + header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = body[offset:offset + 8 * count]
        if len(raw) != 8 * count:
            raise CheckpointError(f"{path}: truncated array payload")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        offset += 8 * count
    return Checkpoint(header["kind"], header["descriptor"], arrays)


# ---------------------------------------------------------------------------
# model adapters


def _dataset_descriptor(dataset: SyntheticDataset) -> dict:
    return {
        "kind": dataset.kind,
        "dim": dataset.dim,
        "seed": dataset.seed,
        "n_classes": dataset.n_classes,
        "spread": dataset.spread,
        "means": None if dataset.means is None else np.asarray(dataset.means).tolist(),
    }


def dataset_from_descriptor(desc: dict) -> SyntheticDataset:
    return SyntheticDataset(kind=desc["kind"], dim=desc["dim"], seed=desc["seed"],
                            n_classes=desc["n_classes"], spread=desc["spread"],
                            means=desc["means"])


def save_flow(path, field: MlpVelocityField, dataset: SyntheticDataset,
              seed: int) -> None:
    descriptor = {
        "architecture": field.descriptor(),
        "dataset": _dataset_descriptor(dataset),
        "seed": seed,
    }
    save_checkpoint(path, "flow", descriptor, field.mlp.params.state())


def load_flow(path) -> tuple[MlpVelocityField, SyntheticDataset]:
    ck = load_checkpoint(path)
    if ck.kind != "flow":
        raise CheckpointError(f"{path}: expected a flow checkpoint, got '{ck.kind}'")
    arch = ck.descriptor["architecture"]
    mlp = Mlp.from_descriptor(arch["mlp"], ck.arrays)
    mlp.params.freeze()
    field = MlpVelocityField(mlp, arch["dim"], arch["time_width"])
    return field, dataset_from_descriptor(ck.descriptor["dataset"])


def save_classifier(path, family: ClassifierFamily, dataset: SyntheticDataset,
                    seed: int) -> None:
    descriptor = {
        "architecture": {"mlp": family.mlp.descriptor(),
                         "n_classes": family.n_classes},
        "held_out_accuracy": family.held_out_accuracy,
        "dataset": _dataset_descriptor(dataset),
        "seed": seed,
    }
    save_checkpoint(path, "clean-classifier", descriptor, family.mlp.params.state())


def load_classifier(path) -> ClassifierFamily:
    ck = load_checkpoint(path)
    if ck.kind != "clean-classifier":
        raise CheckpointError(f"{path}: expected a clean-classifier checkpoint")
    arch = ck.descriptor["architecture"]
    mlp = Mlp.from_descriptor(arch["mlp"], ck.arrays)
    mlp.params.freeze()
    return ClassifierFamily(mlp, arch["n_classes"],
                            ck.descriptor["held_out_accuracy"])


def save_noise_classifier(path, objective: NoiseAwareObjective,
                          dataset: SyntheticDataset, seed: int) -> None:
    descriptor = {
        "architecture": {"mlp": objective.mlp.descriptor(),
                         "time_width": objective.time_width},
        "accuracy_curve": {str(k): v for k, v in objective.accuracy_curve.items()},
        "dataset": _dataset_descriptor(dataset),
        "seed": seed,
    }
    save_checkpoint(path, "noise-aware-classifier", descriptor,
                    objective.mlp.params.state())


def load_noise_classifier(path, target_class: int = 0) -> NoiseAwareObjective:
    ck = load_checkpoint(path)
    if ck.kind != "noise-aware-classifier":
        raise CheckpointError(f"{path}: expected a noise-aware-classifier checkpoint")
    arch = ck.descriptor["architecture"]
    mlp = Mlp.from_descriptor(arch["mlp"], ck.arrays)
    mlp.params.freeze()
    curve = {float(k): v for k, v in ck.descriptor["accuracy_curve"].items()}
    return NoiseAwareObjective(mlp, target_class, arch["time_width"], curve)
