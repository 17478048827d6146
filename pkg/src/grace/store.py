"""Binary persistence for contrastive difference tensors and concept manifests.

File layout (all little-endian)::

    b"GRAT" | u32 version (=1) | u32 L | u32 P | u32 Q | u32 D | f32 data[L*P*Q*D]

Data is row-major over ``[layer][prompt][question][component]``.
"""

from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    FormatError,
    MissingVariantError,
    PersistenceError,
    ShapeMismatchError,
    UnsupportedVersionError,
    ValidationError,
)

MAGIC = b"GRAT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
HEADER_SIZE = _HEADER.size  # 24


class Variant(str, enum.Enum):
    PROMPT_BOUNDARY = "prompt_boundary"
    RESPONSE_AVG = "response_avg"


@dataclass(frozen=True)
class DiffTensor:
    """Difference vectors of shape ``(L, P, Q, D)`` held as float32."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValidationError(f"difference tensor must be 4-D (L, P, Q, D), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValidationError(f"difference tensor has an empty dimension: shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    @property
    def n_layers(self) -> int:
        return self.shape[0]

    @property
    def n_prompts(self) -> int:
        return self.shape[1]

    @property
    def n_questions(self) -> int:
        return self.shape[2]

    @property
    def dim(self) -> int:
        return self.shape[3]

    def as_float64(self) -> np.ndarray:
        return self.data.astype(np.float64)

    def validate(self, label: str = "tensor") -> None:
        """Raise ``ValidationError`` naming the first layer holding NaN/Inf."""
        finite = np.isfinite(self.data)
        if not finite.all():
            bad_layers = np.flatnonzero(~finite.reshape(self.n_layers, -1).all(axis=1))
            raise ValidationError(
                f"{label}: non-finite values at layer(s) {bad_layers.tolist()}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DiffTensor):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    __hash__ = None  # type: ignore[assignment]


def encode_tensor(tensor: DiffTensor) -> bytes:
    tensor.validate()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, *tensor.shape)
    return header + tensor.data.tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> DiffTensor:
    if len(buf) < HEADER_SIZE:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise FormatError(f"{source}: bad magic {buf[:4]!r}")
        raise CorruptionError(f"{source}: truncated header ({len(buf)} bytes)")
    magic, version, n_layers, n_prompts, n_questions, dim = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported format version {version}")
    dims = (n_layers, n_prompts, n_questions, dim)
    if min(dims) < 1:
        raise CorruptionError(f"{source}: header has an empty dimension {dims}")
    expected = n_layers * n_prompts * n_questions * dim
    payload = len(buf) - HEADER_SIZE
    if payload != 4 * expected:
        raise CorruptionError(
            f"{source}: header declares {expected} floats but payload holds {payload / 4:g}"
        )
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(dims)
    return DiffTensor(data)


def write_tensor(tensor: DiffTensor, path: str | Path) -> None:
    blob = encode_tensor(tensor)
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise PersistenceError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path: str | Path) -> DiffTensor:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read tensor {path}: {exc}") from exc
    return decode_tensor(buf, source=str(path))


@dataclass
class ConceptDataset:
    concept_name: str
    model_name: str
    tensors: dict[Variant, DiffTensor]
    manifest_path: Path | None = None
    notes: str | None = None
    file_digests: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.concept_name:
            raise ValidationError("concept_name must be nonempty")
        if not self.tensors:
            raise ValidationError("dataset declares no variants")
        shapes = {v: t.shape for v, t in self.tensors.items()}
        if len(set(shapes.values())) > 1:
            desc = ", ".join(f"{v.value}={s}" for v, s in shapes.items())
            raise ShapeMismatchError(f"variant shapes disagree: {desc}")

    @property
    def variants(self) -> list[Variant]:
        return [v for v in Variant if v in self.tensors]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return next(iter(self.tensors.values())).shape

    def tensor(self, variant: Variant | str) -> DiffTensor:
        variant = Variant(variant)
        try:
            return self.tensors[variant]
        except KeyError:
            raise MissingVariantError(
                f"dataset {self.concept_name!r} has no {variant.value} variant"
            ) from None


def write_dataset(
    dataset: ConceptDataset,
    directory: str | Path,
    notes: str | None = None,
) -> Path:
    """Write every variant plus ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    variants = {}
    for variant, tensor in dataset.tensors.items():
        name = f"{dataset.concept_name}.{variant.value}.grat"
        write_tensor(tensor, directory / name)
        variants[variant.value] = name
    manifest = {
        "concept_name": dataset.concept_name,
        "model_name": dataset.model_name,
        "variants": variants,
    }
    if notes or dataset.notes:
        manifest["notes"] = notes or dataset.notes
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def validate_dataset(manifest_path: str | Path) -> ConceptDataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise PersistenceError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError(f"manifest {manifest_path} must be a JSON object")
    for key in ("concept_name", "model_name", "variants"):
        if key not in manifest:
            raise ValidationError(f"manifest {manifest_path} missing field {key!r}")
    if not isinstance(manifest["variants"], dict) or not manifest["variants"]:
        raise ValidationError("manifest 'variants' must be a nonempty object")

    tensors: dict[Variant, DiffTensor] = {}
    digests: dict[str, str] = {}
    for name, rel in manifest["variants"].items():
        try:
            variant = Variant(name)
        except ValueError:
            raise ValidationError(f"unknown variant {name!r} in manifest") from None
        path = manifest_path.parent / rel
        if not path.exists():
            raise PersistenceError(f"{variant.value}: tensor file {path} does not exist")
        tensor = read_tensor(path)
        tensor.validate(label=variant.value)
        tensors[variant] = tensor
        digests[variant.value] = hashlib.sha256(path.read_bytes()).hexdigest()

    return ConceptDataset(
        concept_name=str(manifest["concept_name"]),
        model_name=str(manifest["model_name"]),
        tensors=tensors,
        manifest_path=manifest_path,
        notes=manifest.get("notes"),
        file_digests=digests,
    )
