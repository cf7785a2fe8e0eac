"""Named-tensor checkpoints: a text manifest plus one raw little-endian payload.

A checkpoint at ``path`` is two files, ``path`` (the manifest) and
``path + ".bin"`` (the payload). The manifest looks like::

    format unitprompt-checkpoint 1
    kind prompts
    meta mode deep
    payload 7680 sha256:...
    tensor input 4,64 f32 0
    tensor key.0 4,64 f32 1024
    ...

Offsets are in bytes. Both files are written atomically, and identical
inputs always produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_LINE = "format unitprompt-checkpoint 1"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * DTYPES[self.dtype].itemsize


@dataclass
class CheckpointManifest:
    kind: str
    entries: list[ManifestEntry]
    payload_size: int
    checksum: str
    meta: dict[str, str] = field(default_factory=dict)

    def render(self) -> str:
        lines = [FORMAT_LINE, f"kind {self.kind}"]
        lines += [f"meta {k} {v}" for k, v in self.meta.items()]
        lines.append(f"payload {self.payload_size} sha256:{self.checksum}")
        for e in self.entries:
            shape = ",".join(str(s) for s in e.shape) or "scalar"
            lines.append(f"tensor {e.name} {shape} {e.dtype} {e.offset}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "CheckpointManifest":
        lines = text.splitlines()
        if not lines or lines[0] != FORMAT_LINE:
            raise CheckpointError("not a unitprompt checkpoint manifest")
        kind, meta, entries = None, {}, []
        size, checksum = None, None
        for line in lines[1:]:
            if not line:
                continue
            head, _, rest = line.partition(" ")
            if head == "kind":
                kind = rest
            elif head == "meta":
                key, _, value = rest.partition(" ")
                meta[key] = value
            elif head == "payload":
                n, digest = rest.split(" ")
                size, checksum = int(n), digest.removeprefix("sha256:")
            elif head == "tensor":
                name, shape, dtype, offset = rest.split(" ")
                dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
                if dtype not in DTYPES:
                    raise CheckpointError(f"unsupported dtype {dtype!r} for {name}")
                entries.append(ManifestEntry(name, dims, dtype, int(offset)))
            else:
                raise CheckpointError(f"unrecognised manifest line: {line!r}")
        if kind is None or size is None:
            raise CheckpointError("manifest lacks kind or payload line")
        manifest = cls(kind, entries, size, checksum, meta)
        manifest.validate()
        return manifest

    def validate(self) -> None:
        pos = 0
        for e in self.entries:
            if e.offset < pos:
                raise CheckpointError(f"tensor {e.name} overlaps or is out of order (offset {e.offset})")
            pos = e.offset + e.nbytes
        if pos > self.payload_size:
            raise CheckpointError("manifest entries extend past the payload")


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def payload_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".bin")


def save_tensors(path, kind: str, tensors: dict[str, np.ndarray], meta: dict | None = None) -> CheckpointManifest:
    chunks, entries, offset = [], [], 0
    for name, arr in tensors.items():
        if " " in name:
            raise CheckpointError(f"tensor name {name!r} contains a space")
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        entries.append(ManifestEntry(name, tuple(arr.shape), code, offset))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = CheckpointManifest(kind, entries, len(payload), hashlib.sha256(payload).hexdigest(),
                                  {k: str(v) for k, v in (meta or {}).items()})
    atomic_write(payload_path(path), payload)
    atomic_write(path, manifest.render())
    return manifest


def load_tensors(path) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    manifest = CheckpointManifest.parse(Path(path).read_text(encoding="utf-8"))
    payload = payload_path(path).read_bytes()
    if len(payload) != manifest.payload_size:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest says {manifest.payload_size}")
    if hashlib.sha256(payload).hexdigest() != manifest.checksum:
        raise CheckpointError("payload checksum mismatch")
    tensors = {}
    for e in manifest.entries:
        arr = np.frombuffer(payload, dtype=DTYPES[e.dtype], count=e.nbytes // DTYPES[e.dtype].itemsize,
                            offset=e.offset)
        tensors[e.name] = arr.reshape(e.shape).astype(DTYPES[e.dtype].newbyteorder("="))
    return manifest, tensors


def checkpoint_size(path) -> int:
    return Path(path).stat().st_size + payload_path(path).stat().st_size


# --------------------------------------------------------------------------
# typed wrappers
# --------------------------------------------------------------------------


def _run_meta(extra: dict | None) -> dict:
    return {f"run.{k}": v for k, v in (extra or {}).items()}


def run_meta(manifest: CheckpointManifest) -> dict[str, str]:
    """The free-form ``run.*`` metadata stored next to the tensors."""
    return {k[4:]: v for k, v in manifest.meta.items() if k.startswith("run.")}


def save_ulm(path, ulm, extra: dict | None = None) -> None:
    from dataclasses import asdict
    save_tensors(path, "ulm", {k: t.values.astype(np.float32) for k, t in ulm.params.items()},
                 {**asdict(ulm.config), **_run_meta(extra)})


def load_ulm(path):
    from .autodiff import Tensor
    from .ulm import ULM, ULMConfig
    manifest, tensors = load_tensors(path)
    if manifest.kind != "ulm":
        raise CheckpointError(f"expected a ulm checkpoint, got {manifest.kind!r}")
    config = ULMConfig(**{k: int(v) for k, v in manifest.meta.items() if not k.startswith("run.")})
    ulm = ULM(config, {k: Tensor(v, dtype=np.float32) for k, v in tensors.items()})
    ulm.set_trainable(False)
    return ulm


def save_prompts(path, prompts, extra: dict | None = None) -> None:
    save_tensors(path, "prompts", {k: t.values.astype(np.float32) for k, t in prompts.named_tensors().items()},
                 {"mode": prompts.mode, "length": prompts.length, **_run_meta(extra)})


def load_prompts(path):
    from .prompt import PromptSet
    manifest, tensors = load_tensors(path)
    if manifest.kind != "prompts":
        raise CheckpointError(f"expected a prompts checkpoint, got {manifest.kind!r}")
    return PromptSet.from_named(manifest.meta["mode"], tensors)


def save_codebook(path, codebook) -> None:
    save_tensors(path, "codebook", {"centroids": codebook.centroids}, {"k": codebook.k})


def load_codebook(path):
    from .quantizer import Codebook
    manifest, tensors = load_tensors(path)
    if manifest.kind != "codebook":
        raise CheckpointError(f"expected a codebook checkpoint, got {manifest.kind!r}")
    return Codebook(tensors["centroids"])
