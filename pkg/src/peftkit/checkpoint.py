"""On-disk checkpoint container and run manifests.

A checkpoint is a directory holding ``manifest.json`` and one binary blob,
``tensors.bin``, of concatenated tensors. Float tensors use the
:meth:`Tensor.to_bytes` layout and 4-bit tensors the
:meth:`QuantizedMatrix.to_bytes` layout. Each manifest entry records offset,
length and CRC-64/XZ of its bytes.

Base models and adapter sets are stored in separate checkpoints so one base
can serve many adapter sets.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import crcmod
import numpy as np

from .errors import ChecksumError, DataError, UsageError
from .quantize import QuantizedMatrix
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
RUN_MANIFEST = "run_manifest.json"

# CRC-64/XZ: reflected ECMA-182 polynomial, all-ones init and final xor
_crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)


def crc64(data: bytes) -> str:
    return f"{_crc64(data):016x}"


def param_bytes(p: Tensor | QuantizedMatrix) -> bytes:
    return p.to_bytes()


def model_checksum(model) -> str:
    """CRC-64 over every base parameter, in canonical order."""
    crc = 0
    for name in model.expected_shapes():
        crc = _crc64(param_bytes(model.params[name]), crc)
    return f"{crc:016x}"


def _entry(name: str, p: Tensor | QuantizedMatrix, offset: int, raw: bytes) -> dict:
    entry = {"name": name, "dtype": "q4" if isinstance(p, QuantizedMatrix) else "f32", "shape": list(p.shape)}
    if isinstance(p, QuantizedMatrix):
        entry["block_size"] = p.block_size
    entry.update(offset=offset, length=len(raw), checksum=crc64(raw))
    return entry


def write_checkpoint(path, tensors: dict, meta: dict, force: bool = False) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} already exists (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    chunks, entries, offset = [], [], 0
    for name, p in tensors.items():
        raw = param_bytes(p)
        entries.append(_entry(name, p, offset, raw))
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, **meta, "tensors": entries}
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return (manifest, name -> Tensor | QuantizedMatrix), verifying checksums."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"{path}: not a checkpoint ({e.filename} missing)") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: corrupt manifest ({e})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {manifest.get('format_version')}")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["length"]]
        if len(raw) != e["length"] or crc64(raw) != e["checksum"]:
            raise ChecksumError(f"{path}: checksum mismatch for tensor {e['name']}")
        if e["dtype"] == "q4":
            t = QuantizedMatrix.from_bytes(raw, e["block_size"])
        elif e["dtype"] == "f32":
            t = Tensor.from_bytes(raw)
        else:
            raise DataError(f"{path}: unknown dtype {e['dtype']!r} for {e['name']}")
        if list(t.shape) != list(e["shape"]):
            raise DataError(f"{path}: tensor {e['name']} shape {t.shape} disagrees with manifest {e['shape']}")
        tensors[e["name"]] = t
    return manifest, tensors


# -- models ---------------------------------------------------------------


def save_model(model, path, force: bool = False) -> Path:
    tensors = {name: model.params[name] for name in model.expected_shapes()}
    return write_checkpoint(path, tensors, {"kind": "model", "config": model.config.to_dict()}, force)


def load_model(path):
    from .model import TransformerConfig, TransformerModel

    manifest, tensors = read_checkpoint(path)
    if manifest.get("kind") != "model":
        raise DataError(f"{path}: expected a model checkpoint, found {manifest.get('kind')!r}")
    return TransformerModel(TransformerConfig.from_dict(manifest["config"]), tensors)


# -- adapters -------------------------------------------------------------


def save_adapters(peft, path, base_checksum: str = "", force: bool = False) -> Path:
    from .peft import LoraAdapter, PrefixAdapter

    sites = []
    for site, ad in sorted(peft.adapters.items()):
        info = {"site_id": site}
        if isinstance(ad, LoraAdapter):
            info["scale"] = ad.scale
        elif isinstance(ad, PrefixAdapter):
            info["layer"] = ad.layer
        sites.append(info)
    meta = {"kind": "adapters", "method": peft.method, "base_mode": peft.base_mode,
            "base_checksum": base_checksum, "sites": sites}
    return write_checkpoint(path, peft.named_parameters(), meta, force)


def load_adapters(path):
    from .peft import AdapterLayer, LoraAdapter, PeftSet, PrefixAdapter

    manifest, tensors = read_checkpoint(path)
    if manifest.get("kind") != "adapters":
        raise DataError(f"{path}: expected an adapter checkpoint, found {manifest.get('kind')!r}")
    method = manifest["method"]
    peft = PeftSet(method, base_mode=manifest["base_mode"])
    for info in manifest["sites"]:
        site = info["site_id"]

        def get(name):
            try:
                t = tensors[f"{site}.{name}"]
            except KeyError:
                raise DataError(f"{path}: adapter {site} lacks tensor {name}") from None
            t.requires_grad = True
            return t

        if method == "lora":
            ad = LoraAdapter(site, get("A"), get("B"), float(info.get("scale", 1.0)))
        elif method == "adapter":
            ad = AdapterLayer(site, get("W_down"), get("W_up"))
        else:
            ad = PrefixAdapter(site, int(info["layer"]), get("P_k"), get("P_v"))
        peft.adapters[site] = ad
    peft.__post_init__()
    return peft, manifest


# -- run manifests --------------------------------------------------------


def file_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file() and p.name != RUN_MANIFEST) if path.is_dir() else [path]
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    cwd: str = ""
    code_version: str = ""
    started: str = ""
    finished: str = ""

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def now_iso() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
