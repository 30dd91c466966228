"""Checkpoint archives.

A checkpoint is an uncompressed zip holding ``manifest.json`` and one
``arrays/<name>.f32`` entry per array: raw little-endian float32, shape recorded
in the manifest. Entry timestamps are pinned so identical contents give
identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .nets import SpecError, load_parameter_set, parameter_set

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_LE_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_archive(path, manifest: dict, arrays) -> Path:
    path = Path(path)
    arrays = OrderedDict(
        (name, np.ascontiguousarray(torch.as_tensor(a).detach().cpu().numpy(), dtype=_LE_F32))
        for name, a in arrays.items()
    )
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr(_entry("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
        for name, a in arrays.items():
            zf.writestr(_entry(f"arrays/{name}.f32"), a.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_archive(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: unsupported format version {manifest.get('format_version')}"
                )
            arrays = OrderedDict()
            for entry in manifest["arrays"]:
                raw = zf.read(f"arrays/{entry['name']}.f32")
                a = np.frombuffer(raw, dtype=_LE_F32).reshape(entry["shape"])
                arrays[entry["name"]] = a.copy()
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return manifest, arrays


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _builders():
    from .adversary import DiscSpec, Discriminator
    from .coarse import CoarsePainter, CpnSpec
    from .fine import FinePainter, FpnSpec

    return {
        "cpn": (CpnSpec, CoarsePainter),
        "fpn": (FpnSpec, FinePainter),
        "disc": (DiscSpec, Discriminator),
    }


def kind_of(net) -> str:
    for kind, (_, cls) in _builders().items():
        if isinstance(net, cls):
            return kind
    raise CheckpointError(f"no checkpoint kind for {type(net).__name__}")


def save_network(path, net, seed: int = 0, step: int = 0, extra: dict | None = None) -> Path:
    manifest = {
        "kind": kind_of(net),
        "spec": net.spec.to_dict(),
        "seed": seed,
        "step": step,
        "extra": extra or {},
    }
    return save_archive(path, manifest, parameter_set(net))


def load_network(path, expect: str | None = None):
    """Rebuild a network from its checkpoint; returns ``(net, manifest)``."""
    manifest, arrays = load_archive(path)
    kind = manifest.get("kind")
    builders = _builders()
    if kind not in builders or (expect is not None and kind != expect):
        raise CheckpointError(f"{path}: expected a {expect or 'network'} checkpoint, got {kind!r}")
    spec_cls, net_cls = builders[kind]
    try:
        net = net_cls(spec_cls.from_dict(manifest["spec"]))
        load_parameter_set(net, arrays)
    except SpecError as e:
        raise CheckpointError(f"{path}: spec/parameter mismatch: {e}") from e
    return net, manifest
