"""
Checkpoint archive.

A zip container with a format tag, a JSON metadata record and one ``.npy``
member per named parameter (row-major float32). Member timestamps are
fixed, so saving the same bundle twice yields identical bytes.
"""

import io
import json
import logging
import zipfile
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import ArchConfig
from .errors import ArchitectureMismatchError, CheckpointError
from .models import ModelBundle, init_bundle

logger = logging.getLogger(__name__)

FORMAT_VERSION = "flooddan-checkpoint/1"
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_COMPONENTS = ("encoder", "head", "critic")


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def _npy_bytes(tensor: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(tensor.detach().cpu().numpy().astype(np.float32)),
            allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(bundle: ModelBundle, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    components = [c for c in _COMPONENTS if getattr(bundle, c) is not None]
    metadata = {
        **bundle.metadata,
        "arch": asdict(bundle.arch),
        "station_count": bundle.station_count,
        "window_length": bundle.window_length,
        "components": components,
    }
    tmp = path.with_name(f".{path.name}.tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("FORMAT"), FORMAT_VERSION)
        zf.writestr(_member("metadata.json"),
                    json.dumps(metadata, sort_keys=True, indent=2, default=str))
        for component in components:
            for name, tensor in getattr(bundle, component).state_dict().items():
                zf.writestr(_member(f"params/{component}/{name}.npy"), _npy_bytes(tensor))
    tmp.replace(path)
    logger.info("Checkpoint saved: %s (%s)", path, ", ".join(components))
    return path


def _expect(metadata: dict, key: str, expected):
    if expected is not None and metadata.get(key) != expected:
        raise ArchitectureMismatchError(
            f"checkpoint {key}={metadata.get(key)!r} does not match expected {expected!r}", field=key
        )


def load_checkpoint(
    path: Path,
    station_count: int | None = None,
    window_length: int | None = None,
    arch: ArchConfig | None = None,
) -> ModelBundle:
    """Load a bundle, refusing (not reshaping) when metadata disagrees with the expectations given."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", field="path")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            for required in ("FORMAT", "metadata.json"):
                if required not in names:
                    raise CheckpointError(f"{path}: missing member '{required}'", field=required)
            version = zf.read("FORMAT").decode("utf-8")
            if version != FORMAT_VERSION:
                raise CheckpointError(
                    f"{path}: format '{version}' is not '{FORMAT_VERSION}'", field="format_version"
                )
            metadata = json.loads(zf.read("metadata.json"))
            arrays = {
                name[len("params/"):-len(".npy")]: np.load(io.BytesIO(zf.read(name)),
                                                           allow_pickle=False)
                for name in sorted(names)
                if name.startswith("params/")
            }
    except (zipfile.BadZipFile, zlib.error, EOFError, OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})", field="archive") from exc

    for key in ("arch", "station_count", "window_length", "components"):
        if key not in metadata:
            raise CheckpointError(f"{path}: metadata lacks '{key}'", field=key)
    try:
        stored_arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in metadata["arch"].items()})
    except TypeError as exc:
        raise CheckpointError(f"{path}: invalid arch metadata ({exc})", field="arch") from exc
    _expect(metadata, "station_count", station_count)
    _expect(metadata, "window_length", window_length)
    if arch is not None and asdict(arch) != asdict(stored_arch):
        raise ArchitectureMismatchError(f"{path}: architecture differs from the run config",
                                        field="arch")

    bundle = init_bundle(stored_arch, metadata["station_count"], metadata["window_length"], seed=0)
    for component in _COMPONENTS:
        module = getattr(bundle, component)
        if component not in metadata["components"]:
            setattr(bundle, component, None)
            continue
        state = module.state_dict()
        for name, current in state.items():
            key = f"{component}/{name}"
            if key not in arrays:
                raise CheckpointError(f"{path}: missing parameter '{key}'", field=key)
            if tuple(arrays[key].shape) != tuple(current.shape):
                raise ArchitectureMismatchError(
                    f"{path}: parameter '{key}' has shape {arrays[key].shape}, "
                    f"expected {tuple(current.shape)}",
                    field=key,
                )
            state[name] = torch.from_numpy(arrays[key].copy())
        module.load_state_dict(state)
        module.eval()

    bundle.metadata = {k: v for k, v in metadata.items()
                       if k not in ("arch", "station_count", "window_length", "components")}
    logger.info("Checkpoint loaded: %s (stage=%s)", path, bundle.metadata.get("stage", "?"))
    return bundle
