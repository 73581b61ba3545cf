"""Model checkpoints: a zip container of TNSR records and a text manifest.

``manifest.txt`` holds ``network.<field> = value`` lines for the
configuration and ``record.<name> = d0,d1,...`` lines giving every record's
shape.  Records are named ``param/<weight>.tnsr`` or ``buffer/<stat>.tnsr``.
"""

from __future__ import annotations

import io
import zipfile
from pathlib import Path
from typing import Union

import numpy as np

from . import tnsr
from .config import ConfigError, coerce_fields, format_text, parse_text
from .network import Model, NetworkConfig, build_network
from .tensor import Tensor

MANIFEST = "manifest.txt"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _records(model: Model) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v.data for k, v in model.params.items()}
    out.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    return out


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    """Write ``model``; refuses weights or statistics that are not finite."""
    records = _records(model)
    bad = [k for k, v in records.items() if not np.all(np.isfinite(v))]
    if bad:
        raise CheckpointError(f"refusing to save non-finite values in {', '.join(bad[:3])}")
    manifest = {"format": FORMAT_VERSION}
    manifest.update({f"network.{k}": v for k, v in model.config.to_dict().items()})
    manifest.update({f"record.{k}": ",".join(str(d) for d in v.shape) or "scalar" for k, v in records.items()})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST, format_text(manifest))
        for name, arr in records.items():
            zf.writestr(name + ".tnsr", tnsr.encode(np.asarray(arr, dtype=np.float64)))
    tmp.replace(path)


def _read(path: Union[str, Path]) -> tuple[dict[str, str], dict[str, bytes]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            names = zf.namelist()
            if MANIFEST not in names:
                raise CheckpointError("checkpoint has no manifest")
            manifest = parse_text(zf.read(MANIFEST).decode("utf-8"))
            blobs = {n[: -len(".tnsr")]: zf.read(n) for n in names if n.endswith(".tnsr")}
    except (zipfile.BadZipFile, zipfile.LargeZipFile, EOFError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt or truncated checkpoint: {exc}") from None
    except ConfigError as exc:
        raise CheckpointError(f"bad manifest: {exc}") from None
    return manifest, blobs


def load_checkpoint(path: Union[str, Path]) -> Model:
    """Rebuild a model; every record must match the manifest and the configuration."""
    manifest, blobs = _read(path)
    if manifest.get("format") != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    net_raw = {k[len("network.") :]: v for k, v in manifest.items() if k.startswith("network.")}
    try:
        cfg = NetworkConfig(**coerce_fields(NetworkConfig, net_raw))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad network configuration in manifest: {exc}") from None
    shapes = {
        k[len("record.") :]: (() if v == "scalar" else tuple(int(d) for d in v.split(",")))
        for k, v in manifest.items()
        if k.startswith("record.")
    }
    template = build_network(cfg, seed=0)
    expected = {k: v.shape for k, v in _records(template).items()}
    if set(shapes) != set(expected):
        missing = sorted(set(expected) - set(shapes))
        extra = sorted(set(shapes) - set(expected))
        raise CheckpointError(f"manifest does not match the configuration (missing {missing[:3]}, extra {extra[:3]})")
    if set(blobs) != set(shapes):
        raise CheckpointError(f"records missing from container: {sorted(set(shapes) - set(blobs))[:3]}")
    arrays = {}
    for name, shape in shapes.items():
        try:
            arr = tnsr.decode(blobs[name])
        except tnsr.TnsrFormatError as exc:
            raise CheckpointError(f"record {name}: {exc}") from None
        if arr.shape != shape or shape != expected[name]:
            raise CheckpointError(f"record {name} has shape {arr.shape}, manifest says {shape}")
        arrays[name] = arr
    params = {k[len("param/") :]: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items() if k.startswith("param/")}
    buffers = {k[len("buffer/") :]: v.copy() for k, v in arrays.items() if k.startswith("buffer/")}
    return Model(cfg, params, buffers)
