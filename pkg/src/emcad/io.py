"""Binary tensor files, weight bundles and the YAML run configuration.

Tensor file layout (all little-endian)::

    b"EMCT" | u16 version | u16 rank | rank x u32 dims | float32 payload

A bundle is ``b"EMCB" | u16 version | u32 manifest length | manifest JSON``
followed by one tensor file per manifest entry, in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import BinaryIO, Iterable, Union

import numpy as np
import yaml

from .decoder import Decoder, DecoderConfig, build_decoder, iter_arrays
from .tensor import ConfigError

TENSOR_MAGIC = b"EMCT"
BUNDLE_MAGIC = b"EMCB"
VERSION = 1
_F32 = np.dtype("<f4")

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A tensor, bundle or config file is malformed."""


def encode_tensor(arr) -> bytes:
    a = np.asarray(arr, dtype=_F32)
    if not 1 <= a.ndim <= 4:
        raise FormatError(f"rank must be 1..4, got {a.ndim}")
    head = TENSOR_MAGIC + struct.pack("<HH", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a).tobytes()


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def read_tensor_from(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, rank = struct.unpack("<HH", _read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if not 1 <= rank <= 4:
        raise FormatError(f"rank must be 1..4, got {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(_read_exact(f, 4 * count), dtype=_F32)
    return data.reshape(dims).astype(np.float32)


def write_tensor(path: PathLike, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        out = read_tensor_from(f)
        if f.read(1):
            raise FormatError("trailing bytes after tensor payload")
    return out


def write_bundle(path: PathLike, entries: Iterable[tuple[str, np.ndarray, str]]) -> None:
    """Write ``(name, array, kind)`` triples; ``kind`` is "param", "buffer" or "tensor"."""
    entries = list(entries)
    manifest = [{"name": n, "shape": list(np.shape(a)), "kind": k} for n, a, k in entries]
    blob = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(BUNDLE_MAGIC + struct.pack("<HI", VERSION, len(blob)) + blob)
        for _, a, _ in entries:
            f.write(encode_tensor(a))


def read_bundle(path: PathLike) -> list[tuple[str, np.ndarray, str]]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != BUNDLE_MAGIC:
            raise FormatError("bad bundle magic")
        version, n = struct.unpack("<HI", _read_exact(f, 6))
        if version != VERSION:
            raise FormatError(f"unsupported bundle version {version}")
        try:
            manifest = json.loads(_read_exact(f, n))
        except json.JSONDecodeError as e:
            raise FormatError(f"bad manifest: {e}") from None
        out = []
        for m in manifest:
            a = read_tensor_from(f)
            if list(a.shape) != m["shape"]:
                raise FormatError(f"{m['name']}: manifest shape {m['shape']} != payload {a.shape}")
            out.append((m["name"], a, m["kind"]))
        if f.read(1):
            raise FormatError("trailing bytes after bundle")
    return out


def save_decoder(path: PathLike, dec: Decoder) -> None:
    write_bundle(path, iter_arrays(dec))


def load_decoder(path: PathLike, cfg: DecoderConfig) -> Decoder:
    arrays = {name: a for name, a, _ in read_bundle(path)}
    skeleton = build_decoder(cfg, seed=0)
    expected = {name for name, _ in skeleton.named_parameters()}
    missing = expected - set(arrays)
    if missing:
        raise FormatError(f"bundle lacks parameters, e.g. {sorted(missing)[0]}")
    return skeleton.with_arrays(arrays)


def flat_parameter_vector(dec: Decoder) -> np.ndarray:
    return np.concatenate([a.reshape(-1) for _, a in dec.named_parameters()])


def save_features(path: PathLike, feats) -> None:
    write_bundle(path, [(f"x{i}", x, "tensor") for i, x in enumerate(feats, start=1)])


def load_features(path: PathLike) -> list[np.ndarray]:
    d = {name: a for name, a, _ in read_bundle(path)}
    try:
        return [d[f"x{i}"] for i in range(1, 5)]
    except KeyError as e:
        raise FormatError(f"feature bundle lacks {e.args[0]}") from None


# --- run configuration -----------------------------------------------------

@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    input_h: int = 224
    input_w: int = 224
    batch: int = 1


def _build(cls, section: dict, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"[{where}] must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**section)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(text: str) -> tuple[DecoderConfig, RunSettings]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping with 'decoder' and 'run' sections")
    unknown = set(doc) - {"decoder", "run"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    dec = doc.get("decoder") or {}
    if not isinstance(dec, dict):
        raise ConfigError("decoder section must be a mapping")
    for key in ("channels", "kernel_sizes"):
        if key in dec:
            if not isinstance(dec[key], list) or not all(isinstance(v, int) for v in dec[key]):
                raise ConfigError(f"decoder.{key} must be a list of integers")
    defaults = DecoderConfig()
    for key, value in dec.items():
        ref = getattr(defaults, key, None)
        if isinstance(ref, bool) and not isinstance(value, bool):
            raise ConfigError(f"decoder.{key} must be true or false")
        if isinstance(ref, str) and not isinstance(value, str):
            raise ConfigError(f"decoder.{key} must be a string")
        if isinstance(ref, int) and not isinstance(ref, bool) and (
                isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"decoder.{key} must be an integer")
    cfg = _build(DecoderConfig, dec, "decoder")
    run = _build(RunSettings, doc.get("run") or {}, "run")
    for name in ("seed", "input_h", "input_w", "batch"):
        if not isinstance(getattr(run, name), int):
            raise ConfigError(f"run.{name} must be an integer")
    if run.batch < 1 or run.input_h < 32 or run.input_w < 32 or run.input_h % 32 or run.input_w % 32:
        raise ConfigError("run: batch >= 1 and input dims must be positive multiples of 32")
    return cfg, run


def load_config(path: PathLike) -> tuple[DecoderConfig, RunSettings]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)


def dump_config(cfg: DecoderConfig, run: RunSettings = RunSettings()) -> str:
    dec = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    dec["channels"] = list(cfg.channels)
    dec["kernel_sizes"] = list(cfg.kernel_sizes)
    doc = {"decoder": dec, "run": {f.name: getattr(run, f.name) for f in fields(run)}}
    return yaml.safe_dump(doc, sort_keys=False)
