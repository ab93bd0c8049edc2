"""Binary checkpoint format.

Layout (little-endian throughout):

    magic   5 bytes  b"ECRF1"
    version u32
    config  u32 byte length + utf-8 "key=value" lines
    count   u32 number of tensors
    tensor  u16 name length + name, u8 ndim, u32 dims..., f32 payload
    crc32   u32 over all tensor payload bytes

Tensors are stored row-major float32; save/load round-trips those bytes
exactly, so identical state always produces identical files.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataFormatError

MAGIC = b"ECRF1"
VERSION = 1


def write_checkpoint(path, tensors: dict[str, np.ndarray], config: dict[str, str]) -> None:
    payload_crc = 0
    body = bytearray()
    cfg_text = "".join(f"{k}={v}\n" for k, v in sorted(config.items())).encode()
    body += struct.pack("<I", len(cfg_text)) + cfg_text
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<I", d)
        raw = arr.tobytes()
        payload_crc = zlib.crc32(raw, payload_crc)
        body += raw
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION) + bytes(body) + struct.pack("<I", payload_crc))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise DataFormatError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")

    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config: dict[str, str] = {}
    for line in blob[off : off + cfg_len].decode().splitlines():
        key, _, value = line.partition("=")
        if key:
            config[key] = value
    off += cfg_len

    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    payload_crc = 0
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
        raw = blob[off : off + size]
        if len(raw) != size:
            raise DataFormatError("truncated tensor payload")
        payload_crc = zlib.crc32(raw, payload_crc)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        off += size
    if off + 4 > len(blob):
        raise DataFormatError("missing checksum")
    (stored_crc,) = struct.unpack_from("<I", blob, off)
    if stored_crc != payload_crc:
        raise DataFormatError("checkpoint payload checksum mismatch")
    return tensors, config


def save_model(path, net, ecrf_params=None, extra_config: dict[str, str] | None = None) -> None:
    """Persist a trained model (backbone + classifier + optional CRF layer)."""
    tensors = {name: p for name, p, _ in net.param_list()}
    config = {
        "layers": ",".join(f"{c}x{k}x{s}" for c, k, s in net.config.layers),
        "num_classes": str(net.config.num_classes),
    }
    if ecrf_params is not None:
        for name, p, _ in ecrf_params.param_list():
            tensors[name] = p
        config["ecrf.use_pairwise"] = str(int(ecrf_params.use_pairwise))
        config["ecrf.use_superpixel"] = str(int(ecrf_params.use_superpixel))
        config["ecrf.window_radius"] = "" if ecrf_params.window_radius is None else str(ecrf_params.window_radius)
        config["ecrf.pos_dim"] = str(ecrf_params.pos_dim)
        config["ecrf.input_smoothing"] = str(ecrf_params.input_smoothing)
    if extra_config:
        config.update(extra_config)
    write_checkpoint(path, tensors, config)


def load_model(path):
    """Rebuild (net, ecrf_params, config) from a checkpoint."""
    from .ecrf import EcrfParams
    from .toynet import ConvLayer, NetConfig, ToyNet

    tensors, config = read_checkpoint(path)
    layer_specs = []
    for part in config["layers"].split(","):
        c, k, s = (int(v) for v in part.split("x"))
        layer_specs.append((c, k, s))
    cfg = NetConfig(layers=layer_specs, num_classes=int(config["num_classes"]))
    conv = []
    for i, (_, _, stride) in enumerate(layer_specs):
        conv.append(
            ConvLayer(
                weight=tensors[f"conv{i}.weight"].astype(np.float64),
                bias=tensors[f"conv{i}.bias"].astype(np.float64),
                stride=stride,
            )
        )
    net = ToyNet(conv=conv, classifier=tensors["classifier.weight"].astype(np.float64), config=cfg)

    ecrf_params = None
    if "ecrf.embed_w" in tensors:
        radius = config.get("ecrf.window_radius", "")
        ecrf_params = EcrfParams(
            embed_w=tensors["ecrf.embed_w"].astype(np.float64),
            embed_b=tensors["ecrf.embed_b"].astype(np.float64),
            compat_w=tensors["ecrf.compat_w"].astype(np.float64),
            compat_b=tensors["ecrf.compat_b"].astype(np.float64).reshape(1),
            use_pairwise=bool(int(config.get("ecrf.use_pairwise", "1"))),
            use_superpixel=bool(int(config.get("ecrf.use_superpixel", "1"))),
            window_radius=None if radius == "" else int(radius),
            pos_dim=int(config.get("ecrf.pos_dim", "16")),
            input_smoothing=int(config.get("ecrf.input_smoothing", "0")),
        )
    return net, ecrf_params, config
