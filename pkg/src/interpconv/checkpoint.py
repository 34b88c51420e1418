"""The "ICNN" container: a config echo, named float64 tensors, and a per-filter
statistics block, all little-endian.

Layout:
    magic "ICNN" | u32 version
    u32 len | config JSON (utf-8, sorted keys)
    u32 tensor count | per tensor: u16 name len, name, u8 ndim, u32 dims..., f64 data
    u32 len | stats JSON

The same container doubles as a plain tensor archive (e.g. template dumps).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .interp import InterpConv2D
from .nn.layers import Conv2D, Linear
from .nn.network import LayerSpec, Network, NetworkConfig, build_network

MAGIC = b"ICNN"
VERSION = 1


def _dump_json(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(
    path: str | Path,
    config: dict,
    tensors: dict[str, np.ndarray],
    stats: dict,
) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg = _dump_json(config)
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", a.ndim)
        blob += struct.pack(f"<{a.ndim}I", *a.shape)
        blob += a.astype("<f8").tobytes()
    st = _dump_json(stats)
    blob += struct.pack("<I", len(st)) + st
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.path}: truncated container")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, str(path))
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: bad magic, not an ICNN file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        data = np.frombuffer(r.take(8 * int(np.prod(dims, dtype=np.int64))), dtype="<f8")
        tensors[name] = data.reshape(dims).copy()
    (st_len,) = r.unpack("<I")
    stats = json.loads(r.take(st_len).decode("utf-8"))
    return config, tensors, stats


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], note: str = "") -> None:
    """Plain tensor archive in the ICNN container (used for template dumps)."""
    write_container(path, {"kind": "tensor-archive", "note": note}, tensors, {})


# ---------------------------------------------------------------------------
# network checkpoints
# ---------------------------------------------------------------------------

def network_config_to_dict(cfg: NetworkConfig) -> dict:
    return {
        "input_shape": list(cfg.input_shape),
        "loss": cfg.loss,
        "num_classes": cfg.num_classes,
        "layers": [
            {
                "kind": s.kind,
                "out_channels": s.out_channels,
                "kernel": s.kernel,
                "stride": s.stride,
                "padding": s.padding,
                "size": s.size,
                "out_features": s.out_features,
                "tau": s.tau,
                "beta": s.beta,
                "alpha": s.alpha,
            }
            for s in cfg.layers
        ],
    }


def network_config_from_dict(d: dict) -> NetworkConfig:
    return NetworkConfig(
        input_shape=tuple(d["input_shape"]),
        layers=tuple(LayerSpec(**spec) for spec in d["layers"]),
        loss=d["loss"],
        num_classes=d["num_classes"],
    )


def save_checkpoint(path: str | Path, run_config: dict, network: Network) -> None:
    config = dict(run_config)
    config["network_config"] = network_config_to_dict(network.config)
    tensors: dict[str, np.ndarray] = {}
    stats: dict = {"layers": {}}
    for i, layer in enumerate(network.layers):
        key = f"layer{i:02d}"
        if isinstance(layer, InterpConv2D):
            tensors[f"{key}.kernels"] = layer.conv.kernels
            tensors[f"{key}.bias"] = layer.conv.bias
            initialized = all(s.initialized for s in layer.states)
            if initialized:
                tensors[f"{key}.z_estimates"] = np.stack([s.z_estimates for s in layer.states])
            tensors[f"{key}.mean_px"] = np.array([s.mean_px for s in layer.states])
            tensors[f"{key}.lambda"] = np.array([s.lam for s in layer.states])
            tensors[f"{key}.max_act_mean"] = np.array(
                [-1.0 if s.max_act_mean is None else s.max_act_mean for s in layer.states]
            )
            tensors[f"{key}.category"] = np.array(
                [-1.0 if s.assigned_category is None else float(s.assigned_category) for s in layer.states]
            )
            stats["layers"][key] = {
                "kind": "interp_conv",
                "active": layer.active,
                "n": layer.n,
                "tau": layer.bank.tau,
                "beta": layer.bank.beta,
                "alpha": layer.bank.alpha,
                "gain": layer.gain,
                "n_ref": layer.states[0].n_ref if layer.states else 1,
                "ema_rate": layer.states[0].ema_rate if layer.states else 0.1,
                "lambda_coeff": layer.lambda_coeff,
                "px_mode": layer.px_mode,
                "lambda_per_filter": layer.lambda_per_filter,
                "z_initialized": initialized,
            }
        elif isinstance(layer, Conv2D):
            tensors[f"{key}.kernels"] = layer.kernels
            tensors[f"{key}.bias"] = layer.bias
        elif isinstance(layer, Linear):
            tensors[f"{key}.weight"] = layer.weight
            tensors[f"{key}.bias"] = layer.bias
    write_container(path, config, tensors, stats)


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    config, tensors, stats = read_container(path)
    if "network_config" not in config:
        raise DataError(f"{path}: no network config echo; not a training checkpoint")
    net_config = network_config_from_dict(config["network_config"])
    network = build_network(net_config, np.random.default_rng(0))
    for i, layer in enumerate(network.layers):
        key = f"layer{i:02d}"
        if isinstance(layer, InterpConv2D):
            layer.conv.kernels = tensors[f"{key}.kernels"]
            layer.conv.bias = tensors[f"{key}.bias"]
            meta = stats["layers"][key]
            layer.active = bool(meta["active"])
            layer.gain = float(meta["gain"])
            layer.lambda_coeff = float(meta["lambda_coeff"])
            layer.px_mode = meta["px_mode"]
            layer.lambda_per_filter = bool(meta["lambda_per_filter"])
            z = tensors.get(f"{key}.z_estimates")
            mean_px = tensors[f"{key}.mean_px"]
            lam = tensors[f"{key}.lambda"]
            mam = tensors[f"{key}.max_act_mean"]
            cat = tensors[f"{key}.category"]
            for fm, state in enumerate(layer.states):
                state.n_ref = int(meta["n_ref"])
                state.ema_rate = float(meta["ema_rate"])
                state.z_estimates = z[fm].copy() if z is not None else None
                state.mean_px = float(mean_px[fm])
                state.lam = float(lam[fm])
                state.max_act_mean = None if mam[fm] < 0 else float(mam[fm])
                state.assigned_category = None if cat[fm] < 0 else int(cat[fm])
        elif isinstance(layer, Conv2D):
            layer.kernels = tensors[f"{key}.kernels"]
            layer.bias = tensors[f"{key}.bias"]
        elif isinstance(layer, Linear):
            layer.weight = tensors[f"{key}.weight"]
            layer.bias = tensors[f"{key}.bias"]
    return network, config
