"""Checkpoints, run configuration and metrics files.

Checkpoint layout::

    b"BASISCKP"                  8-byte magic
    uint64 little-endian         header length in bytes
    header                       UTF-8 JSON
    payload                      tensors as little-endian float64, row-major,
                                 in the order listed by header["tensors"]

Offsets are derivable from the header alone (shape products times 8).
"""

import copy
import csv
import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from .errors import CorruptHeader, InvalidConfig, TruncatedPayload, UnknownVersion
from .numkit import RNG_ALGORITHM

MAGIC = b"BASISCKP"
FORMAT_VERSION = 1
DTYPE_TAG = "<f8"
ROLES = ("U", "V", "sigma", "auxU", "auxV", "active")


def _layer_tensors(layer):
    return dict(U=layer.U, V=layer.V, sigma=layer.sigma, auxU=layer.aux_u, auxV=layer.aux_v,
                active=layer.active.astype(np.float64))


def save_checkpoint(model, path, seed=0, extra=None):
    tensors = []
    blobs = []
    for l, layer in enumerate(model.layers):
        for role, arr in _layer_tensors(layer).items():
            arr = np.ascontiguousarray(arr, dtype=DTYPE_TAG)
            tensors.append({"name": f"layers.{l}.{role}", "shape": list(arr.shape)})
            blobs.append(arr.tobytes(order="C"))
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE_TAG,
        "architecture": {
            "sizes": model.sizes,
            "activation": model.activation,
            "aux_ranks": [l.aux_rank for l in model.layers],
            "ranks": [l.rank for l in model.layers],
        },
        "active_masks": [[int(a) for a in l.active] for l in model.layers],
        "rng_algorithm": RNG_ALGORITHM,
        "seed": int(seed),
        "tensors": tensors,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def read_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    magic = fh.read(8)
    if magic != MAGIC:
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CorruptHeader(f"{path}: missing header length")
    (hlen,) = struct.unpack("<Q", raw)
    hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise CorruptHeader(f"{path}: header truncated")
    try:
        header = json.loads(hbytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeader(f"{path}: header is not valid JSON: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownVersion(f"{path}: checkpoint format version {version!r}, "
                             f"this build reads {FORMAT_VERSION}")
    if header.get("dtype") != DTYPE_TAG or "tensors" not in header:
        raise CorruptHeader(f"{path}: unsupported dtype or missing tensor table")
    return header


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, header)``."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        tensors = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            buf = fh.read(nbytes)
            if len(buf) != nbytes:
                raise TruncatedPayload(
                    f"{path}: payload truncated in tensor {t['name']!r} "
                    f"({len(buf)} of {nbytes} bytes)", tensor=t["name"])
            tensors[t["name"]] = np.frombuffer(buf, dtype=DTYPE_TAG).reshape(shape).astype(np.float64)
    arch = header["architecture"]
    layers = []
    for l in range(len(arch["sizes"]) - 1):
        try:
            g = {r: tensors[f"layers.{l}.{r}"] for r in ROLES}
        except KeyError as exc:
            raise CorruptHeader(f"{path}: missing tensor {exc.args[0]}") from None
        layers.append(mdl.BasisLinear(g["U"], g["V"], g["sigma"], g["auxU"], g["auxV"],
                                      g["active"] != 0.0))
    return mdl.MlpModel(layers, arch["activation"]), header


# -- run configuration -------------------------------------------------------

@dataclass
class ModelConfig:
    hidden: list = field(default_factory=lambda: [16, 16])
    activation: str = "tanh"
    aux_rank: int = 0


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 3
    dims: int = 8
    n: int = 512
    batch_size: int = 32


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.3
    momentum: float = 0.0
    finetune_epochs: int = 2


@dataclass
class ScheduleConfig:
    pruning_epochs: int = 8
    pruning_rounds: int = 4
    num_iter_per_epoch: int = 16
    sampling_iter_ratio: float = 0.25
    keep_ratio: float = 0.25
    gamma: float = 1.0


@dataclass
class ProbeSettings:
    # None selects the value from choose_epsilon.
    epsilon: float = None
    num_probes: int = 1
    fraction_bits: int = 23
    rel_tol: float = 0.01
    eps_max: float = 0.1


@dataclass
class BenchConfig:
    n: int = 32
    trials: int = 2000
    probes: list = field(default_factory=lambda: [1, 4, 16, 64, 256])


@dataclass
class BoundsConfig:
    trials: int = 1000
    eps: float = 0.5
    delta: float = 0.1
    n: int = 10
    bound_scale: float = 1.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    bench: BenchConfig = field(default_factory=BenchConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    policy: str = "bsi"
    seed: int = 0
    output_dir: str = "out"
    top_k: int = 3


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise InvalidConfig(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise InvalidConfig(f"unknown config key {prefix + key!r}")
        ftype = known[key].default_factory if known[key].default_factory is not dataclasses.MISSING else None
        if ftype is not None and dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, f"{prefix}{key}.")
        else:
            kwargs[key] = copy.deepcopy(value)
    return cls(**kwargs)


def config_from_dict(data):
    return _build(RunConfig, data, "")


def render_config(cfg):
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def parse_config(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def load_config(path):
    return parse_config(Path(path).read_text())


def apply_overrides(cfg, overrides):
    """Apply ``dotted.key=value`` strings; values parse as JSON, else as strings."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise InvalidConfig(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise InvalidConfig(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise InvalidConfig(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


# -- metrics -----------------------------------------------------------------

METRIC_FIELDS = ("round", "iteration", "loss", "accuracy", "active_bases_total",
                 "param_count", "wall_time_ms")
_INT_FIELDS = {"round", "iteration", "active_bases_total", "param_count", "wall_time_ms"}


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in rows:
        writer.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def write_metrics(rows, path):
    path = Path(path)
    last = None
    for r in rows:
        key = (r["round"], r["iteration"])
        if last is not None and key < last:
            raise ValueError(f"metrics rows not monotone at {key}")
        last = key
    try:
        path.write_text(metrics_csv(rows), newline="")
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{k: int(v) if k in _INT_FIELDS else float(v) for k, v in row.items()}
                for row in reader]


def write_rows_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    Path(path).write_text(buf.getvalue(), newline="")


def write_spectrum_csv(path, result):
    write_rows_csv(path, ("rank", "eigenvalue_magnitude"), result.rows())
