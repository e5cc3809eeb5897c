"""File formats: IDX, dataset CSV, checkpoints, run config, analysis CSVs.

Checkpoint layout (all integers little-endian)::

    b"PMV1" | u32 version | u32 n | n bytes of UTF-8 JSON (configs)
    | u32 tensor count | per tensor: u16 name length, name, u32 rows,
      u32 cols, rows*cols float64 | u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import contextlib
import csv
import gzip
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError, ConfigError, DataError, DimensionError, FormatError, VersionError,
)
from .models import DistanceConfig, EncoderConfig, ModelBundle
from .numeric import Param

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CKPT_MAGIC = b"PMV1"
CKPT_VERSION = 1


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataError(f"features {self.features.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, mask_or_idx, split=None) -> "LabeledDataset":
        return LabeledDataset(self.features[mask_or_idx], self.labels[mask_or_idx],
                              self.split if split is None else split)

    def restrict_classes(self, classes) -> "LabeledDataset":
        return self.subset(np.isin(self.labels, list(classes)))


def split_validation(ds: LabeledDataset, fraction: float, seed: int):
    """Stratified hold-out of ``fraction`` of every class; returns ``(train, valid)``."""
    from .numeric import make_rng

    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"valid_fraction must be in [0, 1), got {fraction}")
    rng = make_rng(seed, "valid_split")
    valid = np.zeros(len(ds), dtype=bool)
    for c in np.unique(ds.labels):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        valid[members[:int(round(fraction * len(members)))]] = True
    return ds.subset(~valid, "train"), ds.subset(valid, "valid")


@contextlib.contextmanager
def atomic_write(path, mode="w", **kwargs):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# IDX


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path):
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header at offset 0")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header, need {header} bytes, have {len(raw)}")
    shape = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(shape))
    if len(raw) < header + size:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected "
                          f"{header + size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def load_idx(images_path, labels_path, split="") -> LabeledDataset:
    """IDX images (0x803) and labels (0x801); gzip files are read transparently."""
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path}: {images.shape[0]} images but {labels_path} has "
                          f"{labels.shape[0]} labels (count field at offset 4)")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), split)


def write_idx(path, array, magic, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + array.tobytes()
    if compress:
        data = gzip.compress(data, mtime=0)
    with atomic_write(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------------------
# dataset CSV: header label,f0,f1,...


def load_csv_dataset(path, split="") -> LabeledDataset:
    labels, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise DataError(f"{path}:1: header must start with 'label'")
        width = len(header) - 1
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != width:
                raise DataError(f"{path}:{line_no}: expected {width} features, got {len(row) - 1}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
    features = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return LabeledDataset(features, np.array(labels, dtype=np.int64), split)


def write_csv_dataset(path, features, labels, prefix="f"):
    features = np.asarray(features, dtype=np.float64)
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"{prefix}{k}" for k in range(features.shape[1])])
        for y, row in zip(labels, features):
            w.writerow([int(y)] + [format(v, ".17g") for v in row])


def load_data_spec(spec: str, split="") -> LabeledDataset:
    """Resolve a data spec.

    ``path.csv`` or ``idx:IMAGES,LABELS``, optionally followed by
    ``@CLASSES`` to keep only some classes, e.g. ``idx:a.gz,b.gz@0-7`` or
    ``data.csv@8,9``.
    """
    source, _, classes = spec.partition("@")
    if source.startswith("idx:"):
        parts = source[4:].split(",")
        if len(parts) != 2:
            raise ConfigError(f"idx data spec needs IMAGES,LABELS: {spec!r}")
        ds = load_idx(parts[0], parts[1], split)
    else:
        ds = load_csv_dataset(source, split)
    if classes:
        ds = ds.restrict_classes(parse_class_list(classes))
    return ds


def parse_class_list(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(bundle: ModelBundle) -> bytes:
    meta = json.dumps(bundle.config_dict(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    tensors = list(bundle.named_parameters())
    buf.write(struct.pack("<I", len(tensors)))
    for name, p in tensors:
        encoded = name.encode("utf-8")
        rows, cols = p.shape
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(bundle: ModelBundle, path):
    data = checkpoint_bytes(bundle)
    with atomic_write(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> ModelBundle:
    return checkpoint_from_bytes(Path(path).read_bytes(), str(path))


def checkpoint_from_bytes(data: bytes, where="<bytes>") -> ModelBundle:
    if len(data) < 16:
        raise FormatError(f"{where}: truncated checkpoint ({len(data)} bytes)")
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{where}: bad magic {data[:4]!r} at offset 0")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != CKPT_VERSION:
        raise VersionError(f"{where}: unsupported checkpoint version {version} "
                           f"(this build reads {CKPT_VERSION})")
    body, stored = data[:-4], struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise ChecksumError(f"{where}: CRC32 mismatch")

    try:
        off = 8
        (meta_len,) = struct.unpack_from("<I", body, off)
        off += 4
        meta = json.loads(body[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode("utf-8")
            off += name_len
            rows, cols = struct.unpack_from("<II", body, off)
            off += 8
            n_bytes = 8 * rows * cols
            if off + n_bytes > len(body):
                raise FormatError(f"{where}: tensor {name!r} runs past end of file at offset {off}")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=rows * cols,
                                          offset=off).reshape(rows, cols).astype(np.float64)
            off += n_bytes
        if off != len(body):
            raise FormatError(f"{where}: {len(body) - off} trailing bytes at offset {off}")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{where}: malformed checkpoint ({exc})") from None

    return _bundle_from_parts(meta, tensors, where)


def _bundle_from_parts(meta, tensors, where):
    try:
        enc = meta["encoder"]
        enc_cfg = EncoderConfig(enc["input_dim"], enc["embedding_dim"], tuple(enc["hidden_dims"]),
                                enc["slope"], enc["identity_init"])
        dist_cfg = DistanceConfig(**meta["distance"])
        num_classes = int(meta["num_classes"])
        head_bias = bool(meta["head_bias"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: incomplete architecture descriptor ({exc})") from None

    def take(name, decay=True):
        if name not in tensors:
            raise DimensionError(f"{where}: missing tensor {name!r}")
        return Param(tensors.pop(name), name, decay)

    n_enc = len(enc_cfg.hidden_dims) + 1
    encoder = [(take(f"encoder.{k}.W"), take(f"encoder.{k}.b", False)) for k in range(n_enc)]
    distance = [(take(f"distance.{k}.W"), take(f"distance.{k}.b", False))
                for k in range(dist_cfg.depth + 1)]
    head_W = take("head.W")
    head_b = take("head.b", False) if head_bias else None
    if tensors:
        raise DimensionError(f"{where}: unexpected tensors {sorted(tensors)}")
    return ModelBundle(enc_cfg, dist_cfg, num_classes, encoder, distance, head_W, head_b,
                       int(meta.get("train_step", 0)), dict(meta.get("meta", {})))


# ---------------------------------------------------------------------------
# run config: flat "key = value" lines, "#" comments


def _ints(text):
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none") else float(text)


def _means(text):
    rows = [r for r in text.split(";") if r.strip()]
    return tuple(tuple(float(v) for v in r.split(",")) for r in rows)


def _floats(text):
    return tuple(float(v) for v in text.replace(" ", "").split(",") if v)


@dataclass
class RunConfig:
    """Every tunable of a run. Defaults follow the reported image-task grids."""

    # encoder
    enc_hidden: tuple = (256, 256)
    embedding_dim: int = 64
    enc_identity: bool = False
    slope: float = 0.01
    # distance model
    dist_depth: int = 3
    dist_width: int = 256
    dist_dropout: float = 0.1
    head_bias: bool = True
    # losses
    aux_kind: str = "standard"
    aux_weight: float = 1.0
    label_smoothing: float = 0.1
    am_scale: float = 30.0
    am_margin: float = 0.35
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.001
    patience: int = 10
    lr_factor: float = 0.1
    grad_clip: float | None = None
    max_iterations: int = 5000
    classes_per_batch: int = 10
    examples_per_class: int = 6
    seed: int = 0
    eval_every: int = 250
    valid_trials: int = 2000
    valid_fraction: float = 0.1
    freeze_encoder: bool = False
    train_classes: tuple = ()
    # audit
    audit_pairs: int = 10000
    audit_triplets: int = 10000
    audit_bins: int = 20
    # synthetic Gaussian task
    oracle_means: tuple = ((1.0, 0.0), (-1.0, 0.0))
    oracle_variance: float = 1.0
    oracle_priors: tuple = ()
    oracle_negatives: str = "conditional"
    oracle_n_per_class: int = 1000
    oracle_n_mc: int = 100000
    oracle_n_pairs: int = 10000

    PARSERS = {
        "enc_hidden": _ints, "embedding_dim": int, "enc_identity": _bool, "slope": float,
        "dist_depth": int, "dist_width": int, "dist_dropout": float, "head_bias": _bool,
        "aux_kind": str.strip, "aux_weight": float, "label_smoothing": float,
        "am_scale": float, "am_margin": float, "lr": float, "momentum": float,
        "weight_decay": float, "patience": int, "lr_factor": float, "grad_clip": _opt_float,
        "max_iterations": int, "classes_per_batch": int, "examples_per_class": int,
        "seed": int, "eval_every": int, "valid_trials": int, "valid_fraction": float,
        "freeze_encoder": _bool, "train_classes": lambda t: tuple(parse_class_list(t)),
        "audit_pairs": int, "audit_triplets": int, "audit_bins": int,
        "oracle_means": _means, "oracle_variance": float, "oracle_priors": _floats,
        "oracle_negatives": str.strip, "oracle_n_per_class": int, "oracle_n_mc": int,
        "oracle_n_pairs": int,
    }

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text: str, where="<config>") -> "RunConfig":
        values = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{where}:{line_no}: expected 'key = value'")
            if key not in cls.PARSERS:
                raise ConfigError(f"{where}:{line_no}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{where}:{line_no}: duplicate key {key!r}")
            try:
                values[key] = cls.PARSERS[key](value.strip())
            except ValueError as exc:
                raise ConfigError(f"{where}:{line_no}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "oracle_means":
                text = "; ".join(",".join(repr(x) for x in row) for row in v)
            elif isinstance(v, tuple):
                text = ",".join(str(x) for x in v)
            elif v is None:
                text = "none"
            else:
                text = str(v).lower() if isinstance(v, bool) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    # builders

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        d = input_dim if self.enc_identity else self.embedding_dim
        hidden = () if self.enc_identity else self.enc_hidden
        return EncoderConfig(input_dim, d, hidden, self.slope, self.enc_identity)

    def distance_config(self, embedding_dim: int) -> DistanceConfig:
        return DistanceConfig(embedding_dim, self.dist_depth, self.dist_width, self.dist_dropout,
                              self.slope)

    def train_config(self, checkpoint_dir=None):
        from .losses import LossConfig
        from .pairing import BatchPlan
        from .trainer import TrainConfig

        loss = LossConfig(self.aux_kind, self.label_smoothing, self.am_scale, self.am_margin,
                          self.aux_weight)
        return TrainConfig(
            lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            patience=self.patience, lr_factor=self.lr_factor, grad_clip=self.grad_clip,
            max_iterations=self.max_iterations,
            plan=BatchPlan(self.classes_per_batch, self.examples_per_class), loss=loss,
            seed=self.seed, eval_every=self.eval_every, valid_trials=self.valid_trials,
            freeze_encoder=self.freeze_encoder, head_bias=self.head_bias,
            checkpoint_dir=checkpoint_dir,
        )

    def gaussian_spec(self):
        from .oracle import GaussianSpec

        priors = np.array(self.oracle_priors) if self.oracle_priors else None
        return GaussianSpec(np.array(self.oracle_means), self.oracle_variance, priors,
                            self.oracle_negatives)


# ---------------------------------------------------------------------------
# analysis CSVs


def write_trials(path, trials):
    with atomic_write(path, "w", newline="") as fh:
        fh.write("enroll_ids;test_id;label\n")
        for t in trials:
            fh.write(f"{'|'.join(str(e) for e in t.enroll_ids)};{t.test_id};{t.label}\n")


def read_trials(path):
    from .scoring import Trial

    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or (line_no == 1 and line.startswith("enroll_ids")):
                continue
            parts = line.split(";")
            if len(parts) != 3:
                raise DataError(f"{path}:{line_no}: expected 3 ';'-separated fields")
            try:
                enroll = tuple(int(e) for e in parts[0].split("|"))
                out.append(Trial(enroll, int(parts[1]), int(parts[2])))
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
    return out


def write_scores(path, scored):
    with atomic_write(path, "w", newline="") as fh:
        fh.write("enroll_ids;test_id;label;score_e2e;score_cos;score_fused\n")
        for s in scored:
            t = s.trial
            fh.write(f"{'|'.join(str(e) for e in t.enroll_ids)};{t.test_id};{t.label};"
                     f"{s.score_e2e:.17g};{s.score_cos:.17g};{s.score_fused:.17g}\n")


def write_report(path, reports: dict):
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "eer", "eer_threshold", "one_minus_auc"])
        for method, rep in reports.items():
            w.writerow([method] + [format(v, ".17g") for v in
                                   (rep.eer, rep.eer_threshold, rep.one_minus_auc)])


def write_roc(path, reports: dict):
    """Operating points of several scoring methods in one file."""
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "threshold", "far", "miss"])
        for method, rep in reports.items():
            for t, fa, mi in zip(rep.thresholds, rep.far, rep.miss):
                w.writerow([method, format(t, ".17g"), format(fa, ".17g"), format(mi, ".17g")])


def write_audit(out_dir, report):
    """One histogram CSV per property plus a summary CSV."""
    out = Path(out_dir)
    for name, stats in report.items():
        with atomic_write(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(stats.bin_edges[:-1], stats.bin_edges[1:], stats.counts):
                w.writerow([format(lo, ".17g"), format(hi, ".17g"), int(c)])
    with atomic_write(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["property", "n", "min", "median", "mean", "max", "zero_fraction"])
        for name, stats in report.items():
            s = stats.summary()
            w.writerow([name, s["n"]] + [format(s[k], ".17g") for k in
                                         ("min", "median", "mean", "max", "zero_fraction")])


def read_train_log(path):
    from .trainer import TrainLogEntry

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(TrainLogEntry(
                step=int(row["step"]), epoch=float(row["epoch"]),
                loss_pair=float(row["loss_pair"]), loss_aux=float(row["loss_aux"]),
                loss_total=float(row["loss_total"]), lr=float(row["lr"]),
                valid_eer=float(row["valid_eer"]) if row["valid_eer"] else None,
                wall_time=float(row["wall_time"]),
            ))
    return out
