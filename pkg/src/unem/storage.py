"""File formats: feature bundles, schedule files and report tables.

The bundle format is binary: an 8-byte magic, a little-endian u32 header
length, a UTF-8 JSON header, a float32 little-endian row-major payload and
u32 little-endian labels. Schedule files are JSON with every float written
at 17 significant digits so values survive a round trip exactly. Reports
are comma-separated tables with fixed column sets, written with the same
float formatting so seeded runs reproduce files byte for byte.
"""

import json

import numpy as np

from .solver import HyperSchedule
from .tasks import FeatureBundle

BUNDLE_MAGIC = b"UNEMFB01"

# Stored simplex rows may deviate from unit sum by at most this much
# (float32 rounding of exact simplex points stays well inside).
SIMPLEX_SUM_TOL = 1e-5


class BundleFormatError(ValueError):
    """A bundle file failed validation; .code names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class ScheduleFormatError(ValueError):
    """A schedule file failed validation; .code names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


def _format_float(x: float) -> str:
    return format(float(x), ".17g")


def _emit_json(value) -> str:
    """Serialize like json.dumps but with floats at 17 significant digits."""
    if isinstance(value, dict):
        body = ", ".join(f"{json.dumps(k)}: {_emit_json(v)}" for k, v in value.items())
        return "{" + body + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_emit_json(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _format_float(value)
    return json.dumps(value)


def _contiguous_ranges(indices: np.ndarray):
    indices = np.sort(np.asarray(indices, dtype=np.int64))
    ranges = []
    start = prev = int(indices[0])
    for i in indices[1:]:
        i = int(i)
        if i == prev + 1:
            prev = i
            continue
        ranges.append((start, prev + 1))
        start = prev = i
    ranges.append((start, prev + 1))
    return ranges


def write_bundle(bundle: FeatureBundle, path: str) -> None:
    """Write a bundle; the same validation as read_bundle applies."""
    features = np.ascontiguousarray(bundle.features, dtype="<f4")
    labels = np.asarray(bundle.labels)
    n, dim = features.shape
    if len(labels) != n:
        raise BundleFormatError("truncated", "labels do not match the feature rows")
    n_classes = len(bundle.class_names)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise BundleFormatError("label_range", "labels outside [0, n_classes)")
    if bundle.feature_kind == "simplex":
        sums = features.astype(np.float64).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > SIMPLEX_SUM_TOL):
            raise BundleFormatError("simplex", "simplex rows must sum to 1")
    split_map = {}
    for tag, indices in bundle.splits.items():
        for start, end in _contiguous_ranges(indices):
            split_map[f"{start}:{end}"] = tag
    header = {
        "n_samples": int(n),
        "dim": int(dim),
        "n_classes": int(n_classes),
        "class_names": list(bundle.class_names),
        "splits": split_map,
        "feature_kind": bundle.feature_kind,
    }
    header_bytes = _emit_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(np.array([len(header_bytes)], dtype="<u4").tobytes())
        fh.write(header_bytes)
        fh.write(features.tobytes())
        fh.write(labels.astype("<u4").tobytes())


def read_bundle(path: str) -> FeatureBundle:
    """Read and validate a bundle file.

    Raises:
        BundleFormatError with code "magic", "header", "truncated",
        "label_range" or "simplex".
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(BUNDLE_MAGIC) + 4:
        raise BundleFormatError("truncated", "file shorter than the fixed prefix")
    if blob[: len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
        raise BundleFormatError("magic", "bad magic bytes")
    header_len = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(BUNDLE_MAGIC))[0])
    body_start = len(BUNDLE_MAGIC) + 4
    if len(blob) < body_start + header_len:
        raise BundleFormatError("truncated", "header extends past end of file")
    try:
        header = json.loads(blob[body_start : body_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleFormatError("header", f"unparsable header: {exc}") from exc
    required = ("n_samples", "dim", "n_classes", "class_names", "splits", "feature_kind")
    if not isinstance(header, dict) or any(key not in header for key in required):
        raise BundleFormatError("header", "missing required header fields")
    n, dim = int(header["n_samples"]), int(header["dim"])
    n_classes = int(header["n_classes"])
    kind = header["feature_kind"]
    if kind not in ("raw", "simplex"):
        raise BundleFormatError("header", f"unknown feature_kind {kind!r}")
    if len(header["class_names"]) != n_classes:
        raise BundleFormatError("header", "class_names do not match n_classes")
    payload_start = body_start + header_len
    expected = payload_start + 4 * n * dim + 4 * n
    if len(blob) != expected:
        raise BundleFormatError(
            "truncated", f"expected {expected} bytes total, found {len(blob)}"
        )
    features = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=payload_start)
    features = features.reshape(n, dim).copy()
    labels = np.frombuffer(
        blob, dtype="<u4", count=n, offset=payload_start + 4 * n * dim
    ).astype(np.int64)
    if np.any(labels >= n_classes):
        raise BundleFormatError("label_range", "labels outside [0, n_classes)")
    if kind == "simplex":
        sums = features.astype(np.float64).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > SIMPLEX_SUM_TOL):
            raise BundleFormatError("simplex", "simplex rows must sum to 1")
    splits = {}
    for key, tag in header["splits"].items():
        try:
            start, end = (int(part) for part in key.split(":"))
        except ValueError as exc:
            raise BundleFormatError("header", f"bad split range {key!r}") from exc
        if not (0 <= start < end <= n):
            raise BundleFormatError("header", f"split range {key!r} out of bounds")
        chunk = np.arange(start, end)
        splits[tag] = np.concatenate([splits[tag], chunk]) if tag in splits else chunk
    return FeatureBundle(
        features=features,
        labels=labels,
        class_names=list(header["class_names"]),
        splits=splits,
        feature_kind=kind,
    )


def write_schedule(
    path: str,
    schedule: HyperSchedule,
    model: str,
    provenance: "dict | None" = None,
) -> None:
    doc = {
        "model": model,
        "layers": int(schedule.layers),
        "adaptive": bool(schedule.adaptive),
        "temperature": bool(schedule.temperature),
        "feature_mode": schedule.feature_mode,
        "a": [float(v) for v in schedule.a],
        "b": [float(v) for v in schedule.b],
        "t_z_raw": float(schedule.t_z_raw),
        "provenance": provenance or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_emit_json(doc))
        fh.write("\n")


def read_schedule(path: str):
    """Read a schedule file.

    Returns:
        (HyperSchedule, model name, provenance dict)

    Raises:
        ScheduleFormatError with code "json", "fields", "length" or "value".
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScheduleFormatError("json", f"unparsable schedule file: {exc}") from exc
    required = ("model", "layers", "adaptive", "a", "b", "t_z_raw", "feature_mode")
    if not isinstance(doc, dict) or any(key not in doc for key in required):
        raise ScheduleFormatError("fields", "missing required schedule fields")
    a = np.asarray(doc["a"], dtype=np.float64)
    b = np.asarray(doc["b"], dtype=np.float64)
    expected = int(doc["layers"]) if doc["adaptive"] else 1
    if len(a) != expected or len(b) != expected:
        raise ScheduleFormatError(
            "length", f"expected {expected} raw values per array, got {len(a)}/{len(b)}"
        )
    values = np.concatenate([a, b, [doc["t_z_raw"]]])
    if not np.all(np.isfinite(values)):
        raise ScheduleFormatError("value", "schedule parameters must be finite")
    schedule = HyperSchedule(
        layers=int(doc["layers"]),
        a=a,
        b=b,
        t_z_raw=float(doc["t_z_raw"]),
        adaptive=bool(doc["adaptive"]),
        temperature=bool(doc.get("temperature", True)),
        feature_mode=doc["feature_mode"],
    )
    return schedule, doc["model"], doc.get("provenance", {})


def write_table(path: str, columns, rows) -> None:
    """Comma-separated table with deterministic float formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = [
                _format_float(cell) if isinstance(cell, float) else str(cell)
                for cell in row
            ]
            fh.write(",".join(cells) + "\n")


def write_task_table(path: str, task_ids, accuracies, losses) -> None:
    """Per-task report with the fixed column contract."""
    rows = [
        (int(i), float(acc), float(ls))
        for i, acc, ls in zip(task_ids, accuracies, losses)
    ]
    write_table(path, ("task_id", "accuracy", "loss"), rows)


def write_schedule_table(path: str, schedule: HyperSchedule) -> None:
    """Per-layer dump of the effective balance and temperature values."""
    rows = [
        (layer, float(schedule.balance(layer)), float(schedule.temp(layer)))
        for layer in range(schedule.layers)
    ]
    write_table(path, ("layer", "balance", "temperature"), rows)
