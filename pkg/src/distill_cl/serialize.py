"""On-disk formats: distilled buffers, model checkpoints, run logs.

Buffers and checkpoints share one container: a UTF-8 text manifest (key=value
lines plus a table of payload slices) terminated by a `---` line, followed by
the contiguous little-endian raw payload. Round trips are bit-exact and every
payload carries a sha256 validated on read.

Run logs are canonical JSON (sorted keys, compact separators) so reruns with
the same config and seed produce identical bytes; wall-clock timings go to a
separate non-canonical sidecar.
"""

import hashlib
import json

import numpy as np
import torch

from .data import LabeledSet
from .distill import DistilledBuffer
from .errors import ChecksumError, DataFormatError, ValidationError
from .models import ConvNet, ModelSpec, build_model
from .training import RunLog, StepMetrics

_BUFFER_MAGIC = "distill-cl-buffer"
_CHECKPOINT_MAGIC = "distill-cl-checkpoint"
_SEPARATOR = b"\n---\n"

_DTYPES = {"float32": np.float32, "float64": np.float64}


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_container(path, magic, header_lines, payload: bytes):
    head = [magic, "schema=1"]
    head.extend(header_lines)
    head.append(f"payload_bytes={len(payload)}")
    head.append(f"payload_sha256={sha256_hex(payload)}")
    with open(path, "wb") as f:
        f.write("\n".join(head).encode("utf-8"))
        f.write(_SEPARATOR)
        f.write(payload)


def _read_container(path, magic):
    with open(path, "rb") as f:
        blob = f.read()
    sep = blob.find(_SEPARATOR)
    if sep < 0:
        raise DataFormatError(f"{path}: missing manifest/payload separator")
    header = blob[:sep].decode("utf-8").splitlines()
    payload = blob[sep + len(_SEPARATOR):]
    if not header or header[0] != magic:
        raise DataFormatError(f"{path}: bad magic line {header[0] if header else ''!r}")
    fields = {}
    rows = []
    for line in header[1:]:
        key, _, value = line.partition("=")
        if key in ("entry", "tensor"):
            rows.append(value)
        else:
            fields[key] = value
    if fields.get("schema") != "1":
        raise DataFormatError(f"{path}: unsupported schema {fields.get('schema')!r}")
    expected = int(fields["payload_bytes"])
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload expected {expected} bytes, got {len(payload)}"
        )
    digest = sha256_hex(payload)
    if digest != fields["payload_sha256"]:
        raise ChecksumError(
            f"{path}: payload sha256 {digest} != recorded {fields['payload_sha256']}"
        )
    return fields, rows, payload


def serialize_buffer(buffer: DistilledBuffer, path):
    """Write a buffer: entry table (step, class, count, offset, nbytes, shape,
    precision) plus the contiguous float32 payload."""
    c, h, w = buffer.image_shape
    header = [
        f"image_shape={c},{h},{w}",
        f"class_count={buffer.class_count}",
        "precision=float32",
    ]
    chunks = []
    offset = 0
    for step_id, class_id, images in buffer.entries:
        raw = np.ascontiguousarray(images, dtype="<f4").tobytes()
        header.append(f"entry={step_id},{class_id},{len(images)},{offset},{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    _write_container(path, _BUFFER_MAGIC, header, b"".join(chunks))


def deserialize_buffer(path) -> DistilledBuffer:
    fields, rows, payload = _read_container(path, _BUFFER_MAGIC)
    shape = tuple(int(v) for v in fields["image_shape"].split(","))
    if fields.get("precision", "float32") != "float32":
        raise DataFormatError(f"{path}: unsupported precision {fields.get('precision')!r}")
    buffer = DistilledBuffer(shape, int(fields["class_count"]))
    per_image = int(np.prod(shape)) * 4
    for row in rows:
        step_id, class_id, count, offset, nbytes = (int(v) for v in row.split(","))
        if nbytes != count * per_image:
            raise DataFormatError(
                f"{path}: entry ({step_id},{class_id}) declares {nbytes} bytes "
                f"for {count} images of {per_image} bytes each"
            )
        raw = payload[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise DataFormatError(
                f"{path}: entry ({step_id},{class_id}) payload truncated "
                f"(expected {nbytes}, got {len(raw)})"
            )
        images = np.frombuffer(raw, dtype="<f4").reshape((count,) + shape).copy()
        buffer.entries.append((step_id, class_id, images))
    return buffer


def checkpoint_model(model: ConvNet, path):
    """Write spec + seed + all parameter tensors; round trip is bit-exact."""
    dtype = "float64" if model.dtype == torch.float64 else "float32"
    header = [
        f"spec={json.dumps(model.spec.to_dict(), sort_keys=True)}",
        f"seed={model.seed}",
        f"dtype={dtype}",
    ]
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        arr = p.detach().numpy()
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        shape = "x".join(str(d) for d in arr.shape)
        header.append(f"tensor={name};{dtype};{shape};{offset};{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    _write_container(path, _CHECKPOINT_MAGIC, header, b"".join(chunks))


def restore_model(path, expected_spec: ModelSpec = None) -> ConvNet:
    """Rebuild a model from a checkpoint; rejects a spec mismatch when the
    caller declares the spec it expects."""
    fields, rows, payload = _read_container(path, _CHECKPOINT_MAGIC)
    spec = ModelSpec.from_dict(json.loads(fields["spec"]))
    if expected_spec is not None and spec != expected_spec:
        raise ValidationError(
            f"{path}: checkpoint spec {spec.to_dict()} != expected {expected_spec.to_dict()}"
        )
    np_dtype = _DTYPES[fields["dtype"]]
    torch_dtype = torch.float64 if fields["dtype"] == "float64" else torch.float32
    model = build_model(spec, seed=int(fields["seed"]), dtype=torch_dtype)
    named = dict(model.named_parameters())
    seen = set()
    with torch.no_grad():
        for row in rows:
            name, dtype, shape, offset, nbytes = row.split(";")
            if name not in named:
                raise DataFormatError(f"{path}: unknown tensor {name!r}")
            shape = tuple(int(d) for d in shape.split("x")) if shape else ()
            raw = payload[int(offset) : int(offset) + int(nbytes)]
            if len(raw) != int(nbytes):
                raise DataFormatError(
                    f"{path}: tensor {name} truncated (expected {nbytes}, got {len(raw)})"
                )
            arr = np.frombuffer(raw, dtype=np.dtype(np_dtype).newbyteorder("<")).reshape(shape)
            if tuple(named[name].shape) != shape:
                raise DataFormatError(
                    f"{path}: tensor {name} shape {shape} != model {tuple(named[name].shape)}"
                )
            named[name].copy_(torch.from_numpy(arr.copy()))
            seen.add(name)
    missing = set(named) - seen
    if missing:
        raise DataFormatError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    return model


def runlog_to_json(log: RunLog) -> str:
    """Canonical JSON (no wall times) for byte-stable persistence."""
    doc = {
        "schema": 1,
        "regime": log.regime,
        "master_seed": log.master_seed,
        "scenario": log.scenario,
        "config": log.config,
        "steps": [
            {
                "t": s.t,
                "model_spec_used": s.model_spec_used,
                "accuracy": s.accuracy,
                "train_flops": s.train_flops,
                "distill_flops": s.distill_flops,
                "cumulative_flops": s.cumulative_flops,
                "buffer_bytes": s.buffer_bytes,
                "grew": s.grew,
                "flags": s.flags,
            }
            for s in log.steps
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def runlog_from_json(text) -> RunLog:
    doc = json.loads(text)
    if doc.get("schema") != 1:
        raise DataFormatError(f"unsupported runlog schema {doc.get('schema')!r}")
    steps = [
        StepMetrics(
            t=s["t"],
            model_spec_used=s["model_spec_used"],
            accuracy=s["accuracy"],
            train_flops=s["train_flops"],
            distill_flops=s["distill_flops"],
            cumulative_flops=s["cumulative_flops"],
            buffer_bytes=s["buffer_bytes"],
            wall_time=0.0,
            grew=s.get("grew", False),
            flags=list(s.get("flags", [])),
        )
        for s in doc["steps"]
    ]
    return RunLog(
        scenario=doc["scenario"],
        regime=doc["regime"],
        master_seed=doc["master_seed"],
        steps=steps,
        config=doc.get("config", {}),
    )


def timings_json(logs) -> str:
    """Non-canonical sidecar with per-step wall times (not checksummed)."""
    doc = {
        log.regime: [s.wall_time for s in log.steps] for log in logs
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"
