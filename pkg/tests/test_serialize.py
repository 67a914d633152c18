import numpy as np
import pytest
import torch

from distill_cl import (
    DistillConfig,
    DistilledBuffer,
    append_step,
    build_model,
    checkpoint_model,
    deserialize_buffer,
    forward,
    init_synthetic,
    restore_model,
    serialize_buffer,
)
from distill_cl.errors import ChecksumError, DataFormatError, ValidationError
from distill_cl.models import convnet_spec
from distill_cl.serialize import runlog_from_json, runlog_to_json

from conftest import random_set
from test_reports import make_log


@pytest.fixture
def filled_buffer(tiny_spec):
    buffer = DistilledBuffer((1, 8, 8), 3)
    cfg = DistillConfig(distill_spec=tiny_spec, ipc=2, seed=0)
    for t in (1, 2):
        append_step(buffer, t, init_synthetic(random_set(12, (1, 8, 8), 3, seed=t), cfg))
    return buffer


class TestBufferFile:
    def test_round_trip_bit_exact(self, filled_buffer, tmp_path):
        path = tmp_path / "buffer.dcbuf"
        serialize_buffer(filled_buffer, path)
        got = deserialize_buffer(path)
        assert got.image_shape == filled_buffer.image_shape
        assert got.class_count == filled_buffer.class_count
        assert len(got.entries) == len(filled_buffer.entries)
        for (s1, c1, im1), (s2, c2, im2) in zip(got.entries, filled_buffer.entries):
            assert (s1, c1) == (s2, c2)
            assert im1.tobytes() == im2.tobytes()

    def test_payload_size_formula(self, filled_buffer, tmp_path):
        path = tmp_path / "buffer.dcbuf"
        serialize_buffer(filled_buffer, path)
        blob = path.read_bytes()
        payload = blob[blob.find(b"\n---\n") + 5 :]
        assert len(payload) == filled_buffer.image_count * 1 * 8 * 8 * 4

    def test_truncated_payload_reports_byte_counts(self, filled_buffer, tmp_path):
        path = tmp_path / "buffer.dcbuf"
        serialize_buffer(filled_buffer, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-9])
        with pytest.raises(DataFormatError, match="expected \\d+ bytes, got \\d+"):
            deserialize_buffer(path)

    def test_corrupted_payload_fails_checksum(self, filled_buffer, tmp_path):
        path = tmp_path / "buffer.dcbuf"
        serialize_buffer(filled_buffer, path)
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            deserialize_buffer(path)

    def test_wrong_magic_rejected(self, filled_buffer, tmp_path):
        path = tmp_path / "buffer.dcbuf"
        serialize_buffer(filled_buffer, path)
        blob = path.read_bytes().replace(b"distill-cl-buffer", b"distill-cl-bufferX", 1)
        path.write_bytes(blob)
        with pytest.raises(DataFormatError, match="magic"):
            deserialize_buffer(path)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
    def test_round_trip_bit_exact(self, tiny_spec, tmp_path, dtype):
        model = build_model(tiny_spec, seed=7, dtype=dtype)
        path = tmp_path / "model.dcckpt"
        checkpoint_model(model, path)
        restored = restore_model(path)
        for (n, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
            assert torch.equal(a, b), n
        batch = random_set(4, (1, 8, 8), 3, seed=1)
        if dtype == torch.float32:
            assert np.array_equal(forward(model, batch), forward(restored, batch))

    def test_restore_into_wrong_spec_rejected(self, tiny_spec, tmp_path):
        model = build_model(tiny_spec, seed=0)
        path = tmp_path / "model.dcckpt"
        checkpoint_model(model, path)
        other = convnet_spec(2, (1, 9, 9), 3, width=4)
        with pytest.raises(ValidationError, match="checkpoint spec"):
            restore_model(path, expected_spec=other)

    def test_checksum_validates_payload(self, tiny_spec, tmp_path):
        model = build_model(tiny_spec, seed=0)
        path = tmp_path / "model.dcckpt"
        checkpoint_model(model, path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            restore_model(path)


class TestRunLogJson:
    def test_round_trip_preserves_all_canonical_fields(self):
        log = make_log("adaptive", [0.5, 0.75], flops_per_step=123, buffer_per_step=64)
        log.steps[1].grew = True
        log.steps[1].flags = ["ladder_exhausted"]
        text = runlog_to_json(log)
        back = runlog_from_json(text)
        assert back.regime == log.regime
        assert back.scenario == log.scenario
        assert [s.__dict__ for s in back.steps] == [
            {**s.__dict__, "wall_time": 0.0} for s in log.steps
        ]
        assert runlog_to_json(back) == text  # canonical bytes

    def test_wall_time_excluded_from_canonical_form(self):
        a = make_log("adaptive", [0.5])
        b = make_log("adaptive", [0.5])
        a.steps[0].wall_time = 1.23
        b.steps[0].wall_time = 9.87
        assert runlog_to_json(a) == runlog_to_json(b)

    def test_unsupported_schema_rejected(self):
        with pytest.raises(DataFormatError):
            runlog_from_json('{"schema": 99}')
