"""Tests for parameter blobs, loss logs and result files."""

import json
import struct
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from apps.feature_critic.artifacts import (
    MAGIC,
    pack,
    read_json,
    read_loss_log,
    read_params,
    save_params,
    unpack,
    write_json,
    write_loss_log,
)
from apps.feature_critic.autodiff import ParamSet
from apps.feature_critic.errors import ArtifactFormatError
from apps.feature_critic.meta import LossLog


class TestParams:
    """params.bin reading and writing."""

    def setup_method(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.path = Path(self.temp_dir.name) / "run" / "params.bin"
        rng = np.random.default_rng(0)
        self.groups = {
            "theta": ParamSet(
                [("fc.weight", rng.normal(size=(4, 3))), ("fc.bias", np.zeros((1, 3)))]
            ),
            "head/shared": ParamSet([("weight", rng.normal(size=(3, 2)))]),
        }

    def teardown_method(self):
        self.temp_dir.cleanup()

    def test_save_and_read_are_bit_exact(self):
        params = pack(self.groups)
        save_params(self.path, params, {"method": "agg", "seed": 3})
        loaded, manifest = read_params(self.path)

        assert list(loaded) == list(params)
        assert loaded.fingerprint() == params.fingerprint()
        assert manifest["metadata"] == {"method": "agg", "seed": 3}
        assert self.path.read_bytes()[:8] == MAGIC

    def test_unpack_restores_groups(self):
        params, _ = read_params(save_params(self.path, pack(self.groups)))
        groups = unpack(params)
        assert list(groups) == ["theta", "head/shared"]
        assert list(groups["head/shared"]) == ["weight"]

    def test_unpack_needs_group_prefix(self):
        with pytest.raises(ArtifactFormatError):
            unpack(ParamSet([("weight", np.ones((1, 1)))]))

    def test_bad_magic(self):
        self.path.parent.mkdir(parents=True)
        self.path.write_bytes(b"NOTPARAM" + b"\0" * 16)
        with pytest.raises(ArtifactFormatError, match="bad magic"):
            read_params(self.path)

    def test_checksum_mismatch(self):
        save_params(self.path, pack(self.groups))
        raw = bytearray(self.path.read_bytes())
        raw[-1] ^= 0xFF
        self.path.write_bytes(bytes(raw))
        with pytest.raises(ArtifactFormatError, match="checksum"):
            read_params(self.path)

    def test_unsupported_version(self):
        save_params(self.path, pack(self.groups))
        raw = self.path.read_bytes()
        (length,) = struct.unpack("<I", raw[8:12])
        manifest = json.loads(raw[12 : 12 + length])
        manifest["version"] = 2
        header = json.dumps(manifest).encode("utf-8")
        self.path.write_bytes(
            MAGIC + struct.pack("<I", len(header)) + header + raw[12 + length :]
        )
        with pytest.raises(ArtifactFormatError, match="version"):
            read_params(self.path)


class TestLossLogFiles:
    """loss_log.csv keeps full precision."""

    def test_round_trip_precision(self):
        log = LossLog()
        log.append(0, 1.0 / 3.0, None, None)
        log.append(1, 0.1 + 0.2, 0.7071067811865476, -1e-17)
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_loss_log(Path(temp_dir) / "loss_log.csv", log.to_frame())
            frame = read_loss_log(path)
        assert frame["ce"].tolist() == [1.0 / 3.0, 0.1 + 0.2]
        assert frame["meta"].iloc[1] == -1e-17
        assert np.isnan(frame["aux"].iloc[0])

    def test_random_values_reload_bit_exactly(self):
        rng = np.random.default_rng(4)
        log = LossLog()
        for i in range(500):
            ce, aux, meta = rng.lognormal(size=2).tolist() + [rng.normal() * 1e-3]
            log.append(i, ce, aux, meta)
        expected = log.to_frame()
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_loss_log(Path(temp_dir) / "loss_log.csv", expected)
            frame = read_loss_log(path)
        for column in ("ce", "aux", "meta"):
            np.testing.assert_array_equal(frame[column], expected[column])

    def test_missing_columns(self):
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "loss_log.csv"
            pd.DataFrame({"iter": [0], "ce": [1.0]}).to_csv(path, index=False)
            with pytest.raises(ArtifactFormatError):
                read_loss_log(path)


class TestJson:
    """Result files are sorted and JSON-native."""

    def test_numpy_values_are_converted(self):
        data = {
            "seed": np.int64(2),
            "accuracy": np.float64(0.5),
            "shots": (1, 3),
            "ok": np.bool_(True),
            "matrix": np.eye(2),
        }
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_json(Path(temp_dir) / "results.json", data)
            text = path.read_text()
            loaded = read_json(path)
        assert list(json.loads(text)) == sorted(data)
        assert loaded["shots"] == [1, 3]
        assert loaded["matrix"] == [[1.0, 0.0], [0.0, 1.0]]
        assert loaded["ok"] is True
