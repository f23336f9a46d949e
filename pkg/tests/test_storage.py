"""File formats: losslessness, endianness, every validation error code."""

import json

import numpy as np
import pytest

from unem import storage
from unem.solver import HyperSchedule
from unem.storage import BundleFormatError, ScheduleFormatError
from unem.tasks import FeatureBundle, gmm_world, make_synthetic_bundle


def sample_bundle():
    world = gmm_world(6, 5, separation=3.0, noise=1.0, seed=3)
    return make_synthetic_bundle(world, 8, {"train": 2, "val": 2, "test": 2})


def simplex_sample():
    rng = np.random.default_rng(4)
    z = rng.dirichlet(np.ones(4), size=12).astype(np.float32)
    return FeatureBundle(
        features=z,
        labels=np.repeat(np.arange(4), 3),
        class_names=[f"c{i}" for i in range(4)],
        splits={"test": np.arange(12)},
        feature_kind="simplex",
    )


def sample_schedule(layers=4, adaptive=True):
    rng = np.random.default_rng(5)
    slots = layers if adaptive else 1
    return HyperSchedule(
        layers=layers,
        a=rng.normal(3.0, 1.0, size=slots),
        b=rng.normal(-5.0, 2.0, size=slots),
        t_z_raw=float(rng.normal()),
        adaptive=adaptive,
        feature_mode="vision_raw",
    )


class TestBundleRoundTrip:
    def test_bit_identical(self, tmp_path):
        bundle = sample_bundle()
        path = tmp_path / "b.unemfb"
        storage.write_bundle(bundle, str(path))
        back = storage.read_bundle(str(path))
        assert np.array_equal(back.features, bundle.features)
        assert np.array_equal(back.labels, bundle.labels)
        assert back.class_names == bundle.class_names
        assert back.feature_kind == bundle.feature_kind
        for tag in bundle.splits:
            assert np.array_equal(np.sort(back.splits[tag]), np.sort(bundle.splits[tag]))

    def test_write_read_write_stable_bytes(self, tmp_path):
        bundle = sample_bundle()
        p1, p2 = tmp_path / "a.fb", tmp_path / "b.fb"
        storage.write_bundle(bundle, str(p1))
        storage.write_bundle(storage.read_bundle(str(p1)), str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_simplex_round_trip(self, tmp_path):
        bundle = simplex_sample()
        path = tmp_path / "s.fb"
        storage.write_bundle(bundle, str(path))
        back = storage.read_bundle(str(path))
        assert np.array_equal(back.features, bundle.features)

    def test_noncontiguous_split_round_trip(self, tmp_path):
        bundle = sample_bundle()
        # Interleave two splits so the range map needs several entries.
        bundle.splits = {
            "train": np.concatenate([np.arange(0, 8), np.arange(16, 24)]),
            "test": np.concatenate([np.arange(8, 16), np.arange(24, 48)]),
        }
        path = tmp_path / "n.fb"
        storage.write_bundle(bundle, str(path))
        back = storage.read_bundle(str(path))
        assert np.array_equal(np.sort(back.splits["train"]), bundle.splits["train"])

    def test_little_endian_layout(self, tmp_path):
        bundle = sample_bundle()
        path = tmp_path / "e.fb"
        storage.write_bundle(bundle, str(path))
        blob = path.read_bytes()
        assert blob.startswith(b"UNEMFB01")
        header_len = int.from_bytes(blob[8:12], "little")
        header = json.loads(blob[12 : 12 + header_len])
        assert header["n_samples"] == 48
        first = np.frombuffer(blob, dtype="<f4", count=1, offset=12 + header_len)[0]
        assert first == bundle.features[0, 0]


class TestBundleErrors:
    def write_blob(self, tmp_path):
        path = tmp_path / "x.fb"
        storage.write_bundle(sample_bundle(), str(path))
        return path, bytearray(path.read_bytes())

    def expect_code(self, tmp_path, blob, code):
        bad = tmp_path / "bad.fb"
        bad.write_bytes(bytes(blob))
        with pytest.raises(BundleFormatError) as info:
            storage.read_bundle(str(bad))
        assert info.value.code == code

    def test_magic(self, tmp_path):
        _, blob = self.write_blob(tmp_path)
        blob[0] = ord("X")
        self.expect_code(tmp_path, blob, "magic")

    def test_truncated_tail(self, tmp_path):
        _, blob = self.write_blob(tmp_path)
        self.expect_code(tmp_path, blob[:-4], "truncated")

    def test_truncated_prefix(self, tmp_path):
        self.expect_code(tmp_path, b"UNEMFB01", "truncated")

    def test_header_garbage(self, tmp_path):
        _, blob = self.write_blob(tmp_path)
        blob[12] = ord("!")
        self.expect_code(tmp_path, blob, "header")

    def test_header_missing_field(self, tmp_path):
        path, blob = self.write_blob(tmp_path)
        header_len = int.from_bytes(blob[8:12], "little")
        header = json.loads(bytes(blob[12 : 12 + header_len]))
        del header["dim"]
        new_header = json.dumps(header).encode()
        out = (
            bytes(blob[:8])
            + len(new_header).to_bytes(4, "little")
            + new_header
            + bytes(blob[12 + header_len :])
        )
        self.expect_code(tmp_path, out, "header")

    def test_label_range(self, tmp_path):
        path, blob = self.write_blob(tmp_path)
        # Labels are the trailing u32 block; set the last one out of range.
        blob[-4:] = (1000).to_bytes(4, "little")
        self.expect_code(tmp_path, blob, "label_range")

    def test_simplex_violation(self, tmp_path):
        path = tmp_path / "s.fb"
        storage.write_bundle(simplex_sample(), str(path))
        blob = bytearray(path.read_bytes())
        header_len = int.from_bytes(blob[8:12], "little")
        payload_at = 12 + header_len
        blob[payload_at : payload_at + 4] = np.array([9.0], dtype="<f4").tobytes()
        self.expect_code(tmp_path, blob, "simplex")

    def test_write_rejects_bad_labels(self, tmp_path):
        bundle = sample_bundle()
        bundle.labels = bundle.labels.copy()
        bundle.labels[0] = 99
        with pytest.raises(BundleFormatError) as info:
            storage.write_bundle(bundle, str(tmp_path / "w.fb"))
        assert info.value.code == "label_range"


class TestScheduleRoundTrip:
    def test_derived_values_survive(self, tmp_path):
        sched = sample_schedule()
        path = tmp_path / "s.json"
        storage.write_schedule(str(path), sched, "gaussian", {"seed": 7})
        back, model, prov = storage.read_schedule(str(path))
        assert model == "gaussian"
        assert prov == {"seed": 7}
        # Raw parameters round-trip exactly through 17-digit decimal, so the
        # derived values match to the last bit.
        assert np.array_equal(back.a, sched.a)
        assert np.array_equal(back.b, sched.b)
        assert back.t_z_raw == sched.t_z_raw
        assert np.max(np.abs(back.balances() - sched.balances())) == 0.0
        assert np.max(np.abs(back.temps() - sched.temps())) == 0.0

    def test_broadcast_accepted(self, tmp_path):
        sched = sample_schedule(layers=9, adaptive=False)
        path = tmp_path / "f.json"
        storage.write_schedule(str(path), sched, "dirichlet")
        back, _, _ = storage.read_schedule(str(path))
        assert back.layers == 9
        assert len(back.a) == 1
        assert back.balance(8) == sched.balance(0)

    def test_awkward_floats_round_trip(self, tmp_path):
        sched = HyperSchedule(
            layers=2,
            a=np.array([0.1, 1e-15]),
            b=np.array([-1e10, np.pi]),
            t_z_raw=2.0 / 3.0,
        )
        path = tmp_path / "a.json"
        storage.write_schedule(str(path), sched, "gaussian")
        back, _, _ = storage.read_schedule(str(path))
        assert np.array_equal(back.a, sched.a)
        assert np.array_equal(back.b, sched.b)
        assert back.t_z_raw == sched.t_z_raw


class TestScheduleErrors:
    def write_doc(self, tmp_path, mutate):
        sched = sample_schedule(layers=3)
        path = tmp_path / "s.json"
        storage.write_schedule(str(path), sched, "gaussian")
        doc = json.loads(path.read_text())
        mutate(doc)
        path.write_text(json.dumps(doc))
        return path

    def expect_code(self, path, code):
        with pytest.raises(ScheduleFormatError) as info:
            storage.read_schedule(str(path))
        assert info.value.code == code

    def test_json_garbage(self, tmp_path):
        path = tmp_path / "g.json"
        path.write_text("{not json")
        self.expect_code(path, "json")

    def test_missing_fields(self, tmp_path):
        path = self.write_doc(tmp_path, lambda d: d.pop("a"))
        self.expect_code(path, "fields")

    def test_length_mismatch(self, tmp_path):
        path = self.write_doc(tmp_path, lambda d: d.__setitem__("a", [1.0]))
        self.expect_code(path, "length")

    def test_nonfinite_value(self, tmp_path):
        path = self.write_doc(
            tmp_path, lambda d: d.__setitem__("t_z_raw", 1e999)
        )
        self.expect_code(path, "value")


class TestTables:
    def test_task_table_layout(self, tmp_path):
        path = tmp_path / "t.csv"
        storage.write_task_table(str(path), [0, 1], [0.5, 1.0], [0.7, 0.01])
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "task_id,accuracy,loss"
        assert lines[1].startswith("0,0.5")
        assert len(lines) == 3

    def test_schedule_table_layout(self, tmp_path):
        sched = sample_schedule(layers=3)
        path = tmp_path / "s.csv"
        storage.write_schedule_table(str(path), sched)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "layer,balance,temperature"
        assert len(lines) == 4

    def test_float_cells_parse_back_exactly(self, tmp_path):
        path = tmp_path / "f.csv"
        value = 1.0 / 3.0
        storage.write_table(str(path), ("x",), [(value,)])
        cell = path.read_text().strip().split("\n")[1]
        assert float(cell) == value

    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = tmp_path / "1.csv", tmp_path / "2.csv"
        rows = [(i, float(np.sin(i))) for i in range(20)]
        storage.write_table(str(p1), ("i", "v"), rows)
        storage.write_table(str(p2), ("i", "v"), rows)
        assert p1.read_bytes() == p2.read_bytes()
