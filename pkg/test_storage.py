import csv
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest

import storage
from grid import Field, Grid
from kernels import KernelKind, KernelSpec, build_table, read_table


@pytest.fixture
def store(tmp_path):
    storage.ArtifactStore.open_store(tmp_path / "artifacts")
    yield storage.ArtifactStore.get_root()
    storage.ArtifactStore.close_store()


def test_root_before_open():
    with pytest.raises(RuntimeError):
        storage.ArtifactStore.get_root()


def test_open_creates_tree(store):
    for sub in ("fields", "reports", "cache"):
        assert (store / sub).is_dir()


def test_close_resets_root(tmp_path):
    storage.ArtifactStore.open_store(tmp_path)
    storage.ArtifactStore.close_store()
    assert storage.ArtifactStore.root is None


def test_relative_names_land_in_the_store(store):
    f = Field.constant(Grid(1, 8), 2.0)
    path = storage.save_field("f.bin", f)
    assert path == store / "fields" / "f.bin"
    np.testing.assert_array_equal(storage.load_field(path).values, f.values)


def test_json_field(tmp_path):
    f = Field.from_function(Grid(2, 8), lambda x: x[..., 0] * x[..., 1])
    path = storage.save_field(tmp_path / "f.json", f)
    assert path.read_text().startswith("{")
    np.testing.assert_array_equal(storage.load_field(path).values, f.values)


def test_save_table(store):
    spec = KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)
    table = build_table(spec, Grid(1, 8))
    path = storage.save_table("g.bin", table)
    np.testing.assert_array_equal(read_table(path, spec).samples, table.samples)


def test_envelope_digest():
    started = datetime(2026, 1, 1, tzinfo=timezone.utc)
    payload = {"mode": "capacity", "result": {"value": 1.25}}
    envelope = storage.build_envelope(payload, started, started + timedelta(seconds=3))
    assert envelope.metadata.payload_sha256 == storage.payload_digest(payload)
    assert envelope.metadata.duration_seconds == 3.0
    assert storage.payload_digest({"result": {"value": 1.25}, "mode": "capacity"}) == storage.payload_digest(payload)


def test_report_in_store(store):
    envelope = storage.build_envelope({"mode": "verify"}, datetime.now(timezone.utc))
    path = storage.save_report("r.json", envelope)
    assert path.parent == store / "reports"


def test_rows_csv(tmp_path):
    path = storage.save_rows_csv(tmp_path / "rows.csv", [{"sample": "0", "ratio": 1.5}, {"sample": "1", "ratio": 2.0}])
    with path.open() as handle:
        rows = list(csv.DictReader(handle))
    assert [row["ratio"] for row in rows] == ["1.5", "2.0"]


def test_histogram(tmp_path):
    path = storage.save_histogram(tmp_path / "h.dat", [1.0, 1.1, 1.2, float("inf"), float("nan"), 2.0], bins=4)
    lines = path.read_text().splitlines()
    assert lines[0] == "# bin_lo bin_hi count"
    assert len(lines) == 5
    assert sum(int(line.split()[2]) for line in lines[1:]) == 4


def test_empty_histogram(tmp_path):
    path = storage.save_histogram(tmp_path / "h.dat", [])
    assert path.read_text() == "# bin_lo bin_hi count\n"
