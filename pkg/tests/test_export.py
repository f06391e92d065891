"""
Output helpers — atomic writes, CSV and JSON tables, PGM previews
"""
import json

import numpy as np
import pandas as pd

from densitymap.export import atomic_write_bytes, pgm_bytes, to_gray8, write_csv, write_json, write_pgm


class TestAtomicWrite:
    def test_creates_parents_and_leaves_no_temp_files(self, tmp_path):
        target = tmp_path / "a" / "b" / "payload.bin"
        assert atomic_write_bytes(target, b"abc") == target
        assert target.read_bytes() == b"abc"
        assert [p.name for p in target.parent.iterdir()] == ["payload.bin"]

    def test_overwrites(self, tmp_path):
        target = tmp_path / "x.bin"
        atomic_write_bytes(target, b"first")
        atomic_write_bytes(target, b"second")
        assert target.read_bytes() == b"second"


class TestTables:
    def test_json_sorted_and_stable(self, tmp_path):
        a = write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
        b = write_json(tmp_path / "b.json", {"a": [1.5, 2], "b": 1})
        assert a.read_bytes() == b.read_bytes()
        assert json.loads(a.read_text()) == {"a": [1.5, 2], "b": 1}

    def test_csv_full_precision(self, tmp_path):
        frame = pd.DataFrame({"k": [0.1, 0.2], "power": [1.0 / 3.0, 2.0]})
        path = write_csv(tmp_path / "t.csv", frame)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,power"
        assert len(lines) == 3
        assert float(lines[1].split(",")[1]) == 1.0 / 3.0


class TestPgm:
    def test_constant_raster_is_black(self):
        np.testing.assert_array_equal(to_gray8(np.full((4, 5), 2.5)), 0)

    def test_stretch_range(self):
        gray = to_gray8(np.arange(100.0).reshape(10, 10), 0.0, 100.0)
        assert gray.dtype == np.uint8
        assert gray.min() == 0 and gray.max() == 255
        assert gray[0, 0] == 0 and gray[-1, -1] == 255

    def test_header_and_layout(self, tmp_path):
        raster = np.zeros((3, 7))
        raster[0, 6] = 1.0
        data = pgm_bytes(raster)
        header = b"P5\n7 3\n255\n"
        assert data.startswith(header)
        assert len(data) == len(header) + 21
        path = write_pgm(tmp_path / "img.pgm", raster)
        assert path.read_bytes() == data
