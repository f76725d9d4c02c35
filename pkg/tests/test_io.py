import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probemb import io
from probemb.errors import ParseError, SchemaError
from probemb.gauss import GaussianEmbedding

HEADER = '{"format": "probemb.embeddings", "version": "1.0"}\n'


def sample(n=4, dim=3, seed=0):
    gen = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mod = "image" if i % 2 else "text"
        out.append(GaussianEmbedding.normalized_from(gen.normal(size=dim),
                                                     gen.uniform(-12, 1, dim),
                                                     id=f"e{i}", modality=mod))
    return out


def write(tmp_path, text, name="x.jsonl"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestEmbeddings:
    def test_round_trip_structure(self, tmp_path):
        embs = sample()
        io.save_embeddings(embs, tmp_path / "a.jsonl")
        back = io.load_embeddings(tmp_path / "a.jsonl")
        assert [z.id for z in back] == [z.id for z in embs]
        for a, b in zip(embs, back):
            assert np.array_equal(a.mu, b.mu) and np.array_equal(a.log_var, b.log_var)
            assert a.modality == b.modality and a.normalized == b.normalized

    def test_round_trip_bytes(self, tmp_path):
        entry = io.save_embeddings(sample(), tmp_path / "a.jsonl")
        io.save_embeddings(io.load_embeddings(tmp_path / "a.jsonl"), tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert entry["sha256"] == io.sha256_file(tmp_path / "b.jsonl")
        assert entry["records"] == 4

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6))
    def test_float_round_trip(self, tmp_path_factory, values):
        d = tmp_path_factory.mktemp("rt")
        z = GaussianEmbedding(values, values, id="v", modality="text")
        io.save_embeddings([z], d / "v.jsonl")
        back = io.load_embeddings(d / "v.jsonl")[0]
        assert np.array_equal(back.mu, z.mu) and np.array_equal(back.log_var, z.log_var)

    def test_empty_file(self, tmp_path):
        assert io.load_embeddings(write(tmp_path, "")) == []

    def test_header_only(self, tmp_path):
        assert io.load_embeddings(write(tmp_path, HEADER)) == []

    def test_length_mismatch_names_line(self, tmp_path):
        rec = {"id": "a", "mu": [1.0, 0.0], "log_var": [0.0], "normalized": False,
               "modality": "image"}
        good = {"id": "b", "mu": [1.0], "log_var": [0.0], "normalized": False, "modality": "text"}
        p = write(tmp_path, HEADER + json.dumps(good) + "\n" + json.dumps(rec) + "\n")
        with pytest.raises(SchemaError) as exc:
            io.load_embeddings(p)
        assert exc.value.line == 3
        assert "line 3" in str(exc.value)

    def test_malformed_json(self, tmp_path):
        with pytest.raises(ParseError) as exc:
            io.load_embeddings(write(tmp_path, HEADER + "{not json\n"))
        assert exc.value.line == 2

    def test_missing_header(self, tmp_path):
        rec = {"id": "a", "mu": [1.0], "log_var": [0.0], "normalized": False, "modality": "text"}
        with pytest.raises(SchemaError) as exc:
            io.load_embeddings(write(tmp_path, json.dumps(rec) + "\n"))
        assert exc.value.line == 1

    def test_unknown_major_version(self, tmp_path):
        p = write(tmp_path, '{"format": "probemb.embeddings", "version": "2.0"}\n')
        with pytest.raises(SchemaError):
            io.load_embeddings(p)

    def test_minor_version_accepted(self, tmp_path):
        assert io.load_embeddings(
            write(tmp_path, '{"format": "probemb.embeddings", "version": "1.7"}\n')) == []

    @pytest.mark.parametrize("patch", [{"modality": "audio"}, {"normalized": "yes"},
                                       {"mu": [1.0, 2.0]}, {"log_var": [None]}])
    def test_bad_fields(self, tmp_path, patch):
        rec = {"id": "a", "mu": [1.0], "log_var": [0.0], "normalized": False, "modality": "text"}
        rec.update(patch)
        with pytest.raises(SchemaError):
            io.load_embeddings(write(tmp_path, HEADER + json.dumps(rec) + "\n"))

    def test_normalized_flag_checked(self, tmp_path):
        rec = {"id": "a", "mu": [2.0], "log_var": [0.0], "normalized": True, "modality": "text"}
        with pytest.raises(SchemaError):
            io.load_embeddings(write(tmp_path, HEADER + json.dumps(rec) + "\n"))

    def test_mixed_dimensions(self, tmp_path):
        a = {"id": "a", "mu": [1.0], "log_var": [0.0], "normalized": False, "modality": "text"}
        b = {"id": "b", "mu": [1.0, 0.0], "log_var": [0.0, 0.0], "normalized": False,
             "modality": "text"}
        with pytest.raises(SchemaError) as exc:
            io.load_embeddings(write(tmp_path, HEADER + json.dumps(a) + "\n" + json.dumps(b) + "\n"))
        assert exc.value.line == 3

    def test_save_rejects_unknown_modality(self, tmp_path):
        with pytest.raises(SchemaError):
            io.save_embeddings([GaussianEmbedding([0.0], [0.0])], tmp_path / "x.jsonl")


class TestReports:
    def test_csv_round_trip(self, tmp_path):
        rows = [{"a": 0.1, "b": "x"}, {"a": 1e-300, "b": None}]
        io.write_csv(rows, ["a", "b"], tmp_path / "r.csv")
        back = io.read_csv(tmp_path / "r.csv")
        assert float(back[0]["a"]) == 0.1 and float(back[1]["a"]) == 1e-300
        assert back[1]["b"] == ""

    def test_json_sorted(self, tmp_path):
        io.write_json({"b": 1, "a": 2}, tmp_path / "j.json")
        assert (tmp_path / "j.json").read_text().index('"a"') < (
            tmp_path / "j.json").read_text().index('"b"')

    def test_json_rejects_nan(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_json({"x": float("nan")}, tmp_path / "j.json")

    def test_read_json_error(self, tmp_path):
        with pytest.raises(ParseError):
            io.read_json(write(tmp_path, "{", "bad.json"))


class TestManifest:
    def test_digests_verify(self, tmp_path):
        out = tmp_path / "run"
        io.save_embeddings(sample(), out / "e.jsonl")
        path = io.write_manifest(out, ["probemb", "x"], {"k": 1}, 0, [], [out / "e.jsonl"])
        status = io.verify_manifest(path)
        assert status["e.jsonl"][0] == status["e.jsonl"][1]
        (out / "e.jsonl").write_text("changed")
        recorded, now = io.verify_manifest(path)["e.jsonl"]
        assert recorded != now

    def test_output_dir(self, tmp_path, monkeypatch):
        monkeypatch.delenv(io.OUTPUT_DIR_ENV, raising=False)
        assert str(io.output_dir(None, "zsc")) == "probemb-out/zsc"
        monkeypatch.setenv(io.OUTPUT_DIR_ENV, str(tmp_path))
        assert io.output_dir(None, "zsc") == tmp_path / "zsc"
        assert str(io.output_dir("explicit", "zsc")) == "explicit"
