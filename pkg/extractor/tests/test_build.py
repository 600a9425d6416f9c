import json

import pytest

from iotyper_extractor.build import (BuildError, ExtractionJob, build_dataset,
                                     extract_file)
from iotyper_extractor.cli import main as extract_main

FIG1A = "a = 1\nb = 2\nc = a + b\n"


def write(tmp_path, name, source):
    path = tmp_path / name
    path.write_text(source)
    return str(path)


class TestBuildDataset:
    def test_fig1a_yields_one_tree_three_labels(self, tmp_path, capsys):
        path = write(tmp_path, "fig1a.py", FIG1A)
        job = ExtractionJob(sources=[path], out_path=str(tmp_path / "d.json"))
        ds = build_dataset(job)
        assert len(ds["trees"]) == 1
        assert ds["trees"][0]["labels"] == [
            {"scope": "<module>", "name": "a", "type": "int"},
            {"scope": "<module>", "name": "b", "type": "int"},
            {"scope": "<module>", "name": "c", "type": "int"},
        ]
        summary = capsys.readouterr().out
        assert "total AST nodes" in summary
        assert "labeled identifiers: 3" in summary

    def test_empty_job_is_an_error(self, tmp_path):
        job = ExtractionJob(sources=[], out_path=str(tmp_path / "d.json"))
        with pytest.raises(BuildError):
            build_dataset(job)

    def test_unknown_type_maps_to_object_with_count(self, tmp_path):
        source = (
            "class Thing:\n"
            "    pass\n"
            "t = Thing()\n"
        )
        path = write(tmp_path, "thing.py", source)
        extraction = extract_file(path)
        by_name = {lab["name"]: lab["type"] for lab in extraction.labels}
        assert by_name["t"] == "object"  # class instances fall back
        assert by_name["Thing"] == "type"
        assert extraction.remapped == 1

    def test_global_statement_skips_the_file(self, tmp_path, caplog):
        good = write(tmp_path, "good.py", "x = 1\n")
        bad = write(tmp_path, "bad.py",
                    "g = 0\ndef f():\n    global g\n    g = 1\n")
        job = ExtractionJob(sources=[bad, good],
                            out_path=str(tmp_path / "d.json"))
        with caplog.at_level("WARNING"):
            ds = build_dataset(job)
        assert [t["path"] for t in ds["trees"]] == [good]
        assert any("skipped" in r.message for r in caplog.records)

    def test_syntax_error_fails_before_any_execution(self, tmp_path):
        bad = write(tmp_path, "bad.py", "def broken(:\n")
        good = write(tmp_path, "good.py", "x = 1\n")
        job = ExtractionJob(sources=[good, bad],
                            out_path=str(tmp_path / "d.json"))
        with pytest.raises(Exception, match=r"bad\.py"):
            build_dataset(job)

    def test_crashing_benchmark_is_flagged_but_kept(self, tmp_path, caplog):
        path = write(tmp_path, "crash.py",
                     "x = 'kept'\nraise SystemExit(3)\n")
        job = ExtractionJob(sources=[path],
                            out_path=str(tmp_path / "d.json"))
        with caplog.at_level("WARNING"):
            ds = build_dataset(job)
        assert len(ds["trees"]) == 1
        assert any("flagged" in r.message for r in caplog.records)


class TestCli:
    def test_extract_directory_to_dataset(self, tmp_path, capsys):
        src_dir = tmp_path / "src"
        src_dir.mkdir()
        (src_dir / "one.py").write_text(FIG1A)
        (src_dir / "two.py").write_text("s = 'hello'\nn = len(s)\n")
        out = tmp_path / "dataset.json"
        code = extract_main(["--src", str(src_dir), "--out", str(out),
                             "--timeout", "30"])
        assert code == 0
        ds = json.loads(out.read_text())
        assert len(ds["classes"]) == 21
        assert [t["path"] for t in ds["trees"]] == [
            str(src_dir / "one.py"), str(src_dir / "two.py")]

    def test_missing_src_exits_1(self, tmp_path, capsys):
        code = extract_main(["--src", str(tmp_path / "nope"),
                             "--out", str(tmp_path / "d.json")])
        assert code == 1
