import json

import numpy as np
import pytest

from gda.eval_harness.manifest import ManifestError, load_manifest
from gda.fixtures import make_desk_fixture, write_manifest


def test_written_fixture_loads_back_exactly(tmp_path):
    pairs = make_desk_fixture(n_pairs=3, seed=1)
    path = write_manifest(pairs, tmp_path)
    g = load_manifest(path)
    assert len(g) == 3 and g.skipped == []
    for a, b in zip(pairs, g.pairs):
        assert a.pair_id == b.pair_id
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert [c.tokens for c in a.captions] == [c.tokens for c in b.captions]


def test_malformed_lines_are_skipped_and_reported(tmp_path):
    pairs = make_desk_fixture(n_pairs=2, seed=1)
    path = write_manifest(pairs, tmp_path)
    lines = path.read_text().splitlines()
    lines.append(json.dumps({"id": "nocaps", "image": "images/p000.png"}))
    lines.append("{not json")
    lines.append(json.dumps({"id": "missing", "image": "images/none.png", "captions": ["a dog"]}))
    lines.append(json.dumps({"id": "empty", "image": "images/p000.png", "captions": ["..."]}))
    path.write_text("\n".join(lines) + "\n")
    g = load_manifest(path)
    assert len(g) == 2
    assert [s["line"] for s in g.skipped] == [3, 4, 5, 6]
    assert "captions" in g.skipped[0]["error"]


def test_duplicate_id_is_fatal(tmp_path):
    path = write_manifest(make_desk_fixture(n_pairs=1), tmp_path)
    line = path.read_text().strip()
    path.write_text(line + "\n" + line + "\n")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_unreadable_file_is_fatal(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "absent.jsonl")


def test_npy_images(tmp_path):
    arr = np.random.default_rng(0).random((3, 8, 8))
    np.save(tmp_path / "x.npy", arr)
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "x", "image": "x.npy", "captions": ["A dog."]}) + "\n")
    g = load_manifest(tmp_path / "m.jsonl")
    assert np.array_equal(g.pairs[0].image.pixels, arr)
