import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from safelab import dataset, demos
from safelab.dataset import Dataset, DatasetFormatError
from safelab.env import EpisodeRecord, Transition


def test_round_trip_equality(spb_demos, tmp_path):
    path = tmp_path / "d.jsonl"
    dataset.save(spb_demos, path, config_hash="feedbeef")
    back, manifest = dataset.load(path)
    assert back == spb_demos
    assert manifest["config_hash"] == "feedbeef"
    assert manifest["counts"] == {"offline_gr": 20, "offline_cv": 20, "online": 0}


def test_manifest_counts(spb):
    ds = demos.generate_demos(spb, 25, 25, seed=0)
    assert sum(json.loads(dataset.dumps(ds).splitlines()[0])["counts"].values()) == 50
    empty, manifest = dataset.loads(dataset.dumps(Dataset()))
    assert len(empty) == 0 and manifest["type"] == "manifest"


def test_malformed_files_rejected(spb_demos):
    text = dataset.dumps(spb_demos)
    lines = text.splitlines()
    with pytest.raises(DatasetFormatError):
        dataset.loads("\n".join(lines[1:]))
    with pytest.raises(DatasetFormatError):
        dataset.loads(lines[0] + "\n{not json")
    with pytest.raises(DatasetFormatError):
        dataset.loads("\n".join(lines[:-1]))
    bad = json.loads(lines[0])
    bad["format_version"] = 99
    with pytest.raises(DatasetFormatError):
        dataset.loads(json.dumps(bad))


def test_remove_online_never_touches_offline(spb_demos):
    ds = Dataset(episodes=list(spb_demos.episodes))
    with pytest.raises(ValueError):
        ds.remove_online(list(spb_demos.episodes))
    assert len(ds) == len(spb_demos)
    assert ds.remove_online([]) == 0


def test_flatten_bookkeeping(spb_demos):
    b = spb_demos.flatten()
    assert len(b) == spb_demos.n_transitions()
    assert np.all(b.step[b.episode == 0] == np.arange(len(spb_demos.episodes[0])))
    assert b.success[b.episode == 0].all()


floats = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(rows=st.lists(st.tuples(floats, floats, floats, floats, st.booleans()),
                     min_size=1, max_size=12),
       origin=st.sampled_from(["offline_gr", "offline_cv", "online"]))
def test_round_trip_property(rows, origin):
    trs = []
    for i, (x, y, ax, ay, c) in enumerate(rows):
        last = i == len(rows) - 1
        trs.append(Transition(np.array([x, y]), np.array([ax, ay]), -1.0,
                              np.array([y, x]), c and last, last))
    ds = Dataset(episodes=[EpisodeRecord.from_transitions(trs, origin=origin)])
    back, _ = dataset.loads(dataset.dumps(ds))
    assert back == ds
