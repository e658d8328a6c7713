import numpy as np
import pytest

from rfsplat.exceptions import CorruptHeaderError, FormatError, TruncatedRecordError, VersionMismatchError
from rfsplat.experiment import header_for, train_on_records
from rfsplat.features import FeatureMap
from rfsplat.pipeline import simulate_scene, stack_features
from rfsplat.scenes import generate_scene
from rfsplat.storage import (
    DATASET_MAGIC,
    DatasetReader,
    DatasetRecord,
    DatasetWriter,
    SimulationRecord,
    decode_arrays,
    encode_arrays,
    iter_simulation,
    load_weights,
    read_dataset,
    read_scenes,
    save_weights,
    write_dataset,
    write_scenes,
    write_simulation,
)


def test_arrays_round_trip():
    arrays = {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "b": np.array([1 + 2j]), "c": np.zeros(0, np.int32)}
    meta, blob = encode_arrays(arrays)
    back = decode_arrays(meta, blob)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


def test_round_trip_bit_identical(tiny_dataset, tmp_path):
    cfg, path, records = tiny_dataset
    header, back = read_dataset(path)
    assert len(back) == len(records)
    for a, b in zip(records, back):
        assert a.scene == b.scene
        assert a.features.grid.tobytes() == b.features.grid.tobytes()
        assert a.features.scene_id == b.features.scene_id
    again = tmp_path / "again.ds"
    write_dataset(str(again), back, header)
    assert again.read_bytes() == open(path, "rb").read()


def test_paths_round_trip(tiny_cfg, tmp_path):
    plan = tiny_cfg.plan()
    scene = generate_scene(3, tiny_cfg.scene.build())
    fm, traced = simulate_scene(scene, plan, 0, keep_paths=True)
    path = tmp_path / "p.ds"
    write_dataset(str(path), [DatasetRecord(scene, fm, traced)], header_for(tiny_cfg))
    _, (rec,) = read_dataset(str(path))
    for a, b in zip(traced, rec.paths):
        assert a.entry_index == b.entry_index
        for f in ("antenna", "length", "jones", "kinds", "ris_offset"):
            assert np.array_equal(getattr(a, f), getattr(b, f))


def test_empty_dataset(tiny_cfg, tmp_path):
    path = tmp_path / "empty.ds"
    assert write_dataset(str(path), [], header_for(tiny_cfg)) == 0
    header, records = read_dataset(str(path))
    assert records == [] and header["n_configs"] == 2


def test_truncation_names_record(tiny_dataset, tmp_path):
    _, path, records = tiny_dataset
    raw = open(path, "rb").read()
    cut = tmp_path / "cut.ds"
    cut.write_bytes(raw[:-10])
    with pytest.raises(TruncatedRecordError) as err:
        read_dataset(str(cut))
    assert err.value.record_index == len(records) - 1
    assert f"record {len(records) - 1}" in str(err.value)


def test_streaming_yields_before_truncation(tiny_dataset, tmp_path):
    _, path, records = tiny_dataset
    cut = tmp_path / "cut.ds"
    cut.write_bytes(open(path, "rb").read()[:-10])
    seen = 0
    with DatasetReader(str(cut)) as r:
        with pytest.raises(TruncatedRecordError):
            for _ in r:
                seen += 1
    assert seen == len(records) - 1


def test_corrupt_header(tiny_dataset, tmp_path):
    _, path, _ = tiny_dataset
    raw = bytearray(open(path, "rb").read())
    bad_magic = tmp_path / "magic.ds"
    bad_magic.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CorruptHeaderError):
        read_dataset(str(bad_magic))
    bad_json = tmp_path / "json.ds"
    raw[12] = ord("}")
    bad_json.write_bytes(bytes(raw))
    with pytest.raises(CorruptHeaderError):
        read_dataset(str(bad_json))


def test_version_mismatch(tiny_cfg, tmp_path):
    header = dict(header_for(tiny_cfg), version=99)
    path = tmp_path / "v99.ds"
    with DatasetWriter(str(path), header):
        pass
    with pytest.raises(VersionMismatchError):
        read_dataset(str(path))


def test_error_categories_distinct():
    cats = {CorruptHeaderError.category, TruncatedRecordError.category, VersionMismatchError.category}
    assert len(cats) == 3


def test_writer_rejects_shape(tiny_cfg, tmp_path):
    scene = generate_scene(0, tiny_cfg.scene.build())
    with DatasetWriter(str(tmp_path / "x.ds"), header_for(tiny_cfg)) as w:
        with pytest.raises(FormatError):
            w.write(DatasetRecord(scene, FeatureMap(np.zeros((16, 7)))))


def test_little_endian_header(tiny_dataset):
    _, path, _ = tiny_dataset
    raw = open(path, "rb").read()
    assert raw[:8] == DATASET_MAGIC
    hlen = int.from_bytes(raw[8:12], "little")
    assert raw[12:12 + hlen].startswith(b"{")


def test_weights_round_trip(tiny_dataset, tmp_path):
    cfg, _, records = tiny_dataset
    est = train_on_records(cfg, records)
    path = save_weights(str(tmp_path / "m.bin"), est)
    back, header = load_weights(path)
    X = stack_features([r.features for r in records])
    a, pa = est.forward_raw(X)
    b, pb = back.forward_raw(X)
    assert np.array_equal(a, b) and np.array_equal(pa, pb)
    assert header["model_config"] == est.config_.to_dict()
    assert [e["train_loss"] for e in back.history_] == [e["train_loss"] for e in est.history_]


def test_weights_truncated(tiny_dataset, tmp_path):
    cfg, _, records = tiny_dataset
    est = train_on_records(cfg, records[:4])
    path = save_weights(str(tmp_path / "m.bin"), est)
    raw = open(path, "rb").read()
    cut = tmp_path / "cut.bin"
    cut.write_bytes(raw[:-8])
    with pytest.raises(TruncatedRecordError):
        load_weights(str(cut))


def test_simulation_round_trip(tiny_cfg, tmp_path):
    plan = tiny_cfg.plan()
    scene = generate_scene(5, tiny_cfg.scene.build())
    _, traced = simulate_scene(scene, plan, 0, keep_paths=True)
    wf = np.ones((2, 16, 2, 2), complex) * (1 + 0.5j)
    path = str(tmp_path / "s.bin")
    assert write_simulation(path, {"n_rx": 16}, [SimulationRecord(scene, 4, traced, wf)]) == 1
    header, records = iter_simulation(path)
    (rec,) = list(records)
    assert header["n_rx"] == 16 and rec.scene_id == 4 and rec.scene == scene
    assert np.array_equal(rec.wavefronts, wf)
    assert np.array_equal(rec.paths[1].jones, traced[1].jones)


def test_scenes_jsonl(tiny_cfg, tmp_path):
    scenes = [generate_scene(i, tiny_cfg.scene.build()) for i in range(3)]
    path = str(tmp_path / "s.jsonl")
    write_scenes(path, scenes)
    assert read_scenes(path) == scenes
    (tmp_path / "bad.jsonl").write_text("{not json}\n")
    with pytest.raises(FormatError):
        read_scenes(str(tmp_path / "bad.jsonl"))
