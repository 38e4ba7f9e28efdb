import json
import struct

import numpy as np
import pytest

from dmcnet import io
from dmcnet.errors import ConfigurationError, ContractError, DataError, FormatError
from dmcnet.networks import NetworkSpec, build_network
from dmcnet.phantom import foreground_fraction, synth_phantom


# -- volumes -------------------------------------------------------------------


def test_volume_round_trip(tmp_path):
    vol = np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32)
    io.write_volume(tmp_path / "v.json", vol, (0.85, 0.85, 1.0))
    back = io.read_volume(tmp_path / "v.json")
    assert back.data.tobytes() == vol.tobytes()
    assert back.spacing == (0.85, 0.85, 1.0) and back.axis_names == ("x", "y", "z")
    header = json.loads((tmp_path / "v.json").read_text())
    assert header["dtype"] == "f32" and header["order"] == "row-major" and header["blob"] == "v.raw"


def test_blob_is_little_endian(tmp_path):
    io.write_volume(tmp_path / "v.json", np.array([[1.0, 2.0]], dtype=">f4"), (1, 1))
    assert (tmp_path / "v.raw").read_bytes() == struct.pack("<2f", 1.0, 2.0)


def test_label_volume_u8(tmp_path):
    lab = np.array([[0, 1], [2, 1]])
    io.write_volume(tmp_path / "l.json", lab, (1, 1))
    back = io.read_volume(tmp_path / "l.json")
    assert back.data.dtype == np.uint8 and back.data.tolist() == lab.tolist()
    with pytest.raises(DataError):
        io.write_volume(tmp_path / "bad.json", np.array([[300]]), (1, 1))


def test_truncated_blob_reports_lengths(tmp_path):
    io.write_volume(tmp_path / "v.json", np.zeros((4, 4), dtype=np.float32), (1, 1))
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:40])
    with pytest.raises(FormatError, match="expected 64 bytes, found 40") as err:
        io.read_volume(tmp_path / "v.json")
    assert err.value.offset == 40


def test_missing_blob_and_unknown_dtype(tmp_path):
    io.write_volume(tmp_path / "v.json", np.zeros((2, 2), dtype=np.float32), (1, 1))
    (tmp_path / "v.raw").unlink()
    with pytest.raises(FormatError, match="missing"):
        io.read_volume(tmp_path / "v.json")
    header = {"shape": [2], "spacing_mm": [1.0], "dtype": "f16", "blob": "w.raw"}
    (tmp_path / "w.json").write_text(json.dumps(header))
    with pytest.raises(FormatError, match="unknown dtype"):
        io.read_volume(tmp_path / "w.json")


def test_malformed_header_offset(tmp_path):
    (tmp_path / "v.json").write_text('{"shape": [2,')
    with pytest.raises(FormatError) as err:
        io.read_volume(tmp_path / "v.json")
    assert err.value.offset is not None


def test_negative_spacing_rejected(tmp_path):
    header = {"shape": [2], "spacing_mm": [-1.0], "dtype": "f32", "blob": "v.raw"}
    (tmp_path / "v.json").write_text(json.dumps(header))
    (tmp_path / "v.raw").write_bytes(bytes(8))
    with pytest.raises(DataError):
        io.read_volume(tmp_path / "v.json")
    with pytest.raises(DataError):
        io.write_volume(tmp_path / "w.json", np.zeros(2), (0.0,))


# -- manifests -----------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    img = synth_phantom(0, size=(32, 32, 32))
    io.write_volume(tmp_path / "img.json", img.image, img.spacing)
    io.write_volume(tmp_path / "lab.json", img.label, img.spacing)
    io.write_manifest(tmp_path / "m.json", [{"case_id": "a", "image": "img.json", "label": "lab.json"}], 2)
    doc, samples = io.load_dataset(tmp_path / "m.json")
    assert doc["num_classes"] == 2 and samples[0].case_id == "a"
    np.testing.assert_array_equal(samples[0].label, img.label)
    io.write_manifest(tmp_path / "m1.json", [{"case_id": "a", "image": "img.json", "label": "lab.json"}], 1)
    with pytest.raises(DataError):
        io.load_dataset(tmp_path / "m1.json")


def test_manifest_errors(tmp_path):
    with pytest.raises(FormatError):
        io.read_manifest(tmp_path / "none.json")
    (tmp_path / "m.json").write_text(json.dumps({"cases": [{"case_id": "a"}], "num_classes": 2}))
    with pytest.raises(FormatError, match="missing"):
        io.read_manifest(tmp_path / "m.json")


# -- checkpoints ---------------------------------------------------------------

SPEC = NetworkSpec(rank=2, variant="dmc", stage_channels=(4, 8), num_classes=2)


def _save(path, model, **kw):
    params = {n: t.data for n, t in model.named_parameters()}
    io.save_checkpoint(path, model.spec.to_dict(), params, **kw)


def test_checkpoint_round_trip(tmp_path):
    model = build_network(SPEC)
    vel = {"stem.weight": np.ones_like(model.params["stem.weight"].data)}
    _save(tmp_path / "a.bin", model, velocities=vel, rng_state={"state": 7}, epoch=3, extra={"k": 1})
    ck = io.load_checkpoint(tmp_path / "a.bin")
    assert ck.epoch == 3 and ck.rng_state == {"state": 7} and ck.extra == {"k": 1}
    assert ck.spec == SPEC.to_dict()
    for n, t in model.named_parameters():
        assert ck.params[n].tobytes() == t.data.tobytes()
    io.save_checkpoint(tmp_path / "b.bin", ck.spec, ck.params, ck.velocities, ck.rng_state,
                       ck.epoch, ck.extra)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_mismatched_spec(tmp_path):
    _save(tmp_path / "a.bin", build_network(SPEC))
    other = build_network(NetworkSpec(rank=2, variant="unet", stage_channels=(4, 8), num_classes=2))
    with pytest.raises(ContractError, match="tensor 'enc0"):
        io.apply_params(other, io.load_checkpoint(tmp_path / "a.bin").params)


def test_checkpoint_apply_restores(tmp_path):
    src = build_network(SPEC)
    _save(tmp_path / "a.bin", src)
    dst = build_network(NetworkSpec(**{**SPEC.to_dict(), "seed": 9}))
    io.apply_params(dst, io.load_checkpoint(tmp_path / "a.bin").params)
    for (n, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_corruption(tmp_path):
    _save(tmp_path / "a.bin", build_network(SPEC))
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-8])
    with pytest.raises(FormatError, match="length mismatch"):
        io.load_checkpoint(tmp_path / "t.bin")
    (tmp_path / "v.bin").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(FormatError, match="version 99"):
        io.load_checkpoint(tmp_path / "v.bin")
    (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        io.load_checkpoint(tmp_path / "m.bin")


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write(tmp_path / "x.txt", "hello")
    io.atomic_write(tmp_path / "x.txt", b"bytes")
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
    assert (tmp_path / "x.txt").read_bytes() == b"bytes"


# -- phantoms ------------------------------------------------------------------


def test_phantom_seeded():
    a, b = synth_phantom(3), synth_phantom(3)
    assert a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()
    assert synth_phantom(4).image.tobytes() != a.image.tobytes()


def test_phantom_classes():
    assert set(np.unique(synth_phantom(0).label)) == {0, 1}
    assert set(np.unique(synth_phantom(0, with_tumor=True).label)) == {0, 1, 2}


def test_phantom_foreground_fraction_band():
    fractions = [foreground_fraction(synth_phantom(s).label) for s in range(50)]
    assert min(fractions) >= 0.005 and max(fractions) <= 0.03


def test_phantom_size_validation():
    with pytest.raises(ConfigurationError):
        synth_phantom(0, size=(16, 32, 32))
    img = synth_phantom(0, size=(32, 40), spacing=(1.0, 1.0))
    assert img.image.shape == (32, 40)
