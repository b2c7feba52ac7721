"""Container round-trip and corruption tests."""

import numpy as np
import pytest

from tracttransfer import checkpoint as ckpt
from tracttransfer.errors import FormatError
from tracttransfer.model import BackboneArch, BackboneParams, HeadParams, SegModel
from tracttransfer.rng import RngState
from tracttransfer.synthdata import CohortConfig, generate_cohort


@pytest.fixture(scope="module")
def small_cohort():
    return generate_cohort(CohortConfig(
        h=32, w=32, existing_train=1, existing_val=1, fewshot_train=2,
        fewshot_val=1, test=1, seed=44))


class TestContainer:
    def test_round_trip_is_bit_identical(self, tmp_path, rng64):
        arrays = {"a.weight": rng64.normal(0, 1, (3, 4)),
                  "b.bias": rng64.normal(0, 1, 7)}
        meta = {"kind": "test", "note": "hello world"}
        path = tmp_path / "x.ttrx"
        ckpt.write_container(path, arrays, meta)
        loaded, loaded_meta = ckpt.read_container(path)
        assert loaded_meta["kind"] == "test" and loaded_meta["note"] == "hello world"
        for name, data in arrays.items():
            assert loaded[name].tobytes() == data.tobytes()

    def test_same_content_same_bytes(self, tmp_path, rng64):
        arrays = {"w": rng64.normal(0, 1, (5, 5))}
        a, b = tmp_path / "a.ttrx", tmp_path / "b.ttrx"
        ckpt.write_container(a, dict(arrays), {"kind": "t"})
        ckpt.write_container(b, dict(arrays), {"kind": "t"})
        assert a.read_bytes() == b.read_bytes()

    def test_corrupt_magic_rejected(self, tmp_path, rng64):
        path = tmp_path / "x.ttrx"
        ckpt.write_container(path, {"w": rng64.normal(0, 1, 4)}, {"kind": "t"})
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            ckpt.read_container(path)

    def test_corrupt_payload_rejected(self, tmp_path, rng64):
        path = tmp_path / "x.ttrx"
        ckpt.write_container(path, {"w": rng64.normal(0, 1, 4)}, {"kind": "t"})
        blob = bytearray(path.read_bytes())
        blob[-1] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="digest"):
            ckpt.read_container(path)

    def test_truncated_payload_rejected(self, tmp_path, rng64):
        path = tmp_path / "x.ttrx"
        ckpt.write_container(path, {"w": rng64.normal(0, 1, 4)}, {"kind": "t"})
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="payload"):
            ckpt.read_container(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError, match="not found"):
            ckpt.read_container(tmp_path / "absent.ttrx")


class TestModelCheckpoint:
    def test_model_round_trip(self, tmp_path):
        arch = BackboneArch(enc_channels=6, mid_channels=8, feature_channels=5)
        model = SegModel(BackboneParams.init_random(arch, RngState(4)),
                         HeadParams.init_random(3, 5, RngState(5)), task="existing")
        path = tmp_path / "model.ttrx"
        ckpt.save_model(path, model, {"seed": "4"})
        loaded = ckpt.load_model(path)
        assert loaded.task == "existing"
        assert loaded.backbone.arch == arch
        for name, tensor in model.named_params().items():
            assert loaded.named_params()[name].data.tobytes() == tensor.data.tobytes()

    def test_wrong_kind_rejected(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.ttrx"
        ckpt.save_cohort(path, small_cohort)
        with pytest.raises(FormatError, match="model"):
            ckpt.load_model(path)


class TestCohortCheckpoint:
    def test_cohort_round_trip(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.ttrx"
        ckpt.save_cohort(path, small_cohort)
        loaded = ckpt.load_cohort(path)
        assert loaded.config == small_cohort.config
        original = small_cohort.all_subjects()
        restored = loaded.all_subjects()
        assert [s.id for s in restored] == [s.id for s in original]
        for a, b in zip(original, restored):
            assert a.input.tobytes() == b.input.tobytes()
            assert a.existing_labels.tobytes() == b.existing_labels.tobytes()
            assert a.novel_labels.tobytes() == b.novel_labels.tobytes()

    def test_regenerate_equals_loaded(self, tmp_path, small_cohort):
        path = tmp_path / "cohort.ttrx"
        ckpt.save_cohort(path, small_cohort)
        regenerated = generate_cohort(small_cohort.config)
        loaded = ckpt.load_cohort(path)
        for a, b in zip(regenerated.all_subjects(), loaded.all_subjects()):
            assert a.input.tobytes() == b.input.tobytes()
