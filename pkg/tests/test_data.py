import struct

import numpy as np
import pytest

from avejca.data import (
    FeatureSet,
    SyntheticSpec,
    batch_indices,
    batches,
    class_prototypes,
    generate_synthetic,
    iter_feature_file,
    load_checkpoint,
    read_feature_file,
    save_checkpoint,
    write_feature_file,
)
from avejca.errors import ContractError, FormatError
from avejca.model import init_params

from conftest import toy_config

SMALL = dict(audio_dim=128, visual_positions=49, visual_channels=4)


def small_set(rng, s=3, n=4, a=5, p=6, c=3, classes=4):
    return FeatureSet(
        rng.normal(size=(s, n, a)).astype(np.float32).astype(np.float64),
        rng.normal(size=(s, n, p, c)).astype(np.float32).astype(np.float64),
        rng.integers(0, classes, size=(s, n)),
    )


@pytest.fixture
def feature_file(tmp_path, rng):
    data = small_set(rng)
    path = tmp_path / "f.avef"
    write_feature_file(path, data)
    return path, data


class TestFeatureFile:
    def test_round_trip(self, feature_file):
        path, data = feature_file
        back = read_feature_file(path, class_count=4)
        for name in ("audio", "visual", "labels"):
            np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
        assert back.audio.dtype == np.float64

    def test_bytes_are_stable_across_rewrite(self, feature_file, tmp_path):
        path, _ = feature_file
        again = tmp_path / "again.avef"
        write_feature_file(again, read_feature_file(path))
        assert again.read_bytes() == path.read_bytes()

    def test_layout(self, feature_file):
        path, data = feature_file
        raw = path.read_bytes()
        assert struct.unpack_from("<4sHIHHHH", raw) == (b"AVEF", 1, 3, 4, 5, 6, 3)
        assert len(raw) == 18 + 3 * 4 * (4 * 5 + 4 * 6 * 3 + 1)
        first_audio = np.frombuffer(raw[18 : 18 + 4 * 5 * 4], dtype="<f4").reshape(4, 5)
        np.testing.assert_array_equal(first_audio, data.audio[0])
        label_start = 18 + 4 * (4 * 5 + 4 * 6 * 3)
        assert list(raw[label_start : label_start + 4]) == list(data.labels[0])

    def test_streaming(self, feature_file):
        path, data = feature_file
        rows = list(iter_feature_file(path))
        assert len(rows) == 3
        np.testing.assert_array_equal(rows[2][1], data.visual[2])

    def test_bad_magic(self, feature_file):
        path, _ = feature_file
        raw = bytearray(path.read_bytes())
        raw[0:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic") as info:
            read_feature_file(path)
        assert info.value.offset == 0 and info.value.kind == "bad_magic"

    def test_truncated_payload_names_sizes(self, feature_file):
        path, _ = feature_file
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(FormatError) as info:
            read_feature_file(path)
        assert info.value.kind == "truncated"
        assert f"expected {len(raw)} bytes" in str(info.value)
        assert f"file has {len(raw) - 10}" in str(info.value)
        with pytest.raises(FormatError, match="truncated"):
            list(iter_feature_file(path))

    def test_count_exceeds_payload(self, feature_file):
        path, _ = feature_file
        raw = bytearray(path.read_bytes())
        struct.pack_into("<I", raw, 6, 1000)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="expected .* bytes, file has") as info:
            read_feature_file(path)
        assert info.value.offset == len(raw)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "h.avef"
        path.write_bytes(b"AVEF\x01\x00")
        with pytest.raises(FormatError) as info:
            read_feature_file(path)
        assert info.value.kind == "truncated" and info.value.offset == 6

    def test_label_out_of_range(self, feature_file):
        path, data = feature_file
        raw = bytearray(path.read_bytes())
        label_start = 18 + 4 * (4 * 5 + 4 * 6 * 3)
        raw[label_start + 2] = 9
        path.write_bytes(bytes(raw))
        read_feature_file(path)  # no class count given: only 255 is invalid
        with pytest.raises(FormatError) as info:
            read_feature_file(path, class_count=4)
        assert info.value.kind == "label_out_of_range"
        assert info.value.offset == label_start + 2

    def test_invalid_label_byte(self, feature_file):
        path, _ = feature_file
        raw = bytearray(path.read_bytes())
        raw[-1] = 255
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="out of range"):
            read_feature_file(path)

    def test_trailing_bytes(self, feature_file):
        path, _ = feature_file
        size = path.stat().st_size
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(FormatError) as info:
            read_feature_file(path)
        assert info.value.kind == "trailing_bytes" and info.value.offset == size

    def test_bad_version(self, feature_file):
        path, _ = feature_file
        raw = bytearray(path.read_bytes())
        raw[4] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            read_feature_file(path)
        assert info.value.kind == "bad_version" and info.value.offset == 4

    def test_zero_dimension(self, feature_file):
        path, _ = feature_file
        raw = bytearray(path.read_bytes())
        struct.pack_into("<H", raw, 12, 0)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            read_feature_file(path)
        assert info.value.kind == "bad_header" and info.value.offset == 12

    def test_offset_in_message(self, feature_file):
        path, _ = feature_file
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="offset 0"):
            read_feature_file(path)

    def test_writer_rejects_reserved_label(self, tmp_path, rng):
        data = small_set(rng)
        data.labels[0, 0] = 255
        with pytest.raises(ContractError):
            write_feature_file(tmp_path / "x", data)


class TestCheckpoint:
    def _save(self, tmp_path):
        config = toy_config()
        params = init_params(config)
        path = tmp_path / "m.avec"
        save_checkpoint(path, config, params)
        return path, config, params

    def test_round_trip_bitwise(self, tmp_path):
        path, config, params = self._save(tmp_path)
        config2, params2 = load_checkpoint(path)
        assert config2 == config
        assert list(params2) == list(params)
        for name in params:
            assert params2[name].tobytes() == params[name].tobytes()

    def test_bad_magic(self, tmp_path):
        path, _, _ = self._save(tmp_path)
        path.write_bytes(b"AVEF" + path.read_bytes()[4:])
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.kind == "bad_magic" and info.value.offset == 0

    def test_flipped_bit_fails_checksum(self, tmp_path):
        path, _, _ = self._save(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.kind == "checksum"

    def test_bad_version_reported_before_checksum(self, tmp_path):
        path, _, _ = self._save(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4] = 2
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.kind == "bad_version"

    def test_truncated(self, tmp_path):
        path, _, _ = self._save(tmp_path)
        path.write_bytes(path.read_bytes()[:8])
        with pytest.raises(FormatError) as info:
            load_checkpoint(path)
        assert info.value.kind == "truncated"


class TestSynthetic:
    def test_noise_free_sequences_identical_per_class(self):
        spec = SyntheticSpec(class_count=3, sequences_per_class=4, N=5, background_rate=0.0,
                             noise_sigma=0.0, audio_dim=6, visual_positions=9, visual_channels=3)
        data = generate_synthetic(spec)
        for c in range(3):
            block = slice(4 * c, 4 * c + 4)
            assert np.all(data.labels[block] == c)
            assert np.all(data.audio[block] == data.audio[4 * c])
            assert np.all(data.visual[block] == data.visual[4 * c])
        assert not np.array_equal(data.audio[0], data.audio[4])

    def test_visual_prototype_concentrated(self):
        spec = SyntheticSpec(**SMALL)
        _, visual, positions = class_prototypes(spec)
        for c in range(spec.class_count):
            energy = np.abs(visual[c]).sum(axis=1)
            assert np.flatnonzero(energy).tolist() == [positions[c]]
        assert len(set(positions.tolist())) == spec.class_count

    def test_deterministic(self):
        spec = SyntheticSpec(class_count=2, sequences_per_class=3, **SMALL)
        a, b = generate_synthetic(spec), generate_synthetic(spec)
        for name in ("audio", "visual", "labels"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
        other = generate_synthetic(SyntheticSpec(class_count=2, sequences_per_class=3, seed=8, **SMALL))
        assert not np.array_equal(a.audio, other.audio)

    def test_splits_share_prototypes_but_differ(self):
        spec = SyntheticSpec(class_count=2, sequences_per_class=3, **SMALL)
        train, val = generate_synthetic(spec, "train"), generate_synthetic(spec, "val")
        assert not np.array_equal(train.audio, val.audio)
        audio_proto, _, _ = class_prototypes(spec)
        for data in (train, val):
            event = data.labels == 0
            assert np.abs(data.audio[event] - audio_proto[0]).mean() < 0.2
        with pytest.raises(ContractError):
            generate_synthetic(spec, "holdout")

    def test_nearest_prototype_oracle(self):
        spec = SyntheticSpec(**SMALL)  # 5 classes, 64 per class, sigma 0.1
        data = generate_synthetic(spec)
        # oracle prototypes estimated from the data itself: per-class mean of event audio
        event = data.labels < spec.class_count
        feats, labels = data.audio[event], data.labels[event]
        centroids = np.stack([feats[labels == c].mean(axis=0) for c in range(spec.class_count)])
        dist = ((feats[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
        assert np.mean(dist.argmin(axis=1) == labels) > 0.99

    def test_background_fraction(self):
        spec = SyntheticSpec(background_rate=0.3, **SMALL)
        data = generate_synthetic(spec)
        assert data.labels.size >= 3000
        assert abs(np.mean(data.labels == spec.class_count) - 0.3) <= 0.03

    @pytest.mark.parametrize("bad", [dict(background_rate=1.0), dict(background_rate=-0.1), dict(noise_sigma=-1)])
    def test_invalid_spec(self, bad):
        with pytest.raises(ContractError):
            SyntheticSpec(**bad)


class TestBatches:
    def test_sizes(self):
        assert [len(b) for b in batches(list(range(10)), 4)] == [4, 4, 2]

    def test_seeded_order(self):
        a = [list(b) for b in batches(list(range(10)), 4, shuffle_seed=3)]
        b = [list(b) for b in batches(list(range(10)), 4, shuffle_seed=3)]
        c = [list(b) for b in batches(list(range(10)), 4, shuffle_seed=4)]
        assert a == b and a != c
        assert sorted(sum(a, [])) == sorted(sum(c, [])) == list(range(10))

    def test_partition(self, rng):
        data = small_set(rng, s=7)
        seen = np.concatenate([b.labels for b in batches(data, 3, shuffle_seed=1)])
        idx = np.concatenate(batch_indices(7, 3, 1))
        np.testing.assert_array_equal(seen, data.labels[idx])
        assert sorted(idx.tolist()) == list(range(7))

    def test_empty_and_bad_size(self):
        with pytest.raises(ContractError):
            list(batches([], 4))
        with pytest.raises(ContractError):
            list(batches([1, 2], 0))
