import filecmp

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgad.data import (DataConfig, DatasetManifest, SplitMix64, build_dataset, generate_sample,
                       load_manifest, load_split, paste_object, read_sample, split_sizes, to_uint8,
                       write_sample)
from dgad.pnm import PnmError, decode_pnm, encode_pnm, read_pnm, write_pnm


def _bbox(alpha):
    ys, xs = np.nonzero(alpha)
    return xs.min(), ys.min(), xs.max() + 1, ys.max() + 1


class TestSplitMix:
    def test_reference_values(self):
        # first outputs for seed 0 of the published splitmix64 reference
        g = SplitMix64(0)
        assert [g.next_u64() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]

    def test_randint_inclusive(self):
        g = SplitMix64(5)
        vals = {g.randint(2, 4) for _ in range(200)}
        assert vals == {2, 3, 4}
        with pytest.raises(ValueError):
            g.randint(3, 2)


class TestGenerate:
    def test_deterministic(self):
        a, b = generate_sample(17), generate_sample(17)
        for f in ("obj", "bg", "tgt"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert (a.box, a.rotation, a.scale) == (b.box, b.rotation, b.scale)

    @pytest.mark.parametrize("seed", range(0, 400, 7))
    def test_sample_invariants(self, seed):
        s = generate_sample(seed)
        H = s.image_size
        x0, y0, x1, y1 = s.box
        assert 0 <= x0 < x1 <= H and 0 <= y0 < y1 <= H
        area = (x1 - x0) * (y1 - y0)
        assert 16 <= area <= 0.6 * H * H
        outside = s.mask() == 0
        assert np.array_equal(s.tgt[outside], s.bg[outside])
        changed = (s.tgt != s.bg).any(axis=2)
        if changed.any():
            bx0, by0, bx1, by1 = _bbox(changed)
            assert x0 < bx0 and y0 < by0 and bx1 < x1 and by1 < y1
            assert area >= 1.2 * (bx1 - bx0) * (by1 - by0)
        assert -45 <= s.rotation <= 45 and 0.6 <= s.scale <= 1.0

    @pytest.mark.parametrize("seed", [1, 2, 3, 40, 77])
    def test_identity_transform_is_a_paste(self, seed):
        cfg = DataConfig(rotation=(0, 0), scale=(1.0, 1.0))
        s = generate_sample(seed, cfg)
        assert s.rotation == 0 and s.scale == 1.0
        assert np.array_equal(s.tgt, paste_object(s.obj, s.bg, s.box))

    def test_object_on_white_canvas(self):
        s = generate_sample(3)
        alpha = s.object_alpha()
        assert alpha.any() and not alpha.all()
        assert np.all(s.obj[~alpha] == 255)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            DataConfig(image_size=30)
        with pytest.raises(ValueError):
            DataConfig(radius=(10, 24))
        with pytest.raises(ValueError):
            DataConfig(looseness=1.0)
        with pytest.raises(ValueError):
            DataConfig(image_size=32, radius=(6, 8))

    def test_small_images_never_lose_the_object(self):
        cfg = DataConfig(image_size=32)
        for seed in range(300):
            assert generate_sample(seed, cfg).object_alpha().any()

    def test_tensors_in_range(self):
        s = generate_sample(0)
        for t in (s.i_obj, s.i_bg, s.i_tgt):
            assert t.shape == (3, 64, 64) and t.min() >= -1 and t.max() <= 1
        assert np.array_equal(to_uint8(s.i_tgt), s.tgt)


class TestPnm:
    def test_canonical_pgm_fixture(self):
        fixture = b"P5\n2 2\n255\n" + bytes([0, 255, 128, 7])
        img = decode_pnm(fixture)
        assert img.tolist() == [[0, 255], [128, 7]]
        assert encode_pnm(img) == fixture

    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        write_pnm(tmp_path / "a.ppm", img)
        assert (tmp_path / "a.ppm").read_bytes()[:11] == b"P6\n7 5\n255\n"
        assert np.array_equal(read_pnm(tmp_path / "a.ppm"), img)

    def test_header_comments(self):
        assert decode_pnm(b"P5 # c\n1 # x\n 1\n255\n\x09").tolist() == [[9]]

    def test_truncated(self):
        with pytest.raises(PnmError) as exc:
            decode_pnm(b"P5\n2 2\n255\n\x00\x01\x02")
        assert exc.value.offset == 14

    def test_bad_magic_and_trailing(self):
        with pytest.raises(PnmError) as exc:
            decode_pnm(b"P2\n1 1\n255\n0")
        assert exc.value.offset == 0
        with pytest.raises(PnmError):
            decode_pnm(b"P5\n1 1\n255\n\x00\x00")
        with pytest.raises(PnmError):
            decode_pnm(b"P5\n1 1\n65535\n\x00\x00")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.booleans(), st.integers(0, 1000))
    def test_round_trip_property(self, h, w, rgb, seed):
        shape = (h, w, 3) if rgb else (h, w)
        img = np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)
        assert np.array_equal(decode_pnm(encode_pnm(img)), img)


class TestSampleIO:
    def test_round_trip(self, tmp_path):
        s = generate_sample(11)
        write_sample(tmp_path / "s", s)
        r = read_sample(tmp_path / "s")
        assert np.array_equal(r.obj, s.obj) and np.array_equal(r.bg, s.bg) and np.array_equal(r.tgt, s.tgt)
        assert (r.box, r.rotation, r.scale, r.seed) == (s.box, s.rotation, s.scale, s.seed)
        assert read_pnm(tmp_path / "s" / "mask.pgm").dtype == np.uint8

    def test_truncated_file(self, tmp_path):
        write_sample(tmp_path / "s", generate_sample(11))
        p = tmp_path / "s" / "tgt.ppm"
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(PnmError, match="byte offset"):
            read_sample(tmp_path / "s")

    def test_malformed_meta(self, tmp_path):
        write_sample(tmp_path / "s", generate_sample(11))
        (tmp_path / "s" / "meta.txt").write_text("seed=1\nthis line is broken\n")
        with pytest.raises(ValueError, match="byte offset 7"):
            read_sample(tmp_path / "s")


class TestDataset:
    def test_splits(self):
        assert split_sizes(20) == {"train": 18, "val": 1, "test": 1}
        assert split_sizes(2000) == {"train": 1800, "val": 100, "test": 100}
        assert split_sizes(1) == {"train": 1, "val": 0, "test": 0}

    def test_build_and_manifest(self, tmp_path):
        m = build_dataset(20, 5, tmp_path / "d")
        assert m.split_counts() == {"train": 18, "val": 1, "test": 1}
        assert [r[1] for r in m.records] == list(range(5, 25))
        parsed = load_manifest(tmp_path / "d", verify=True)
        assert parsed.to_text() == m.to_text()
        assert DatasetManifest.from_text(m.to_text()).records == m.records
        splits = [set(r[3] for r in parsed.split(k)) for k in ("train", "val", "test")]
        assert not (splits[0] & splits[1]) and not (splits[0] & splits[2]) and not (splits[1] & splits[2])
        assert (tmp_path / "d" / "train" / "000000" / "obj.ppm").is_file()
        assert len(load_split(tmp_path / "d", "train")) == 18

    def test_refuses_non_empty(self, tmp_path):
        build_dataset(3, 0, tmp_path / "d")
        with pytest.raises(FileExistsError):
            build_dataset(3, 0, tmp_path / "d")
        build_dataset(3, 0, tmp_path / "d", force=True)

    def test_byte_identical(self, tmp_path):
        build_dataset(6, 2, tmp_path / "a")
        build_dataset(6, 2, tmp_path / "b", workers=2)
        cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
        assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
        for sub in ("train/000000", "test/000005"):
            for name in ("obj.ppm", "tgt.ppm", "meta.txt"):
                assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()

    def test_tamper_detected(self, tmp_path):
        build_dataset(3, 0, tmp_path / "d")
        p = tmp_path / "d" / "train" / "000000" / "bg.ppm"
        raw = bytearray(p.read_bytes())
        raw[-1] ^= 1
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="hash"):
            load_manifest(tmp_path / "d", verify=True)

    def test_bad_n(self, tmp_path):
        with pytest.raises(ValueError):
            build_dataset(0, 0, tmp_path / "d")
