import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ugcn3d import kernels
from ugcn3d.data import (
    PoseSequence,
    Sample,
    SynthConfig,
    apply_occlusion,
    decode_skl,
    encode_skl,
    export_table,
    generate_synthetic,
    import_table,
    interpolate_missing,
    load_dataset,
    read_skl,
    save_dataset,
    stack_inputs,
    write_skl,
)
from ugcn3d.errors import (
    ConfigInvalid,
    FormatError,
    JointNeverVisible,
    ParseError,
    RateOutOfRange,
    ShapeMismatch,
)
from ugcn3d.kinematics import rest_bones
from ugcn3d.topology import default_rest_positions


def small(**kw):
    base = dict(sequences=3, frames=16, seed=5)
    base.update(kw)
    return SynthConfig(**base)


class TestSynthetic:
    def test_zero_noise_input_equals_truth(self):
        for s in generate_synthetic(small(noise_sigma=0.0)):
            assert np.array_equal(s.input.positions, s.target.positions)

    def test_bone_lengths_preserved(self, h36m):
        rest = default_rest_positions()
        ref = np.linalg.norm(rest_bones(h36m, rest), axis=-1)
        for s in generate_synthetic(small()):
            p = s.target.positions
            for k, pa in h36m.bones():
                length = np.linalg.norm(p[:, k] - p[:, pa], axis=-1)
                assert np.allclose(length, ref[k], rtol=1e-9, atol=0)

    def test_same_seed_bitwise(self):
        a, b = generate_synthetic(small()), generate_synthetic(small())
        for x, y in zip(a, b):
            assert x.input.positions.tobytes() == y.input.positions.tobytes()
            assert x.target.positions.tobytes() == y.target.positions.tobytes()

    def test_different_seed_differs(self):
        a = generate_synthetic(small(seed=1))[0]
        b = generate_synthetic(small(seed=2))[0]
        assert not np.array_equal(a.target.positions, b.target.positions)

    def test_noise_level(self):
        s = generate_synthetic(small(sequences=4, frames=64, noise_sigma=20.0))
        diff = np.concatenate([(x.input.positions - x.target.positions).ravel() for x in s])
        assert abs(diff.std() - 20.0) < 1.0

    def test_motion_is_smooth(self):
        p = generate_synthetic(small(noise_sigma=0.0, frames=64))[0].target.positions
        step = np.abs(np.diff(p, axis=0)).max()
        assert 0 < step < 200

    def test_groups_label(self):
        s = generate_synthetic(small(groups=2))
        assert [x.label for x in s] == ["g0", "g1", "g0"]

    @pytest.mark.parametrize(
        "kw, err",
        [
            (dict(frames=20), ConfigInvalid),
            (dict(frames=0), ConfigInvalid),
            (dict(noise_sigma=-1.0), ConfigInvalid),
            (dict(sequences=0), ConfigInvalid),
            (dict(occlusion=1.0), RateOutOfRange),
        ],
    )
    def test_invalid(self, kw, err):
        with pytest.raises(err):
            generate_synthetic(small(**kw))

    def test_occluded_synth_keeps_root(self):
        for s in generate_synthetic(small(occlusion=0.2)):
            assert s.input.mask[:, 0].all()
            assert s.target.mask is None


def seq(T=4, N=3, seed=0):
    return PoseSequence(np.random.default_rng(seed).normal(size=(T, N, 3)) * 100)


class TestOcclusion:
    def test_rate_zero(self):
        s = seq()
        out = apply_occlusion(s, 0.0)
        assert out.mask.all() and np.array_equal(out.positions, s.positions)

    def test_counting_rule(self):
        out = apply_occlusion(seq(4, 3), 0.5, seed=9)
        assert (~out.mask).sum() == 4
        assert out.mask[:, 0].all()
        assert np.all(out.positions[~out.mask] == 0)

    @given(st.integers(1, 12), st.integers(2, 6), st.floats(0, 0.99), st.integers(0, 2**16))
    @settings(max_examples=60, deadline=None)
    def test_floor_formula(self, T, N, rate, seed):
        out = apply_occlusion(seq(T, N), rate, seed=seed)
        assert (~out.mask).sum() == int(np.floor(rate * T * (N - 1) + 1e-9))
        assert out.mask[:, 0].all()

    def test_same_seed_same_mask(self):
        a = apply_occlusion(seq(16, 17), 0.3, seed=4)
        b = apply_occlusion(seq(16, 17), 0.3, seed=4)
        assert np.array_equal(a.mask, b.mask)
        assert not np.array_equal(a.mask, apply_occlusion(seq(16, 17), 0.3, seed=5).mask)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(RateOutOfRange):
            apply_occlusion(seq(), rate)


class TestInterpolation:
    def one_joint(self, values, visible):
        p = np.zeros((len(values), 1, 3))
        p[:, 0, :] = np.asarray(values, dtype=float)[:, None]
        return PoseSequence(p, np.asarray(visible, dtype=bool)[:, None])

    def test_midpoint(self):
        out = interpolate_missing(self.one_joint([0, 0, 0, 0, 8], [1, 0, 0, 0, 1]))
        assert np.allclose(out.positions[:, 0, 0], [0, 2, 4, 6, 8])
        assert out.positions[2, 0, 1] == 4.0

    def test_hold_rule(self):
        out = interpolate_missing(self.one_joint([0, 0, 5, 0, 7, 0], [0, 0, 1, 0, 1, 0]))
        assert np.array_equal(out.positions[:, 0, 0], [5, 5, 5, 6, 7, 7])

    def test_dense_unchanged(self):
        s = seq()
        s.mask = np.ones((4, 3), dtype=bool)
        assert np.array_equal(interpolate_missing(s).positions, s.positions)

    def test_visible_untouched_and_idempotent(self):
        s = apply_occlusion(seq(32, 17, seed=2), 0.4, seed=2)
        orig = seq(32, 17, seed=2).positions
        out = interpolate_missing(s)
        assert np.array_equal(out.positions[s.mask], orig[s.mask])
        again = interpolate_missing(PoseSequence(out.positions, np.ones((32, 17), bool)))
        assert np.array_equal(again.positions, out.positions)

    def test_never_visible_names_joint(self):
        s = seq()
        s.mask = np.ones((4, 3), dtype=bool)
        s.mask[:, 2] = False
        with pytest.raises(JointNeverVisible, match="2"):
            interpolate_missing(s)

    @given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_backends_agree(self, T, N, seed):
        gen = np.random.default_rng(seed)
        values = gen.normal(size=(T, N, 3))
        visible = gen.random((T, N)) < 0.5
        visible[gen.integers(0, T, size=N), np.arange(N)] = True
        saved = kernels.get_backend()
        try:
            kernels.set_backend("numpy")
            a = kernels.fill_gaps(values, visible)
            if kernels.HAVE_NUMBA:
                kernels.set_backend("numba")
            b = kernels.fill_gaps(values, visible)
        finally:
            kernels.set_backend(saved)
        assert np.allclose(a, b, rtol=0, atol=1e-12)


class TestSkl:
    def f32_seq(self, mask=False, label="walk"):
        gen = np.random.default_rng(3)
        p = gen.normal(size=(8, 17, 3)).astype(np.float32).astype(np.float64) * 256
        m = gen.random((8, 17)) < 0.7 if mask else None
        return PoseSequence(p, m, label)

    def test_round_trip_bitwise(self, tmp_path):
        s = self.f32_seq()
        write_skl(s, tmp_path / "a.skl")
        back = read_skl(tmp_path / "a.skl")
        assert back.positions.tobytes() == s.positions.tobytes()
        assert back.label == "walk" and back.mask is None
        write_skl(back, tmp_path / "b.skl")
        assert (tmp_path / "a.skl").read_bytes() == (tmp_path / "b.skl").read_bytes()

    def test_mask_round_trip(self):
        s = self.f32_seq(mask=True)
        back = decode_skl(encode_skl(s))
        assert np.array_equal(back.mask, s.mask)

    def test_layout(self):
        buf = encode_skl(self.f32_seq(label="ab"))
        assert buf[:4] == b"SKL1"
        assert int.from_bytes(buf[4:8], "little") == 1
        assert int.from_bytes(buf[8:12], "little") == 8
        assert int.from_bytes(buf[12:16], "little") == 17
        assert buf[16] == 0 and int.from_bytes(buf[17:19], "little") == 2
        assert buf[19:21] == b"ab"
        assert len(buf) == 21 + 8 * 17 * 12

    def test_bad_magic(self):
        buf = bytearray(encode_skl(self.f32_seq()))
        buf[0] ^= 0xFF
        with pytest.raises(FormatError) as err:
            decode_skl(bytes(buf))
        assert err.value.offset == 0

    def test_bad_version(self):
        buf = bytearray(encode_skl(self.f32_seq()))
        buf[4] = 7
        with pytest.raises(FormatError, match="version") as err:
            decode_skl(bytes(buf))
        assert err.value.offset == 4

    def test_truncated(self):
        buf = encode_skl(self.f32_seq(mask=True))
        for cut in (2, 10, len(buf) - 1):
            with pytest.raises(FormatError):
                decode_skl(buf[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError, match="trailing"):
            decode_skl(encode_skl(self.f32_seq()) + b"\0")

    def test_dataset_dir(self, tmp_path):
        samples = generate_synthetic(small(occlusion=0.1))
        save_dataset(samples, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert len(back) == 3
        # float32 storage
        assert np.allclose(stack_inputs(back), stack_inputs(samples), atol=1e-3)
        assert np.array_equal(back[0].input.mask, samples[0].input.mask)


class TestTable:
    def test_single_row(self, tmp_path):
        (tmp_path / "t.csv").write_text("1.0,2.0,3.0\n")
        s = import_table(tmp_path / "t.csv", 1, 1)
        assert s.positions.shape == (1, 1, 3)
        assert np.array_equal(s.positions[0, 0], [1, 2, 3])

    def test_wrong_columns(self, tmp_path):
        (tmp_path / "t.csv").write_text("1.0,2.0\n")
        with pytest.raises(ParseError, match="row 1") as err:
            import_table(tmp_path / "t.csv", 1, 1)
        assert err.value.row == 1

    def test_bad_cell_names_column(self, tmp_path):
        (tmp_path / "t.csv").write_text("1,2,3\n4,x,6\n")
        with pytest.raises(ParseError) as err:
            import_table(tmp_path / "t.csv", 2, 1)
        assert (err.value.row, err.value.column) == (2, 2)

    def test_row_count(self, tmp_path):
        (tmp_path / "t.csv").write_text("1,2,3\n")
        with pytest.raises(ParseError):
            import_table(tmp_path / "t.csv", 2, 1)

    def test_whitespace_separated(self, tmp_path):
        (tmp_path / "t.txt").write_text("1 2 3  4 5 6\n")
        s = import_table(tmp_path / "t.txt", 1, 2)
        assert np.array_equal(s.positions[0, 1], [4, 5, 6])

    def test_export_import(self, tmp_path):
        s = generate_synthetic(small())[0].input
        export_table(s, tmp_path / "x.csv")
        back = import_table(tmp_path / "x.csv", s.frames, s.joints)
        assert np.allclose(back.positions, s.positions, rtol=0, atol=1e-6)


def test_sequence_shape_checks():
    with pytest.raises(ShapeMismatch):
        PoseSequence(np.zeros((4, 3)))
    with pytest.raises(ShapeMismatch):
        PoseSequence(np.zeros((4, 3, 3)), np.ones((4, 2), bool))


def test_network_layout():
    s = generate_synthetic(small())[0]
    ch = s.input.to_channels()
    assert ch.shape == (3, 16, 17)
    assert np.array_equal(ch[:, 5, 2], s.input.positions[5, 2])
    assert isinstance(s, Sample)
