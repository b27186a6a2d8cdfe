import struct

import numpy as np
import pytest

from mixsurv.dataio import (
    CohortManifest,
    FormatError,
    ManifestEntry,
    PatchBag,
    SyntheticSpec,
    generate_synthetic_cohort,
    kfold_split,
    read_manifest,
    read_patch_features,
    write_patch_features,
)


def _write_bag(path, n=3, d=2):
    write_patch_features(path, np.ones((n, d)), np.zeros((n, 2)))


@pytest.fixture
def three_slides(tmp_path):
    for i in range(3):
        _write_bag(tmp_path / f"s{i}.psf")
    return tmp_path


class TestManifest:
    def test_valid(self, three_slides):
        p = three_slides / "m.csv"
        p.write_text("slide_id,feature_file,time_months,censor\n"
                     "a,s0.psf,10.5,1\nb,s1.psf,3,0\nc,s2.psf,7.25,1\n")
        m = read_manifest(p)
        assert len(m) == 3
        assert [e.slide_id for e in m] == ["a", "b", "c"]
        assert m.entries[1].censor == 0
        assert m.entries[0].feature_file == three_slides / "s0.psf"

    def test_duplicate_id(self, three_slides):
        p = three_slides / "m.csv"
        p.write_text("slide_id,feature_file,time_months,censor\na,s0.psf,1,1\na,s1.psf,2,1\n")
        with pytest.raises(FormatError, match="'a'"):
            read_manifest(p)

    def test_zero_time_cites_row(self, three_slides):
        p = three_slides / "m.csv"
        p.write_text("slide_id,feature_file,time_months,censor\na,s0.psf,1,1\nb,s1.psf,0,1\n")
        with pytest.raises(FormatError, match=r"m\.csv:3"):
            read_manifest(p)

    @pytest.mark.parametrize("row", ["a,s0.psf,1", "a,s0.psf,1,2", "a,s0.psf,x,1", "a,s0.psf,-1,0"])
    def test_malformed_rows(self, three_slides, row):
        p = three_slides / "m.csv"
        p.write_text("slide_id,feature_file,time_months,censor\n" + row + "\n")
        with pytest.raises(FormatError):
            read_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "nope.csv")

    def test_missing_feature_file(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("slide_id,feature_file,time_months,censor\na,gone.psf,1,1\n")
        with pytest.raises(FileNotFoundError, match="gone.psf"):
            read_manifest(p)


class TestPsf1:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(10, 8)).astype(np.float32)
        c = rng.uniform(0, 100, size=(10, 2)).astype(np.float32)
        write_patch_features(tmp_path / "b.psf", f, c)
        f2, c2 = read_patch_features(tmp_path / "b.psf")
        assert f2.tobytes() == f.tobytes()
        assert c2.tobytes() == c.tobytes()

    def test_size_of_unit_bag(self, tmp_path):
        write_patch_features(tmp_path / "b.psf", [[1.0]], [[0.0, 0.0]])
        assert (tmp_path / "b.psf").stat().st_size == 16 + 4 * 1 + 4 * 2

    def test_header_layout(self, tmp_path):
        write_patch_features(tmp_path / "b.psf", np.zeros((5, 4)), np.zeros((5, 2)))
        raw = (tmp_path / "b.psf").read_bytes()
        assert raw[:4] == b"PSF1"
        assert struct.unpack("<III", raw[4:16]) == (5, 4, 1)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "b.psf"
        p.write_bytes(b"XXXX" + struct.pack("<III", 1, 1, 1) + b"\0" * 12)
        with pytest.raises(FormatError, match="magic"):
            read_patch_features(p)

    def test_length_mismatch(self, tmp_path):
        # n=5, d=4 needs 5*4 + 5*2 = 30 floats; 70 supplied
        p = tmp_path / "b.psf"
        p.write_bytes(b"PSF1" + struct.pack("<III", 5, 4, 1) + np.zeros(70, "<f4").tobytes())
        with pytest.raises(FormatError, match="payload length"):
            read_patch_features(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "b.psf"
        p.write_bytes(b"PSF1" + struct.pack("<III", 5, 4, 1) + np.zeros(29, "<f4").tobytes())
        with pytest.raises(FormatError):
            read_patch_features(p)

    def test_overflow(self, tmp_path):
        p = tmp_path / "b.psf"
        p.write_bytes(b"PSF1" + struct.pack("<III", 2**31, 2**31, 1))
        with pytest.raises(FormatError, match="overflow"):
            read_patch_features(p)

    def test_nan_payload(self, tmp_path):
        p = tmp_path / "b.psf"
        payload = np.zeros(3, "<f4")
        payload[0] = np.nan
        p.write_bytes(b"PSF1" + struct.pack("<III", 1, 1, 1) + payload.tobytes())
        with pytest.raises(FormatError, match="NaN"):
            read_patch_features(p)

    def test_empty_bag_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_patch_features(tmp_path / "b.psf", np.zeros((0, 3)), np.zeros((0, 2)))


class TestPatchBag:
    def test_invariants(self):
        with pytest.raises(ValueError):
            PatchBag("s", np.ones((3, 2)), np.ones((2, 2)), 1.0, 1)
        with pytest.raises(ValueError):
            PatchBag("s", np.ones((3, 2)), np.ones((3, 2)), 0.0, 1)
        with pytest.raises(ValueError):
            PatchBag("s", np.ones((3, 2)), np.ones((3, 2)), 1.0, 2)


class TestSynthetic:
    def test_no_censoring(self, tmp_path):
        coh = generate_synthetic_cohort(SyntheticSpec(n_slides=20, censoring=0.0, seed=1), tmp_path)
        assert all(e.censor == 1 for e in coh.manifest)

    def test_sharp_loglogistic_times(self, tmp_path):
        spec = SyntheticSpec(n_slides=200, n_phenotypes=1, alphas=(10.0,), betas=(50.0,),
                             censoring=0.0, patches_per_slide=(2, 4), d=4, seed=2)
        t = generate_synthetic_cohort(spec, tmp_path).manifest.times
        assert np.mean((t >= 8) & (t <= 12)) >= 0.95

    def test_median_matches_alpha(self, tmp_path):
        spec = SyntheticSpec(n_slides=600, n_phenotypes=1, alphas=(10.0,), betas=(3.0,),
                             censoring=0.0, patches_per_slide=(1, 2), d=2, seed=3)
        t = generate_synthetic_cohort(spec, tmp_path).manifest.times
        assert abs(np.median(t) - 10.0) <= 1.5

    def test_censoring_fraction_and_bounds(self, tmp_path):
        coh = generate_synthetic_cohort(SyntheticSpec(n_slides=300, censoring=0.2, seed=4,
                                                      patches_per_slide=(2, 3), d=4), tmp_path)
        ev = coh.manifest.events
        assert 0.12 < 1 - ev.mean() < 0.28
        assert np.all(coh.manifest.times > 0)

    def test_deterministic_bytes(self, tmp_path):
        spec = SyntheticSpec(n_slides=5, seed=7, patches_per_slide=(3, 6), d=4)
        generate_synthetic_cohort(spec, tmp_path / "a")
        generate_synthetic_cohort(spec, tmp_path / "b")
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_manifest_readable(self, tmp_path):
        generate_synthetic_cohort(SyntheticSpec(n_slides=4, seed=0, d=4), tmp_path)
        m = read_manifest(tmp_path / "manifest.csv")
        bag = m.load_bag(m.entries[0])
        assert bag.d == 4

    def test_blobs_are_spatially_coherent(self, tmp_path):
        spec = SyntheticSpec(n_slides=1, seed=5, patches_per_slide=(80, 80), d=4, dominant_fraction=0.5)
        coh = generate_synthetic_cohort(spec, tmp_path)
        bag = coh.manifest.load_bag(coh.manifest.entries[0])
        labels = np.argmin(((bag.features[:, None, :] - coh.centroids[None]) ** 2).sum(-1), axis=1)
        within = np.mean([bag.coords[labels == k].std(0).mean() for k in range(2)])
        assert within < bag.coords.std(0).mean()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SyntheticSpec(censoring=1.0)
        with pytest.raises(ValueError):
            SyntheticSpec(alphas=(5.0, -1.0))


def _fake_manifest(n):
    return CohortManifest([ManifestEntry(f"s{i}", f"s{i}.psf", 1.0 + i, 1) for i in range(n)])


class TestKfold:
    def test_sizes(self):
        folds = kfold_split(_fake_manifest(10), k=5, seed=0)
        assert [len(te) for _, te in folds] == [2] * 5

    @pytest.mark.parametrize("n,k", [(10, 5), (11, 5), (7, 3), (300, 5)])
    def test_partition(self, n, k):
        m = _fake_manifest(n)
        folds = kfold_split(m, k=k, seed=3)
        tests = [e.slide_id for _, te in folds for e in te]
        assert sorted(tests) == sorted(e.slide_id for e in m)
        sizes = [len(te) for _, te in folds]
        assert max(sizes) - min(sizes) <= 1
        for tr, te in folds:
            assert not {e.slide_id for e in tr} & {e.slide_id for e in te}
            assert len(tr) + len(te) == n

    def test_deterministic(self):
        m = _fake_manifest(12)
        a = [[e.slide_id for e in te] for _, te in kfold_split(m, 4, seed=9)]
        b = [[e.slide_id for e in te] for _, te in kfold_split(m, 4, seed=9)]
        assert a == b

    def test_k1_rejected(self):
        with pytest.raises(ValueError):
            kfold_split(_fake_manifest(5), k=1)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            kfold_split(_fake_manifest(3), k=4)
