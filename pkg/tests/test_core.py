import dataclasses
import json

import numpy as np
import pytest
from conftest import make_pool, make_subject
from hypothesis import given, settings
from hypothesis import strategies as st

from leuda.core import (
    NUM_CLASSES,
    STUDENT_KINDS,
    ImageKind,
    ImageTensor,
    InvalidInputError,
    PairedSample,
    PairKind,
    ProbMap,
    SegMask,
    Subject,
    TrainingConfig,
    assemble_batch,
    labeled_slice_pool,
    split_dataset,
    split_from_manifest,
)


class TestImageTensor:
    def test_accepts_chw_float(self):
        t = ImageTensor(np.zeros((1, 8, 8), dtype=np.float32), ImageKind.S, "a/000")
        assert t.data.shape == (1, 8, 8)

    def test_rejects_bad_rank(self):
        with pytest.raises(InvalidInputError):
            ImageTensor(np.zeros((8, 8), dtype=np.float32), ImageKind.S, "a/000")

    def test_rejects_nonfinite(self):
        bad = np.full((1, 4, 4), np.nan, dtype=np.float32)
        with pytest.raises(InvalidInputError):
            ImageTensor(bad, ImageKind.S, "a/000")

    def test_with_kind_retags(self):
        t = ImageTensor(np.zeros((1, 4, 4), dtype=np.float32), ImageKind.S, "a/000")
        r = t.with_kind(ImageKind.S2T)
        assert r.kind is ImageKind.S2T
        assert r.slice_id == t.slice_id
        np.testing.assert_array_equal(r.data, t.data)

    def test_kind_style_predicates(self):
        assert ImageKind.T2S.is_source_like
        assert ImageKind.S2T2S.is_source_like
        assert ImageKind.S2T.is_target_like
        assert ImageKind.T2S2T.is_target_like
        assert not ImageKind.S.is_source_like
        assert not ImageKind.T.is_target_like

    def test_student_kinds_are_source_style_or_original_source(self):
        assert STUDENT_KINDS == {ImageKind.S, ImageKind.S2T2S, ImageKind.T2S}


class TestMasksAndProbs:
    def test_segmask_rejects_out_of_range(self):
        with pytest.raises(InvalidInputError):
            SegMask(np.full((4, 4), NUM_CLASSES, dtype=np.int64))
        with pytest.raises(InvalidInputError):
            SegMask(np.full((4, 4), -1, dtype=np.int64))

    def test_segmask_rejects_float(self):
        with pytest.raises(InvalidInputError):
            SegMask(np.zeros((4, 4), dtype=np.float32))

    def test_probmap_requires_normalization(self):
        ok = np.full((NUM_CLASSES, 4, 4), 1.0 / NUM_CLASSES, dtype=np.float32)
        ProbMap(ok)
        with pytest.raises(InvalidInputError):
            ProbMap(ok * 2.0)

    def test_probmap_rejects_negative(self):
        p = np.full((2, 1, 1), 0.5, dtype=np.float32)
        p = np.concatenate([p, np.zeros((NUM_CLASSES - 2, 1, 1), dtype=np.float32)])
        p[0, 0, 0] = 1.5
        p[1, 0, 0] = -0.5
        with pytest.raises(InvalidInputError):
            ProbMap(p)


class TestSubject:
    def test_mask_alignment_enforced(self):
        s = make_subject("s00", n_slices=3)
        with pytest.raises(InvalidInputError):
            Subject(id="x", slices=s.slices, masks=s.masks[:2], domain="source")

    def test_unlabeled_allowed(self):
        s = make_subject("s00", labeled=False)
        assert s.masks is None

    def test_domain_checked(self):
        s = make_subject("s00")
        with pytest.raises(InvalidInputError):
            Subject(id="x", slices=s.slices, masks=s.masks, domain="synthetic")


class TestPairedSample:
    def _images(self, kind_src, kind_tgt, sid="a/000"):
        src = ImageTensor(np.zeros((1, 4, 4), dtype=np.float32), kind_src, sid)
        tgt = ImageTensor(np.ones((1, 4, 4), dtype=np.float32), kind_tgt, sid)
        return src, tgt

    def test_all_four_kinds_construct(self):
        for pk in PairKind:
            src, tgt = self._images(pk.source_style_kind, pk.target_style_kind)
            p = PairedSample(pair_kind=pk, source_style=src, target_style=tgt)
            assert p.source_style.kind is pk.source_style_kind

    def test_kind_mismatch_rejected(self):
        src, tgt = self._images(ImageKind.S, ImageKind.T2S2T)
        with pytest.raises(InvalidInputError):
            PairedSample(pair_kind=PairKind.S_S2T, source_style=src, target_style=tgt)

    def test_slice_id_mismatch_rejected(self):
        src = ImageTensor(np.zeros((1, 4, 4), dtype=np.float32), ImageKind.S, "a/000")
        tgt = ImageTensor(np.ones((1, 4, 4), dtype=np.float32), ImageKind.S2T, "a/001")
        with pytest.raises(InvalidInputError):
            PairedSample(pair_kind=PairKind.S_S2T, source_style=src, target_style=tgt)

    def test_pair_kind_style_tables(self):
        assert PairKind.S_S2T.source_style_kind is ImageKind.S
        assert PairKind.S2T2S_S2T.source_style_kind is ImageKind.S2T2S
        assert PairKind.T2S_T.target_style_kind is ImageKind.T
        assert PairKind.T2S_T2S2T.target_style_kind is ImageKind.T2S2T


class TestTrainingConfig:
    def test_defaults_match_contract(self):
        c = TrainingConfig()
        assert c.ema_alpha == 0.99
        assert c.l_max == (1.0, 0.01, 0.1, 0.01)
        assert c.layer_set == (1, 3)
        assert c.lambda_seg == {1: 1.0, 3: 0.1}
        assert c.lambda_adv == {1: 1.0, 3: 0.1}
        assert c.lr_peak == 0.005
        assert c.warmup_epochs == 30
        assert (c.batch_labeled, c.batch_unlabeled) == (8, 8)

    def test_weight_length_must_match_layers(self):
        with pytest.raises(InvalidInputError):
            TrainingConfig(layer_set=(1, 2, 3), lambda_seg_per_level=(1.0, 0.1))

    def test_alpha_bounds(self):
        with pytest.raises(InvalidInputError):
            TrainingConfig(ema_alpha=1.5)

    def test_intra_pool_excludes_reconstruction_by_default(self):
        c = TrainingConfig()
        assert c.intra_pool_kinds == {ImageKind.S, ImageKind.T2S}
        c2 = TrainingConfig(intra_include_cycle=True)
        assert ImageKind.S2T2S in c2.intra_pool_kinds


class TestSplit:
    def test_documented_counts(self):
        pool = make_pool(20, 20)
        split = split_dataset(pool, train_fraction=0.8, label_ratio=0.25, seed=0)
        assert split.n_l == 4
        assert split.n_u == 12
        assert split.m_u == 16
        assert len(split.source_test) == 4
        assert len(split.target_test) == 4

    def test_full_label_ratio(self):
        pool = make_pool(20, 20)
        split = split_dataset(pool, train_fraction=0.8, label_ratio=1.0, seed=0)
        assert split.n_l == 16
        assert split.n_u == 0

    def test_clamps_to_one_labeled_subject(self):
        pool = make_pool(4, 4)
        split = split_dataset(pool, train_fraction=0.8, label_ratio=0.25, seed=0)
        assert split.n_l == 1
        assert any("clamped" in n for n in split.notes)

    def test_partition_is_disjoint_and_complete(self):
        pool = make_pool(11, 7)
        split = split_dataset(pool, train_fraction=0.7, label_ratio=0.5, seed=5)
        groups = [
            split.labeled_source,
            split.unlabeled_source,
            split.source_test,
            split.target,
            split.target_test,
        ]
        ids = [s.id for g in groups for s in g]
        assert len(ids) == len(set(ids)) == len(pool)

    def test_deterministic_under_seed(self):
        pool = make_pool(10, 10)
        a = split_dataset(pool, 0.8, 0.5, seed=9)
        b = split_dataset(pool, 0.8, 0.5, seed=9)
        assert [s.id for s in a.labeled_source] == [s.id for s in b.labeled_source]
        assert [s.id for s in a.target] == [s.id for s in b.target]
        c = split_dataset(pool, 0.8, 0.5, seed=10)
        all_same = [s.id for s in a.labeled_source] == [s.id for s in c.labeled_source] and [
            s.id for s in a.target
        ] == [s.id for s in c.target]
        assert not all_same

    @given(
        ratio_lo=st.sampled_from([0.1, 0.25, 0.4]),
        ratio_hi=st.sampled_from([0.5, 0.75, 1.0]),
        seed=st.integers(0, 50),
    )
    @settings(max_examples=20, deadline=None)
    def test_labeled_count_monotone_in_ratio(self, ratio_lo, ratio_hi, seed):
        pool = make_pool(12, 12, n_slices=1, size=4)
        lo = split_dataset(pool, 0.8, ratio_lo, seed=seed)
        hi = split_dataset(pool, 0.8, ratio_hi, seed=seed)
        assert lo.n_l <= hi.n_l
        assert lo.n_l + lo.n_u == hi.n_l + hi.n_u

    def test_labeled_subjects_must_have_masks(self):
        pool = make_pool(4, 4)
        unlabeled = [
            make_subject(f"u{i}", "source", labeled=False) for i in range(4)
        ]
        with pytest.raises(InvalidInputError):
            split_dataset(unlabeled + pool[4:], 0.8, 1.0, seed=0)

    def test_rejects_empty_modality(self):
        pool = [make_subject("s0", "source")]
        with pytest.raises(InvalidInputError):
            split_dataset(pool, 0.8, 0.5, seed=0)

    def test_rejects_bad_fractions(self):
        pool = make_pool(4, 4)
        with pytest.raises(InvalidInputError):
            split_dataset(pool, 0.0, 0.5, seed=0)
        with pytest.raises(InvalidInputError):
            split_dataset(pool, 0.8, 1.0001, seed=0)

    def test_manifest_round_trip(self, tmp_path):
        pool = make_pool(10, 10)
        split = split_dataset(pool, 0.8, 0.5, seed=2)
        path = tmp_path / "split.json"
        split.save_manifest(path)
        manifest = json.loads(path.read_text())
        restored = split_from_manifest(pool, manifest)
        for field in ("labeled_source", "unlabeled_source", "target", "source_test", "target_test"):
            assert [s.id for s in getattr(restored, field)] == [
                s.id for s in getattr(split, field)
            ]


class TestBatchAssembly:
    def _split_and_pairs(self, n_slices=4):
        pool = make_pool(6, 6, n_slices=n_slices, size=8)
        split = split_dataset(pool, 1.0, 0.5, seed=0)
        pairs = []
        for subj in split.labeled_source + split.unlabeled_source:
            for sl in subj.slices:
                pairs.append(
                    PairedSample(
                        pair_kind=PairKind.S_S2T,
                        source_style=sl,
                        target_style=sl.with_kind(ImageKind.S2T),
                    )
                )
        return split, pairs

    def test_batch_composition(self):
        split, pairs = self._split_and_pairs()
        cfg = TrainingConfig(batch_labeled=8, batch_unlabeled=8)
        labeled, pair_batch = assemble_batch(split, pairs, cfg, step_seed=0)
        assert len(labeled) == 8
        assert len(pair_batch) == 8
        assert all(m is not None for _, m in labeled)

    def test_supervised_only_batch(self):
        split, pairs = self._split_and_pairs()
        cfg = TrainingConfig(batch_labeled=1, batch_unlabeled=0)
        labeled, pair_batch = assemble_batch(split, pairs, cfg, step_seed=0)
        assert len(labeled) == 1
        assert pair_batch == []

    def test_step_seed_replay(self):
        split, pairs = self._split_and_pairs()
        cfg = TrainingConfig(batch_labeled=4, batch_unlabeled=4)
        a = assemble_batch(split, pairs, cfg, step_seed=7)
        b = assemble_batch(split, pairs, cfg, step_seed=7)
        assert [im.slice_id for im, _ in a[0]] == [im.slice_id for im, _ in b[0]]
        assert [p.source_style.slice_id for p in a[1]] == [
            p.source_style.slice_id for p in b[1]
        ]
        c = assemble_batch(split, pairs, cfg, step_seed=8)
        assert [im.slice_id for im, _ in a[0]] != [im.slice_id for im, _ in c[0]] or [
            p.source_style.slice_id for p in a[1]
        ] != [p.source_style.slice_id for p in c[1]]

    def test_replacement_fallback_when_pool_small(self):
        pool = make_pool(2, 2, n_slices=1, size=8)
        split = split_dataset(pool, 1.0, 1.0, seed=0)
        cfg = TrainingConfig(batch_labeled=8, batch_unlabeled=0)
        labeled, _ = assemble_batch(split, [], cfg, step_seed=0)
        assert len(labeled) == 8
        assert len({im.slice_id for im, _ in labeled}) <= 2

    def test_without_replacement_when_pool_large(self):
        split, pairs = self._split_and_pairs(n_slices=8)
        cfg = TrainingConfig(batch_labeled=8, batch_unlabeled=8)
        labeled, pair_batch = assemble_batch(split, pairs, cfg, step_seed=1)
        assert len({im.slice_id for im, _ in labeled}) == 8
        assert len({p.source_style.slice_id for p in pair_batch}) == 8

    def test_pairs_required_when_requested(self):
        split, _ = self._split_and_pairs()
        cfg = TrainingConfig(batch_labeled=2, batch_unlabeled=2)
        with pytest.raises(InvalidInputError):
            assemble_batch(split, [], cfg, step_seed=0)


class TestLabeledSlicePool:
    def _split_with_cycle_pairs(self):
        pool = make_pool(4, 4, n_slices=2, size=8)
        split = split_dataset(pool, 1.0, 0.5, seed=0)
        pairs = []
        for subj in split.labeled_source:
            for sl in subj.slices:
                pairs.append(
                    PairedSample(
                        pair_kind=PairKind.S2T2S_S2T,
                        source_style=sl.with_kind(ImageKind.S2T2S),
                        target_style=sl.with_kind(ImageKind.S2T),
                    )
                )
        return split, pairs

    def test_cycle_copies_inherit_labels(self):
        split, pairs = self._split_with_cycle_pairs()
        with_cycle = labeled_slice_pool(split, pairs, use_cycle_labels=True)
        without = labeled_slice_pool(split, pairs, use_cycle_labels=False)
        n_direct = sum(len(s.slices) for s in split.labeled_source)
        assert len(without) == n_direct
        assert len(with_cycle) == n_direct + len(pairs)
        by_id = {}
        for im, mask in with_cycle:
            by_id.setdefault(im.slice_id, []).append((im.kind, mask))
        for subj in split.labeled_source:
            for sl, mask in zip(subj.slices, subj.masks):
                entries = dict(by_id[sl.slice_id])
                assert ImageKind.S2T2S in entries
                np.testing.assert_array_equal(entries[ImageKind.S2T2S].labels, mask.labels)

    def test_pool_kinds_are_trainable(self):
        split, pairs = self._split_with_cycle_pairs()
        pool = labeled_slice_pool(split, pairs, use_cycle_labels=True)
        assert {im.kind for im, _ in pool} <= STUDENT_KINDS


class TestDataclassHygiene:
    def test_value_objects_frozen(self):
        t = ImageTensor(np.zeros((1, 4, 4), dtype=np.float32), ImageKind.S, "a/000")
        with pytest.raises(dataclasses.FrozenInstanceError):
            t.kind = ImageKind.T
