import numpy as np
import pytest
from hypothesis import given, strategies as st

from adastep.prompts import (ATTRIBUTE_SCALE, PromptDataset, PromptSpec, Universe, bag_of_tokens, dumps_corpus,
                             encode_prompt, generate_prompt_corpus, generate_splits, load_corpus, loads_corpus,
                             pad_tokens, richness, save_corpus, target_distribution, uniform_share_ok)


class TestPromptSpec:
    def test_richness_examples(self):
        assert richness(PromptSpec(0, (3,))) == 1
        assert PromptSpec(1, (0, 2, 5), ((0, "tight"), (5, "wide"))).richness == 5

    def test_components_are_sorted_and_validated(self):
        assert PromptSpec(0, (5, 1, 3)).components == (1, 3, 5)
        with pytest.raises(ValueError):
            PromptSpec(0, ())
        with pytest.raises(ValueError):
            PromptSpec(0, (1, 1))
        with pytest.raises(ValueError):
            PromptSpec(0, (1,), ((2, "wide"),))
        with pytest.raises(ValueError):
            PromptSpec(0, (1,), ((1, "blurry"),))
        with pytest.raises(ValueError):
            PromptSpec(0, (1,), ((1, "wide"), (1, "tight")))

    def test_token_ranges_are_disjoint(self):
        p = PromptSpec(0, (0, 7), ((0, "tight"), (7, "wide")))
        assert p.tokens(8) == [0, 7, 8, 8 + 14 + 1]

    def test_key_ignores_id(self):
        assert PromptSpec(0, (1, 2)).key == PromptSpec(9, (2, 1)).key


class TestCorpus:
    def test_single_richness(self):
        ds = generate_prompt_corpus(8, 100, (1, 1), seed=3)
        assert all(len(p.components) == 1 and not p.attributes for p in ds)

    def test_reproducible(self):
        a = generate_prompt_corpus(8, 200, (1, 8), seed=5)
        b = generate_prompt_corpus(8, 200, (1, 8), seed=5)
        assert a.prompts == b.prompts

    def test_uniform_richness_at_scale(self):
        ds = generate_prompt_corpus(8, 10_000, (1, 8), seed=0)
        hist = ds.richness_histogram()
        assert sorted(hist) == list(range(1, 9))
        assert all(1000 <= c <= 1500 for c in hist.values())
        assert uniform_share_ok(hist, 1, 8)

    def test_histogram_matches_recount(self):
        ds = generate_prompt_corpus(8, 500, (2, 6), seed=1)
        recount = {}
        for p in ds:
            r = len(p.components) + len(p.attributes)
            recount[r] = recount.get(r, 0) + 1
        assert ds.richness_histogram() == dict(sorted(recount.items()))

    @pytest.mark.parametrize("rng_", [(0, 3), (1, 17), (5, 2)])
    def test_rejects_infeasible_richness(self, rng_):
        with pytest.raises(ValueError):
            generate_prompt_corpus(8, 10, rng_)

    def test_rejects_small_universe(self):
        with pytest.raises(ValueError):
            generate_prompt_corpus(1, 10, (1, 1))

    def test_splits_are_disjoint(self):
        train, test = generate_splits(8, 300, 100, seed=2)
        assert not {p.id for p in train} & {p.id for p in test}
        assert train.split == "train" and test.split == "test"

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            PromptDataset([PromptSpec(1, (0,)), PromptSpec(1, (2,))])


class TestTargets:
    def test_single_component(self):
        u = Universe()
        mix = target_distribution(PromptSpec(0, (0,)), u)
        np.testing.assert_allclose(mix.centers, [[4.0, 0.0]])
        np.testing.assert_allclose(mix.variances, [u.base_var])
        np.testing.assert_allclose(mix.weights, [1.0])

    def test_antipodal_pair(self):
        mix = target_distribution(PromptSpec(0, (0, 4)))
        np.testing.assert_allclose(mix.centers[0], -mix.centers[1], atol=1e-12)
        np.testing.assert_allclose(mix.weights, [0.5, 0.5])

    def test_attribute_scales(self):
        mix = target_distribution(PromptSpec(0, (1, 2, 3), ((1, "tight"), (3, "wide"))))
        np.testing.assert_allclose(mix.variances, [0.25 * ATTRIBUTE_SCALE["tight"], 0.25, 0.25 * ATTRIBUTE_SCALE["wide"]])

    def test_occupancy_monte_carlo(self):
        mix = target_distribution(PromptSpec(0, (1, 2, 3)))
        _, labels = mix.sample(100_000, np.random.default_rng(0))
        occ = np.bincount(labels, minlength=3) / 100_000
        assert np.all(np.abs(occ - 1 / 3) < 0.02)

    def test_component_outside_universe(self):
        with pytest.raises(ValueError):
            target_distribution(PromptSpec(0, (9,)), Universe(M=8))


class TestEncoding:
    table = np.random.default_rng(0).standard_normal((24, 5))

    def test_single_token(self):
        emb = encode_prompt(PromptSpec(0, (3,)), self.table)
        np.testing.assert_array_equal(emb.pooled, self.table[3])
        assert emb.tokens.shape == (1, 5)

    @given(st.permutations([0, 2, 5]))
    def test_order_free(self, perm):
        a = encode_prompt(PromptSpec(0, tuple(perm)), self.table).pooled
        b = encode_prompt(PromptSpec(0, (0, 2, 5)), self.table).pooled
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_attribute_changes_embedding(self):
        a = encode_prompt(PromptSpec(0, (1, 2), ((1, "tight"),)), self.table).pooled
        b = encode_prompt(PromptSpec(0, (1, 2), ((1, "wide"),)), self.table).pooled
        assert np.linalg.norm(a - b) > 0

    def test_token_count_equals_richness(self):
        p = PromptSpec(0, (0, 1, 6), ((6, "wide"),))
        assert encode_prompt(p, self.table).tokens.shape[0] == p.richness

    def test_unknown_token(self):
        with pytest.raises(ValueError):
            encode_prompt(PromptSpec(0, (7,), ((7, "wide"),)), self.table[:10], M=8)

    def test_bag_reproduces_mean_pooling(self):
        ps = list(generate_prompt_corpus(8, 20, (1, 8), seed=4))
        pooled = bag_of_tokens(ps, 24, 8) @ self.table
        for p, row in zip(ps, pooled):
            np.testing.assert_allclose(row, encode_prompt(p, self.table).pooled, atol=1e-14)

    def test_padding(self):
        ids, mask = pad_tokens([PromptSpec(0, (1,)), PromptSpec(1, (2, 3), ((3, "tight"),))], 8)
        assert ids.shape == (2, 3)
        assert mask.tolist() == [[True, False, False], [True, True, True]]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        ds = generate_prompt_corpus(8, 50, (1, 8), seed=9, split="test", family="fam")
        save_corpus(ds, tmp_path / "c.jsonl")
        back = load_corpus(tmp_path / "c.jsonl")
        assert back.prompts == ds.prompts and back.split == "test" and back.family == "fam"
        assert dumps_corpus(back) == dumps_corpus(ds)

    def test_field_order_fixed(self):
        text = dumps_corpus(generate_prompt_corpus(8, 1, (3, 3), seed=0))
        assert text.startswith('{"id":0,"components":[')
        with pytest.raises(ValueError):
            loads_corpus('{"components":[1],"id":0,"attributes":[],"richness":1,"split":"train","family":"b"}\n')

    def test_richness_mismatch_rejected(self):
        with pytest.raises(ValueError):
            loads_corpus('{"id":0,"components":[1],"attributes":[],"richness":2,"split":"train","family":"b"}\n')
