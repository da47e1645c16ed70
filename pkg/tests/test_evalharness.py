import itertools
import json

import numpy as np
import pytest

import handcases as hc
import naive
from hirtaxa import evalharness as ev
from hirtaxa.embedcore import Model, ModelConfig
from hirtaxa.errors import ConfigError, GridMismatch, LevelOutOfRange
from hirtaxa.synthdata import GenConfig, SpecimenRecord, generate
from hirtaxa.taxonomy import make_closed_split


@pytest.fixture(scope="module")
def setup():
    tree, records, _ = generate(GenConfig(orders=2, families_per_order=2, genera_per_family=2,
                                          species_per_genus=2, specimens_per_species=4, seed=3))
    split = make_closed_split([r.label for r in records], 0.25, seed=0)
    model = Model.for_tree(ModelConfig(hidden=32, dim=16, fusion_hidden=8), tree)
    return tree, records, split, model


# ranking --------------------------------------------------------------------------
def test_exact_match_ranks_first():
    prompts = np.eye(5)
    assert ev.rank_by_similarity(prompts[3], prompts)[0] == 3


def test_tie_goes_to_lower_id():
    prompts = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert ev.rank_by_similarity(np.array([1.0, 0.0]), prompts).tolist() == [1, 2, 0]


def test_rank_matches_full_sort_oracle():
    r = np.random.default_rng(0)
    prompts = naive.unit_rows(r, 20, 6)
    for _ in range(10):
        q = naive.unit_rows(r, 1, 6)[0]
        sims = [naive.dot(q, p) for p in prompts]
        oracle = sorted(range(20), key=lambda j: (-sims[j], j))
        assert ev.rank_by_similarity(q, prompts).tolist() == oracle
        pos = ev.rank_positions(q[None], prompts, np.array([oracle[7]]))
        assert pos.tolist() == [7]


def test_rank_positions_with_ties():
    prompts = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    q = np.array([[1.0, 0.0]] * 3)
    assert ev.rank_positions(q, prompts, np.array([0, 1, 2])).tolist() == [0, 1, 2]


def test_rank_prompts_levels(setup):
    tree, _, _, model = setup
    t = model.encode_text([tree.prompts[3][2]])
    assert ev.rank_prompts(t, 4, tree, model)[0] == 2
    with pytest.raises(LevelOutOfRange):
        ev.rank_prompts(t, 5, tree, model)


def test_topk_examples():
    assert ev.topk_correct([3, 1, 2], 3, 1)
    ranking = [9, 8, 7, 6, 5, 4]
    assert ev.topk_correct(ranking, 5, 5) and not ev.topk_correct(ranking, 5, 1)


def test_topk_enumeration():
    for perm in itertools.permutations(range(4)):
        for true_id in range(4):
            for k in range(1, 5):
                assert ev.topk_correct(np.array(perm), true_id, k) == (perm.index(true_id) < k)


# scoring --------------------------------------------------------------------------
def test_hand_worked_case():
    rep = ev.evaluate_embeddings(hc.QUERIES, hc.PROMPTS, hc.LABELS, hc.KS, ("order", "family"))
    assert rep.cells == hc.EXPECTED_CELLS
    assert rep.global_ == hc.EXPECTED_GLOBAL
    assert rep.counts == hc.EXPECTED_COUNTS
    assert rep.excluded == hc.EXPECTED_EXCLUDED
    rep.check()


def test_constructed_certainty():
    prompts = [np.eye(3)[:1], np.eye(3)]
    rep = ev.evaluate_embeddings({("I->T", "clean"): [np.eye(3)[2]]}, prompts,
                                 np.array([[0, 2]]), (1,), ("genus", "species"))
    assert rep.cells[("I->T", "clean", 2, 1)] == 100.0


def test_evaluate_report_invariants(setup):
    tree, records, split, model = setup
    rep = ev.evaluate(model, records, tree, split.test, ev.EvalConfig())
    rep.check()
    for (m, c, lvl), n in rep.counts.items():
        assert n == len(split.test)
    assert len(rep.cells) == 4 * 4 * 4 * 2


def test_evaluate_deterministic(setup):
    tree, records, split, model = setup
    a = ev.evaluate(model, records, tree, split.test, ev.EvalConfig(seed=5))
    b = ev.evaluate(model, records, tree, split.test, ev.EvalConfig(seed=5))
    assert a.to_json() == b.to_json()


def test_clean_cells_isolated_from_noisy_conditions(setup):
    tree, records, split, model = setup
    full = ev.evaluate(model, records, tree, split.test, ev.EvalConfig())
    clean = ev.evaluate(model, records, tree, split.test, ev.EvalConfig(conditions=("clean",)))
    for key, acc in clean.cells.items():
        assert full.cells[key] == acc


def test_noisy_dna_shared_between_conditions(setup):
    _, records, split, _ = setup
    cfg = ev.EvalConfig()
    _, d_only = ev.degrade(records, split.test, "noisy-D", cfg)
    imgs, both = ev.degrade(records, split.test, "noisy-I+D", cfg)
    clean_imgs, clean = ev.degrade(records, split.test, "clean", cfg)
    assert d_only == both and d_only != clean
    assert not np.array_equal(imgs, clean_imgs)


def test_zero_head_gated_equals_average(setup):
    tree, records, split, _ = setup
    model = Model.for_tree(ModelConfig(hidden=32, dim=16, fusion_init="zero"), tree)
    rep = ev.evaluate(model, records, tree, split.test, ev.EvalConfig())
    for (m, c, lvl, k), acc in rep.cells.items():
        if m == "I+D gated":
            assert acc == rep.cells[("I+D avg", c, lvl, k)]


def test_all_n_dna_is_a_miss_and_excluded_from_fusion(setup):
    tree, records, split, model = setup
    recs = list(records)
    i = split.test[0]
    r = recs[i]
    recs[i] = SpecimenRecord(r.id, r.image, "N" * len(r.dna), r.label, r.prompt)
    rep = ev.evaluate(model, recs, tree, split.test, ev.EvalConfig(conditions=("clean",)))
    assert rep.excluded[("D->T", "clean")] == 0
    assert rep.counts[("D->T", "clean", 1)] == len(split.test)
    assert rep.excluded[("I+D avg", "clean")] == 1
    assert rep.counts[("I+D gated", "clean", 4)] == len(split.test) - 1


def test_validation_metric(setup):
    tree, records, split, model = setup
    val = ev.validation_metric(model, records, tree, split)
    rep = ev.evaluate(model, records, tree, split.test, ev.EvalConfig(modes=("I->T",),
                                                                      conditions=("clean",)))
    assert val == rep.global_[("I->T", "clean", 1)]


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        ev.EvalConfig(modes=()).validate()
    with pytest.raises(ConfigError):
        ev.EvalConfig(conditions=("foggy",)).validate()
    cfg = ev.EvalConfig(seed=4, ks=(1, 3))
    assert ev.EvalConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


# report IO and comparison ------------------------------------------------------------
def test_report_roundtrip_and_render(setup, tmp_path):
    tree, records, split, model = setup
    rep = ev.evaluate(model, records, tree, split.test, ev.EvalConfig())
    rep.save(tmp_path / "r.json")
    back = ev.EvalReport.load(tmp_path / "r.json")
    assert back.cells == rep.cells and back.global_ == rep.global_
    text = rep.render()
    assert "I+D gated" in text and "noisy-I+D" in text and "micro-average" in text
    rows = rep.to_rows()
    assert len(rows) == len(rep.cells) + len(rep.global_)


def test_check_catches_violations():
    rep = ev.evaluate_embeddings(hc.QUERIES, hc.PROMPTS, hc.LABELS, hc.KS)
    rep.cells[("I->T", "clean", 1, 1)] = 100.0
    rep.cells[("I->T", "clean", 1, 2)] = 50.0
    with pytest.raises(ValueError):
        rep.check()


def test_compare_reports():
    a = ev.evaluate_embeddings(hc.QUERIES, hc.PROMPTS, hc.LABELS, hc.KS)
    b = ev.evaluate_embeddings(hc.QUERIES, hc.PROMPTS, hc.LABELS, hc.KS)
    assert set(ev.compare_reports(a, b).cells.values()) == {0.0}
    b.cells[("D->T", "clean", 2, 1)] += 2.5
    delta = ev.compare_reports(a, b)
    assert delta.cells[("D->T", "clean", 2, 1)] == 2.5
    assert sum(v != 0 for v in delta.cells.values()) == 1
    assert "+2.5" in delta.render()
    c = ev.evaluate_embeddings({("I->T", "clean"): hc.QUERIES[("I->T", "clean")]},
                               hc.PROMPTS, hc.LABELS, hc.KS)
    with pytest.raises(GridMismatch):
        ev.compare_reports(a, c)
