import numpy as np
import pytest

from asklab import grammar, oracle, scenes
from conftest import make_scene, random_small_scene
from semantics_ref import ref_match_set


def _agreement_scan(space, n_scenes, seed):
    rng = np.random.default_rng(seed)
    asts = grammar.enumerate_asts(space)
    for i in range(n_scenes):
        scene = random_small_scene(rng, space, scene_id=f"agree_{i}")
        for ast in asts:
            got = oracle.match_set(ast, scene)
            want = ref_match_set(grammar.question_string(ast), scene, space)
            assert got == frozenset(want), (scene.scene_id, grammar.question_string(ast))


def test_match_set_agrees_with_reference_ask3(ask3_space):
    _agreement_scan(ask3_space, n_scenes=40, seed=101)


def test_match_set_agrees_with_reference_ask4(ask4_space):
    _agreement_scan(ask4_space, n_scenes=20, seed=202)


def test_matches_basic_geometry(ask3_space):
    # b is right of a, c is in front of both
    scene = make_scene(
        [
            ("small", "red", "rubber", "cube"),
            ("large", "blue", "rubber", "sphere"),
            ("small", "green", "rubber", "cylinder"),
        ],
        [(0.2, 0.3), (0.7, 0.3), (0.5, 0.9)],
    )
    q = grammar.parse("is it to the right of a red cube ?", ask3_space)
    assert oracle.match_set(q, scene) == {1, 2}
    q = grammar.parse("is it in front of a blue sphere ?", ask3_space)
    assert oracle.match_set(q, scene) == {2}
    q = grammar.parse("is it behind of a green thing ?", ask3_space)
    assert oracle.match_set(q, scene) == {0, 1}
    q = grammar.parse("is it to the left of a large thing ?", ask3_space)
    assert oracle.match_set(q, scene) == {0, 2}


def test_unparseable_question_matches_nothing(ask3_space):
    scene = random_small_scene(np.random.default_rng(0), ask3_space)
    assert oracle.match_set(None, scene) == frozenset()
    game = scenes.GameInstance(scene=scene, goal_id=0)
    assert oracle.answer(None, game) is False
    # answer "no" to an unparseable question eliminates nobody
    assert oracle.matched_set(None, False, scene) == frozenset(range(len(scene)))


def test_matched_set_partitions(ask3_space):
    rng = np.random.default_rng(7)
    scene = random_small_scene(rng, ask3_space, n=5)
    everyone = frozenset(range(5))
    for ast in grammar.enumerate_asts(ask3_space):
        yes = oracle.matched_set(ast, True, scene)
        no = oracle.matched_set(ast, False, scene)
        assert yes | no == everyone
        assert yes & no == frozenset()


def test_answer_consistent_with_matched_set(ask3_space):
    rng = np.random.default_rng(8)
    scene = random_small_scene(rng, ask3_space, n=4)
    for goal in range(4):
        game = scenes.GameInstance(scene=scene, goal_id=goal)
        for ast in grammar.enumerate_asts(ask3_space):
            ans = oracle.answer(ast, game)
            assert (goal in oracle.matched_set(ast, ans, scene)) is True


def test_candidate_set_shrinks_and_keeps_goal(ask3_space):
    rng = np.random.default_rng(9)
    for trial in range(20):
        scene = random_small_scene(rng, ask3_space, scene_id=f"cand_{trial}")
        goal = int(rng.integers(len(scene)))
        game = scenes.GameInstance(scene=scene, goal_id=goal)
        dialogue = []
        prev = frozenset(range(len(scene)))
        for _ in range(4):
            asts = grammar.enumerate_asts(ask3_space)
            ast = asts[int(rng.integers(len(asts)))]
            dialogue.append((ast, oracle.answer(ast, game)))
            cur = oracle.candidate_set(dialogue, scene)
            assert cur <= prev
            assert goal in cur
            prev = cur


def test_candidate_set_empty_dialogue(ask3_space):
    scene = random_small_scene(np.random.default_rng(1), ask3_space, n=3)
    assert oracle.candidate_set([], scene) == {0, 1, 2}


def _address_fixture():
    # ids: 0 small red cube, 1 small red cube (twin), 2 large blue sphere,
    # 3 small green cylinder; 2 and 3 both sit in front of the cubes
    return make_scene(
        [
            ("small", "red", "rubber", "cube"),
            ("small", "red", "rubber", "cube"),
            ("large", "blue", "rubber", "sphere"),
            ("small", "green", "rubber", "cylinder"),
        ],
        [(0.1, 0.5), (0.9, 0.5), (0.5, 0.8), (0.5, 0.9)],
    )


def test_classify_address_cases(ask3_space):
    scene = _address_fixture()
    g = oracle.Grouping(
        targets=frozenset({0, 1}), distracters=frozenset({2}), masked=frozenset({3})
    )
    parse = lambda q: grammar.parse(q, ask3_space)
    # match set exactly the targets: perfect
    assert oracle.classify_address(g, parse("is it a red cube ?"), scene) == "perfect"
    # match set = targets plus a masked object: correct but not perfect
    assert oracle.classify_address(g, parse("is it a small thing ?"), scene) == "correct"
    # mirror image with the masked object stranded on the target side
    assert oracle.classify_address(g, parse("is it a blue sphere ?"), scene) == "correct"
    # mirror image whose complement is exactly the targets: perfect
    assert (
        oracle.classify_address(g, parse("is it in front of a red cube ?"), scene)
        == "perfect"
    )
    g2 = oracle.Grouping(
        targets=frozenset({0, 1}), distracters=frozenset({3}), masked=frozenset({2})
    )
    assert oracle.classify_address(g2, parse("is it a large thing ?"), scene) == "neither"
    # question splitting the targets themselves: neither
    assert (
        oracle.classify_address(g, parse("is it to the left of a blue thing ?"), scene)
        == "neither"
    )
    # unparseable output addresses nothing
    assert oracle.classify_address(g, None, scene) == "neither"


def test_classify_address_requires_targets():
    scene = _address_fixture()
    g = oracle.Grouping(
        targets=frozenset(), distracters=frozenset({0, 1}), masked=frozenset({2, 3})
    )
    with pytest.raises(ValueError):
        oracle.classify_address(g, None, scene)


def test_grouping_validation():
    with pytest.raises(ValueError):
        oracle.Grouping(
            targets=frozenset({0}), distracters=frozenset({0}), masked=frozenset()
        )
    g = oracle.Grouping(
        targets=frozenset({0}), distracters=frozenset({1}), masked=frozenset()
    )
    scene = _address_fixture()
    with pytest.raises(ValueError):
        g.validate_for(scene)  # ids 2, 3 uncovered


def test_match_matrix_agrees_with_matches(ask3_space, ask4_space):
    rng = np.random.default_rng(33)
    for tag, space in (("mm3", ask3_space), ("mm4", ask4_space)):
        scene = random_small_scene(rng, space, n=5, scene_id=tag)
        matrix = oracle.match_matrix(scene, space)
        asts = grammar.enumerate_asts(space)
        assert matrix.shape == (len(asts), 5)
        assert not matrix.flags.writeable
        for qi, ast in enumerate(asts):
            for obj in scene.objects:
                assert matrix[qi, obj.id] == oracle.matches(obj, ast, scene)


def test_informative_indices_split(ask3_space):
    rng = np.random.default_rng(4)
    scene = random_small_scene(rng, ask3_space, n=5)
    cands = frozenset({0, 2, 4})
    asts = grammar.enumerate_asts(ask3_space)
    idx = set(oracle.informative_indices(scene, ask3_space, cands).tolist())
    for qi, ast in enumerate(asts):
        inside = oracle.match_set(ast, scene) & cands
        assert (qi in idx) == (0 < len(inside) < len(cands))


def test_sample_gt_question_properties(ask3_space):
    rng = np.random.default_rng(5)
    for trial in range(30):
        scene = random_small_scene(rng, ask3_space, scene_id=f"gt_{trial}")
        all_ids = frozenset(range(len(scene)))
        ast, grouping = oracle.sample_gt_question(scene, all_ids, rng, ask3_space)
        grouping.validate_for(scene)
        assert grouping.targets and grouping.distracters
        assert grouping.masked == frozenset()
        assert grouping.targets == oracle.match_set(ast, scene) & all_ids
        # an informative-by-construction question is at least correct
        assert oracle.classify_address(grouping, ast, scene) in ("perfect", "correct")


def test_sample_gt_question_masks_non_candidates(ask3_space):
    rng = np.random.default_rng(6)
    scene = random_small_scene(rng, ask3_space, n=5)
    cands = frozenset({1, 3})
    ast, grouping = oracle.sample_gt_question(scene, cands, rng, ask3_space)
    assert grouping.targets | grouping.distracters == cands
    assert grouping.masked == frozenset({0, 2, 4})


def test_sample_gt_question_varies(ask3_space):
    rng = np.random.default_rng(12)
    scene = random_small_scene(rng, ask3_space, n=5, scene_id="vary")
    seen = set()
    for _ in range(60):
        ast, _ = oracle.sample_gt_question(scene, frozenset(range(5)), rng, ask3_space)
        seen.add(grammar.question_string(ast))
    assert len(seen) > 5


def test_sample_gt_question_rejects_small_candidate_sets(ask3_space):
    scene = _address_fixture()
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        oracle.sample_gt_question(scene, frozenset({0}), rng, ask3_space)


def test_no_informative_question_on_shielded_twins(ask3_space):
    # six identical red cubes: every descriptor matches everyone, and the
    # four extremal objects guarantee that each interior object has a
    # neighbour on every side, so every relational question matches both
    # interior objects alike and nothing splits candidates {4, 5}
    attrs = [("small", "red", "rubber", "cube")] * 6
    positions = [(0.1, 0.5), (0.9, 0.5), (0.5, 0.1), (0.5, 0.9), (0.5, 0.5), (0.45, 0.55)]
    scene = make_scene(attrs, positions)
    rng = np.random.default_rng(0)
    with pytest.raises(oracle.NoInformativeQuestion):
        oracle.sample_gt_question(scene, frozenset({4, 5}), rng, ask3_space)


def test_sample_gt_questions_surface(ask3_space):
    rng = np.random.default_rng(13)
    scene = random_small_scene(rng, ask3_space, n=4)
    out = oracle.sample_gt_questions(scene, ask3_space, rng, count=5)
    assert len(out) == 5
    for q in out:
        ast = grammar.parse(q, ask3_space)
        s = oracle.match_set(ast, scene)
        assert 0 < len(s) < 4
