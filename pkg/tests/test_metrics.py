"""Metric functions, the evaluation driver, and transcript persistence."""

import json

import numpy as np
import pytest

from asklab import grammar, metrics, oracle, scenes
from asklab.metrics import EpisodeTrace, MetricReport, TraceStep

from conftest import make_agent, make_scene


# ---------------------------------------------------------------------------
# scalar metrics


def test_f1_closed_forms():
    assert metrics.f1_candidates([], []) == 1.0
    assert metrics.f1_candidates([0, 1], [2, 3]) == 0.0
    # precision 1/2, recall 1/2
    assert metrics.f1_candidates([0, 1], [1, 2]) == pytest.approx(0.5)
    # precision 2/3, recall 1
    assert metrics.f1_candidates([0, 1, 2], [1, 2]) == pytest.approx(0.8)
    assert metrics.f1_candidates([5], [5]) == 1.0


def test_address_ratios():
    seq = [oracle.PERFECT, oracle.CORRECT, oracle.NEITHER, oracle.PERFECT]
    perfect, correct = metrics.address_ratios(seq)
    assert perfect == pytest.approx(0.5)
    assert correct == pytest.approx(0.75)  # correct counts perfect too
    assert metrics.address_ratios([]) == (0.0, 0.0)


def test_task_success_counts_only_successes():
    traces = [
        EpisodeTrace(scene_id="a", goal_id=0, n_objects=3, success=True),
        EpisodeTrace(scene_id="b", goal_id=1, n_objects=3, success=False),
        EpisodeTrace(scene_id="c", goal_id=2, n_objects=3, success=True),
    ]
    assert metrics.task_success(traces) == pytest.approx(2 / 3)
    assert metrics.task_success([]) == 0.0


def test_vocab_metrics_worked_example(ask3_space):
    lexicon = grammar.content_lexicon(ask3_space)
    dialogue = ["is it a sphere ?", "is it a red sphere ?"]
    n_vocab, n_bar = metrics.vocab_metrics([dialogue], lexicon)
    # per-question content counts 1 and 2; dialogue union {sphere, red} over 2
    assert n_vocab == pytest.approx(1.5)
    assert n_bar == pytest.approx(1.0)


def test_vocab_metrics_single_question_and_function_words(ask3_space):
    lexicon = grammar.content_lexicon(ask3_space)
    assert metrics.vocab_metrics([["is it a cube ?"]], lexicon) == (1.0, 1.0)
    # function words and out-of-lexicon tokens contribute nothing
    n_vocab, n_bar = metrics.vocab_metrics([["is it a banana ?"]], lexicon)
    assert n_vocab == 0.0 and n_bar == 0.0


def test_vocab_metrics_skips_empty_dialogues(ask3_space):
    lexicon = grammar.content_lexicon(ask3_space)
    n_vocab, n_bar = metrics.vocab_metrics([[], ["is it a red cube ?"]], lexicon)
    assert n_vocab == pytest.approx(2.0)
    assert n_bar == pytest.approx(2.0)
    assert metrics.vocab_metrics([[]], lexicon) == (0.0, 0.0)


# ---------------------------------------------------------------------------
# trace aggregation


@pytest.fixture
def metric_scene():
    return make_scene(
        [
            ("small", "red", "rubber", "cube"),
            ("small", "blue", "rubber", "cube"),
            ("large", "green", "rubber", "sphere"),
        ],
        [(0.2, 0.5), (0.8, 0.5), (0.5, 0.2)],
        scene_id="m0",
    )


def _trace_pool(metric_scene):
    # Episode A: one perfect question, then a successful submission.
    a = EpisodeTrace(
        scene_id="m0", goal_id=0, n_objects=3,
        steps=[
            TraceStep(
                sigma=[0.9, 0.8, 0.1], p_goal=[0.5, 0.4, 0.1], action=None,
                top_k=[0, 1, 2], group_vector=[1, 2, 2],
                question="is it a red thing ?", answer=True, reward=0.0,
            ),
            TraceStep(
                sigma=[0.95, 0.2, 0.1], p_goal=[0.8, 0.1, 0.1], action=0,
                top_k=[0, 1, 2], group_vector=None,
                question=None, answer=None, reward=0.96,
            ),
        ],
        prediction=0, success=True, reward=0.96, submitted_at=2,
        final_sigma=[0.9, 0.1, 0.2],
    )
    # Episode B: an unparseable question, then a merely correct one, no
    # submission before the horizon.
    b = EpisodeTrace(
        scene_id="m0", goal_id=1, n_objects=3,
        steps=[
            TraceStep(
                sigma=[0.6, 0.6, 0.6], p_goal=[1 / 3] * 3, action=None,
                top_k=[0, 1, 2], group_vector=[0, 1, 2],
                question="is it a banana thing ?", answer=False, reward=0.0,
            ),
            TraceStep(
                sigma=[0.1, 0.9, 0.1], p_goal=[0.1, 0.8, 0.1], action=None,
                top_k=[1, 0, 2], group_vector=[0, 1, 2],
                question="is it a small thing ?", answer=True, reward=0.0,
            ),
        ],
        prediction=None, success=False, reward=0.0,
        final_sigma=[0.2, 0.8, 0.3],
    )
    return [a, b]


def test_trace_metrics_hand_computed(metric_scene, ask3_space):
    values = metrics.trace_metrics(_trace_pool(metric_scene), {"m0": metric_scene}, ask3_space)
    # f1 points: A scores 0.8 on {0,1} vs {0,1,2}, then 1.0 twice after the
    # red question collapses the candidates to {0}; B scores 1.0, then 0.5 on
    # {1} vs {0,1,2} (the unparseable "no" eliminated nobody), then 2/3 on
    # {1} vs {0,1} after the small question.
    assert values["f1"] == pytest.approx(149 / 180, abs=1e-12)
    # addresses: perfect (red splits 0 from 1,2 exactly), neither
    # (unparseable), correct (small matches target 1 but also masked 0)
    assert values["perfect_address_ratio"] == pytest.approx(1 / 3, abs=1e-12)
    assert values["correct_address_ratio"] == pytest.approx(2 / 3, abs=1e-12)
    assert values["task_success"] == pytest.approx(0.5)
    assert values["mean_questions"] == pytest.approx(1.5)
    # content per question: A {red}; B {} and {small}
    assert values["n_vocab"] == pytest.approx(0.75, abs=1e-12)
    assert values["n_bar_vocab"] == pytest.approx(0.75, abs=1e-12)


def test_trace_metrics_empty_pool(ask3_space):
    values = metrics.trace_metrics([], {}, ask3_space)
    assert values["f1"] == 0.0
    assert values["task_success"] == 0.0
    assert set(values) == set(metrics.METRIC_NAMES)


def test_trace_metrics_empty_targets_score_neither(metric_scene, ask3_space):
    trace = EpisodeTrace(
        scene_id="m0", goal_id=0, n_objects=3,
        steps=[
            TraceStep(
                sigma=[0.9, 0.1, 0.1], p_goal=[0.8, 0.1, 0.1], action=None,
                top_k=[0, 1, 2], group_vector=[0, 0, 2],
                question="is it a red thing ?", answer=True, reward=0.0,
            )
        ],
    )
    values = metrics.trace_metrics([trace], {"m0": metric_scene}, ask3_space)
    assert values["correct_address_ratio"] == 0.0
    assert values["perfect_address_ratio"] == 0.0


# ---------------------------------------------------------------------------
# report container


def _synthetic_report():
    rec = lambda f1, perf, corr, succ, q, nv, nb: {
        "overall": {
            "f1": f1, "perfect_address_ratio": perf, "correct_address_ratio": corr,
            "task_success": succ, "mean_questions": q, "n_vocab": nv, "n_bar_vocab": nb,
        }
    }
    return MetricReport(
        mode="standard", seeds=[0, 1],
        per_seed=[rec(0.9, 0.2, 0.6, 0.5, 3.0, 2.0, 1.5), rec(0.7, 0.4, 0.8, 0.7, 2.0, 1.0, 1.0)],
    )


def test_report_aggregate_mean_and_population_std():
    report = _synthetic_report()
    mean, std = report.aggregate("overall", "f1")
    assert mean == pytest.approx(0.8)
    assert std == pytest.approx(0.1)
    mean, std = report.aggregate("overall", "mean_questions")
    assert (mean, std) == (pytest.approx(2.5), pytest.approx(0.5))


def test_report_validate_rejects_bad_shapes_and_ranges():
    report = _synthetic_report()
    report.validate()

    broken = _synthetic_report()
    broken.seeds = [0]
    with pytest.raises(ValueError, match="disagree"):
        broken.validate()

    broken = _synthetic_report()
    broken.per_seed[0]["overall"]["f1"] = 1.2
    with pytest.raises(ValueError, match="outside"):
        broken.validate()

    broken = _synthetic_report()
    broken.per_seed[0]["overall"]["perfect_address_ratio"] = 0.9
    with pytest.raises(ValueError, match="perfect"):
        broken.validate()


def test_report_json_round_trip():
    report = _synthetic_report()
    payload = report.to_json()
    assert payload["summary"]["overall"]["f1"]["mean"] == pytest.approx(0.8)
    clone = MetricReport.from_json(json.loads(json.dumps(payload)))
    assert clone.mode == report.mode
    assert clone.seeds == report.seeds
    assert clone.per_seed == report.per_seed


def test_report_rows_layout():
    rows = _synthetic_report().rows()
    assert len(rows) == len(metrics.METRIC_NAMES)
    assert rows[0] == {"split": "overall", "metric": "f1", "mean": "0.8000", "std": "0.1000"}
    assert all(set(r) == {"split", "metric", "mean", "std"} for r in rows)


# ---------------------------------------------------------------------------
# evaluation driver


def test_build_eval_games_deterministic_and_valid(tiny_dataset):
    scenes_ = tiny_dataset.split("val")
    games = metrics.build_eval_games(scenes_, games_per_scene=2, seed=3)
    again = metrics.build_eval_games(scenes_, games_per_scene=2, seed=3)
    assert [(g.scene.scene_id, g.goal_id) for g in games] == [
        (g.scene.scene_id, g.goal_id) for g in again
    ]
    by_scene = {}
    for g in games:
        assert 0 <= g.goal_id < len(g.scene)
        by_scene.setdefault(g.scene.scene_id, []).append(g.goal_id)
    for scene in scenes_:
        goals = by_scene[scene.scene_id]
        assert len(goals) == min(2, len(scene))
        assert len(set(goals)) == len(goals)  # goals drawn without replacement


def test_episode_rng_is_a_function_of_identity():
    a = metrics.episode_rng(5, 2, 1).uniform()
    b = metrics.episode_rng(5, 2, 1).uniform()
    c = metrics.episode_rng(5, 2, 0).uniform()
    assert a == b
    assert a != c


@pytest.fixture(scope="module")
def eval_setup(tiny_dataset):
    agent = make_agent("uniqer", tiny_dataset.space, k=2, t_max=3)
    games = metrics.build_eval_games(tiny_dataset.split("val"), games_per_scene=1, seed=0)
    return agent, games


def test_evaluate_games_rejects_unknown_mode(eval_setup):
    agent, games = eval_setup
    with pytest.raises(ValueError, match="mode"):
        metrics.evaluate_games(agent, games, mode="bogus")


def test_evaluate_games_deterministic(eval_setup):
    agent, games = eval_setup
    values1, traces1 = metrics.evaluate_games(agent, games, mode="standard")
    values2, traces2 = metrics.evaluate_games(agent, games, mode="standard")
    assert values1 == values2
    assert [metrics.trace_to_record(t) for t in traces1] == [
        metrics.trace_to_record(t) for t in traces2
    ]
    assert set(values1) == set(metrics.METRIC_NAMES)


def test_evaluate_games_force_stop_always_predicts(eval_setup):
    agent, games = eval_setup
    _, traces = metrics.evaluate_games(agent, games, mode="force_stop")
    for trace in traces:
        assert trace.prediction is not None
        assert trace.n_questions <= agent.config.t_max


def test_evaluate_games_random_modes_deterministic(eval_setup):
    agent, games = eval_setup
    for mode in ("random_otm", "random_otm_force_stop"):
        v1, t1 = metrics.evaluate_games(agent, games, mode=mode, eval_seed=9)
        v2, t2 = metrics.evaluate_games(agent, games, mode=mode, eval_seed=9)
        assert v1 == v2
        assert [metrics.trace_to_record(t) for t in t1] == [
            metrics.trace_to_record(t) for t in t2
        ]


def test_evaluate_games_baseline_dispatch(tiny_dataset):
    agent = make_agent("baseline", tiny_dataset.space, t_max=3)
    games = metrics.build_eval_games(tiny_dataset.split("val"), games_per_scene=1, seed=0)
    values, traces = metrics.evaluate_games(agent, games, mode="force_stop")
    assert set(values) == set(metrics.METRIC_NAMES)
    assert len(traces) == len(games)


def test_evaluate_full_report(tiny_dataset, tmp_path):
    agent = make_agent("uniqer", tiny_dataset.space, k=2, t_max=3)
    report = metrics.evaluate(
        agent, tiny_dataset, mode="standard", seeds=(0, 1),
        games_per_scene=1, transcript_dir=tmp_path,
    )
    assert report.seeds == [0, 1]
    assert len(report.per_seed) == 2
    for record in report.per_seed:
        assert set(record) == {"new_image", "new_object", "overall"}
    report.validate()
    for seed in (0, 1):
        for split in ("new_image", "new_object"):
            assert (tmp_path / f"standard_{split}_seed{seed}.jsonl").exists()
    # rows cover every split/metric pair
    assert len(report.rows()) == 3 * len(metrics.METRIC_NAMES)


def test_evaluate_rejects_unknown_split(tiny_dataset):
    agent = make_agent("uniqer", tiny_dataset.space, k=2, t_max=3)
    with pytest.raises(ValueError, match="split"):
        metrics.evaluate(agent, tiny_dataset, splits=("bogus",))


# ---------------------------------------------------------------------------
# transcripts


def test_transcript_round_trip(metric_scene, tmp_path):
    traces = _trace_pool(metric_scene)
    path = tmp_path / "episodes.jsonl"
    metrics.write_transcripts(path, traces)
    reread = metrics.read_transcripts(path)
    assert [metrics.trace_to_record(t) for t in reread] == [
        metrics.trace_to_record(t) for t in traces
    ]


def test_transcripts_reproduce_report_exactly(eval_setup, tiny_dataset, tmp_path):
    agent, games = eval_setup
    values, traces = metrics.evaluate_games(agent, games, mode="standard")
    path = tmp_path / "episodes.jsonl"
    metrics.write_transcripts(path, traces)
    reread = metrics.read_transcripts(path)
    scenes_by_id = {g.scene.scene_id: g.scene for g in games}
    recomputed = metrics.trace_metrics(reread, scenes_by_id, agent.space)
    assert recomputed == values  # bit for bit, through the JSON round trip
