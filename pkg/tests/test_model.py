import numpy as np
import pytest
import torch

from asklab import grammar, model, scenes
from conftest import TINY_MODEL, make_agent, random_small_scene


def _dialogue(space, vocab, pairs):
    out = []
    for text, ans in pairs:
        ast = grammar.parse(text, space)
        out.append((vocab.encode(grammar.realize(ast)), int(ans)))
    return out


def test_masked_goal_softmax_restriction():
    sigma = torch.tensor([[0.9, 0.1, 0.5, 0.7], [0.2, 0.8, 0.3, 0.4]])
    mask = torch.tensor([[True, True, True, False], [True, True, False, False]])
    p = model.masked_goal_softmax(sigma, mask)
    assert p.shape == (2, 4)
    assert p[0, 3] == 0 and p[1, 2] == 0 and p[1, 3] == 0
    assert float(p[0].sum()) == pytest.approx(1.0)
    assert float(p[1].sum()) == pytest.approx(1.0)
    # softmax over the sigmas themselves, not their logs
    want = torch.softmax(sigma[0, :3], dim=0)
    assert p[0, :3] == pytest.approx(want, abs=1e-6)


def test_masked_goal_softmax_monotone():
    sigma = torch.tensor([[0.1, 0.9, 0.5]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    p = model.masked_goal_softmax(sigma, mask)[0]
    assert p[1] > p[2] > p[0]


def test_top_k_select_orders_by_probability():
    p = np.array([0.1, 0.4, 0.05, 0.3, 0.15, 0.0])
    assert model.top_k_select(p, k=3, n_real=5) == [1, 3, 4]


def test_top_k_select_tie_break_by_id():
    p = np.array([0.25, 0.25, 0.25, 0.25, 0.0])
    assert model.top_k_select(p, k=3, n_real=4) == [0, 1, 2]
    # ties behind a clear leader also resolve by id
    p = np.array([0.2, 0.4, 0.2, 0.2])
    assert model.top_k_select(p, k=2, n_real=4) == [1, 0]


def test_top_k_select_ignores_padding():
    # padded slots carry zeros but must never be selected even if real
    # objects have smaller probability mass
    p = np.array([0.0, 0.0, 1.0, 0.0, 0.0])
    assert model.top_k_select(p, k=2, n_real=3) == [2, 0]


def test_top_k_select_k_capped_at_n_real():
    p = np.array([0.5, 0.3, 0.2, 0.0])
    assert model.top_k_select(p, k=4, n_real=3) == [0, 1, 2]


@pytest.mark.parametrize("variant", model.VARIANTS)
def test_encode_shapes_and_probabilities(variant, ask3_space):
    agent = make_agent(variant, ask3_space)
    rng = np.random.default_rng(0)
    scene_a = random_small_scene(rng, ask3_space, n=4, scene_id="a")
    scene_b = random_small_scene(rng, ask3_space, n=5, scene_id="b")
    d = _dialogue(ask3_space, agent.vocab, [("is it a red thing ?", True)])
    state = agent.encode([scene_a, scene_b], [d, []])
    n_max = agent.config.n_max
    assert state.sigma.shape == (2, n_max)
    assert state.p_goal.shape == (2, n_max)
    assert state.obj_mask.tolist()[0] == [True] * 4 + [False] * (n_max - 4)
    p = state.p_goal.detach().numpy()
    assert p[0, 4:] == pytest.approx(np.zeros(n_max - 4))
    assert p.sum(axis=1) == pytest.approx(np.ones(2))
    real = state.sigma[state.obj_mask]
    assert ((real > 0) & (real < 1)).all()
    assert (state.sigma[~state.obj_mask] == 0).all()


@pytest.mark.parametrize("variant", model.VARIANTS)
def test_batch_invariance(variant, ask3_space):
    agent = make_agent(variant, ask3_space)
    agent.eval()
    rng = np.random.default_rng(1)
    scene_a = random_small_scene(rng, ask3_space, n=3, scene_id="a")
    scene_b = random_small_scene(rng, ask3_space, n=5, scene_id="b")
    d = _dialogue(ask3_space, agent.vocab, [("is it a cube ?", False)])
    with torch.no_grad():
        batched = agent.encode([scene_a, scene_b], [d, d])
        alone = agent.encode([scene_a], [d])
    assert batched.p_goal[0].numpy() == pytest.approx(alone.p_goal[0].numpy(), abs=1e-5)


def test_predict_argmax(ask3_space):
    agent = make_agent("uniqer", ask3_space)
    rng = np.random.default_rng(2)
    scene = random_small_scene(rng, ask3_space, n=4)
    with torch.no_grad():
        state = agent.encode([scene], [[]])
    pred = agent.predict(state)
    assert pred == [int(np.argmax(state.p_goal[0].numpy()))]
    assert 0 <= pred[0] < 4


def test_otm_logits_shape_and_top_k(ask3_space):
    agent = make_agent("uniqer", ask3_space, k=2)
    rng = np.random.default_rng(3)
    scene = random_small_scene(rng, ask3_space, n=5)
    with torch.no_grad():
        state = agent.encode([scene], [[]])
        logits, top_k = agent.otm_logits(state)
    assert logits.shape == (1, 9)
    assert len(top_k[0]) == 2
    p = state.p_goal[0].numpy()
    assert top_k[0] == model.top_k_select(p, 2, n_real=5)


def test_generate_emits_token_ids(ask3_space):
    agent = make_agent("uniqer", ask3_space)
    rng = np.random.default_rng(4)
    scene = random_small_scene(rng, ask3_space, n=4)
    groups = torch.zeros(1, agent.config.n_max, dtype=torch.long)
    groups[0, 0] = 1
    groups[0, 1] = 2
    with torch.no_grad():
        state = agent.encode([scene], [[]])
        tokens = agent.generate(state, groups)
    assert len(tokens) == 1
    assert 0 < len(tokens[0]) <= agent.config.max_decode_len
    assert all(0 <= t < len(agent.vocab.tokens) for t in tokens[0])


def test_teacher_logits_shape(ask3_space, vocab3):
    agent = make_agent("uniqer", ask3_space)
    rng = np.random.default_rng(5)
    scene = random_small_scene(rng, ask3_space, n=3)
    groups = torch.zeros(1, agent.config.n_max, dtype=torch.long)
    groups[0, 1] = 1
    ids = agent.vocab.encode(["is", "it", "a", "cube", "?", "[EOS]"])
    tgt_in = torch.tensor([[agent.vocab.bos_id] + ids[:-1]])
    with torch.no_grad():
        state = agent.encode([scene], [[]])
        logits = agent.teacher_logits(state, groups, tgt_in)
    assert logits.shape == (1, len(ids), len(agent.vocab.tokens))


def test_variant_architecture_flags(ask3_space):
    uniqer = make_agent("uniqer", ask3_space)
    vanilla = make_agent("vanilla", ask3_space)
    mlp = make_agent("not_unified_mlp_guesser", ask3_space)
    split = make_agent("not_unified", ask3_space)
    baseline = make_agent("baseline", ask3_space)
    assert isinstance(uniqer, model.UniQerAgent)
    assert isinstance(vanilla, model.VanillaAgent)
    assert isinstance(mlp, model.NotUnifiedMlpGuesserAgent)
    assert isinstance(split, model.NotUnifiedAgent)
    for agent in (uniqer, vanilla, mlp, split, baseline):
        assert agent.variant == agent.config.variant


def test_sl_rl_parameter_split(ask3_space):
    agent = make_agent("uniqer", ask3_space)
    sl = {id(p) for p in agent.sl_parameters()}
    rl = {id(p) for p in agent.rl_parameters()}
    everything = {id(p) for p in agent.parameters()}
    assert rl and sl
    assert rl.isdisjoint(sl)
    assert (sl | rl) <= everything
    # RL trains the targeting head only
    otm = {id(p) for p in agent.otm.parameters()}
    assert rl == otm


def test_baseline_rl_fine_tunes_generator(ask3_space):
    # the recurrent baseline pretrains its generator supervised, then the
    # policy stage fine-tunes those same weights
    agent = make_agent("baseline", ask3_space)
    rl = {id(p) for p in agent.rl_parameters()}
    sl = {id(p) for p in agent.sl_parameters()}
    assert rl and sl
    assert rl <= sl
    assert rl != sl  # guesser and answer encoder stay supervised-only


def test_n_positions_covers_worst_case(ask3_space):
    agent = make_agent("uniqer", ask3_space)
    cap = agent.n_positions()
    per_turn = max(grammar.max_question_len(ask3_space), agent.config.max_decode_len) + 1
    assert cap >= 2 + agent.config.t_max * per_turn
    # a full t_max dialogue of worst-case questions must encode
    rng = np.random.default_rng(6)
    scene = random_small_scene(rng, ask3_space, n=4)
    worst = [([7] * agent.config.max_decode_len, 1)] * agent.config.t_max
    with torch.no_grad():
        agent.encode([scene], [worst])  # must not raise


def test_encode_rejects_overlong_dialogue(ask3_space):
    agent = make_agent("uniqer", ask3_space, t_max=2)
    rng = np.random.default_rng(7)
    scene = random_small_scene(rng, ask3_space, n=3)
    worst = [([7] * 40, 1)] * 4
    with pytest.raises(ValueError):
        agent.encode([scene], [worst])


def test_seed_determinism(ask3_space):
    a = make_agent("uniqer", ask3_space, seed=3)
    b = make_agent("uniqer", ask3_space, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = make_agent("uniqer", ask3_space, seed=4)
    assert any(
        not torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_checkpoint_round_trip(tmp_path, ask3_space):
    agent = make_agent("not_unified", ask3_space, seed=11)
    path = tmp_path / "ckpt" / "agent.pt"
    model.save_checkpoint(agent, path, stage="sl", metrics={"val_f1": 0.5})
    assert path.exists() and path.with_suffix(".pt.json").exists()
    loaded, manifest = model.load_checkpoint(path)
    assert manifest["stage"] == "sl"
    assert manifest["metrics"]["val_f1"] == 0.5
    assert loaded.variant == "not_unified"
    assert loaded.config == agent.config
    for pa, pb in zip(agent.parameters(), loaded.parameters()):
        assert torch.equal(pa, pb)
    rng = np.random.default_rng(8)
    scene = random_small_scene(rng, ask3_space, n=4)
    with torch.no_grad():
        sa = agent.encode([scene], [[]])
        sb = loaded.encode([scene], [[]])
    assert sa.p_goal.numpy() == pytest.approx(sb.p_goal.numpy())


def test_checkpoint_rejects_vocabulary_drift(tmp_path, ask3_space):
    import json

    agent = make_agent("uniqer", ask3_space)
    path = tmp_path / "agent.pt"
    model.save_checkpoint(agent, path, stage="sl")
    manifest_path = tmp_path / "agent.pt.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["vocabulary_sha256"] = "0" * 64
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        model.load_checkpoint(path)


def test_build_variant_rejects_unknown(ask3_space):
    cfg = model.ModelConfig(variant="uniqer", **TINY_MODEL)
    with pytest.raises(ValueError):
        model.build_variant(
            model.ModelConfig(**{**cfg.__dict__, "variant": "transformer"}), ask3_space
        )
