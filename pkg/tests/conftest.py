import dataclasses

import numpy as np
import pytest
import torch

from asklab import grammar, model, scenes

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def ask3_space():
    return scenes.ask3_space()


@pytest.fixture(scope="session")
def ask4_space():
    return scenes.ask4_space()


@pytest.fixture(scope="session")
def vocab3(ask3_space):
    return grammar.build_vocabulary(ask3_space)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = scenes.DatasetConfig(name="ask3", n_train=8, n_val=4, n_test=4, seed=7)
    return scenes.generate_dataset(cfg)


TINY_MODEL = dict(d_model=32, n_head=2, dim_feedforward=64, n_layers=1, dropout=0.0, seed=0)


def make_agent(variant, space, **overrides):
    """Small agent for unit tests; overrides update TINY_MODEL fields."""
    kw = {**TINY_MODEL, **overrides, "variant": variant}
    return model.build_variant(model.ModelConfig(**kw), space)


@pytest.fixture
def agent_factory(ask3_space):
    def build(variant="uniqer", space=None, **overrides):
        return make_agent(variant, space or ask3_space, **overrides)

    return build


def make_scene(attrs, positions, scene_id="t0", split="test"):
    """Hand-rolled scene: attrs is a list of (size, color, material, shape)."""
    objects = []
    for i, ((size, color, material, shape), (x, y)) in enumerate(zip(attrs, positions)):
        objects.append(
            scenes.SceneObject(
                id=i, shape=shape, color=color, size=size, material=material,
                position=(x, y),
                bbox=(30 + 400 * x, 35 + 240 * y, 40.0, 40.0),
            )
        )
    return scenes.Scene(
        scene_id=scene_id, split=split, image_size=scenes.IMAGE_SIZE, objects=tuple(objects)
    )


@pytest.fixture
def scene_factory():
    return make_scene


def random_small_scene(rng, space, n=None, scene_id="r0"):
    """Uniform random attributes and positions; at most 5 objects."""
    n = n or int(rng.integers(3, 6))
    attrs = []
    for _ in range(n):
        attrs.append(
            tuple(rng.choice(list(space.values(dim))) for dim in scenes.ATTRIBUTE_DIMS)
        )
    # ATTRIBUTE_DIMS order is (size, color, material, shape), matching make_scene
    positions = []
    while len(positions) < n:
        p = (float(rng.uniform()), float(rng.uniform()))
        if all(abs(p[0] - q[0]) + abs(p[1] - q[1]) > 1e-3 for q in positions):
            positions.append(p)
    return make_scene(attrs, positions, scene_id=scene_id)


@pytest.fixture
def small_scene_factory():
    return random_small_scene


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance pass/fail lines where capture cannot hide them."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, name, ok, detail in sorted(RESULTS):
        status = "PASS" if ok else "FAIL"
        suffix = f"  [{detail}]" if detail else ""
        terminalreporter.write_line(f"criterion {num:02d} {name}: {status}{suffix}")
