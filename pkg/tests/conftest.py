import functools

import pytest

from enlargectrl import config


def shipped_doc(relative):
    return config.validate(config.load(config.shipped(relative)), relative)


@functools.lru_cache(maxsize=None)
def shipped_scenario(relative, **overrides):
    doc = shipped_doc(relative)
    if overrides:
        doc = config.apply_overrides(doc, [f"{k}={v}" for k, v in overrides.items()])
    return config.build_scenario(doc)


@pytest.fixture(scope="session")
def s1():
    return shipped_scenario("battery/s1_full.json")


@pytest.fixture(scope="session")
def s2():
    return shipped_scenario("battery/s2_equivalence.json")
