"""Template corpus for desk-scale end-to-end runs.

Eight fixed sentences over a ~25-token alphabet; a training corpus is a
seeded uniform draw over the templates, so models can memorize them and
generation quality reduces to exact template membership.
"""

from __future__ import annotations

import numpy as np

TEMPLATES = [
    "the cat sat on the mat",
    "a dog ran in the park",
    "the bird flew over the lake",
    "a fish swam under the tree",
    "the big cat slept in the house",
    "a small dog ran in the garden",
    "the red bird sat on the tree",
    "a blue fish swam in the lake",
]


def template_alphabet():
    return sorted({tok for line in TEMPLATES for tok in line.split()})


def make_template_corpus(n_train=512, n_val=64, n_test=64, seed=0):
    rng = np.random.default_rng(seed)

    def draw(n):
        return [TEMPLATES[i] for i in rng.integers(0, len(TEMPLATES), size=n)]

    return {"train": draw(n_train), "val": draw(n_val), "test": draw(n_test)}


def is_template(sentence):
    return sentence in TEMPLATES
