"""Shared generators for tests."""
from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from crepe.token_schema import CHARSET, ROOT, Branch, Leaf

SEG_CHARS = CHARSET.replace(" ", "")


def random_segment(rng: np.random.Generator) -> str:
    return "".join(rng.choice(list(SEG_CHARS), int(rng.integers(1, 6))))


def random_tree(rng: np.random.Generator, fields, max_depth: int = 3, max_leaves: int = 12) -> Branch:
    """Canonical tree: no adjacent leaves, empty leaf only as a field's sole child."""
    budget = [int(rng.integers(1, max_leaves + 1))]

    def children(depth: int) -> list:
        out = []
        for _ in range(int(rng.integers(1, 4))):
            want_leaf = depth == max_depth or rng.random() < 0.5
            if want_leaf:
                if out and isinstance(out[-1], Leaf):
                    continue
                k = min(int(rng.integers(1, 4)), budget[0])
                if k <= 0:
                    continue
                budget[0] -= k
                out.append(Leaf([random_segment(rng) for _ in range(k)]))
            else:
                name = str(rng.choice(fields))
                kids = children(depth + 1)
                out.append(Branch(name, kids or [Leaf()]))
        return out

    return Branch(ROOT, children(1))


segments = st.text(alphabet=SEG_CHARS, min_size=1, max_size=5)


@st.composite
def trees(draw, fields, max_depth: int = 3):
    def kids(depth: int) -> list:
        out = []
        n = draw(st.integers(1 if depth > 1 else 0, 3))
        for _ in range(n):
            leaf = depth == max_depth or draw(st.booleans())
            if leaf:
                if out and isinstance(out[-1], Leaf):
                    continue
                out.append(Leaf(draw(st.lists(segments, min_size=1, max_size=3))))
            else:
                name = draw(st.sampled_from(fields))
                sub = kids(depth + 1)
                out.append(Branch(name, sub or [Leaf()]))
        return out

    return Branch(ROOT, kids(1))


def leaf_count(tree) -> int:
    if isinstance(tree, Leaf):
        return len(tree.segments)
    return sum(leaf_count(c) for c in tree.children)


def depth(tree) -> int:
    if isinstance(tree, Leaf):
        return 0
    d = max((depth(c) for c in tree.children), default=0)
    return d + (0 if tree.name == ROOT else 1)
