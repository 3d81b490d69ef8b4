"""Complete context trees over a finite alphabet.

Contexts are stored as strings of digit characters, oldest symbol first, so
that "s is a postfix of the past" is simply ``past.endswith(s)``.  The
children of an internal node ``u`` are the strings ``x + u`` obtained by
prepending one older symbol ``x``; the root is the empty string.

A window of ``d`` symbols is indexed by reading it as a base-``k`` number with
the oldest symbol most significant, hence the most recent symbol of window
``w`` is ``w % k`` and its last ``l`` symbols are ``w % k**l``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlphabetMismatch,
    BudgetExceeded,
    InvalidArgs,
    MalformedTree,
    NotAPermutation,
    NotMaximalNode,
    PastTooShort,
    TreePropertyViolation,
)

MAX_ALPHABET = 10
DEFAULT_ENUMERATION_CAP = 200_000
DEFAULT_STATE_CAP = 4096


def to_string(symbols: Iterable[int] | str) -> str:
    """Render a symbol sequence (oldest first) as a context string."""
    if isinstance(symbols, str):
        return symbols
    return "".join(str(int(s)) for s in symbols)


def _check_symbols(s: str, k: int) -> None:
    for ch in s:
        if not ch.isdigit() or int(ch) >= k:
            raise InvalidArgs(f"symbol {ch!r} of {s!r} is not in the alphabet 0..{k - 1}")


def _tree_property_violation(leaves: Sequence[str]) -> tuple[str, str] | None:
    leafset = set(leaves)
    for s in leaves:
        for cut in range(1, len(s) + 1):
            if s[cut:] in leafset:
                return s[cut:], s
    return None


def is_complete(leaves: Iterable[str], k: int) -> bool:
    """True iff every internal node of the leaf set has exactly ``k`` children.

    Raises TreePropertyViolation if one leaf is a postfix of another.
    """
    leaves = [to_string(s) for s in leaves]
    if not leaves:
        raise InvalidArgs("empty leaf set")
    if len(set(leaves)) != len(leaves):
        raise TreePropertyViolation("duplicate leaves")
    bad = _tree_property_violation(leaves)
    if bad is not None:
        raise TreePropertyViolation(f"{bad[0]!r} is a postfix of {bad[1]!r}")
    nodes = set(leaves)
    internal = {s[cut:] for s in leaves for cut in range(1, len(s) + 1)}
    for u in internal:
        for x in range(k):
            if str(x) + u not in nodes and str(x) + u not in internal:
                return False
    return True


@dataclass(frozen=True)
class ContextTree:
    """An immutable complete context tree; ``leaves`` is kept in sorted order."""

    k: int
    leaves: tuple[str, ...]

    def __post_init__(self):
        if not 2 <= self.k <= MAX_ALPHABET:
            raise InvalidArgs(f"alphabet size must be in 2..{MAX_ALPHABET}, got {self.k}")
        leaves = tuple(sorted(to_string(s) for s in self.leaves))
        for s in leaves:
            _check_symbols(s, self.k)
        if not is_complete(leaves, self.k):
            raise MalformedTree(f"leaf set {list(leaves)} is not a complete tree")
        object.__setattr__(self, "leaves", leaves)

    @classmethod
    def from_leaves(cls, leaves: Iterable[str | Sequence[int]], k: int) -> "ContextTree":
        return cls(k, tuple(to_string(s) for s in leaves))

    @classmethod
    def root(cls, k: int) -> "ContextTree":
        return cls(k, ("",))

    @property
    def depth(self) -> int:
        return max(len(s) for s in self.leaves)

    @property
    def size(self) -> int:
        return len(self.leaves)

    def __len__(self) -> int:
        return len(self.leaves)

    def __contains__(self, s) -> bool:
        return to_string(s) in self._leafset

    def __iter__(self):
        return iter(self.leaves)

    @cached_property
    def _leafset(self) -> frozenset[str]:
        return frozenset(self.leaves)

    @cached_property
    def index(self) -> dict[str, int]:
        """Position of each leaf in the canonical order."""
        return {s: i for i, s in enumerate(self.leaves)}

    def children(self, u: str) -> list[str]:
        return [str(x) + u for x in range(self.k)]

    def lookup(self, past) -> str:
        return context_lookup(self, past)

    def window_map(self, depth: int) -> np.ndarray:
        """Leaf index of every window of ``depth`` symbols (see module docs)."""
        return window_leaf_map(self, depth)

    def to_json(self) -> dict:
        return {"k": self.k, "leaves": list(self.leaves)}

    @classmethod
    def from_json(cls, data: dict) -> "ContextTree":
        return cls(int(data["k"]), tuple(data["leaves"]))

    def __repr__(self) -> str:
        return f"ContextTree(k={self.k}, leaves={list(self.leaves)})"


def context_lookup(tree: ContextTree, past) -> str:
    """Return the unique leaf of ``tree`` that is a postfix of ``past``."""
    past = to_string(past)
    if len(past) < tree.depth:
        raise PastTooShort(f"past of length {len(past)} is shorter than the tree depth {tree.depth}")
    lengths = {len(s) for s in tree.leaves}
    matches = [past[len(past) - l:] for l in lengths if past[len(past) - l:] in tree]
    if len(matches) != 1:
        raise MalformedTree(f"{len(matches)} leaves are postfixes of {past!r}")
    return matches[0]


def window_leaf_map(tree: ContextTree, depth: int) -> np.ndarray:
    """Map each window index in ``0 .. k**depth - 1`` to the index of its context."""
    if depth < tree.depth:
        raise PastTooShort(f"windows of length {depth} are shorter than the tree depth {tree.depth}")
    k = tree.k
    windows = np.arange(k ** depth)
    out = np.full(k ** depth, -1, dtype=np.int64)
    for i, s in enumerate(tree.leaves):
        code = int(s, k) if s else 0
        out[windows % k ** len(s) == code] = i
    if np.any(out < 0):
        raise MalformedTree("some window has no context")
    return out


def maximal_nodes(tree: ContextTree) -> list[str]:
    """Internal nodes all of whose children are leaves, in lexicographic order."""
    found = set()
    for s in tree.leaves:
        if s:
            u = s[1:]
            if all(c in tree for c in tree.children(u)):
                found.add(u)
    return sorted(found)


def prune_at(tree: ContextTree, u: str) -> ContextTree:
    """Replace the children of the maximal node ``u`` by ``u`` itself."""
    u = to_string(u)
    if u not in maximal_nodes(tree):
        raise NotMaximalNode(f"{u!r} is not a maximal node of {tree}")
    children = set(tree.children(u))
    return ContextTree(tree.k, tuple(s for s in tree.leaves if s not in children) + (u,))


def expand_at(tree: ContextTree, u: str) -> ContextTree:
    """Inverse of :func:`prune_at`: split leaf ``u`` into its ``k`` children."""
    u = to_string(u)
    if u not in tree:
        raise InvalidArgs(f"{u!r} is not a leaf")
    return ContextTree(tree.k, tuple(s for s in tree.leaves if s != u) + tuple(tree.children(u)))


def _check_permutation(sigma: Sequence[int], k: int) -> tuple[int, ...]:
    sigma = tuple(int(v) for v in sigma)
    if sorted(sigma) != list(range(k)):
        raise NotAPermutation(f"{sigma} is not a permutation of 0..{k - 1}")
    return sigma


def permute_string(s: str, sigma: Sequence[int]) -> str:
    return "".join(str(sigma[int(ch)]) for ch in s)


def permute(tree: ContextTree, sigma: Sequence[int]) -> ContextTree:
    """Relabel every symbol ``x`` of every context as ``sigma[x]``."""
    sigma = _check_permutation(sigma, tree.k)
    return ContextTree(tree.k, tuple(permute_string(s, sigma) for s in tree.leaves))


def equivalent(a: ContextTree, b: ContextTree) -> bool:
    """True iff some relabelling of the alphabet maps ``a`` onto ``b``."""
    if a.k != b.k:
        raise AlphabetMismatch(f"alphabet sizes differ: {a.k} vs {b.k}")
    if a.size != b.size or a.depth != b.depth:
        return False
    target = set(b.leaves)
    for sigma in itertools.permutations(range(a.k)):
        if {permute_string(s, sigma) for s in a.leaves} == target:
            return True
    return False


def is_subtree(small: ContextTree, big: ContextTree) -> bool:
    """True iff every leaf of ``big`` has a leaf of ``small`` as postfix."""
    if small.k != big.k:
        raise AlphabetMismatch(f"alphabet sizes differ: {small.k} vs {big.k}")
    if small.depth > big.depth:
        return False
    for s in big.leaves:
        if not any(s.endswith(u) for u in small.leaves):
            return False
    return True


def full_tree(k: int, depth: int, state_cap: int = DEFAULT_STATE_CAP) -> ContextTree:
    """The complete tree whose leaves are all strings of length ``depth``."""
    if depth < 0:
        raise InvalidArgs("depth must be non-negative")
    if k ** depth > state_cap:
        raise BudgetExceeded(f"k**depth = {k ** depth} exceeds the cap {state_cap}")
    leaves = ("".join(p) for p in itertools.product([str(x) for x in range(k)], repeat=depth))
    return ContextTree(k, tuple(leaves))


def enumerate_complete_trees(
    k: int,
    max_leaves: int,
    max_depth: int | None = None,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[ContextTree]:
    """All complete trees with at most ``max_leaves`` leaves (and depth bound).

    Returned in order of leaf count, then lexicographic leaf tuple.
    """
    if k < 2:
        raise InvalidArgs("k must be at least 2")
    if max_leaves < 1:
        return []
    if max_depth is None:
        max_depth = (max_leaves - 1) // (k - 1)
    memo: dict[tuple[int, int], list[tuple[str, ...]]] = {}
    produced = 0

    def shapes(budget: int, depth: int) -> list[tuple[str, ...]]:
        # relative leaf sets of complete trees with <= budget leaves, depth <= depth
        key = (budget, depth)
        if key in memo:
            return memo[key]
        out = [("",)]
        if depth > 0 and budget >= k:
            # distribute the budget over the k child subtrees
            def combine(x: int, remaining: int, acc: tuple[str, ...]):
                nonlocal produced
                if x == k:
                    out.append(acc)
                    produced += 1
                    if produced > cap:
                        raise BudgetExceeded(f"more than {cap} trees enumerated")
                    return
                slots_after = k - x - 1
                for sub in shapes(remaining - slots_after, depth - 1):
                    combine(x + 1, remaining - len(sub), acc + tuple(v + str(x) for v in sub))

            combine(0, budget, ())
        memo[key] = out
        return out

    trees = [ContextTree(k, leaves) for leaves in shapes(max_leaves, max_depth)]
    trees.sort(key=lambda t: (t.size, t.leaves))
    return trees
