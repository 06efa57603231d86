"""Category trees: construction, leaf selection, and probability aggregation.

A taxonomy is a rooted tree of category names.  Classification happens only
over the leaves; probabilities for internal (ancestor) categories are obtained
by summing the probabilities of their descendant leaves.  A hierarchical
multi-softmax baseline (independent softmax per sibling group, chained down
the tree) is provided for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class TaxonomyError(ValueError):
    """Invalid category tree, or an invalid query against one."""


class CycleDetectedError(TaxonomyError):
    pass


class MultipleParentsError(TaxonomyError):
    pass


class MultipleRootsError(TaxonomyError):
    pass


class DuplicateEdgeError(TaxonomyError):
    pass


class UnknownCategoryError(TaxonomyError):
    pass


class NotALeafError(TaxonomyError):
    pass


class MissingScoreError(TaxonomyError):
    pass


class LengthMismatchError(TaxonomyError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    """Rooted category tree with a canonical leaf ordering.

    ``leaf_order`` is the lexicographically sorted tuple of leaf names; every
    probability or score vector over leaves is aligned with it.
    ``descendant_leaves`` maps each node to the set of leaf indices at or
    below it (a leaf maps to the singleton of its own index).
    """

    nodes: tuple[str, ...]
    root: str
    parent: dict[str, str]
    children: dict[str, tuple[str, ...]]
    leaf_order: tuple[str, ...]
    descendant_leaves: dict[str, frozenset[int]]

    def __contains__(self, name: str) -> bool:
        return name in self.children

    def is_leaf(self, name: str) -> bool:
        if name not in self.children:
            raise UnknownCategoryError(f"unknown category: {name!r}")
        return len(self.children[name]) == 0

    def leaf_index(self, name: str) -> int:
        """Index of a leaf in ``leaf_order``; rejects internal nodes."""
        if name not in self.children:
            raise UnknownCategoryError(f"unknown category: {name!r}")
        if self.children[name]:
            raise NotALeafError(f"{name!r} is an internal category, not a leaf")
        return self.leaf_order.index(name)

    @property
    def num_leaves(self) -> int:
        return len(self.leaf_order)

    def depth(self) -> int:
        """Number of edges on the longest root-to-leaf path."""
        best = 0
        stack = [(self.root, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in self.children[node])
        return best

    def ancestors(self, name: str) -> tuple[str, ...]:
        """Chain of ancestors from the node's parent up to the root."""
        if name not in self.children:
            raise UnknownCategoryError(f"unknown category: {name!r}")
        out = []
        while name in self.parent:
            name = self.parent[name]
            out.append(name)
        return tuple(out)


@dataclass(frozen=True)
class CategoryProbabilities:
    """Probability per category node, leaves and ancestors alike."""

    probs: dict[str, float]

    def __getitem__(self, name: str) -> float:
        return self.probs[name]


def build_taxonomy(edges: list[tuple[str, str]]) -> Taxonomy:
    """Build and validate a Taxonomy from (child, parent) edges.

    The edge list must describe a single tree: one root, one parent per node,
    no cycles, no repeated edges.
    """
    if not edges:
        raise TaxonomyError("edge list is empty")
    parent: dict[str, str] = {}
    seen: set[tuple[str, str]] = set()
    names: set[str] = set()
    for child, par in edges:
        if not isinstance(child, str) or not isinstance(par, str) or not child or not par:
            raise TaxonomyError(f"bad edge ({child!r}, {par!r}): names must be nonempty strings")
        if (child, par) in seen:
            raise DuplicateEdgeError(f"edge ({child!r}, {par!r}) listed twice")
        seen.add((child, par))
        if child in parent and parent[child] != par:
            raise MultipleParentsError(
                f"{child!r} has parents {parent[child]!r} and {par!r}; a tree allows one"
            )
        parent[child] = par
        names.add(child)
        names.add(par)

    roots = sorted(names - parent.keys())
    if not roots:
        raise CycleDetectedError("no root: every node has a parent, so the edges contain a cycle")
    if len(roots) > 1:
        raise MultipleRootsError(f"multiple roots: {roots}")
    root = roots[0]

    children: dict[str, list[str]] = {n: [] for n in names}
    for child, par in parent.items():
        children[par].append(child)
    children_t = {n: tuple(sorted(cs)) for n, cs in children.items()}

    # Reachability from the root; anything unreachable sits on a cycle.
    reached: set[str] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if node in reached:
            continue
        reached.add(node)
        stack.extend(children_t[node])
    if reached != names:
        stray = sorted(names - reached)
        raise CycleDetectedError(f"nodes unreachable from root {root!r} (cycle): {stray}")

    leaf_order = tuple(sorted(n for n in names if not children_t[n]))
    leaf_pos = {n: i for i, n in enumerate(leaf_order)}

    desc: dict[str, frozenset[int]] = {}
    for node in _postorder(root, children_t):
        if not children_t[node]:
            desc[node] = frozenset((leaf_pos[node],))
        else:
            acc: set[int] = set()
            for c in children_t[node]:
                acc |= desc[c]
            desc[node] = frozenset(acc)

    return Taxonomy(
        nodes=tuple(sorted(names)),
        root=root,
        parent=parent,
        children=children_t,
        leaf_order=leaf_order,
        descendant_leaves=desc,
    )


def _postorder(root: str, children: dict[str, tuple[str, ...]]) -> list[str]:
    order: list[str] = []
    stack: list[tuple[str, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
        else:
            stack.append((node, True))
            stack.extend((c, False) for c in children[node])
    return order


def leaf_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over leaf scores, stabilized by max subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("scores must be a nonempty 1-d vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    e = np.exp(s - s.max())
    return e / e.sum()


def aggregate(taxonomy: Taxonomy, leaf_probs: np.ndarray) -> CategoryProbabilities:
    """Probability for every node: leaves verbatim, ancestors summed over descendants."""
    p = np.asarray(leaf_probs, dtype=np.float64)
    if p.shape != (taxonomy.num_leaves,):
        raise LengthMismatchError(
            f"got {p.shape[0] if p.ndim == 1 else p.shape} leaf probabilities, "
            f"expected {taxonomy.num_leaves}"
        )
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("leaf_probs must be nonnegative and sum to 1 within 1e-9")
    probs: dict[str, float] = {}
    for node in taxonomy.nodes:
        idx = taxonomy.descendant_leaves[node]
        if len(idx) == 1 and not taxonomy.children[node]:
            probs[node] = float(p[next(iter(idx))])
        else:
            probs[node] = float(p[sorted(idx)].sum())
    return CategoryProbabilities(probs)


def multisoftmax_baseline(
    taxonomy: Taxonomy, node_scores: dict[str, float]
) -> CategoryProbabilities:
    """Hierarchical multi-softmax: independent softmax per sibling group.

    P(node) is the product of conditional sibling-softmax probabilities along
    the path from the root.  Requires a score for every non-root node.
    """
    missing = [n for n in taxonomy.nodes if n != taxonomy.root and n not in node_scores]
    if missing:
        raise MissingScoreError(f"no score for nodes: {sorted(missing)}")
    probs: dict[str, float] = {taxonomy.root: 1.0}
    stack = [taxonomy.root]
    while stack:
        node = stack.pop()
        kids = taxonomy.children[node]
        if not kids:
            continue
        sib = leaf_softmax(np.array([node_scores[c] for c in kids], dtype=np.float64))
        for c, pc in zip(kids, sib):
            probs[c] = probs[node] * float(pc)
            stack.append(c)
    return CategoryProbabilities(probs)


def filter_ancestor_samples(
    labels: list[str], taxonomy: Taxonomy
) -> tuple[list[int], int, set[str]]:
    """Keep only samples whose label is a leaf category.

    Returns (kept indices, filtered count, set of filtered category names).
    """
    kept: list[int] = []
    filtered: set[str] = set()
    for i, label in enumerate(labels):
        if label not in taxonomy.children:
            raise UnknownCategoryError(f"unknown category: {label!r}")
        if taxonomy.children[label]:
            filtered.add(label)
        else:
            kept.append(i)
    return kept, len(labels) - len(kept), filtered


def tree_consistency_error(taxonomy: Taxonomy, cp: CategoryProbabilities) -> float:
    """Largest violation of the aggregation invariants.

    Checks that leaf probabilities sum to 1, each internal node equals the sum
    of its children, and the root equals 1.  Returns the max absolute error.
    """
    leaf_sum = sum(cp.probs[l] for l in taxonomy.leaf_order)
    worst = abs(leaf_sum - 1.0)
    worst = max(worst, abs(cp.probs[taxonomy.root] - 1.0))
    for node, kids in taxonomy.children.items():
        if kids:
            worst = max(worst, abs(cp.probs[node] - sum(cp.probs[c] for c in kids)))
    return worst


def parse_edge_file(path: str | Path) -> list[tuple[str, str]]:
    """Read a tab-separated edge file: one ``child<TAB>parent`` per line.

    Blank lines and lines starting with ``#`` are ignored.
    """
    edges: list[tuple[str, str]] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise TaxonomyError(f"{path}:{lineno}: expected 'child<TAB>parent', got {raw!r}")
        edges.append((parts[0], parts[1]))
    if not edges:
        raise TaxonomyError(f"{path}: no edges found")
    return edges


def load_taxonomy(path: str | Path) -> Taxonomy:
    return build_taxonomy(parse_edge_file(path))


def write_edge_file(edges: list[tuple[str, str]], path: str | Path) -> None:
    lines = [f"{child}\t{parent}" for child, parent in edges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
