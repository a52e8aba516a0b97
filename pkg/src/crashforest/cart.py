"""CART classification tree with prior-weighted Gini splits, surrogate splits
for missing values and reduced-error pruning.

Rows are tuples of raw field values (``None`` = Unknown). Numeric variables
split as ``value <= threshold``; categorical variables split as
``value in left_set``. Candidate ties resolve by variable order, then the
smaller threshold or lexicographically smaller subset, then aligned before
reversed (surrogates).
"""
from __future__ import annotations

import copy
import json
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .prep import NUMERIC_MODEL_FIELDS
from .schema import MODEL_FIELDS

NUMERIC = "numeric"
CATEGORICAL = "categorical"

MAX_EXHAUSTIVE_CATEGORIES = 12
TIE_TOL = 1e-12
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str


MODEL_VARIABLES = tuple(
    Variable(f, NUMERIC if f in NUMERIC_MODEL_FIELDS else CATEGORICAL) for f in MODEL_FIELDS
)


@dataclass(frozen=True)
class TreeParams:
    min_node_n: int = 5
    min_node_fraction: float = 0.05
    max_nodes: int = 1000
    max_depth: int = 32
    n_surrogates: int = 5
    priors: Optional[tuple] = None  # None means equal priors
    prune_measure: str = "misclassification"

    def __post_init__(self):
        if self.min_node_n < 1:
            raise ValueError("min_node_n must be >= 1")
        if not 0.0 <= self.min_node_fraction < 1.0:
            raise ValueError("min_node_fraction must lie in [0, 1)")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")
        if self.n_surrogates < 0:
            raise ValueError("n_surrogates must be >= 0")
        if self.priors is not None:
            if any(p < 0 for p in self.priors) or abs(sum(self.priors) - 1.0) > 1e-12:
                raise ValueError("priors must be non-negative and sum to 1")
        if self.prune_measure != "misclassification":
            raise ValueError(f"unsupported prune measure {self.prune_measure!r}")

    def class_priors(self, n_classes: int) -> np.ndarray:
        if self.priors is None:
            return np.full(n_classes, 1.0 / n_classes)
        if len(self.priors) != n_classes:
            raise ValueError(f"{len(self.priors)} priors given for {n_classes} classes")
        return np.asarray(self.priors, dtype=float)


class Table:
    """Column-major view of raw rows.

    Numeric columns are float arrays with NaN for Unknown; categorical columns
    are integer codes into ``categories[j]`` (sorted) with -1 for Unknown.
    """

    def __init__(self, rows: Sequence[Sequence], variables: Sequence[Variable] = MODEL_VARIABLES):
        self.variables = tuple(variables)
        self.n = len(rows)
        self.columns = []
        self.categories = []
        for j, var in enumerate(self.variables):
            values = [row[j] for row in rows]
            if var.kind == NUMERIC:
                self.columns.append(
                    np.array([np.nan if v is None else float(v) for v in values], dtype=float)
                )
                self.categories.append(())
            else:
                cats = tuple(sorted({v for v in values if v is not None}))
                index = {c: k for k, c in enumerate(cats)}
                self.columns.append(
                    np.array([-1 if v is None else index[v] for v in values], dtype=int)
                )
                self.categories.append(cats)
        self._code_maps = [{c: k for k, c in enumerate(cats)} for cats in self.categories]

    def __len__(self):
        return self.n

    def known(self, j: int, idx: np.ndarray) -> np.ndarray:
        col = self.columns[j][idx]
        if self.variables[j].kind == NUMERIC:
            return ~np.isnan(col)
        return col >= 0

    def codes_for(self, j: int, values) -> np.ndarray:
        m = self._code_maps[j]
        return np.array([m[v] for v in values if v in m], dtype=int)

    def with_column(self, j: int, column: np.ndarray) -> "Table":
        other = copy.copy(self)
        other.columns = list(self.columns)
        other.columns[j] = column
        return other

    def permuted(self, j: int, perm: np.ndarray) -> "Table":
        return self.with_column(j, self.columns[j][perm])

    def masked(self, j: int) -> "Table":
        """Copy with variable ``j`` set to Unknown on every row."""
        if self.variables[j].kind == NUMERIC:
            return self.with_column(j, np.full(self.n, np.nan))
        return self.with_column(j, np.full(self.n, -1, dtype=int))


@dataclass(frozen=True)
class Split:
    """A primary or surrogate split.

    Numeric: left iff value <= threshold. Categorical: left iff value in
    ``left``; a value in neither ``left`` nor ``right`` (unseen at the node)
    counts as Unknown. A reversed surrogate swaps the sides.
    """

    variable: int
    name: str
    threshold: Optional[float] = None
    left: tuple = ()
    right: tuple = ()
    agreement: Optional[float] = None
    direction: str = "aligned"

    @property
    def kind(self) -> str:
        return NUMERIC if self.threshold is not None else CATEGORICAL

    def route(self, table: Table, idx: np.ndarray):
        """Return ``(known, goes_left)`` boolean arrays over ``idx``."""
        col = table.columns[self.variable][idx]
        if self.threshold is not None:
            known = ~np.isnan(col)
            with np.errstate(invalid="ignore"):
                left = col <= self.threshold
        else:
            lcodes = table.codes_for(self.variable, self.left)
            rcodes = table.codes_for(self.variable, self.right)
            left = np.isin(col, lcodes)
            known = left | np.isin(col, rcodes)
        if self.direction == "reversed":
            left = ~left
        return known, left & known

    def describe(self) -> str:
        if self.threshold is not None:
            text = f"{self.name} <= {self.threshold!r}"
        else:
            text = f"{self.name} in {{{', '.join(self.left)}}}"
        if self.direction == "reversed":
            text = f"not ({text})"
        return text


@dataclass
class TreeNode:
    id: int
    depth: int
    counts: tuple
    predicted: int
    primary: Optional[Split] = None
    surrogates: tuple = ()
    improvement: float = 0.0
    majority_left: bool = True
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.primary is None

    def make_leaf(self):
        self.primary = None
        self.surrogates = ()
        self.improvement = 0.0
        self.left = self.right = None


@dataclass
class Tree:
    root: TreeNode
    variables: tuple
    n_classes: int
    priors: tuple
    root_counts: tuple
    params: TreeParams = field(default_factory=TreeParams)
    prune_warning: bool = False

    def nodes(self):
        queue = deque([self.root])
        while queue:
            node = queue.popleft()
            yield node
            if not node.is_leaf:
                queue.append(node.left)
                queue.append(node.right)

    @property
    def node_count(self) -> int:
        return sum(1 for _ in self.nodes())

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def table(self, rows) -> Table:
        return rows if isinstance(rows, Table) else Table(rows, self.variables)

    def predict(self, rows) -> np.ndarray:
        """Predicted class for every row (a row list or a ``Table``)."""
        table = self.table(rows)
        out = np.empty(table.n, dtype=int)
        for node, idx in _leaves(self.root, table, np.arange(table.n)):
            out[idx] = node.predicted
        return out


def node_probs(class_counts, priors, root_counts) -> np.ndarray:
    """Prior-weighted class probabilities p(j|t), renormalized to sum 1."""
    counts = np.asarray(class_counts, dtype=float)
    root = np.asarray(root_counts, dtype=float)
    weights = np.divide(np.asarray(priors, dtype=float), root, out=np.zeros_like(root), where=root > 0)
    p = weights * counts
    total = p.sum()
    if total <= 0:
        raise ValueError("empty node: no weighted class mass")
    return p / total


def gini(probs) -> float:
    p = np.asarray(probs, dtype=float)
    return float(1.0 - np.dot(p, p))


def _class_weights(priors, root_counts) -> np.ndarray:
    root = np.asarray(root_counts, dtype=float)
    return np.divide(np.asarray(priors, dtype=float), root, out=np.zeros_like(root), where=root > 0)


def _weighted_gini(counts: np.ndarray, weights: np.ndarray):
    """Row-wise (mass, gini) for a matrix of class counts."""
    pw = counts * weights
    mass = pw.sum(axis=1)
    safe = np.where(mass > 0, mass, 1.0)
    probs = pw / safe[:, None]
    return mass, 1.0 - (probs * probs).sum(axis=1)


def _counts(labels: np.ndarray, n_labels: int) -> np.ndarray:
    return np.bincount(labels, minlength=n_labels)


class _Candidates:
    """Candidate splits of one variable, in canonical tie-break order."""

    def __init__(self, left_counts, right_counts, keys, splits):
        self.left_counts = left_counts
        self.right_counts = right_counts
        self.keys = keys
        self.splits = splits


def _enumerate(table: Table, j: int, idx: np.ndarray, labels: np.ndarray, n_labels: int,
               order_weights: np.ndarray) -> Optional[_Candidates]:
    """All candidate splits of variable ``j`` over rows ``idx`` known on ``j``.

    ``labels`` are aligned with ``idx``. ``order_weights`` feed the
    class-probability ordering used when a variable has too many categories
    for exhaustive search.
    """
    var = table.variables[j]
    known = table.known(j, idx)
    if known.sum() < 2:
        return None
    col = table.columns[j][idx][known]
    lab = labels[known]
    onehot = np.zeros((len(lab), n_labels))
    onehot[np.arange(len(lab)), lab] = 1.0
    total = onehot.sum(axis=0)
    if var.kind == NUMERIC:
        order = np.argsort(col, kind="stable")
        sv = col[order]
        cum = np.cumsum(onehot[order], axis=0)
        cut = np.flatnonzero(sv[:-1] < sv[1:])
        if len(cut) == 0:
            return None
        lc = cum[cut]
        thresholds = (sv[cut] + sv[cut + 1]) / 2.0
        splits = [Split(j, var.name, threshold=float(t)) for t in thresholds]
        return _Candidates(lc, total - lc, [float(t) for t in thresholds], splits)

    codes = np.unique(col)
    k = len(codes)
    if k < 2:
        return None
    per_cat = np.zeros((k, n_labels))
    pos = np.searchsorted(codes, col)
    np.add.at(per_cat, pos, onehot)
    names = [table.categories[j][c] for c in codes]
    if k <= MAX_EXHAUSTIVE_CATEGORIES:
        # Subsets containing the first category: one per distinct partition.
        m = np.arange(2 ** (k - 1) - 1)
        bits = np.ones((len(m), k), dtype=bool)
        bits[:, 1:] = (m[:, None] >> np.arange(k - 1)) & 1 == 1
    else:
        pw = per_cat * order_weights
        share = pw[:, -1] / np.maximum(pw.sum(axis=1), 1e-300)
        order = np.argsort(share, kind="stable")
        bits = np.zeros((k - 1, k), dtype=bool)
        for i in range(k - 1):
            bits[i, order[: i + 1]] = True
        bits[~bits[:, 0]] = ~bits[~bits[:, 0]]
    lc = bits.astype(float) @ per_cat
    keys, splits = [], []
    for row in bits:
        left = tuple(n for n, b in zip(names, row) if b)
        right = tuple(n for n, b in zip(names, row) if not b)
        keys.append(left)
        splits.append(Split(j, var.name, left=left, right=right))
    return _Candidates(lc, total - lc, keys, splits)


def _first_within(values: np.ndarray, keys: list, best: float) -> int:
    hits = np.flatnonzero(values >= best - TIE_TOL)
    return min(hits, key=lambda i: keys[i])


def evaluate_splits(table: Table, y: np.ndarray, idx: np.ndarray, n_classes: int,
                    weights: np.ndarray):
    """Yield ``(j, candidates, delta)`` for every splittable variable."""
    labels = y[idx]
    for j in range(len(table.variables)):
        cand = _enumerate(table, j, idx, labels, n_classes, weights)
        if cand is None:
            continue
        parent = (cand.left_counts[:1] + cand.right_counts[:1])
        p_mass, p_gini = _weighted_gini(parent, weights)
        l_mass, l_gini = _weighted_gini(cand.left_counts, weights)
        r_mass, r_gini = _weighted_gini(cand.right_counts, weights)
        both = l_mass + r_mass
        delta = p_gini[0] - (l_mass / both) * l_gini - (r_mass / both) * r_gini
        delta = np.where((l_mass > 0) & (r_mass > 0), delta, -np.inf)
        yield j, cand, delta


def best_split(table: Table, y: np.ndarray, idx: np.ndarray, params: TreeParams,
               root_counts, *, depth: int = 0, n_train: Optional[int] = None,
               budget_ok: bool = True, n_classes: Optional[int] = None):
    """Best Gini split of the node holding rows ``idx``, or None.

    Only rows known on a variable take part in evaluating it; the decrease is
    ``i(t) - pL*i(tL) - pR*i(tR)`` with prior-weighted proportions.
    """
    idx = np.asarray(idx, dtype=int)
    n_classes = len(root_counts) if n_classes is None else n_classes
    n_train = table.n if n_train is None else n_train
    if (
        not budget_ok
        or len(idx) == 0
        or len(idx) < params.min_node_n
        or len(idx) < params.min_node_fraction * n_train
        or depth >= params.max_depth
    ):
        return None
    weights = _class_weights(params.class_priors(n_classes), root_counts)
    found = list(evaluate_splits(table, y, idx, n_classes, weights))
    if not found:
        return None
    top = max(float(d.max()) for _, _, d in found)
    if not top > TIE_TOL:
        return None
    for j, cand, delta in found:
        if delta.max() >= top - TIE_TOL:
            i = _first_within(delta, cand.keys, top)
            return cand.splits[i], float(delta[i])
    return None


def find_surrogates(table: Table, idx: np.ndarray, primary: Split, k: int) -> list:
    """Up to ``k`` surrogate splits mimicking ``primary`` on rows ``idx``."""
    if k <= 0:
        return []
    idx = np.asarray(idx, dtype=int)
    known, left = primary.route(table, idx)
    rows = idx[known]
    direction = left[known].astype(int)  # 1 where the primary sends left
    found = []
    for j in range(len(table.variables)):
        if j == primary.variable:
            continue
        cand = _enumerate(table, j, rows, direction, 2, np.ones(2))
        if cand is None:
            continue
        n = cand.left_counts[0].sum() + cand.right_counts[0].sum()
        aligned = (cand.left_counts[:, 1] + cand.right_counts[:, 0]) / n
        agreement = np.maximum(aligned, 1.0 - aligned)
        best = float(agreement.max())
        n_left = cand.left_counts[0, 1] + cand.right_counts[0, 1]
        baseline = max(n_left, n - n_left) / n
        if not best > baseline + TIE_TOL:
            continue
        hits = [i for i in np.flatnonzero(agreement >= best - TIE_TOL)]
        i = min(hits, key=lambda h: (cand.keys[h], aligned[h] < 1.0 - aligned[h]))
        reversed_ = aligned[i] < 1.0 - aligned[i]
        s = cand.splits[i]
        found.append(
            Split(j, s.name, threshold=s.threshold, left=s.left, right=s.right,
                  agreement=float(agreement[i]), direction="reversed" if reversed_ else "aligned")
        )
    found.sort(key=lambda s: -s.agreement)  # stable: variable order breaks ties
    return found[:k]


def _route(node: TreeNode, table: Table, idx: np.ndarray):
    """Send rows ``idx`` down one level: primary, then surrogates, then majority."""
    known, left = node.primary.route(table, idx)
    go_left = left.copy()
    pending = ~known
    for s in node.surrogates:
        if not pending.any():
            break
        s_known, s_left = s.route(table, idx)
        use = pending & s_known
        go_left[use] = s_left[use]
        pending &= ~use
    go_left[pending] = node.majority_left
    return idx[go_left], idx[~go_left]


def _leaves(root: TreeNode, table: Table, idx: np.ndarray):
    stack = [(root, idx)]
    while stack:
        node, rows = stack.pop()
        if node.is_leaf:
            yield node, rows
        else:
            li, ri = _route(node, table, rows)
            stack.append((node.right, ri))
            stack.append((node.left, li))


def _predicted(counts, priors, root_counts) -> int:
    try:
        p = node_probs(counts, priors, root_counts)
    except ValueError:
        return 0
    # Rounding must not break exact ties (equal priors make the root a tie).
    return int(np.flatnonzero(p >= p.max() - TIE_TOL)[0])


def grow(rows, y, params: TreeParams = TreeParams(), variables: Sequence[Variable] = MODEL_VARIABLES,
         n_classes: Optional[int] = None) -> Tree:
    """Grow a tree breadth-first, honoring ``params.max_nodes`` globally."""
    table = rows if isinstance(rows, Table) else Table(rows, variables)
    y = np.asarray(y, dtype=int)
    if table.n == 0:
        raise ValueError("cannot grow a tree on an empty training set")
    if n_classes is None:
        n_classes = max(int(y.max()) + 1, 2)
    priors = params.class_priors(n_classes)
    root_counts = _counts(y, n_classes)
    root = TreeNode(0, 0, tuple(int(c) for c in root_counts), _predicted(root_counts, priors, root_counts))
    tree = Tree(root, table.variables, n_classes, tuple(float(p) for p in priors),
                tuple(int(c) for c in root_counts), params)
    n_nodes = 1
    queue = deque([(root, np.arange(table.n))])
    while queue:
        node, idx = queue.popleft()
        found = best_split(
            table, y, idx, params, root_counts, depth=node.depth, n_train=table.n,
            budget_ok=n_nodes + 2 <= params.max_nodes, n_classes=n_classes,
        )
        if found is None:
            continue
        primary, delta = found
        known, left = primary.route(table, idx)
        node.primary = primary
        node.improvement = delta
        node.majority_left = bool(left.sum() >= (known & ~left).sum())
        node.surrogates = tuple(find_surrogates(table, idx, primary, params.n_surrogates))
        li, ri = _route(node, table, idx)
        for side, rows_ in (("left", li), ("right", ri)):
            counts = _counts(y[rows_], n_classes)
            child = TreeNode(n_nodes, node.depth + 1, tuple(int(c) for c in counts),
                             _predicted(counts, priors, root_counts))
            n_nodes += 1
            setattr(node, side, child)
            queue.append((child, rows_))
    return tree


def prune(tree: Tree, rows, y) -> Tree:
    """Reduced-error pruning on a held-out set.

    Bottom-up, an internal node collapses to a leaf when its subtree makes at
    least as many misclassifications on the prune rows as the node would alone.
    """
    out = copy.deepcopy(tree)
    y = np.asarray(y, dtype=int)
    table = out.table(rows)
    if table.n == 0:
        warnings.warn("empty prune set; tree returned unchanged", stacklevel=2)
        out.prune_warning = True
        return out

    def visit(node, idx):
        as_leaf = int((y[idx] != node.predicted).sum())
        if node.is_leaf:
            return as_leaf
        li, ri = _route(node, table, idx)
        subtree = visit(node.left, li) + visit(node.right, ri)
        if subtree >= as_leaf:
            node.make_leaf()
            return as_leaf
        return subtree

    visit(out.root, np.arange(table.n))
    return out


def misclassified(tree: Tree, rows, y) -> int:
    return int((tree.predict(rows) != np.asarray(y)).sum())


def predict(tree: Tree, row) -> int:
    """Class for a single raw row; Unknown values fall back to surrogates."""
    return int(tree.predict([tuple(row)])[0])


def importance(tree: Tree) -> dict:
    """Per-variable importance, scaled so the largest is 100.

    Each split credits its node-weighted Gini decrease to the primary variable
    and the decrease times agreement to every surrogate variable.
    """
    weights = _class_weights(tree.priors, tree.root_counts)
    scores = np.zeros(len(tree.variables))
    for node in tree.nodes():
        if node.is_leaf:
            continue
        p_t = float(np.dot(weights, node.counts))
        gain = p_t * node.improvement
        scores[node.primary.variable] += gain
        for s in node.surrogates:
            scores[s.variable] += gain * s.agreement
    top = scores.max()
    if top > 0:
        scores = 100.0 * scores / top
    return {v.name: float(s) for v, s in zip(tree.variables, scores)}


# -- text serialization -------------------------------------------------------

def _split_dict(s: Split) -> dict:
    d = {"var": s.variable, "name": s.name}
    if s.threshold is not None:
        d["le"] = s.threshold
    else:
        d["in"] = list(s.left)
        d["out"] = list(s.right)
    if s.agreement is not None:
        d["agreement"] = s.agreement
        d["direction"] = s.direction
    return d


def _split_from(d: dict) -> Split:
    return Split(d["var"], d["name"], threshold=d.get("le"), left=tuple(d.get("in", ())),
                 right=tuple(d.get("out", ())), agreement=d.get("agreement"),
                 direction=d.get("direction", "aligned"))


def dumps(tree: Tree) -> str:
    """Line-oriented text form: header lines, then one ``node`` line each."""
    p = tree.params
    lines = [
        f"crashforest-tree {FORMAT_VERSION}",
        "classes " + json.dumps(tree.n_classes),
        "priors " + json.dumps(list(tree.priors)),
        "root_counts " + json.dumps(list(tree.root_counts)),
        "params " + json.dumps({
            "min_node_n": p.min_node_n, "min_node_fraction": p.min_node_fraction,
            "max_nodes": p.max_nodes, "max_depth": p.max_depth,
            "n_surrogates": p.n_surrogates,
            "priors": None if p.priors is None else list(p.priors),
        }, sort_keys=True),
        "prune_warning " + json.dumps(tree.prune_warning),
        "variables " + json.dumps([[v.name, v.kind] for v in tree.variables]),
    ]
    for node in tree.nodes():
        rec = {"id": node.id, "depth": node.depth, "counts": list(node.counts),
               "predicted": node.predicted}
        if not node.is_leaf:
            rec.update(
                left=node.left.id, right=node.right.id, improvement=node.improvement,
                majority="left" if node.majority_left else "right",
                split=_split_dict(node.primary),
                surrogates=[_split_dict(s) for s in node.surrogates],
            )
        lines.append("node " + json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def loads(text: str) -> Tree:
    header = {}
    nodes = {}
    lines = text.splitlines()
    magic = lines[0].split()
    if magic[:1] != ["crashforest-tree"] or int(magic[1]) != FORMAT_VERSION:
        raise ValueError("not a crashforest tree dump")
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, payload = line.partition(" ")
        value = json.loads(payload)
        if key == "node":
            nodes[value["id"]] = value
        else:
            header[key] = value
    built = {
        i: TreeNode(v["id"], v["depth"], tuple(v["counts"]), v["predicted"]) for i, v in nodes.items()
    }
    for i, v in nodes.items():
        if "split" in v:
            n = built[i]
            n.primary = _split_from(v["split"])
            n.surrogates = tuple(_split_from(s) for s in v["surrogates"])
            n.improvement = v["improvement"]
            n.majority_left = v["majority"] == "left"
            n.left, n.right = built[v["left"]], built[v["right"]]
    params = dict(header["params"])
    if params.get("priors") is not None:
        params["priors"] = tuple(params["priors"])
    root_id = min(nodes, key=lambda i: nodes[i]["depth"])
    return Tree(
        root=built[root_id],
        variables=tuple(Variable(n, k) for n, k in header["variables"]),
        n_classes=header["classes"],
        priors=tuple(header["priors"]),
        root_counts=tuple(header["root_counts"]),
        params=TreeParams(**params),
        prune_warning=header.get("prune_warning", False),
    )
