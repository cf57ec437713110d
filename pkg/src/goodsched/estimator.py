"""Quantile regression forest for upper-bounding response lengths.

Trees are grown CART-style on bootstrap samples (variance reduction on
log-lengths over histogram-binned thresholds); every leaf keeps the raw
training lengths routed to it. A prediction pools the leaves a query lands
in, one per tree, each tree carrying equal total weight, and reads off an
empirical quantile with linear interpolation between order statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

FORMAT = "goodsched-qrf"
VERSION = 1
DEFAULT_REFINE_INTERVAL = 50


class InsufficientData(ValueError):
    pass


class NotFitted(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    """Scheduler-visible description of one LLM invocation.

    ``hint`` stands in for the text content of prompt plus generated tokens:
    a noisy view of the log response length that sharpens as generation
    proceeds (see :func:`content_hint`).
    """

    input_len: int
    app_tag: str = "chatbot"
    generated_so_far: int = 0
    stage_index: int = 0
    model_id: str = "default"
    hint: float = 0.0

    def __post_init__(self):
        if self.input_len < 1:
            raise ValueError("input_len must be >= 1")
        if self.generated_so_far < 0:
            raise ValueError("generated_so_far must be >= 0")


@dataclass(frozen=True)
class LengthBound:
    total_upper: int
    q: float
    as_of_generated: int = 0

    def __post_init__(self):
        if self.total_upper < self.as_of_generated:
            raise ValueError("bound below tokens already generated")


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    max_depth: int = 12
    min_leaf: int = 5
    feature_subsample: float = 0.7
    max_bins: int = 64
    seed: int = 0


def content_hint(true_len: int, key: tuple[int, int], generated: int,
                 interval: int = DEFAULT_REFINE_INTERVAL, scale: float = 0.8) -> float:
    """Noisy observation of ``log(true_len)`` available after ``generated`` tokens.

    Noise std is ``scale / sqrt(1 + rounds)`` with ``rounds = generated // interval``;
    draws are keyed by (request, node, round) so replays are deterministic.
    """
    rounds = generated // interval
    rng = np.random.default_rng([int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF, rounds])
    return math.log(true_len) + scale * rng.standard_normal() / math.sqrt(1.0 + rounds)


def pooled_quantile(values: np.ndarray, weights: np.ndarray, q):
    """Weighted empirical quantile, linear between order statistics.

    Each distinct value sits at the midpoint of its step in the weighted CDF
    (with equal weights: position (k - 0.5)/n); q is interpolated between
    those points and clamped to the extreme values outside them.
    """
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    u, inv = np.unique(values, return_inverse=True)
    w = np.bincount(inv, weights=weights, minlength=len(u))
    c = np.cumsum(w) / w.sum()
    out = np.interp(q, c - w / w.sum() / 2, u)
    return out if np.ndim(q) else float(out)


class _Encoder:
    NUMERIC = ("input_len", "generated_so_far", "stage_index", "hint")

    def __init__(self, app_tags, model_ids):
        self.app_tags = list(app_tags)
        self.model_ids = list(model_ids)
        self._app = {t: i for i, t in enumerate(self.app_tags)}
        self._model = {m: i for i, m in enumerate(self.model_ids)}

    @property
    def columns(self):
        return (list(self.NUMERIC) + [f"app={t}" for t in self.app_tags]
                + [f"model={m}" for m in self.model_ids])

    def encode(self, feats) -> np.ndarray:
        n_num = len(self.NUMERIC)
        X = np.zeros((len(feats), n_num + len(self.app_tags) + len(self.model_ids)))
        for i, f in enumerate(feats):
            X[i, 0] = f.input_len
            X[i, 1] = f.generated_so_far
            X[i, 2] = f.stage_index
            X[i, 3] = f.hint
            a = self._app.get(f.app_tag)
            if a is not None:
                X[i, n_num + a] = 1.0
            m = self._model.get(f.model_id)
            if m is not None:
                X[i, n_num + len(self.app_tags) + m] = 1.0
        return X


@dataclass
class _Tree:
    feature: np.ndarray    # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaves: dict           # node id -> sorted target array

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            idx = rows[active]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return node


class QuantileForest:
    """Fitted forest; immutable after :func:`fit_forest` returns."""

    def __init__(self, params: ForestParams, encoder: _Encoder, trees: list[_Tree]):
        self.params = params
        self.encoder = encoder
        self.trees = trees

    # -- prediction -----------------------------------------------------
    def leaf_pools(self, X: np.ndarray):
        leaf_ids = np.stack([t.apply(X) for t in self.trees], axis=1)
        T = len(self.trees)
        for row in leaf_ids:
            parts = [self.trees[t].leaves[int(row[t])] for t in range(T)]
            vals = np.concatenate(parts)
            w = np.concatenate([np.full(len(p), 1.0 / (T * len(p))) for p in parts])
            yield vals, w

    def quantiles(self, feats, qs) -> np.ndarray:
        """Raw pooled quantiles, shape (len(feats), len(qs))."""
        X = self.encoder.encode(feats)
        qs = np.atleast_1d(np.asarray(qs, dtype=float))
        if len(X) == 0:
            return np.empty((0, len(qs)))
        return _batch_quantiles(self._packed(), X, qs)

    def _packed(self) -> _Packed:
        if getattr(self, "_pack_cache", None) is None:
            self._pack_cache = _Packed.build(self.trees)
        return self._pack_cache

    def predict_upper(self, feats, q: float) -> list[LengthBound]:
        raw = self.quantiles(feats, [q])[:, 0]
        return [LengthBound(max(int(math.ceil(r - 1e-9)), f.generated_so_far), q, f.generated_so_far)
                for r, f in zip(raw, feats)]

    # -- persistence ----------------------------------------------------
    def to_dict(self) -> dict:
        trees = []
        for t in self.trees:
            nodes = []
            for i in range(len(t.feature)):
                if t.feature[i] < 0:
                    nodes.append({"leaf": [int(v) for v in t.leaves[i]]})
                else:
                    nodes.append({"feature": int(t.feature[i]), "threshold": float(t.threshold[i]),
                                  "left": int(t.left[i]), "right": int(t.right[i])})
            trees.append({"nodes": nodes})
        return {"format": FORMAT, "version": VERSION, "params": asdict(self.params),
                "columns": self.encoder.columns, "app_tags": self.encoder.app_tags,
                "model_ids": self.encoder.model_ids, "trees": trees}

    @classmethod
    def from_dict(cls, d: dict) -> QuantileForest:
        if d.get("format") != FORMAT or d.get("version") != VERSION:
            raise ValueError("not a goodsched forest file (or unsupported version)")
        trees = []
        for td in d["trees"]:
            n = len(td["nodes"])
            feat = np.full(n, -1, dtype=np.int64)
            thr = np.zeros(n)
            left = np.full(n, -1, dtype=np.int64)
            right = np.full(n, -1, dtype=np.int64)
            leaves = {}
            for i, nd in enumerate(td["nodes"]):
                if "leaf" in nd:
                    leaves[i] = np.asarray(nd["leaf"], dtype=float)
                else:
                    feat[i], thr[i], left[i], right[i] = nd["feature"], nd["threshold"], nd["left"], nd["right"]
            trees.append(_Tree(feat, thr, left, right, leaves))
        return cls(ForestParams(**d["params"]), _Encoder(d["app_tags"], d["model_ids"]), trees)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> QuantileForest:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class _Packed:
    """All trees in one node table so a batch descends every tree at once.

    Leaf values are stored rank-coded against ``uniq``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    child: np.ndarray      # (n_nodes, 2) global ids: left, right
    leaf_id: np.ndarray    # per node, -1 for inner nodes
    leaf_off: np.ndarray   # per leaf
    leaf_size: np.ndarray
    ranks: np.ndarray      # leaf values as indices into uniq, leaf-contiguous
    uniq: np.ndarray
    roots: np.ndarray
    depth: int

    @classmethod
    def build(cls, trees: list[_Tree]) -> _Packed:
        feats, thrs, kids, lids, sizes, vals, roots = [], [], [], [], [], [], []
        base = n_leaves = depth = 0
        for t in trees:
            n = len(t.feature)
            roots.append(base)
            feats.append(t.feature)
            thrs.append(t.threshold)
            kids.append(np.stack([np.where(t.left >= 0, t.left + base, -1),
                                  np.where(t.right >= 0, t.right + base, -1)], axis=1))
            lid = np.full(n, -1, dtype=np.int64)
            for i in sorted(t.leaves):
                lid[i] = n_leaves
                n_leaves += 1
                v = np.asarray(t.leaves[i], dtype=float)
                sizes.append(len(v))
                vals.append(v)
            lids.append(lid)
            depth = max(depth, _tree_depth(t))
            base += n
        allv = np.concatenate(vals)
        uniq = np.unique(allv)
        size = np.asarray(sizes, dtype=np.int64)
        ranks = np.searchsorted(uniq, allv)
        return cls(np.concatenate(feats), np.concatenate(thrs), np.concatenate(kids),
                   np.concatenate(lids), np.cumsum(size) - size, size, ranks, uniq,
                   np.asarray(roots, dtype=np.int64), depth)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node per (tree, row), shape (T, m)."""
        m = len(X)
        node = np.repeat(self.roots[:, None], m, axis=1)
        cols = np.broadcast_to(np.arange(m), node.shape)
        for _ in range(self.depth):
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                break
            x = X[cols, np.where(inner, f, 0)]
            go_right = (x > self.threshold[node]).astype(np.int64)
            node = np.where(inner, self.child[node, go_right], node)
        return node


def _tree_depth(t: _Tree) -> int:
    depth, frontier = 0, [0]
    while frontier:
        nxt = []
        for i in frontier:
            if t.feature[i] >= 0:
                nxt += [int(t.left[i]), int(t.right[i])]
        frontier = nxt
        depth += 1
    return depth


def _batch_quantiles(pk: _Packed, X, qs) -> np.ndarray:
    """Same result as pooled_quantile over each row's leaf pool.

    Pools are rank-coded, so a per-row weighted histogram over the distinct
    values gives the CDF without sorting.
    """
    leaf = pk.leaf_id[pk.apply(X)].T.ravel()    # row-major (m, T)
    m = len(X)
    T = len(pk.roots)
    U = len(pk.uniq)
    lens = pk.leaf_size[leaf]
    total = int(lens.sum())
    first = np.cumsum(lens) - lens
    ranks = pk.ranks[np.repeat(pk.leaf_off[leaf] - first, lens) + np.arange(total)]
    row = np.repeat(np.repeat(np.arange(m), T), lens)
    w = np.repeat(1.0 / (T * lens), lens)
    hist = np.bincount(row * U + ranks, weights=w, minlength=m * U).reshape(m, U)
    present = hist > 0
    mid = np.cumsum(hist, axis=1) - hist / 2
    # index of the last present bin at or before each column
    last = np.maximum.accumulate(np.where(present, np.arange(U), -1), axis=1)
    top = last[:, -1]
    rows = np.arange(m)
    out = np.empty((m, len(qs)))
    for j, q in enumerate(qs):
        above = present & (mid >= q)
        hi = np.where(above.any(axis=1), np.argmax(above, axis=1), top)
        lo = np.where(hi > 0, last[rows, np.maximum(hi - 1, 0)], -1)
        lo = np.where(lo < 0, hi, lo)
        x0, x1 = mid[rows, lo], mid[rows, hi]
        y0, y1 = pk.uniq[lo], pk.uniq[hi]
        span = x1 - x0
        frac = np.divide(q - x0, span, out=np.zeros(m), where=span > 0)
        out[:, j] = y0 + np.clip(frac, 0.0, 1.0) * (y1 - y0)
    return out


def _bin_edges(col: np.ndarray, max_bins: int) -> np.ndarray:
    uniq = np.unique(col)
    if len(uniq) <= max_bins:
        return uniq[:-1]  # splitting at the max puts nothing on the right
    qs = np.quantile(col, np.linspace(0, 1, max_bins + 1)[1:-1])
    return np.unique(qs)


def _grow_tree(codes, edges, y_fit, y_raw, params: ForestParams, rng) -> _Tree:
    n, d = codes.shape
    nb = max(len(e) for e in edges) + 1
    n_edges = np.array([len(e) for e in edges])
    k_feat = max(1, int(round(params.feature_subsample * d)))
    min_leaf = params.min_leaf

    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    node_of = np.zeros(n, dtype=np.int64)
    frontier = [0]
    for _depth in range(params.max_depth):
        if not frontier:
            break
        L = len(frontier)
        loc = np.full(len(feature), -1, dtype=np.int64)
        loc[frontier] = np.arange(L)
        local = loc[node_of]
        member = local >= 0
        s_idx = np.nonzero(member)[0]
        lo = local[s_idx]
        ys = y_fit[s_idx]
        cnt_tot = np.bincount(lo, minlength=L).astype(float)
        sum_tot = np.bincount(lo, weights=ys, minlength=L)
        sq_tot = np.bincount(lo, weights=ys * ys, minlength=L)
        sse_parent = sq_tot - np.divide(sum_tot ** 2, cnt_tot, out=np.zeros(L), where=cnt_tot > 0)

        allowed = np.zeros((L, d), dtype=bool)
        picks = np.argsort(rng.random((L, d)), axis=1)[:, :k_feat]
        np.put_along_axis(allowed, picks, True, axis=1)

        best_gain = np.zeros(L)
        best_feat = np.full(L, -1, dtype=np.int64)
        best_bin = np.zeros(L, dtype=np.int64)
        for f in range(d):
            if n_edges[f] == 0 or not allowed[:, f].any():
                continue
            key = lo * nb + codes[s_idx, f]
            c = np.bincount(key, minlength=L * nb).reshape(L, nb).cumsum(axis=1).astype(float)
            s = np.bincount(key, weights=ys, minlength=L * nb).reshape(L, nb).cumsum(axis=1)
            q = np.bincount(key, weights=ys * ys, minlength=L * nb).reshape(L, nb).cumsum(axis=1)
            cr = cnt_tot[:, None] - c
            sr = sum_tot[:, None] - s
            qr = sq_tot[:, None] - q
            with np.errstate(divide="ignore", invalid="ignore"):
                sse = (q - s * s / c) + (qr - sr * sr / cr)
            valid = (c >= min_leaf) & (cr >= min_leaf)
            valid[:, n_edges[f]:] = False
            valid &= allowed[:, f][:, None]
            gain = np.where(valid, sse_parent[:, None] - sse, -np.inf)
            b = np.argmax(gain, axis=1)
            g = gain[np.arange(L), b]
            better = g > best_gain + 1e-12
            best_gain[better] = g[better]
            best_feat[better] = f
            best_bin[better] = b[better]

        new_frontier = []
        left_of = np.full(L, -1, dtype=np.int64)
        right_of = np.full(L, -1, dtype=np.int64)
        for j, node in enumerate(frontier):
            f = best_feat[j]
            if f < 0:
                continue
            li, ri = len(feature), len(feature) + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
            feature[node] = int(f)
            threshold[node] = float(edges[f][best_bin[j]])
            left[node], right[node] = li, ri
            left_of[j], right_of[j] = li, ri
            new_frontier += [li, ri]
        if not new_frontier:
            break
        f_s = best_feat[lo]
        moving = f_s >= 0
        rows = s_idx[moving]
        lo_m = lo[moving]
        go_left = codes[rows, f_s[moving]] <= best_bin[lo_m]
        node_of[rows] = np.where(go_left, left_of[lo_m], right_of[lo_m])
        frontier = new_frontier

    feature = np.asarray(feature, dtype=np.int64)
    order = np.argsort(node_of, kind="stable")
    sorted_nodes = node_of[order]
    bounds = np.searchsorted(sorted_nodes, np.arange(len(feature) + 1))
    leaves = {}
    for i in np.nonzero(feature < 0)[0]:
        vals = y_raw[order[bounds[i]:bounds[i + 1]]]
        leaves[int(i)] = np.sort(vals)
    return _Tree(feature, np.asarray(threshold), np.asarray(left, dtype=np.int64),
                 np.asarray(right, dtype=np.int64), leaves)


def fit_forest(dataset, params: ForestParams | None = None) -> QuantileForest:
    """Train on ``[(FeatureVector, true_length), ...]``; deterministic in ``params.seed``."""
    params = params or ForestParams()
    if len(dataset) < 10 * params.min_leaf:
        raise InsufficientData(f"need at least {10 * params.min_leaf} samples, got {len(dataset)}")
    feats = [f for f, _ in dataset]
    y_raw = np.asarray([t for _, t in dataset], dtype=float)
    if (y_raw < 1).any():
        raise ValueError("target lengths must be >= 1")
    encoder = _Encoder(sorted({f.app_tag for f in feats}), sorted({f.model_id for f in feats}))
    X = encoder.encode(feats)
    edges = [_bin_edges(X[:, j], params.max_bins) for j in range(X.shape[1])]
    codes = np.stack([np.searchsorted(edges[j], X[:, j], side="left") for j in range(X.shape[1])],
                     axis=1).astype(np.int64)
    y_fit = np.log(y_raw)
    rng = np.random.default_rng(params.seed)
    trees = []
    n = len(y_raw)
    for _ in range(params.n_trees):
        boot = rng.integers(0, n, size=n)
        trees.append(_grow_tree(codes[boot], edges, y_fit[boot], y_raw[boot], params, rng))
    return QuantileForest(params, encoder, trees)


def predict_upper(forest: QuantileForest | None, features: FeatureVector, q: float = 0.95) -> LengthBound:
    if forest is None or not forest.trees:
        raise NotFitted("forest has not been fitted")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    return forest.predict_upper([features], q)[0]


def refine(forest: QuantileForest, features: FeatureVector, current: LengthBound,
           refine_interval: int = DEFAULT_REFINE_INTERVAL) -> LengthBound:
    """Re-predict once ``refine_interval`` more tokens exist than at the last bound.

    ``features.generated_so_far`` is the request's current progress.
    """
    generated = features.generated_so_far
    if generated < current.as_of_generated:
        raise ValueError("generation cannot move backwards")
    if generated - current.as_of_generated < refine_interval:
        return current
    return predict_upper(forest, features, current.q)


def refinement_rows(base: FeatureVector, true_len: int, key: tuple[int, int],
                    interval: int = DEFAULT_REFINE_INTERVAL, max_rounds: int = 8,
                    hint_scale: float = 0.8):
    """Training rows for one response as seen at each refinement point."""
    rows = []
    for k in range(max_rounds + 1):
        g = k * interval
        if g >= true_len:
            break
        f = replace(base, generated_so_far=g,
                    hint=content_hint(true_len, key, g, interval, hint_scale))
        rows.append((f, true_len))
    return rows
