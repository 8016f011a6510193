"""Probabilistic circuits with categorical leaves, evaluated in log space.

A :class:`Circuit` is a multi-rooted DAG whose units are stored in
topological order (children before parents). Structure is immutable and
shared between circuits that differ only in parameters, so the compiled
evaluation plan is built once and reused across EM updates.

Evaluation is vectorized over samples: units are grouped into layers by
depth and kind. Product layers are numpy gathers; sum units sharing a
child scope are evaluated as one (dense or sparse) matrix product on
max-shifted children, falling back to an exact gather-logsumexp whenever
the shift could underflow. Arrays of unit values are laid out units-major, ``(U + 1, B)``,
where the extra row is a padding slot holding ``log 1 = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix

from .errors import CircuitError, DomainError, StructureError

INPUT = "input"
SUM = "sum"
PRODUCT = "product"

_CODE = {INPUT: 0, SUM: 1, PRODUCT: 2}
_KINDS = (INPUT, SUM, PRODUCT)

#: Marker for an unobserved (marginalized) variable in evidence arrays.
UNKNOWN = -1

NORMALIZATION_TOL = 1e-9
DEFAULT_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class Unit:
    """One circuit unit.

    Sum units carry ``weights`` aligned with ``children``; input units carry
    the observed variable ``var`` and a categorical table ``probs``.
    """

    id: int
    kind: str
    children: tuple[int, ...] = ()
    weights: np.ndarray | None = None
    var: int = -1
    probs: np.ndarray | None = None


def logsumexp(a, axis):
    """Stable ``log(sum(exp(a)))`` that maps all ``-inf`` slices to ``-inf``."""
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


class CircuitBuilder:
    """Incrementally assemble a circuit; ids are assigned in creation order."""

    def __init__(self, domains: Sequence[int]):
        self.domains = tuple(int(d) for d in domains)
        self.kinds: list[int] = []
        self.children: list[tuple[int, ...]] = []
        self.vars: list[int] = []
        self.weights: list[np.ndarray] = []
        self.probs: list[np.ndarray] = []

    def __len__(self):
        return len(self.kinds)

    def input(self, var: int, probs) -> int:
        self.kinds.append(0)
        self.children.append(())
        self.vars.append(int(var))
        self.probs.append(np.asarray(probs, dtype=np.float64))
        return len(self.kinds) - 1

    def product(self, children: Iterable[int]) -> int:
        self.kinds.append(2)
        self.children.append(tuple(int(c) for c in children))
        self.vars.append(-1)
        return len(self.kinds) - 1

    def sum(self, children: Iterable[int], weights) -> int:
        self.kinds.append(1)
        self.children.append(tuple(int(c) for c in children))
        self.vars.append(-1)
        self.weights.append(np.asarray(weights, dtype=np.float64))
        return len(self.kinds) - 1

    def build(self, roots: Sequence[int]) -> "Circuit":
        structure = _Structure(
            np.asarray(self.kinds, dtype=np.int8),
            list(self.children),
            np.asarray(self.vars, dtype=np.int64),
            tuple(int(r) for r in roots),
            self.domains,
        )
        w = np.concatenate(self.weights) if self.weights else np.zeros(0)
        p = np.concatenate(self.probs) if self.probs else np.zeros(0)
        return Circuit._from_parts(structure, w, p)


class _Structure:
    """Parameter-free part of a circuit, shared by re-parameterized copies."""

    def __init__(self, kinds, children, var, roots, domains):
        self.kinds = kinds
        self.children = children
        self.var = var
        self.roots = roots
        self.domains = domains
        n = len(kinds)
        if len(children) != n or len(var) != n:
            raise CircuitError("inconsistent unit arrays")
        if not roots:
            raise CircuitError("circuit has no roots")
        for r in roots:
            if not 0 <= r < n:
                raise CircuitError(f"root {r} does not name a unit")
        deg = np.fromiter((len(c) for c in children), dtype=np.int64, count=n)
        is_sum = kinds == 1
        edge_counts = np.where(is_sum, deg, 0)
        self.edge_start = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(edge_counts, out=self.edge_start[1:])
        dom = np.asarray(domains, dtype=np.int64)
        leaf_counts = np.zeros(n, dtype=np.int64)
        is_input = kinds == 0
        if is_input.any():
            v = var[is_input]
            if v.min() < 0 or v.max() >= len(domains):
                bad = int(np.flatnonzero(is_input)[np.argmax((v < 0) | (v >= len(domains)))])
                raise CircuitError(f"input unit {bad} refers to an undeclared variable")
            leaf_counts[is_input] = dom[v]
        self.leaf_start = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(leaf_counts, out=self.leaf_start[1:])
        for u in np.flatnonzero(~is_input):
            ch = children[u]
            if not ch:
                raise CircuitError(f"unit {u} has no children")
            if max(ch) >= u or min(ch) < 0:
                raise CircuitError(f"unit {u} is not in topological order")
        for u in np.flatnonzero(is_input):
            if children[u]:
                raise CircuitError(f"input unit {u} has children")

    @property
    def size(self):
        return len(self.kinds)

    @cached_property
    def plan(self):
        return _Plan(self)

    @cached_property
    def scopes(self) -> list[int]:
        """Variable scopes as integer bitmasks."""
        scopes = [0] * self.size
        for u in range(self.size):
            if self.kinds[u] == 0:
                scopes[u] = 1 << int(self.var[u])
            else:
                s = 0
                for c in self.children[u]:
                    s |= scopes[c]
                scopes[u] = s
        return scopes

    @cached_property
    def report(self) -> "StructureReport":
        return _validate(self)

    @cached_property
    def parents(self) -> list[list[int]]:
        parents = [[] for _ in range(self.size)]
        for u, ch in enumerate(self.children):
            for c in ch:
                parents[c].append(u)
        return parents


class _Group:
    """Units of one kind at one depth, children padded into a matrix."""

    __slots__ = ("kind", "ids", "C", "E", "mask", "src", "uniq", "starts")

    def __init__(self, kind, ids, C, E, mask):
        self.kind = kind
        self.ids = ids
        self.C = C
        self.E = E
        self.mask = mask
        flat_targets = C.ravel()
        src = np.flatnonzero(mask.ravel())
        order = np.argsort(flat_targets[src], kind="stable")
        self.src = src[order]
        self.uniq, self.starts = np.unique(flat_targets[self.src], return_index=True)

    def scatter_add(self, F, vals):
        """Add per-edge values ``vals`` of shape ``(n, deg, B)`` into child rows."""
        flat = vals.reshape(-1, vals.shape[-1])[self.src]
        F[self.uniq] += np.add.reduceat(flat, self.starts, axis=0)


class _ProductLayer:
    """Product units at one depth as a 0/1 incidence matrix over their children."""

    def __init__(self, group: _Group):
        self.group = group
        self.ids = group.ids
        r, k = np.nonzero(group.mask)
        self.children, cols = np.unique(group.C[r, k], return_inverse=True)
        indptr = np.searchsorted(r, np.arange(len(self.ids) + 1))
        shape = (len(self.ids), len(self.children))
        self.A = csr_matrix((np.ones(len(r)), cols, indptr), shape=shape)
        self.AT = self.A.T.tocsr()


class _SumBlock:
    """Sum units at one depth whose children share one scope.

    Such a block is evaluated in linear space as a matrix product after
    shifting the children by their per-sample maximum; since all children
    describe the same variables the shift rarely underflows, and when it
    does the padded gather path in ``group`` is used instead.
    """

    def __init__(self, group: _Group, exact_only: bool):
        self.group = group
        self.exact_only = exact_only
        self.parents = group.ids
        m = group.mask
        r, k = np.nonzero(m)
        child_ids = group.C[r, k]
        self.children, cols = np.unique(child_ids, return_inverse=True)
        self.rows = r
        self.cols = cols
        self.edges = group.E[r, k]
        n, c = len(self.parents), len(self.children)
        self.shape = (n, c)
        # BLAS on the dense block beats gathering edges until it is ~32x sparser
        self.dense = n * c <= 32 * len(r) or n * c <= 65536
        self.indptr = np.searchsorted(r, np.arange(n + 1))

    def matrix(self, w):
        if self.dense:
            W = np.zeros(self.shape)
            W[self.rows, self.cols] = w[self.edges]
            return W
        return csr_matrix((w[self.edges], self.cols, self.indptr), shape=self.shape)


class _Plan:
    """Layered evaluation schedule compiled from a structure."""

    def __init__(self, s: _Structure):
        n = s.size
        depth = np.zeros(n, dtype=np.int64)
        children = s.children
        for u in range(n):
            ch = children[u]
            if ch:
                depth[u] = 1 + max(depth[c] for c in ch)
        kinds = s.kinds
        scopes = s.scopes
        self.pad = n
        self.leaf_ids = np.flatnonzero(kinds == 0)
        self.leaf_var = s.var[self.leaf_ids]
        self.leaf_off = s.leaf_start[self.leaf_ids]
        self.steps: list = []
        self.edge_visits = 0

        def group(ids, code):
            deg = max(len(children[u]) for u in ids)
            C = np.full((len(ids), deg), n, dtype=np.int64)
            E = np.full((len(ids), deg), -1, dtype=np.int64)
            for r, u in enumerate(ids):
                ch = children[u]
                C[r, : len(ch)] = ch
                if code == 1:
                    E[r, : len(ch)] = np.arange(s.edge_start[u], s.edge_start[u + 1])
            return _Group(_KINDS[code], np.asarray(ids, dtype=np.int64), C, E, C < n)

        for d in range(1, int(depth.max(initial=0)) + 1):
            at_depth = depth == d
            prods = np.flatnonzero(at_depth & (kinds == 2))
            if prods.size:
                self.steps.append(_ProductLayer(group(prods, 2)))
            blocks: dict = {}
            for u in np.flatnonzero(at_depth & (kinds == 1)):
                ch = children[u]
                key = scopes[u] if all(scopes[c] == scopes[u] for c in ch) else None
                blocks.setdefault(key, []).append(u)
            for key, ids in blocks.items():
                self.steps.append(_SumBlock(group(ids, 1), exact_only=key is None))
        for st in self.steps:
            self.edge_visits += int(st.group.mask.sum())


class _Params:
    """Per-parameterization tables used by the evaluator."""

    def __init__(self, circuit: "Circuit"):
        plan = circuit._s.plan
        w = circuit._w
        with np.errstate(divide="ignore"):
            self.leaf_logp = np.log(circuit._p)
            logw = np.log(w)
        self.w = w
        self.logw = logw
        self.mats = []
        self.logw_tables = []
        for st in plan.steps:
            if isinstance(st, _SumBlock):
                g = st.group
                self.mats.append(None if st.exact_only else st.matrix(w))
                self.logw_tables.append(np.where(g.mask, logw[np.maximum(g.E, 0)], -np.inf))
            else:
                self.mats.append(None)
                self.logw_tables.append(None)


@dataclass(frozen=True)
class StructureReport:
    """Outcome of :func:`validate_structure`."""

    smooth: bool
    decomposable: bool
    alternating: bool
    offending: tuple[int, ...] = ()
    messages: tuple[str, ...] = field(default=(), compare=False)

    @property
    def ok(self) -> bool:
        return self.smooth and self.decomposable and self.alternating


def _validate(s: _Structure) -> StructureReport:
    scopes = s.scopes
    kinds = s.kinds
    smooth = decomposable = alternating = True
    offending: list[int] = []
    messages: list[str] = []
    for u in range(s.size):
        ch = s.children[u]
        k = kinds[u]
        if k == 1:
            if any(scopes[c] != scopes[u] for c in ch):
                smooth = False
                offending.append(u)
                messages.append(f"sum unit {u} is not smooth: children scopes differ")
            if any(kinds[c] == 1 for c in ch):
                alternating = False
                offending.append(u)
                messages.append(f"sum unit {u} has a sum child")
        elif k == 2:
            acc = 0
            for c in ch:
                if acc & scopes[c]:
                    decomposable = False
                    offending.append(u)
                    messages.append(f"product unit {u} is not decomposable: children scopes overlap")
                    break
                acc |= scopes[c]
            if any(kinds[c] == 2 for c in ch):
                alternating = False
                offending.append(u)
                messages.append(f"product unit {u} has a product child")
    for r in s.roots:
        if kinds[r] != 1:
            alternating = False
            offending.append(r)
            messages.append(f"root {r} is not a sum unit")
    return StructureReport(
        smooth, decomposable, alternating, tuple(sorted(set(offending))), tuple(messages)
    )


class Circuit:
    """A multi-headed probabilistic circuit over discrete variables.

    Build one with :class:`CircuitBuilder` or from a list of :class:`Unit`
    whose ids equal their positions. Parameters are stored flat:
    ``sum_weights`` concatenates the weights of all sum units in unit order,
    ``leaf_probs`` the tables of all input units.
    """

    def __init__(self, units: Sequence[Unit], roots: Sequence[int], domains: Sequence[int]):
        b = CircuitBuilder(domains)
        for pos, u in enumerate(units):
            if u.id != pos:
                raise CircuitError(f"unit id {u.id} does not match its position {pos}")
            if u.kind == INPUT:
                b.input(u.var, u.probs)
            elif u.kind == SUM:
                b.sum(u.children, u.weights)
            elif u.kind == PRODUCT:
                b.product(u.children)
            else:
                raise CircuitError(f"unknown unit kind {u.kind!r}")
        built = b.build(roots)
        self._s = built._s
        self._w = built._w
        self._p = built._p

    @classmethod
    def _from_parts(cls, structure, sum_weights, leaf_probs, check=True):
        self = cls.__new__(cls)
        self._s = structure
        self._w = np.asarray(sum_weights, dtype=np.float64)
        self._p = np.asarray(leaf_probs, dtype=np.float64)
        if check:
            self._check_parameters()
        return self

    def _check_parameters(self):
        s = self._s
        if self._w.shape != (s.edge_start[-1],):
            raise CircuitError("sum weights do not match edge count")
        if self._p.shape != (s.leaf_start[-1],):
            raise CircuitError("leaf tables do not match declared domains")
        for name, arr, starts, code in (
            ("sum unit", self._w, s.edge_start, 1),
            ("input unit", self._p, s.leaf_start, 0),
        ):
            ids = np.flatnonzero(s.kinds == code)
            if not ids.size:
                continue
            invalid = ~np.isfinite(arr) | (arr < 0)
            if invalid.any():
                pos = np.flatnonzero(invalid)[0]
                bad = ids[np.searchsorted(starts[ids], pos, side="right") - 1]
                raise CircuitError(f"{name} {bad} has a negative or non-finite parameter")
            totals = np.add.reduceat(arr, starts[ids])
            off = np.abs(totals - 1.0) > NORMALIZATION_TOL
            if off.any():
                bad = int(ids[np.argmax(off)])
                raise CircuitError(
                    f"{name} {bad} parameters sum to {totals[np.argmax(off)]!r}, not 1"
                )

    def with_parameters(self, sum_weights=None, leaf_probs=None, check=True) -> "Circuit":
        """Same structure, new flat parameters."""
        return Circuit._from_parts(
            self._s,
            self._w if sum_weights is None else sum_weights,
            self._p if leaf_probs is None else leaf_probs,
            check=check,
        )

    # structure accessors
    @property
    def num_units(self) -> int:
        return self._s.size

    @property
    def roots(self) -> tuple[int, ...]:
        return self._s.roots

    @property
    def num_heads(self) -> int:
        return len(self._s.roots)

    @property
    def domains(self) -> tuple[int, ...]:
        return self._s.domains

    @property
    def num_vars(self) -> int:
        return len(self._s.domains)

    @property
    def num_edges(self) -> int:
        return sum(len(c) for c in self._s.children)

    @property
    def num_sum_edges(self) -> int:
        return int(self._s.edge_start[-1])

    @property
    def sum_weights(self) -> np.ndarray:
        return self._w

    @property
    def leaf_probs(self) -> np.ndarray:
        return self._p

    @property
    def edge_start(self) -> np.ndarray:
        return self._s.edge_start

    @property
    def leaf_start(self) -> np.ndarray:
        return self._s.leaf_start

    def kind(self, u: int) -> str:
        return _KINDS[self._s.kinds[u]]

    def children(self, u: int) -> tuple[int, ...]:
        return self._s.children[u]

    def var(self, u: int) -> int:
        return int(self._s.var[u])

    def weights(self, u: int) -> np.ndarray:
        return self._w[self._s.edge_start[u] : self._s.edge_start[u + 1]]

    def probs(self, u: int) -> np.ndarray:
        return self._p[self._s.leaf_start[u] : self._s.leaf_start[u + 1]]

    def scope(self, u: int) -> frozenset[int]:
        mask = self._s.scopes[u]
        return frozenset(i for i in range(mask.bit_length()) if mask >> i & 1)

    @property
    def kinds(self) -> np.ndarray:
        """Per-unit kind codes: 0 input, 1 sum, 2 product."""
        return self._s.kinds

    @property
    def units(self) -> list[Unit]:
        out = []
        for u in range(self.num_units):
            k = self._s.kinds[u]
            if k == 0:
                out.append(Unit(u, INPUT, var=self.var(u), probs=self.probs(u).copy()))
            elif k == 1:
                out.append(Unit(u, SUM, self.children(u), weights=self.weights(u).copy()))
            else:
                out.append(Unit(u, PRODUCT, self.children(u)))
        return out

    def same_structure(self, other: "Circuit") -> bool:
        return (
            self._s is other._s
            or (
                self._s.roots == other._s.roots
                and self._s.domains == other._s.domains
                and np.array_equal(self._s.kinds, other._s.kinds)
                and np.array_equal(self._s.var, other._s.var)
                and self._s.children == other._s.children
            )
        )

    @property
    def report(self) -> StructureReport:
        return self._s.report

    @property
    def edge_visits_per_sample(self) -> int:
        """Edges gathered by one forward pass for one sample."""
        return self._s.plan.edge_visits

    def __repr__(self):
        return (
            f"Circuit(units={self.num_units}, edges={self.num_edges}, "
            f"heads={self.num_heads}, vars={self.num_vars})"
        )

    # evaluation
    def check_evidence(self, x, allow_unknown: bool) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.num_vars:
            raise DomainError(f"expected samples with {self.num_vars} variables, got shape {x.shape}")
        if x.size and not np.issubdtype(x.dtype, np.integer):
            xi = x.astype(np.int64)
            if not np.array_equal(xi, x):
                raise DomainError("observations must be integers")
            x = xi
        x = x.astype(np.int64, copy=False)
        dom = np.asarray(self.domains)
        lo = UNKNOWN if allow_unknown else 0
        bad = (x < lo) | (x >= dom)
        if bad.any():
            i, v = np.argwhere(bad)[0]
            kind = "unobserved" if x[i, v] == UNKNOWN else "out of domain"
            raise DomainError(f"sample {i}, variable {v}: value {x[i, v]} is {kind}")
        return x

    def _forward(self, x, params: _Params, leaf_values=None, keep=False):
        """Values of every unit for samples ``x`` (already validated), ``(U+1, B)``.

        With ``keep`` also returns per-step intermediates for :meth:`_backward`.
        """
        plan = self._s.plan
        B = x.shape[0]
        L = np.empty((plan.pad + 1, B))
        L[plan.pad] = 0.0
        if leaf_values is not None:
            L[plan.leaf_ids] = leaf_values
        elif plan.leaf_ids.size:
            xv = x.T[plan.leaf_var]
            if x.size and x.min() < 0:
                unknown = xv < 0
                vals = params.leaf_logp[plan.leaf_off[:, None] + np.where(unknown, 0, xv)]
                vals[unknown] = 0.0
            else:
                vals = params.leaf_logp[plan.leaf_off[:, None] + xv]
            L[plan.leaf_ids] = vals
        cache = [] if keep else None
        with np.errstate(invalid="ignore", divide="ignore"):
            for st, W, logw in zip(plan.steps, params.mats, params.logw_tables):
                if logw is None:
                    L[st.ids] = st.A @ L[st.children]
                    if keep:
                        cache.append(None)
                    continue
                item = None
                if W is not None:
                    Lc = L[st.children]
                    shift = Lc.max(axis=0)
                    finite = np.isfinite(shift)
                    shift[~finite] = 0.0
                    P = np.exp(Lc - shift)
                    S = W @ P
                    if not ((S <= 0.0) & finite).any():
                        L[st.parents] = np.log(S) + shift
                        item = (P, S)
                if item is None:
                    g = st.group
                    L[g.ids] = logsumexp(L[g.C] + logw[:, :, None], axis=1)
                if keep:
                    cache.append(item)
        return (L, cache) if keep else L

    def _backward(self, L, cache, F, params: _Params, edge_acc):
        """Push flows ``F`` (roots filled in) down to every unit.

        ``F`` is updated in place; per-edge flows summed over the batch are
        added to ``edge_acc``.
        """
        plan = self._s.plan
        B = L.shape[1]
        w = params.w
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            for st, W, logw, item in zip(
                reversed(plan.steps), reversed(params.mats), reversed(params.logw_tables), reversed(cache)
            ):
                if logw is None:
                    F[st.children] += st.AT @ F[st.ids]
                    continue
                Fn = F[st.parents]
                if item is not None:
                    P, S = item
                    Q = np.where(Fn > 0.0, Fn / S, 0.0)
                    F[st.children] += P * (W.T @ Q)
                    if st.dense:
                        M = Q @ P.T
                        edge_acc[st.edges] += w[st.edges] * M[st.rows, st.cols]
                    else:
                        edge_acc[st.edges] += w[st.edges] * np.einsum("eb,eb->e", Q[st.rows], P[st.cols])
                    continue
                g = st.group
                ratio = np.exp(logw[:, :, None] + L[g.C] - L[g.ids][:, None, :])
                ef = np.where(Fn[:, None, :] > 0, ratio * Fn[:, None, :], 0.0)
                edge_acc[g.E[g.mask]] += ef[g.mask].sum(axis=-1)
                g.scatter_add(F, ef)

    def unit_log_values(self, x, allow_unknown=False, leaf_values=None) -> np.ndarray:
        """Log-values of every unit, ``(U, B)``, for a batch small enough to hold."""
        x = self.check_evidence(x, allow_unknown)
        L = self._forward(x, _Params(self), leaf_values)
        return L[:-1]

    def head_log_likelihoods(self, x, allow_unknown=False, chunk=DEFAULT_CHUNK, leaf_values=None):
        """``log p_head(x)`` for every head, shape ``(N, num_heads)``."""
        x = self.check_evidence(x, allow_unknown)
        params = _Params(self)
        roots = np.asarray(self.roots)
        out = np.empty((x.shape[0], len(roots)))
        for a in range(0, x.shape[0], chunk):
            lv = None if leaf_values is None else leaf_values[:, a : a + chunk]
            L = self._forward(x[a : a + chunk], params, lv)
            out[a : a + chunk] = L[roots].T
        return out


def _as_batch(x):
    x = np.asarray(x)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _check_head(circuit: Circuit, head: int):
    if not 0 <= head < circuit.num_heads:
        raise IndexError(f"head {head} out of range for a {circuit.num_heads}-headed circuit")


def log_likelihood(circuit: Circuit, x, head: int = 0):
    """``log p_head(x)`` for fully observed samples (one or a batch)."""
    _check_head(circuit, head)
    xb, single = _as_batch(x)
    ll = circuit.head_log_likelihoods(xb)[:, head]
    return float(ll[0]) if single else ll


def log_marginal(circuit: Circuit, e, head: int = 0):
    """Log-probability of partial evidence; :data:`UNKNOWN` entries are summed out."""
    _check_head(circuit, head)
    rep = circuit.report
    if not (rep.smooth and rep.decomposable):
        raise StructureError("marginals need a smooth and decomposable circuit: " + "; ".join(rep.messages))
    eb, single = _as_batch(e)
    ll = circuit.head_log_likelihoods(eb, allow_unknown=True)[:, head]
    return float(ll[0]) if single else ll


def validate_structure(circuit: Circuit) -> StructureReport:
    return circuit.report


def make_evidence(num_vars: int, observed: dict[int, int]) -> np.ndarray:
    """Evidence vector with the given variables observed and the rest unknown."""
    e = np.full(num_vars, UNKNOWN, dtype=np.int64)
    for v, val in observed.items():
        e[v] = val
    return e


def reachable_units(circuit: Circuit) -> np.ndarray:
    """Boolean mask of units reachable from some root."""
    seen = np.zeros(circuit.num_units, dtype=bool)
    stack = list(circuit.roots)
    while stack:
        u = stack.pop()
        if seen[u]:
            continue
        seen[u] = True
        stack.extend(circuit.children(u))
    return seen


def subcircuit(circuit: Circuit, roots=None, edge_keep=None) -> Circuit:
    """Copy of ``circuit`` restricted to reachable units.

    ``roots`` replaces the head list; ``edge_keep`` (boolean over sum edges)
    drops sum edges, whose surviving weights are renormalized per unit.
    """
    roots = circuit.roots if roots is None else tuple(roots)
    children = [circuit.children(u) for u in range(circuit.num_units)]
    w = circuit.sum_weights
    if edge_keep is not None:
        starts = circuit.edge_start
        for u in np.flatnonzero(circuit.kinds == 1):
            sl = slice(starts[u], starts[u + 1])
            if not edge_keep[sl].all():
                children[u] = tuple(c for c, k in zip(children[u], edge_keep[sl]) if k)
    seen = np.zeros(circuit.num_units, dtype=bool)
    stack = list(roots)
    while stack:
        u = stack.pop()
        if seen[u]:
            continue
        seen[u] = True
        stack.extend(children[u])
    new_id = np.full(circuit.num_units, -1, dtype=np.int64)
    b = CircuitBuilder(circuit.domains)
    starts = circuit.edge_start
    for u in np.flatnonzero(seen):
        k = circuit.kinds[u]
        if k == 0:
            new_id[u] = b.input(circuit.var(u), circuit.probs(u))
        elif k == 2:
            new_id[u] = b.product(new_id[c] for c in children[u])
        else:
            wu = w[starts[u] : starts[u + 1]]
            if edge_keep is not None:
                mask = edge_keep[starts[u] : starts[u + 1]]
                if not mask.all():
                    wu = wu[mask]
                    wu = wu / wu.sum()
            new_id[u] = b.sum((new_id[c] for c in children[u]), wu)
    return b.build([int(new_id[r]) for r in roots])


def stack_heads(circuits: Sequence[Circuit]) -> Circuit:
    """Disjoint union of circuits over the same variables; heads concatenated."""
    domains = circuits[0].domains
    b = CircuitBuilder(domains)
    roots = []
    for c in circuits:
        if c.domains != domains:
            raise CircuitError("circuits declare different domains")
        base = len(b)
        for u in range(c.num_units):
            k = c.kinds[u]
            if k == 0:
                b.input(c.var(u), c.probs(u))
            elif k == 2:
                b.product(base + ch for ch in c.children(u))
            else:
                b.sum((base + ch for ch in c.children(u)), c.weights(u))
        roots.extend(base + r for r in c.roots)
    return b.build(roots)
