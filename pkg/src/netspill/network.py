"""Interference graphs: construction, validation and I/O.

A :class:`Network` is an undirected, unweighted graph without self-links,
stored in compressed sparse row form.  Neighbor lists are sorted, so two
networks with the same edge set compare equal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import ParseError, ValidationError


@dataclass(frozen=True, eq=False)
class Network:
    """Undirected interference graph.

    Parameters
    ----------
    n : int
        Number of agents.
    indptr, indices : ndarray
        CSR layout of the symmetric adjacency; ``indices[indptr[i]:indptr[i+1]]``
        is the sorted neighbor list of agent ``i``.
    """

    n: int
    indptr: np.ndarray = field(repr=False)
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        indptr.setflags(write=False)
        indices.setflags(write=False)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        self.validate()

    @classmethod
    def from_edges(cls, n: int, edges) -> "Network":
        """Build from an iterable of ``(i, j)`` pairs.

        Duplicate and reversed pairs collapse to one undirected edge.
        """
        n = int(n)
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                       dtype=np.int64).reshape(-1, 2)
        if e.size:
            if (e < 0).any() or (e >= n).any():
                bad = e[((e < 0) | (e >= n)).any(axis=1)][0]
                raise ValidationError(f"node index out of range for n={n}: {tuple(bad)}")
            loops = e[:, 0] == e[:, 1]
            if loops.any():
                raise ValidationError(f"self-loop at node {int(e[loops][0, 0])}")
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        adj.sum_duplicates()
        adj.sort_indices()
        return cls(n, adj.indptr, adj.indices)

    @classmethod
    def from_adjacency(cls, adjacency) -> "Network":
        a = sp.csr_matrix(adjacency)
        if a.shape[0] != a.shape[1]:
            raise ValidationError("adjacency must be square")
        if (a != a.T).nnz:
            raise ValidationError("adjacency is not symmetric")
        if a.diagonal().any():
            raise ValidationError("adjacency has self-loops")
        coo = sp.triu(a, k=1).tocoo()
        return cls.from_edges(a.shape[0], np.column_stack([coo.row, coo.col]))

    def validate(self):
        n = self.n
        if self.indptr.shape != (n + 1,) or self.indptr[0] != 0:
            raise ValidationError("malformed indptr")
        if self.indptr[-1] != self.indices.size:
            raise ValidationError("indptr/indices size mismatch")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= n):
            raise ValidationError("neighbor index out of range")
        a = self.adjacency
        if a.diagonal().any():
            raise ValidationError("self-loop in adjacency")
        if (a != a.T).nnz:
            raise ValidationError("adjacency is not symmetric")

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.indices.size)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    @cached_property
    def degrees(self) -> np.ndarray:
        d = np.diff(self.indptr)
        d.setflags(write=False)
        return d

    @property
    def neighbor_lists(self) -> list[np.ndarray]:
        return [self.indices[self.indptr[i]:self.indptr[i + 1]] for i in range(self.n)]

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def n_edges(self) -> int:
        return int(self.indices.size // 2)

    def edges(self) -> np.ndarray:
        """Edge array with ``i < j`` in each row, lexicographically sorted."""
        rows = np.repeat(np.arange(self.n), self.degrees)
        keep = rows < self.indices
        return np.column_stack([rows[keep], self.indices[keep]])

    @cached_property
    def averaging(self) -> sp.csr_matrix:
        """Row-normalized adjacency ``D^{-1} G``; requires every degree >= 1."""
        if (self.degrees == 0).any():
            raise ValidationError(
                f"{int((self.degrees == 0).sum())} isolated node(s); remove them first")
        w = np.repeat(1.0 / self.degrees, self.degrees)
        return sp.csr_matrix((w, self.indices, self.indptr), shape=(self.n, self.n))

    def permute(self, perm) -> "Network":
        """Relabel agents so that new agent ``k`` is old agent ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return Network.from_edges(self.n, inv[self.edges()])

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    __hash__ = None


def build_radius_graph(coords, radius: float) -> Network:
    """Connect every pair of points at Euclidean distance ``<= radius``.

    Parameters
    ----------
    coords : array_like, shape (n, 2)
        Planar coordinates in meters.
    radius : float
        Connection radius in the same units; must be positive.
    """
    pts = np.asarray(coords, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValidationError("coordinates must have shape (n, 2)")
    if not np.isfinite(pts).all():
        raise ValidationError("non-finite coordinate")
    if not radius > 0:
        raise ValidationError("radius must be positive")
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    return Network.from_edges(pts.shape[0], pairs)


def remove_isolated(net: Network, *arrays):
    """Drop degree-0 agents and reindex the rest densely.

    Returns ``(network, filtered_arrays, dropped)`` where ``filtered_arrays`` is a
    tuple holding each input array restricted to kept rows (``None`` passes
    through) and ``dropped`` lists the removed original indices.
    """
    for a in arrays:
        if a is not None and len(a) != net.n:
            raise ValidationError("array length does not match network size")
    keep = net.degrees > 0
    dropped = np.flatnonzero(~keep)
    if dropped.size == 0:
        return net, tuple(arrays), dropped
    new_index = np.full(net.n, -1, dtype=np.int64)
    new_index[keep] = np.arange(int(keep.sum()))
    reduced = Network.from_edges(int(keep.sum()), new_index[net.edges()])
    out = tuple(None if a is None else np.asarray(a)[keep] for a in arrays)
    return reduced, out, dropped


# ---------------------------------------------------------------------------
# file formats

def _data_lines(path):
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            yield lineno, line.rstrip("\r\n")


def load_edge_list(path, n: int | None = None) -> Network:
    """Read a two-column integer edge list.

    Comment lines start with ``#``.  ``# one-based`` switches to 1-based node
    labels and ``# n=<int>`` declares the node count (needed when the highest
    labelled nodes are isolated).  An explicit ``n`` argument wins over the
    header.  A non-numeric first data row is treated as a column header.
    """
    path = Path(path)
    one_based = False
    declared_n = None
    rows = []
    seen_data = False
    for lineno, line in _data_lines(path):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            tag = s[1:].strip().lower().replace(" ", "")
            if tag in ("one-based", "onebased", "1-based"):
                one_based = True
            elif tag.startswith("n="):
                try:
                    declared_n = int(tag[2:])
                except ValueError:
                    raise ParseError(f"bad node-count header {s!r}", lineno, path) from None
            continue
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != 2:
            raise ParseError(f"expected 2 columns, got {len(parts)}", lineno, path)
        try:
            rows.append((int(parts[0]), int(parts[1])))
        except ValueError:
            if not seen_data and not rows:
                seen_data = True
                continue
            raise ParseError(f"non-integer node label in {s!r}", lineno, path) from None
        seen_data = True
    e = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    if one_based:
        e = e - 1
    if n is None:
        n = declared_n if declared_n is not None else (int(e.max()) + 1 if e.size else 0)
    if e.size and (e < 0).any():
        raise ValidationError(f"{path}: negative node index (check the one-based flag)")
    return Network.from_edges(n, e)


def write_edge_list(net: Network, path, one_based: bool = False):
    with open(path, "w", newline="") as fh:
        if one_based:
            fh.write("# one-based\n")
        fh.write(f"# n={net.n}\n")
        w = csv.writer(fh, lineterminator="\n")
        off = 1 if one_based else 0
        for i, j in net.edges():
            w.writerow([int(i) + off, int(j) + off])


def read_table(path, expect_columns: int | None = None):
    """Read an ``id,<col1>,<col2>,...`` CSV.

    Rows are returned sorted by id; ids must be exactly ``0..n-1``.

    Returns
    -------
    names : list of str
    values : ndarray, shape (n, ncol)
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.lstrip().startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", None, path) from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[0].lower() != "id":
            raise ParseError("first column must be 'id'", 1, path)
        names = header[1:]
        if expect_columns is not None and len(names) != expect_columns:
            raise ParseError(f"expected {expect_columns} value column(s), got {len(names)}", 1, path)
        ids, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}", lineno, path)
            try:
                ids.append(int(row[0]))
                vals.append([float(c) for c in row[1:]])
            except ValueError:
                raise ParseError(f"non-numeric value in {row!r}", lineno, path) from None
    ids = np.asarray(ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    if not np.array_equal(ids[order], np.arange(ids.size)):
        raise ValidationError(f"{path}: ids must be exactly 0..n-1")
    values = np.asarray(vals, dtype=float).reshape(ids.size, len(names))[order]
    return names, values


def load_coordinates(path) -> np.ndarray:
    names, values = read_table(path, expect_columns=2)
    if not np.isfinite(values).all():
        raise ValidationError(f"{path}: non-finite coordinate")
    return values


def load_covariates(path):
    """Covariates CSV; column order here fixes the ordering of X downstream."""
    names, values = read_table(path)
    if not np.isfinite(values).all():
        raise ValidationError(f"{path}: non-finite covariate")
    return names, values


def load_vector(path) -> np.ndarray:
    return read_table(path, expect_columns=1)[1][:, 0]
