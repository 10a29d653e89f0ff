"""Plain-text dataset format.

Layout of a dataset directory::

    manifest.json    name, task, widths, counts, per-file sha256, combined checksum
    nodes.csv        id,label,x0..x{d_v-1}          (label empty = unlabeled)
    edges.csv        src,dst[,direction],z0..z{d_e-1}  (direction 1 = src -> dst)

Graph-level datasets keep one sub-directory per graph under ``graphs/``
(each with its own ``nodes.csv``/``edges.csv``) plus a root
``targets.csv`` with ``graph_id,t0..t{k-1}`` where an empty cell is a
missing target. Files are UTF-8 with LF line endings; floats are written
with ``repr`` so they round-trip exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import DataFormatError, ValidationError
from ..graph import Graph

__all__ = [
    "SCHEMA_VERSION",
    "DatasetManifest",
    "save_graph_dataset",
    "load_graph_dataset",
    "read_manifest",
    "graph_fingerprint",
    "save_sparse_matrix",
    "load_sparse_matrix",
]

SCHEMA_VERSION = 1
TASKS = ("node-cls", "graph-cls", "graph-reg", "link-pred")


@dataclass
class DatasetManifest:
    name: str
    task: str
    num_nodes: int
    num_edges: int
    node_feature_dim: int
    edge_feature_dim: int
    num_classes: int = 0
    num_graphs: int = 1
    num_targets: int = 0
    has_direction: bool = False
    raw_edge_count: int | None = None
    files: dict = field(default_factory=dict)
    checksum: str = ""
    params: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def graph_level(self):
        return self.task in ("graph-cls", "graph-reg")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _combined(files):
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(f"{name}:{files[name]}\n".encode())
    return h.hexdigest()


def graph_fingerprint(g: Graph) -> str:
    """Content hash of a graph (structure, features, labels)."""
    h = hashlib.sha256()
    h.update(np.int64(g.num_nodes).tobytes())
    for arr in (g.edges, g.X, g.Z):
        h.update(np.ascontiguousarray(arr).tobytes())
    if g.labels is not None:
        h.update(g.labels.tobytes())
    return h.hexdigest()


def _fmt(x):
    return repr(float(x))


def _write_graph_files(g: Graph, directory: Path, with_labels=True):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"] + [f"x{j}" for j in range(g.node_dim)])
        for i in range(g.num_nodes):
            lab = "" if g.labels is None or not with_labels or g.labels[i] < 0 else str(int(g.labels[i]))
            w.writerow([i, lab] + [_fmt(v) for v in g.X[i]])
    has_dir = g.directions is not None
    with open(directory / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst"] + (["direction"] if has_dir else []) + [f"z{j}" for j in range(g.edge_dim)])
        for m in range(g.num_edges):
            u, v = g.edges[m]
            extra = [int(g.directions[m])] if has_dir else []
            w.writerow([int(u), int(v)] + extra + [_fmt(z) for z in g.Z[m]])
    return ["nodes.csv", "edges.csv"]


def save_graph_dataset(directory, data, name="dataset", task="node-cls", params=None, raw_edge_count=None):
    """Write a graph (or a list of graphs for graph-level tasks) to ``directory``."""
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    if isinstance(data, Graph):
        graphs = [data]
        for f in _write_graph_files(data, directory):
            files[f] = _sha256(directory / f)
    else:
        graphs = list(data)
        if not graphs:
            raise ValidationError("no graphs to save")
        width = 0 if graphs[0].targets is None else graphs[0].targets.shape[0]
        for gid, g in enumerate(graphs):
            sub = directory / "graphs" / str(gid)
            for f in _write_graph_files(g, sub):
                rel = f"graphs/{gid}/{f}"
                files[rel] = _sha256(sub / f)
        with open(directory / "targets.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["graph_id"] + [f"t{j}" for j in range(width)])
            for gid, g in enumerate(graphs):
                if g.targets is None:
                    raise ValidationError(f"graph {gid} has no targets")
                cells = [_fmt(t) if ok else "" for t, ok in zip(g.targets, g.target_mask)]
                w.writerow([gid] + cells)
        files["targets.csv"] = _sha256(directory / "targets.csv")
    g0 = graphs[0]
    num_classes = 0
    if g0.labels is not None:
        num_classes = max(int(g.num_classes or 0) for g in graphs)
    manifest = DatasetManifest(
        name=name,
        task=task,
        num_nodes=int(sum(g.num_nodes for g in graphs)),
        num_edges=int(sum(g.num_edges for g in graphs)),
        node_feature_dim=g0.node_dim,
        edge_feature_dim=g0.edge_dim,
        num_classes=num_classes,
        num_graphs=len(graphs),
        num_targets=0 if g0.targets is None else int(g0.targets.shape[0]),
        has_direction=all(g.directions is not None for g in graphs),
        raw_edge_count=raw_edge_count,
        files=files,
        checksum=_combined(files),
        params=dict(params or {}),
    )
    (directory / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def read_manifest(directory, verify=True) -> DatasetManifest:
    directory = Path(directory)
    path = directory / "manifest.json" if directory.is_dir() else directory
    directory = path.parent
    if not path.exists():
        raise DataFormatError("manifest.json not found", path=path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        manifest = DatasetManifest(**raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise DataFormatError(f"invalid manifest: {exc}", path=path) from None
    if manifest.schema_version != SCHEMA_VERSION:
        raise DataFormatError(f"unsupported schema version {manifest.schema_version}", path=path)
    if manifest.task not in TASKS:
        raise DataFormatError(f"unknown task {manifest.task!r}", path=path)
    if verify:
        for rel, digest in manifest.files.items():
            f = directory / rel
            if not f.exists():
                raise DataFormatError("referenced file is missing", path=f)
            if _sha256(f) != digest:
                raise DataFormatError("checksum mismatch", path=f)
        if manifest.files and _combined(manifest.files) != manifest.checksum:
            raise DataFormatError("combined checksum mismatch", path=path)
    return manifest


def _float(text, path, line):
    try:
        v = float(text)
    except ValueError:
        raise DataFormatError(f"not a number: {text!r}", path=path, record=line) from None
    if not np.isfinite(v):
        raise DataFormatError(f"non-finite value {text!r}", path=path, record=line)
    return v


def _int(text, path, line):
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"not an integer: {text!r}", path=path, record=line) from None


def _read_rows(path):
    if not path.exists():
        raise DataFormatError("file not found", path=path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file (header expected)", path=path)
    return rows[0], rows[1:]


def _read_graph(directory: Path, num_classes=None):
    npath = directory / "nodes.csv"
    header, rows = _read_rows(npath)
    if header[:2] != ["id", "label"]:
        raise DataFormatError("nodes.csv header must start with id,label", path=npath, record=1)
    d_v = len(header) - 2
    n = len(rows)
    X = np.zeros((n, d_v))
    labels = np.full(n, -1, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    for k, row in enumerate(rows):
        line = k + 2
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path=npath, record=line)
        i = _int(row[0], npath, line)
        if not 0 <= i < n or seen[i]:
            raise DataFormatError(f"node id {i} is out of range or repeated", path=npath, record=line)
        seen[i] = True
        if row[1] != "":
            labels[i] = _int(row[1], npath, line)
            if labels[i] < 0:
                raise DataFormatError("labels must be nonnegative", path=npath, record=line)
        X[i] = [_float(t, npath, line) for t in row[2:]]

    epath = directory / "edges.csv"
    header, rows = _read_rows(epath)
    if header[:2] != ["src", "dst"]:
        raise DataFormatError("edges.csv header must start with src,dst", path=epath, record=1)
    has_dir = len(header) > 2 and header[2] == "direction"
    zstart = 3 if has_dir else 2
    d_e = len(header) - zstart
    pairs = np.zeros((len(rows), 2), dtype=np.int64)
    Z = np.zeros((len(rows), d_e))
    directions = np.ones(len(rows), dtype=bool)
    for k, row in enumerate(rows):
        line = k + 2
        if len(row) != len(header):
            raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", path=epath, record=line)
        pairs[k] = (_int(row[0], epath, line), _int(row[1], epath, line))
        if has_dir:
            flag = _int(row[2], epath, line)
            if flag not in (0, 1):
                raise DataFormatError("direction must be 0 or 1", path=epath, record=line)
            directions[k] = bool(flag)
        Z[k] = [_float(t, epath, line) for t in row[zstart:]]
    has_labels = bool(np.any(labels >= 0))
    if has_labels and num_classes is None:
        num_classes = int(labels.max()) + 1
    if has_labels and labels.max() >= num_classes:
        raise DataFormatError(f"label exceeds declared class count {num_classes}", path=npath)
    # the flag is relative to the record; express it relative to the (u < v) orientation
    oriented = directions ^ (pairs[:, 0] > pairs[:, 1]) if has_dir else None
    try:
        g = Graph.from_edge_list(
            n, pairs, X, Z,
            labels=labels if has_labels else None,
            num_classes=num_classes if has_labels else None,
            directions=oriented,
        )
    except ValidationError as exc:
        raise DataFormatError(str(exc), path=epath) from None
    return g


def load_graph_dataset(directory, verify=True):
    """Load a dataset directory; returns a Graph or a list of Graphs.

    Graph-level datasets attach each row of ``targets.csv`` to its graph.
    """
    directory = Path(directory)
    manifest = read_manifest(directory, verify=verify)
    nc = manifest.num_classes or None
    if not manifest.graph_level:
        g = _read_graph(directory, nc)
        if g.num_nodes != manifest.num_nodes or g.num_edges != manifest.num_edges:
            raise DataFormatError(
                f"manifest declares {manifest.num_nodes} nodes/{manifest.num_edges} edges, "
                f"files hold {g.num_nodes}/{g.num_edges}",
                path=directory / "manifest.json",
            )
        if g.node_dim != manifest.node_feature_dim or g.edge_dim != manifest.edge_feature_dim:
            raise DataFormatError("feature widths disagree with manifest", path=directory / "manifest.json")
        return _named(g, manifest.name)

    tpath = directory / "targets.csv"
    header, rows = _read_rows(tpath)
    k = len(header) - 1
    if k != manifest.num_targets:
        raise DataFormatError(f"targets.csv has {k} columns, manifest says {manifest.num_targets}", path=tpath)
    graphs = []
    for r, row in enumerate(rows):
        line = r + 2
        if len(row) != k + 1:
            raise DataFormatError(f"expected {k + 1} fields", path=tpath, record=line)
        gid = _int(row[0], tpath, line)
        if gid != r:
            raise DataFormatError(f"graph ids must be 0..q-1 in order, got {gid}", path=tpath, record=line)
        mask = np.array([c != "" for c in row[1:]], dtype=bool)
        t = np.array([_float(c, tpath, line) if c != "" else 0.0 for c in row[1:]])
        g = _read_graph(directory / "graphs" / str(gid), nc)
        graphs.append(Graph(
            g.num_nodes, g.edges, g.X, g.Z, labels=g.labels, num_classes=g.num_classes,
            targets=t, target_mask=mask, directions=g.directions, name=f"{manifest.name}/{gid}",
        ))
    if len(graphs) != manifest.num_graphs:
        raise DataFormatError(f"expected {manifest.num_graphs} graphs, found {len(graphs)}", path=tpath)
    for g in graphs:
        if g.node_dim != manifest.node_feature_dim or g.edge_dim != manifest.edge_feature_dim:
            raise DataFormatError(f"graph {g.name} feature widths disagree with manifest", path=directory)
    return graphs


def _named(g, name):
    object.__setattr__(g, "name", name)
    return g


def save_sparse_matrix(path, S):
    """Write ``row,col,value`` triplets in CSR order after a ``# shape R C`` line."""
    coo = S.to_scipy().tocoo()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# shape {S.shape[0]} {S.shape[1]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for r, c, v in zip(coo.row, coo.col, coo.data):
            w.writerow([int(r), int(c), _fmt(v)])


def load_sparse_matrix(path):
    from ..tensor import SparseMatrix

    path = Path(path)
    if not path.exists():
        raise DataFormatError("file not found", path=path)
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().split()
        if len(first) != 4 or first[:2] != ["#", "shape"]:
            raise DataFormatError("expected a '# shape R C' first line", path=path, record=1)
        shape = (_int(first[2], path, 1), _int(first[3], path, 1))
        rows = list(csv.reader(fh))
    if rows[:1] != [["row", "col", "value"]]:
        raise DataFormatError("header must be row,col,value", path=path, record=2)
    r = np.array([_int(x[0], path, k + 3) for k, x in enumerate(rows[1:])], dtype=np.int64)
    c = np.array([_int(x[1], path, k + 3) for k, x in enumerate(rows[1:])], dtype=np.int64)
    v = np.array([_float(x[2], path, k + 3) for k, x in enumerate(rows[1:])])
    if r.size and (r.min() < 0 or c.min() < 0 or r.max() >= shape[0] or c.max() >= shape[1]):
        raise DataFormatError("entry outside the declared shape", path=path)
    return SparseMatrix.from_coo(r, c, v, shape)
