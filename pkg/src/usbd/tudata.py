"""TUDataset-style text format: loading and exporting.

Files per dataset `<name>` inside a directory:

    <name>_A.txt               edge list, 1-indexed global node pairs "i, j"
    <name>_graph_indicator.txt graph id (1-indexed) per node
    <name>_graph_labels.txt    integer label per graph (optional; absent for
                               unlabeled target domains)
    <name>_node_attributes.txt comma-separated reals per node (optional)
    <name>_node_labels.txt     integer per node, one-hot encoded (optional)

Node attributes take precedence over node labels; with neither, every node
gets the constant feature 1.0.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InconsistentIndicator, ParseError
from .graphs import Domain, Graph


def _read_lines(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read file: {exc}") from exc
    return text.splitlines()


def _parse_int(path, line_no, token):
    try:
        return int(token.strip())
    except ValueError:
        raise ParseError(path, line_no, f"expected integer, got {token.strip()!r}") from None


def _parse_float(path, line_no, token):
    try:
        return float(token.strip())
    except ValueError:
        raise ParseError(path, line_no, f"expected real number, got {token.strip()!r}") from None


def load_tudataset(path, name: str) -> Domain:
    """Assemble a Domain from TUDataset text files under `path`."""
    root = Path(path)
    ind_path = root / f"{name}_graph_indicator.txt"
    a_path = root / f"{name}_A.txt"
    labels_path = root / f"{name}_graph_labels.txt"
    attr_path = root / f"{name}_node_attributes.txt"
    nlab_path = root / f"{name}_node_labels.txt"

    indicator = []
    for line_no, line in enumerate(_read_lines(ind_path), start=1):
        if not line.strip():
            continue
        indicator.append(_parse_int(ind_path, line_no, line))
    if not indicator:
        raise ParseError(ind_path, 0, "empty graph indicator")
    n_nodes = len(indicator)
    n_graphs = max(indicator)
    if min(indicator) < 1:
        raise ParseError(ind_path, 0, f"graph ids must be 1-indexed, saw {min(indicator)}")

    # global node id -> (graph index, local node index)
    graph_of = np.asarray(indicator, dtype=np.int64) - 1
    local_index = np.zeros(n_nodes, dtype=np.int64)
    counts = np.zeros(n_graphs, dtype=np.int64)
    for v in range(n_nodes):
        local_index[v] = counts[graph_of[v]]
        counts[graph_of[v]] += 1

    adjacencies = [np.zeros((int(c), int(c))) for c in counts]
    for line_no, line in enumerate(_read_lines(a_path), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(a_path, line_no, f"expected 'i, j', got {line.strip()!r}")
        u = _parse_int(a_path, line_no, parts[0])
        v = _parse_int(a_path, line_no, parts[1])
        if not (1 <= u <= n_nodes and 1 <= v <= n_nodes):
            raise ParseError(a_path, line_no, f"node id out of range: ({u}, {v})")
        u -= 1
        v -= 1
        if graph_of[u] != graph_of[v]:
            raise InconsistentIndicator(
                f"{a_path}:{line_no}: edge ({u + 1}, {v + 1}) crosses graphs "
                f"{graph_of[u] + 1} and {graph_of[v] + 1}")
        if u == v:
            continue  # self-loops are out of scope; drop silently
        g = graph_of[u]
        adjacencies[g][local_index[u], local_index[v]] = 1.0
        adjacencies[g][local_index[v], local_index[u]] = 1.0

    features = _load_features(attr_path, nlab_path, n_nodes)
    feature_dim = features.shape[1]

    labels = None
    num_classes = 0
    if labels_path.exists():
        raw = []
        for line_no, line in enumerate(_read_lines(labels_path), start=1):
            if not line.strip():
                continue
            raw.append(_parse_int(labels_path, line_no, line))
        if len(raw) != n_graphs:
            raise ParseError(labels_path, 0,
                             f"{len(raw)} labels for {n_graphs} graphs")
        classes = sorted(set(raw))
        remap = {c: i for i, c in enumerate(classes)}
        labels = [remap[c] for c in raw]
        num_classes = len(classes)

    graphs = []
    for g in range(n_graphs):
        node_ids = np.nonzero(graph_of == g)[0]
        x = features[node_ids, :]
        graphs.append(Graph(adjacencies[g], x,
                            labels[g] if labels is not None else None))
    domain = Domain(graphs, feature_dim, num_classes)
    domain.validate()
    return domain


def _load_features(attr_path: Path, nlab_path: Path, n_nodes: int) -> np.ndarray:
    if attr_path.exists():
        rows = []
        for line_no, line in enumerate(_read_lines(attr_path), start=1):
            if not line.strip():
                continue
            rows.append([_parse_float(attr_path, line_no, tok) for tok in line.split(",")])
        if len(rows) != n_nodes:
            raise ParseError(attr_path, 0, f"{len(rows)} attribute rows for {n_nodes} nodes")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ParseError(attr_path, 0, f"inconsistent attribute widths {sorted(widths)}")
        return np.asarray(rows, dtype=np.float64)
    if nlab_path.exists():
        raw = []
        for line_no, line in enumerate(_read_lines(nlab_path), start=1):
            if not line.strip():
                continue
            raw.append(_parse_int(nlab_path, line_no, line))
        if len(raw) != n_nodes:
            raise ParseError(nlab_path, 0, f"{len(raw)} node labels for {n_nodes} nodes")
        values = sorted(set(raw))
        index = {v: i for i, v in enumerate(values)}
        onehot = np.zeros((n_nodes, len(values)))
        for i, v in enumerate(raw):
            onehot[i, index[v]] = 1.0
        return onehot
    return np.ones((n_nodes, 1))


def save_tudataset(domain: Domain, path, name: str) -> None:
    """Write a Domain in the text format above (unit edges; weights > 0 kept).

    Features always go to the node-attributes file with 17 significant digits
    so that export followed by load reproduces the same doubles.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    ind_lines = []
    edge_lines = []
    attr_lines = []
    offset = 0
    for gi, g in enumerate(domain.graphs, start=1):
        for v in range(g.n):
            ind_lines.append(str(gi))
            attr_lines.append(", ".join(f"{x:.17g}" for x in g.features[v]))
        rows, cols = np.nonzero(g.adjacency > 0)
        for u, v in zip(rows, cols):
            edge_lines.append(f"{offset + u + 1}, {offset + v + 1}")
        offset += g.n

    (root / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (root / f"{name}_A.txt").write_text("\n".join(edge_lines) + ("\n" if edge_lines else ""))
    (root / f"{name}_node_attributes.txt").write_text("\n".join(attr_lines) + "\n")
    if domain.num_classes > 0:
        label_lines = [str(g.label) for g in domain.graphs]
        (root / f"{name}_graph_labels.txt").write_text("\n".join(label_lines) + "\n")
