#!/usr/bin/env python3
"""Convert the LINQS Cora files (cora.content, cora.cites) to the JSON graph format.

usage: cora_to_json.py cora.content cora.cites out.json
"""
import json
import sys


def main(content_path, cites_path, out_path):
    ids, features, names = {}, [], []
    with open(content_path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids[parts[0]] = len(ids)
            features.append([float(v) for v in parts[1:-1]])
            names.append(parts[-1])
    classes = {name: i for i, name in enumerate(sorted(set(names)))}
    edges = set()
    with open(cites_path) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2 or parts[0] not in ids or parts[1] not in ids:
                continue
            u, v = ids[parts[0]], ids[parts[1]]
            if u != v:
                edges.add((min(u, v), max(u, v)))
    graph = {
        "num_nodes": len(ids),
        "features": features,
        "labels": [classes[n] for n in names],
        "edges": [list(e) for e in sorted(edges)],
    }
    with open(out_path, "w") as f:
        json.dump(graph, f)


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    main(*sys.argv[1:])
