import csv
import json

from typing import Dict, Iterable, Sequence

from . import __version__
from .bmc import Truncation


# Render a kernel truncation as a DOT/PNG graph - Used for debugging
def render_kernel(truncation: Truncation, path: str, format: str = "dot"):
    import pydot

    g = pydot.Dot("Kernel", graph_type="digraph")
    for i, state in enumerate(truncation.states):
        label = f"{state}\ndepth {truncation.depths[i]}"
        g.add_node(pydot.Node(str(i), label=label, shape="oval"))
    coo = truncation.matrix.tocoo()
    for i, j, m in zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()):
        g.add_edge(pydot.Edge(str(i), str(j), label=f"{m:.4g}"))
    g.write(path, format=format)


def artifact(payload: Dict, config_hash: str, seed: int) -> Dict:
    """
    Stamp a result payload with the provenance every JSON artifact carries
    """
    return {**payload, "config_hash": config_hash, "seed": seed, "version": __version__}


def write_json(path: str, payload: Dict):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, sort_keys=True, indent=2, default=_jsonable)
        f.write("\n")


def _jsonable(value):
    if hasattr(value, "to_json"):
        return value.to_json()
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "numerator") and hasattr(value, "denominator"):
        return f"{value.numerator}/{value.denominator}"
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]):
    # repr keeps '.' as the decimal separator whatever the locale
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
