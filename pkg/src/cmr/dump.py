"""Write the affinity grids and relation rankings of one example to CSV."""

from __future__ import annotations

from pathlib import Path

from .checkpoint import Checkpoint
from .entity_relevance import pair_label, write_affinity_csv
from .model import forward, make_batch
from .relational_relevance import candidate_table, write_ranking_csv


def dump_example(ckpt: Checkpoint, example, out_dir) -> list[Path]:
    """One ``affinity_<a>-<b>.csv`` per entity pair and one ``ranking_<a>-<b>_<side>.csv``
    per side of every relational pair. Returns the written paths."""
    cfg = ckpt.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = forward(make_batch([example], cfg), ckpt.params.leaves(requires_grad=False), cfg)
    written = []
    for pair, aff in res.affinities.items():
        path = out / f"affinity_{pair_label(pair)}.csv"
        write_affinity_csv(aff, path)
        written.append(path)
    for pair, tops in res.top_k.items():
        for top in tops:
            path = out / f"ranking_{pair_label(pair)}_{top.source}.csv"
            write_ranking_csv(candidate_table(res.relations[top.source], top), path)
            written.append(path)
    return written
