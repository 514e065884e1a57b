"""Generate a small synthetic gait dataset, train a reduced model and report rank-1.

    python3 demos/quickstart.py [epochs]

With the default 100 epochs this takes roughly ten minutes on one CPU core and
should reach about 95% rank-1; a freshly initialised model scores under 10%.
"""
import sys
import time

import numpy as np

from gaitkit.config import RunConfig
from gaitkit.data import DatasetIndex
from gaitkit.evaluation import evaluate
from gaitkit.synthetic import synthesize_dataset
from gaitkit.training import build_model, train


def main(epochs: int = 100) -> None:
    # 20 walkers, 8 sequences each, seen from 4 camera angles
    seqs, _ = synthesize_dataset(20, 8, (18, 54, 90, 126), (40, 70), np.random.default_rng(0))
    splits = DatasetIndex.from_sequences(seqs).split("synthetic")
    print({k: len(v) for k, v in splits.items()})

    cfg = RunConfig(width=0.5, epochs=epochs, batch_p=16, batch_k=4, t_target=30, seed=0)
    print(f"untrained rank-1: {evaluate(build_model(cfg), splits, cfg)['NM'].mean:.1f}%")

    t0 = time.perf_counter()
    result = train(cfg, splits["train"])
    print(f"trained {epochs} epochs in {time.perf_counter() - t0:.0f}s, "
          f"loss {result.epoch_losses[0]:.2f} -> {result.epoch_losses[-1]:.2f}")

    table = evaluate(result.model, splits, cfg)["NM"]
    print(f"trained rank-1: {table.mean:.1f}%")
    for pv, row in zip(table.probe_views, table.accuracy):
        cells = "  ".join(f"{g:>3}:{a:5.1f}" for g, a in zip(table.gallery_views, row))
        print(f"  probe view {pv:>3}  {cells}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 100)
