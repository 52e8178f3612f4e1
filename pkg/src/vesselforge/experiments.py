"""Scaled training experiments on synthetic phantoms.

``overfit`` checks that the network can memorise a handful of patches;
``desk_scale`` trains on a small phantom set and scores held-out phantoms
under two inference schemes. Both are deterministic given their seeds.

Run ``python -m vesselforge.experiments {overfit,desk}`` to print a summary.
"""

from __future__ import annotations

import argparse
import time
from dataclasses import dataclass, field

import numpy as np

from . import augment, data, net
from . import predict as sp
from . import train as tr
from .metrics import roc_auc


@dataclass
class OverfitResult:
    losses: list[float]
    accuracy: float
    seconds: float

    def window_means(self, width: int = 50) -> list[float]:
        return [float(np.mean(self.losses[k:k + width])) for k in range(0, len(self.losses), width)]


def overfit(iters: int = 500, n_patches: int = 8, batch_size: int = 8, seed: int = 0,
            cfg: net.ModelConfig | None = None) -> OverfitResult:
    """Train on ``n_patches`` fixed, unaugmented patches and report their pixel accuracy."""
    start = time.perf_counter()
    sample = data.synth_phantom(128, 128, seed=seed)
    dataset = tr.FixedPatchSet(augment.sample_patches(sample, n_patches, seed=seed))
    params = net.build(cfg or net.ModelConfig(), seed=seed)
    # with 8 patches an epoch is one batch, so lift the epoch cap
    tcfg = tr.TrainConfig(max_iters=iters, max_epochs=iters, batch_size=batch_size, seed=seed)
    result = tr.train(params, dataset, tcfg)
    acc = tr.pixel_accuracy(params, dataset.batch(0, n_patches, seed))
    return OverfitResult([row[1] for row in result.log], acc, time.perf_counter() - start)


@dataclass
class DeskResult:
    auc: dict[str, float]  # scheme -> mean held-out AUC
    per_image: dict[str, list[float]] = field(default_factory=dict)
    final_loss: float = float("nan")
    train_seconds: float = 0.0
    seconds: float = 0.0


def desk_scale(iters: int = 3000, n_train: int = 16, n_test: int = 4, size: int = 128, batch_size: int = 8,
               seed: int = 0, schemes=("sp64", "sp1"), cfg: net.ModelConfig | None = None,
               out_dir=None) -> DeskResult:
    """Train on augmented patches from ``n_train`` phantoms, score ``n_test`` held-out ones."""
    start = time.perf_counter()
    samples = data.synth_dataset(n_train, size=size, seed=seed, n_test=n_test)
    train_set = [s for s in samples if s.split == "train"]
    test_set = [s for s in samples if s.split == "test"]
    params = net.build(cfg or net.ModelConfig(), seed=seed)
    tcfg = tr.TrainConfig(max_iters=iters, batch_size=batch_size, seed=seed,
                          checkpoint_every=max(1, iters // 3))
    result = tr.train(params, tr.PatchStream(train_set), tcfg, out_dir=out_dir)
    train_seconds = time.perf_counter() - start
    per_image = {}
    for name in schemes:
        per_image[name] = [roc_auc(sp.predict(params, s.image, name), s.gt, s.fov) for s in test_set]
    losses = [row[1] for row in result.log]
    return DeskResult(
        auc={name: float(np.mean(v)) for name, v in per_image.items()},
        per_image=per_image,
        final_loss=float(np.mean(losses[-50:])),
        train_seconds=train_seconds,
        seconds=time.perf_counter() - start,
    )


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("which", choices=("overfit", "desk"))
    parser.add_argument("--iters", type=int)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    if args.which == "overfit":
        res = overfit(args.iters or 500, batch_size=args.batch_size, seed=args.seed)
        print(f"initial loss {res.losses[0]:.4f}  final loss {res.losses[-1]:.4f}  "
              f"accuracy {res.accuracy:.4f}  {res.seconds:.0f}s")
        print("window means", " ".join(f"{m:.4f}" for m in res.window_means()))
    else:
        res = desk_scale(args.iters or 3000, batch_size=args.batch_size, seed=args.seed, out_dir=args.out)
        for name, auc in res.auc.items():
            print(f"{name}: mean AUC {auc:.4f}  per image " + " ".join(f"{a:.4f}" for a in res.per_image[name]))
        print(f"final loss {res.final_loss:.4f}  train {res.train_seconds:.0f}s  total {res.seconds:.0f}s")


if __name__ == "__main__":
    main()
