"""Generate the desk-scale shape set, train SegNet-Basic and score it on test.

    python3 demos/desk_training.py [workdir] [epochs]

Takes roughly 40 s per epoch on one core. Progress is logged per epoch.
"""

import logging
import sys
from pathlib import Path

from segdecode.data import SynthSpec, generate_synthetic, load_split
from segdecode.modelio import save_model
from segdecode.train import TrainConfig, build_from_config, evaluate, train_loop


def main(workdir="desk_run", epochs=15):
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    work = Path(workdir)
    manifest = generate_synthetic(SynthSpec(), work / "data")
    # raw scaling trains faster than contrast normalisation on flat-shaded shapes
    cfg = TrainConfig(lr=2e-6, balancing="natural_frequency", eval_every=17, max_epochs=epochs, lcn=False,
                      ignore_label=manifest.ignore_label)
    train = load_split(manifest, "train", cfg.depth, cfg.lcn)
    val = load_split(manifest, "val", cfg.depth, cfg.lcn)
    test = load_split(manifest, "test", cfg.depth, cfg.lcn)

    result = train_loop(build_from_config(cfg, manifest.num_classes), train, val, cfg,
                        history_path=work / "history.tsv")
    save_model(result.best_model, work / "segnet.model")
    rep = evaluate(result.best_model, test, manifest.ignore_label)
    print(f"best checkpoint at iteration {result.best_iteration}")
    for name, value in rep.rows():
        print(f"test {name:<5}{value:.4f}")


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[0] if args else "desk_run", int(args[1]) if len(args) > 1 else 15)
