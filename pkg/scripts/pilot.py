"""Pilot run: calibrate training length for the ablation-ordering experiment."""

import sys
import time

import numpy as np

from tempeq import evalkit
from tempeq.synthvid import generate_dataset, split_train_test
from tempeq.trainloop import PRESETS, Trainer

STEPS = int(sys.argv[1]) if len(sys.argv) > 1 else 400
SEED = int(sys.argv[2]) if len(sys.argv) > 2 else 0

rng = np.random.default_rng(123)
videos, labels = generate_dataset(rng, 8, 125)
(trv, trl), (tev, tel) = split_train_test(videos, labels, 0.8)
print("train", trv.shape, "test", tev.shape, flush=True)

for preset in ("k", "e"):
    cfg = PRESETS[preset].replace(batch_size=16, steps=STEPS, seed=SEED)
    tr = Trainer(trv, cfg)
    t0 = time.time()
    checkpoints = [STEPS // 4, STEPS // 2, 3 * STEPS // 4, STEPS]
    while tr.step < STEPS:
        tr.train_step()
        if tr.step in checkpoints:
            train_bank = evalkit.extract_features(tr.model, trv, trl)
            test_bank = evalkit.extract_features(
                tr.model, tev, tel, stats=(train_bank.mean, train_bank.std))
            nn = evalkit.nn_classify(train_bank, test_bank)
            aux = evalkit.aux_head_accuracies(tr.model, tev, n_batches=8)
            diag = evalkit.equivariance_diagnostic(tr.model, tev, n_probes=256)
            print(f"preset {preset} step {tr.step} ({time.time()-t0:.0f}s): "
                  f"1-NN {nn:.3f} aux {aux} match {diag['match_accuracy']:.3f}",
                  flush=True)
