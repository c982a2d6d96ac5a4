"""Federated sample reweighting on blobs with 40% flipped labels.

Ten clients each hold 60 four-class blob samples; 40% of the training
labels are flipped iid.  The bilevel run learns one weight per training
sample by validation loss, with the iterative compressed estimator
standing in for the exact hypergradient.  A same-protocol FedAvg run
(weights frozen at uniform) is the baseline.  The flip mask is ground
truth the learner never sees; weights below 0.5 are the noise call.

Run: python3 demos/noisy_label_reweighting.py
"""

import numpy as np

from fedbilevel import (
    IterSolverConfig,
    NoiseSpec,
    RoundConfig,
    build_weight_problem,
    classify_noisy,
    f1_score,
    inject_label_noise,
    make_blob_dataset,
    run_fedavg,
    run_federated_bilevel,
)


def main() -> None:
    data = make_blob_dataset(10, 60, 4, 60, separation=4.0, val_size=150,
                             seed=0)
    noisy = inject_label_noise(data, NoiseSpec(mode="iid", rate=0.4, seed=0))
    prob = build_weight_problem(noisy, reg=1e-3)
    n_flipped = int(noisy.flip_mask.sum())
    print(f"{prob.outer_dim} training samples across 10 clients, "
          f"{n_flipped} labels flipped, 150 held out for validation")
    print(f"model dimension d = {prob.inner_dim}, "
          f"top-12 upload per estimator iteration\n")

    iter_cfg = IterSolverConfig(iterations=60, step_mode="constant",
                                step_size=1.0, compressor="topk", topk=12)
    cfg = RoundConfig(rounds=80, clients_per_round=10, local_steps=10,
                      inner_lr=1.0, outer_lr=30.0, estimator="iterative",
                      iter_cfg=iter_cfg, seed=0)
    trace = run_federated_bilevel(prob, cfg)

    print(f"  {'round':>5} {'outer loss':>11} {'val acc':>8} {'flip F1':>8}")
    for row in trace.rows:
        if row.k % 10 != 0:
            continue
        print(f"  {row.k:>5} {row.outer_loss:>11.4f} "
              f"{row.metrics['val_accuracy']:>8.3f} {row.metrics['f1']:>8.3f}")

    base = run_fedavg(prob, RoundConfig(rounds=80, clients_per_round=10,
                                        local_steps=10, inner_lr=1.0,
                                        outer_lr=30.0, seed=0))
    lam = trace.final_x
    found = classify_noisy(lam)
    print(f"\nfinal flip-detection F1: "
          f"{f1_score(noisy.flip_mask, found):.3f} "
          f"({int(found.sum())} samples weighted below 0.5)")
    print(f"mean weight, clean samples:   {lam[~noisy.flip_mask].mean():.3f}")
    print(f"mean weight, flipped samples: {lam[noisy.flip_mask].mean():.3f}")
    print(f"\nvalidation accuracy, reweighted: "
          f"{trace.rows[-1].metrics['val_accuracy']:.3f}")
    print(f"validation accuracy, FedAvg:     "
          f"{base.rows[-1].metrics['val_accuracy']:.3f}")
    print("\nuniform weights memorize the flips; the learned weights push")
    print("them toward zero and the validation gap is the payoff.")


if __name__ == "__main__":
    main()
