"""End-to-end run on the synthetic benchmark: data, CE pretraining, variance
fine-tuning, then diagnostics and verification scores.

    python demos/benchmark.py [seed]
"""

import sys

from xiplus.scoring import evaluate, rho_policy
from xiplus.synthbench import (SynthConfig, TrainConfig, centroids_from_model, finetune_svl, generate,
                               pretrain, uncertainty_diagnostics)


def main(seed=0):
    ds = generate(SynthConfig(seed=seed))
    cfg = TrainConfig.desk_scale(seed=seed)
    stage1 = pretrain(ds, cfg)
    print(f"pretrain: CE {stage1.history[0]['ce_loss']:.2f} -> {stage1.history[-1]['ce_loss']:.2f}")

    table = centroids_from_model(stage1.model, ds.train, source="stage1")
    stage2 = finetune_svl(ds, stage1, table, cfg)
    last = stage2.history[-1]
    print(f"fine-tune: CE {last['ce_loss']:.2f}, SVL {last['svl_loss']:.3f}, alpha {stage2.alpha:.3f}")

    print("eval diagnostics:", uncertainty_diagnostics(stage2.model, ds.eval).summary())
    store = dict(zip(ds.eval.ids, stage2.model.embed(ds.eval.frames)))
    dim = next(iter(store.values())).dim
    for mode in ("zero", "inv_d", "alpha"):
        rho = rho_policy(mode, dim, stage2.alpha)
        rep = evaluate(ds.trials, store, rho)
        print(f"rho={mode:<5} ({rho:.4f}): EER {rep.eer:.3f}, minDCF {rep.min_dcf:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
