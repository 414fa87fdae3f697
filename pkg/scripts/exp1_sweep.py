"""Sweep contrastive weight / texture pool and report proxy metrics."""
import math
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from meshpose import adaptation as A
from meshpose import datagen as D
from meshpose import geometry as G
from meshpose import inference as I
from meshpose.features import extract


def pose_err_deg(est, gt):
    return math.degrees(G.geodesic_distance(G.pose_to_rotation(est), G.pose_to_rotation(gt)))


def evaluate(model, samples, icfg, n=30):
    errs, confs = [], []
    for s in samples[:n]:
        fm = extract(model.extractor, s.image)
        est = I.infer_pose(fm, model.meshes[s.category], s.camera, icfg)
        errs.append(pose_err_deg(est.pose, s.pose))
        confs.append(est.confidence)
    errs = np.array(errs)
    return (errs < 30).mean(), (errs < 10).mean(), float(np.median(errs)), float(np.mean(confs))


def main():
    cats = ["car", "plane"]
    shift = D.ShiftConfig()
    for pool, conw, lr in [(4, 1.0, 2e-3), (4, 0.2, 2e-3), (8, 1.0, 2e-3)]:
        gen = D.GeneratorConfig(samples_per_category=400, master_seed=11, texture_pool_size=pool)
        train = list(D.generate_dataset(gen, cats))
        gent = D.GeneratorConfig(samples_per_category=20, master_seed=999, texture_pool_size=pool)
        test = list(D.generate_dataset(gent, cats))
        test_shift = [D.domain_shift(s, shift) for s in test]

        cfg = A.TrainConfig(epochs=8, seed=0, batch_size=8, learning_rate=lr, contrastive_weight=conw)
        t0 = time.time()
        model = A.pretrain_synthetic(train, cfg)
        ttrain = time.time() - t0
        vacc = A.vertex_classification_accuracy(model, test)
        icfg = I.InferenceConfig(distance_search_range=(2.8, 5.0))
        a30, a10, med, conf = evaluate(model, test, icfg)
        s30, s10, smed, sconf = evaluate(model, test_shift, icfg)
        print(
            f"pool={pool} conw={conw} lr={lr}: train {ttrain:.0f}s vacc {vacc:.3f} | "
            f"syn acc30 {a30:.2f} acc10 {a10:.2f} med {med:.1f} conf {conf:.3f} | "
            f"shift acc30 {s30:.2f} acc10 {s10:.2f} med {smed:.1f} conf {sconf:.3f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
