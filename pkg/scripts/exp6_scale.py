"""Generalization with a real update budget: warmup-heavy, small batches."""
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
from meshpose.neuralmesh import project_correspondences


def probe(model, samples):
    own, correct, total = [], 0, 0
    for s in samples:
        mesh = model.meshes[s.category]
        fm = extract(model.extractor, s.image)
        corr = project_correspondences(mesh, s.pose, s.camera, model.stride)
        fg = corr.foreground_mask
        if not fg.any():
            continue
        f = fm.grid[fg]
        gt = corr.cell_vertex[fg]
        sims = f @ mesh.vertex_features.T
        own.extend(sims[np.arange(len(gt)), gt])
        correct += int((sims.argmax(axis=1) == gt).sum())
        total += len(gt)
    return correct / total, float(np.mean(own))


def run(name, n, warmup, main, batch, lr, conw, mom, pool):
    cats = ["car", "plane"]
    gen = D.GeneratorConfig(samples_per_category=n, master_seed=11, texture_pool_size=pool)
    train = list(D.generate_dataset(gen, cats))
    gent = D.GeneratorConfig(samples_per_category=20, master_seed=999, texture_pool_size=pool)
    test = list(D.generate_dataset(gent, cats))
    cfg = A.TrainConfig(
        epochs=main, warmup_epochs=warmup, seed=0, batch_size=batch,
        learning_rate=lr, momentum=mom, momentum_bg=mom, contrastive_weight=conw,
    )
    t0 = time.time()
    model = A.pretrain_synthetic(train, cfg)
    tt = time.time() - t0
    vacc, own = probe(model, test)
    tvacc, town = probe(model, train[:40])
    icfg = I.InferenceConfig(distance_search_range=(2.8, 5.0))
    errs, confs = [], []
    for s in test:
        fm = extract(model.extractor, s.image)
        est = I.infer_pose(fm, model.meshes[s.category], s.camera, icfg)
        errs.append(math.degrees(G.geodesic_distance(G.pose_to_rotation(est.pose), G.pose_to_rotation(s.pose))))
        confs.append(est.confidence)
    errs = np.array(errs)
    print(
        f"{name}: {tt:.0f}s train(vacc {tvacc:.2f} own {town:.2f}) test(vacc {vacc:.2f} own {own:.2f}) | "
        f"acc30 {(errs < 30).mean():.2f} acc10 {(errs < 10).mean():.2f} med {np.median(errs):.0f} conf {np.mean(confs):.3f}",
        flush=True,
    )


if __name__ == "__main__":
    run("A_600x2_w12m4_b4_lr3e-3_conw.3_pool4", 600, 12, 4, 4, 3e-3, 0.3, 0.05, 4)

# appended variants
def more():
    run("B_600x2_w4m12_b4_lr3e-3_conw1_mom.02", 600, 4, 12, 4, 3e-3, 1.0, 0.02, 4)

if __name__ == "__main__":
    pass
