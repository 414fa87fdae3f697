"""Ablate the training mix: contrastive weight, momentum, resolution."""
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
    """vacc, mean cos(f, C_gt), mean max-other cos."""
    own, other, correct, total = [], [], 0, 0
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
        masked = sims.copy()
        masked[np.arange(len(gt)), gt] = -2
        other.extend(masked.max(axis=1))
        correct += int((sims.argmax(axis=1) == gt).sum())
        total += len(gt)
    return correct / total, float(np.mean(own)), float(np.mean(other))


def run(name, img_size, conw, momentum, lr=1e-3, epochs=6, n=200, pool=8):
    cats = ["car", "plane"]
    gen = D.GeneratorConfig(samples_per_category=n, master_seed=11, texture_pool_size=pool, image_size=(img_size, img_size))
    train = list(D.generate_dataset(gen, cats))
    gent = D.GeneratorConfig(samples_per_category=15, master_seed=999, texture_pool_size=pool, image_size=(img_size, img_size))
    test = list(D.generate_dataset(gent, cats))
    cfg = A.TrainConfig(
        epochs=epochs, seed=0, batch_size=8, learning_rate=lr, momentum=momentum, momentum_bg=momentum, contrastive_weight=conw
    )
    t0 = time.time()
    model = A.pretrain_synthetic(train, cfg)
    tt = time.time() - t0
    vacc, own, other = probe(model, test)
    icfg = I.InferenceConfig(distance_search_range=(2.8, 5.0))
    errs, confs = [], []
    for s in test[:20]:
        fm = extract(model.extractor, s.image)
        est = I.infer_pose(fm, model.meshes[s.category], s.camera, icfg)
        errs.append(math.degrees(G.geodesic_distance(G.pose_to_rotation(est.pose), G.pose_to_rotation(s.pose))))
        confs.append(est.confidence)
    errs = np.array(errs)
    print(
        f"{name}: {tt:.0f}s vacc {vacc:.3f} cos_own {own:.3f} cos_other {other:.3f} | "
        f"acc30 {(errs < 30).mean():.2f} acc10 {(errs < 10).mean():.2f} med {np.median(errs):.0f} conf {np.mean(confs):.3f}",
        flush=True,
    )


if __name__ == "__main__":
    run("conw0_mom.1", 96, 0.0, 0.1)
    run("conw0_mom.25", 96, 0.0, 0.25)
    run("conw.05_mom.25", 96, 0.05, 0.25)
    run("conw0_mom.25_img128", 128, 0.0, 0.25)
