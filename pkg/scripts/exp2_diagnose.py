"""Diagnose training dynamics: collapse, saturation, target drift."""
import math
import sys
import time

import numpy as np

sys.path.insert(0, "src")
from meshpose import adaptation as A
from meshpose import datagen as D
from meshpose import geometry as G
from meshpose import inference as I
from meshpose.features import extract, _forward


def diag(model, samples, tag):
    # vertex feature spread per category
    for cat, mesh in sorted(model.meshes.items()):
        C = mesh.vertex_features
        gram = C @ C.T
        off = gram[~np.eye(len(C), dtype=bool)]
        # feature-map stats on one sample
        s = next(x for x in samples if x.category == cat)
        grid, (caches, pre, norms) = _forward(model.extractor, s.image)
        print(
            f"  [{tag}] {cat}: C offdiag cos mean {off.mean():.3f} max {off.max():.3f} | "
            f"prenorm |v| median {np.median(norms):.3f} | bg cos to meanC "
            f"{float(mesh.background_feature @ C.mean(0) / max(np.linalg.norm(C.mean(0)), 1e-9)):.3f}",
            flush=True,
        )


def main():
    cats = ["car", "plane"]
    gen = D.GeneratorConfig(samples_per_category=200, master_seed=11, texture_pool_size=8)
    train = list(D.generate_dataset(gen, cats))
    gent = D.GeneratorConfig(samples_per_category=15, master_seed=999, texture_pool_size=8)
    test = list(D.generate_dataset(gent, cats))

    for lr, mom, conw, epochs in [(1e-3, 0.03, 1.0, 6), (2e-3, 0.1, 1.0, 6)]:
        print(f"=== lr={lr} momentum={mom} conw={conw} ===", flush=True)
        cfg = A.TrainConfig(
            epochs=1, seed=0, batch_size=8, learning_rate=lr, momentum=mom, momentum_bg=mom, contrastive_weight=conw
        )
        model = None
        for ep in range(epochs):
            # train one epoch at a time to watch the trajectory (fresh Adam per
            # epoch deviates from one long run, acceptable for diagnosis)
            if model is None:
                model = A.pretrain_synthetic(train, cfg)
            else:
                model = A._train_epochs(model, train, [s.pose for s in train], cfg, 1, seed=ep, phase=f"ep{ep}")
            vacc = A.vertex_classification_accuracy(model, test)
            print(f" epoch {ep}: test vacc {vacc:.3f}", flush=True)
            diag(model, train, f"ep{ep}")
        icfg = I.InferenceConfig(distance_search_range=(2.8, 5.0))
        errs = []
        confs = []
        for s in test[:20]:
            fm = extract(model.extractor, s.image)
            est = I.infer_pose(fm, model.meshes[s.category], s.camera, icfg)
            errs.append(math.degrees(G.geodesic_distance(G.pose_to_rotation(est.pose), G.pose_to_rotation(s.pose))))
            confs.append(est.confidence)
        errs = np.array(errs)
        print(
            f" final: acc30 {(errs < 30).mean():.2f} acc10 {(errs < 10).mean():.2f} med {np.median(errs):.0f} conf {np.mean(confs):.3f}",
            flush=True,
        )


if __name__ == "__main__":
    main()
