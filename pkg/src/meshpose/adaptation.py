"""Training orchestration: synthetic pretraining, pseudo-label generation,
unsupervised domain adaptation, and few-shot fine-tuning.

The extractor is trained by gradient descent (Adam, cosine-decayed learning
rate) on the joint objective; vertex features and the background feature are
maintained by moving averages of observed features at the current
correspondences.  During adaptation the mesh update rate and the domain term
are both scaled by alpha, so alpha = 0 with a frozen extractor is a no-op.

For the extractor update the three terms' cell gradients are normalized by
their pair/cell counts before mixing; the pairwise-sum contrastive loss
otherwise grows quadratically with the grid size and would drown the
reconstruction term at any resolution.  Logged loss values stay unnormalized.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .datagen import SceneSample, category_bounding_box
from .features import Adam, ExtractorParams, extract, extract_gradients, init_extractor, load_extractor, save_extractor
from .geometry import Pose, build_cuboid
from .inference import DistanceTable, InferenceConfig, InferenceFailure, PoseEstimate, batch_infer, build_distance_table, infer_pose
from .losses import contrastive_loss, domain_contrastive_loss, joint_loss, reconstruction_terms
from .neuralmesh import NeuralMesh, init_mesh, load_mesh, project_correspondences, save_mesh, update_vertex_features

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for all training phases (counts, rates, thresholds, seeds)."""

    epochs: int = 8
    warmup_epochs: int = 0  # pretrain epochs with frozen (anchor) vertex features
    batch_size: int = 8
    learning_rate: float = 1e-3
    contrastive_weight: float = 1.0  # scale on the normalized contrastive cell gradient
    momentum: float = 0.1
    momentum_bg: float = 0.1
    alpha: float = 1.0
    tau: float = 0.9
    adapt_rounds: int = 3
    adapt_epochs: int = 2
    fewshot_epochs: int = 6
    fewshot_count: int = 0  # annotated images per category; 0 = unsupervised
    seed: int = 0
    extractor_frozen: bool = False
    consolidate: bool = True  # final mean re-estimate of vertex features after pretraining
    channels: int = 32
    stride: int = 8
    grid_density: int = 5
    mesh_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        for name in ("epochs", "batch_size", "adapt_rounds", "adapt_epochs", "fewshot_epochs", "fewshot_count"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class PseudoLabel:
    sample_id: str
    pose: Pose | None
    confidence: float
    kept: bool


@dataclass
class PoseModel:
    """Trained state: shared extractor plus one neural mesh per category."""

    extractor: ExtractorParams
    meshes: dict = field(default_factory=dict)

    @property
    def stride(self) -> int:
        return self.extractor.stride

    def copy(self) -> "PoseModel":
        return PoseModel(extractor=self.extractor.copy(), meshes=dict(self.meshes))


def save_model(model: PoseModel, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_extractor(out_dir / "extractor.ckpt", model.extractor)
    for category, mesh in sorted(model.meshes.items()):
        save_mesh(out_dir / f"mesh_{category}.ckpt", mesh)
    (out_dir / "model.json").write_text(
        json.dumps({"categories": sorted(model.meshes), "stride": model.stride}, sort_keys=True)
    )


def load_model(model_dir) -> PoseModel:
    model_dir = Path(model_dir)
    meta = json.loads((model_dir / "model.json").read_text())
    extractor = load_extractor(model_dir / "extractor.ckpt")
    meshes = {c: load_mesh(model_dir / f"mesh_{c}.ckpt") for c in meta["categories"]}
    return PoseModel(extractor=extractor, meshes=meshes)


def init_model(categories, config: TrainConfig) -> PoseModel:
    extractor = init_extractor(channels=config.channels, stride=config.stride, seed=config.seed)
    meshes = {}
    for k, category in enumerate(sorted(set(categories))):
        dims = tuple(config.mesh_scale * d for d in category_bounding_box(category))
        geometry = build_cuboid(dims, config.grid_density)
        meshes[category] = init_mesh(
            geometry, config.channels, category=category, momentum=config.momentum, seed=config.seed + 1000 + k
        )
    return PoseModel(extractor=extractor, meshes=meshes)


# --------------------------------------------------------------------------
# Shared training epoch
# --------------------------------------------------------------------------


def _cell_counts(corr):
    n_fg = int(corr.foreground_mask.sum())
    n_total = corr.foreground_mask.size
    n_pairs_con = max(1, n_fg * (n_fg - 1 + (n_total - n_fg)))
    return n_fg, n_total, n_pairs_con


def _train_epochs(
    model: PoseModel,
    samples,
    poses,
    config: TrainConfig,
    epochs: int,
    seed: int,
    alpha: float = 0.0,
    mesh_rate: float = 1.0,
    extractor_frozen: bool = False,
    log=None,
    phase: str = "train",
    bg_initialized: set | None = None,
):
    """Seeded epochs over (sample, pose) pairs, updating extractor and meshes.

    ``alpha`` weights the domain term (cell gradients only); ``mesh_rate``
    scales the moving-average momenta (adaptation passes alpha here).
    """
    if not samples:
        raise ValueError("empty training set")
    optimizer = Adam(model.extractor, lr=config.learning_rate)
    rng = np.random.default_rng(seed)
    total_steps = max(1, epochs * len(samples))
    step = 0
    grad_accum = None
    accum_count = 0
    bg_initialized = set(model.meshes) if bg_initialized is None else bg_initialized

    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        sums = {"contrastive": 0.0, "reconstruction": 0.0, "domain": 0.0}
        for si in order:
            sample = samples[si]
            pose = poses[si]
            mesh = model.meshes[sample.category]
            fm = extract(model.extractor, sample.image)
            corr = project_correspondences(mesh, pose, sample.camera, config.stride)
            n_fg, n_total, n_pairs_con = _cell_counts(corr)

            l_rec, g_rec = reconstruction_terms(fm, mesh, corr, with_gradient=True)
            cell_grad = g_rec / n_total
            sums["reconstruction"] += l_rec.total
            if n_fg:
                fg_cells = np.argwhere(corr.foreground_mask)
                bg_cells = np.argwhere(~corr.foreground_mask)
                l_con, g_con = contrastive_loss(fm, fg_cells, bg_cells)
                cell_grad = cell_grad + config.contrastive_weight * g_con / n_pairs_con
                sums["contrastive"] += l_con.total
            if alpha > 0 and corr.num_pairs:
                l_dom, _, dom_grads = domain_contrastive_loss(mesh, [fm], [corr])
                cell_grad = cell_grad + alpha * dom_grads[0] / corr.num_pairs
                sums["domain"] += l_dom.total

            if not extractor_frozen:
                grads = extract_gradients(model.extractor, sample.image, cell_grad)
                grad_accum = grads if grad_accum is None else _add_params(grad_accum, grads)
                accum_count += 1
                if accum_count >= config.batch_size:
                    lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
                    optimizer.step(_scale_params(grad_accum, 1.0 / accum_count), lr=lr)
                    grad_accum, accum_count = None, 0
            step += 1

            momentum = config.momentum * mesh_rate
            momentum_bg = config.momentum_bg * mesh_rate
            if sample.category not in bg_initialized:
                momentum_bg = 1.0
                bg_initialized.add(sample.category)
            if momentum > 0 or momentum_bg > 0:
                model.meshes[sample.category] = update_vertex_features(
                    mesh, fm, corr, momentum=momentum, momentum_b=momentum_bg
                )

        if not extractor_frozen and grad_accum is not None:
            lr = config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            optimizer.step(_scale_params(grad_accum, 1.0 / accum_count), lr=lr)
            grad_accum, accum_count = None, 0

        entry = {
            "phase": phase,
            "epoch": epoch,
            "n_samples": len(samples),
            "loss_contrastive": sums["contrastive"] / len(samples),
            "loss_reconstruction": sums["reconstruction"] / len(samples),
            "loss_domain": sums["domain"] / len(samples),
            "loss_joint": joint_loss(
                {
                    "contrastive": sums["contrastive"] / len(samples),
                    "reconstruction": sums["reconstruction"] / len(samples),
                    "domain": sums["domain"] / len(samples),
                },
                alpha if alpha > 0 else 0.0,
            ).total,
        }
        if log is not None:
            log(entry)
        logger.info("%s epoch %d: rec %.4f con %.1f", phase, epoch, entry["loss_reconstruction"], entry["loss_contrastive"])
    return model


def _add_params(a: ExtractorParams, b: ExtractorParams) -> ExtractorParams:
    for wa, wb in zip(a.weights, b.weights):
        wa += wb
    for ba, bb in zip(a.biases, b.biases):
        ba += bb
    return a


def _scale_params(a: ExtractorParams, s: float) -> ExtractorParams:
    for w in a.weights:
        w *= s
    for b in a.biases:
        b *= s
    return a


# --------------------------------------------------------------------------
# Phases
# --------------------------------------------------------------------------


def consolidate_features(model: PoseModel, samples, poses, config: TrainConfig) -> PoseModel:
    """Re-estimate vertex/background features as plain means of the observed
    features at the given poses (the maximum-likelihood codebook for the
    current extractor, which the moving average approximates online)."""
    sums = {c: np.zeros_like(m.vertex_features) for c, m in model.meshes.items()}
    counts = {c: np.zeros(m.num_vertices) for c, m in model.meshes.items()}
    bg_sums = {c: np.zeros(m.channels) for c, m in model.meshes.items()}
    bg_counts = {c: 0 for c in model.meshes}
    for sample, pose in zip(samples, poses):
        mesh = model.meshes[sample.category]
        fm = extract(model.extractor, sample.image)
        corr = project_correspondences(mesh, pose, sample.camera, config.stride)
        if corr.num_pairs:
            observed = fm.grid[corr.vertex_cells[:, 0], corr.vertex_cells[:, 1]]
            np.add.at(sums[sample.category], corr.vertex_ids, observed)
            np.add.at(counts[sample.category], corr.vertex_ids, 1.0)
        bg = ~corr.foreground_mask
        if bg.any():
            bg_sums[sample.category] += fm.grid[bg].mean(axis=0)
            bg_counts[sample.category] += 1
    from .features import unit_normalize

    for category, mesh in model.meshes.items():
        feats = mesh.vertex_features.copy()
        seen = counts[category] > 0
        feats[seen] = unit_normalize(sums[category][seen] / counts[category][seen, None])
        bg = mesh.background_feature
        if bg_counts[category]:
            bg = unit_normalize(bg_sums[category] / bg_counts[category])
        model.meshes[category] = dataclasses.replace(mesh, vertex_features=feats, background_feature=bg)
    return model


def pretrain_synthetic(samples, config: TrainConfig, log=None, model: PoseModel | None = None) -> PoseModel:
    """Train extractor and meshes from annotated synthetic samples.

    Alternates extractor gradient steps on the contrastive + reconstruction
    objective with moving-average vertex updates at ground-truth
    correspondences.  The background feature of each mesh is replaced by the
    first observed sample's background mean, then blended.  ``model`` lets a
    caller supply custom mesh geometry; by default one mesh per category is
    initialized from the category bounding box.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("pretrain_synthetic requires a nonempty dataset")
    categories = sorted({s.category for s in samples})
    if model is None:
        model = init_model(categories, config)
    poses = [s.pose for s in samples]
    if config.warmup_epochs:
        # Regress features onto the frozen random vertex anchors first; the
        # moving average only starts tracking once the feature field carries
        # vertex identity, which prevents early mutual collapse.
        model = _train_epochs(
            model,
            samples,
            poses,
            config,
            epochs=config.warmup_epochs,
            seed=config.seed,
            alpha=0.0,
            mesh_rate=0.0,
            extractor_frozen=config.extractor_frozen,
            log=log,
            phase="pretrain_warmup",
            bg_initialized=set(model.meshes),
        )
    model = _train_epochs(
        model,
        samples,
        poses,
        config,
        epochs=config.epochs,
        seed=config.seed + 1,
        alpha=0.0,
        mesh_rate=1.0,
        extractor_frozen=config.extractor_frozen,
        log=log,
        phase="pretrain",
        bg_initialized=set(),
    )
    if config.consolidate:
        model = consolidate_features(model, samples, poses, config)
    return model


def generate_pseudo_labels(
    model: PoseModel,
    samples,
    tau: float,
    inference_config: InferenceConfig,
    parallelism: int = 1,
    audit_path=None,
):
    """Estimate poses for unlabeled samples; keep those with confidence >= tau
    (inclusive boundary).  Optionally persist a per-sample audit JSONL."""
    samples = list(samples)
    labels = []
    by_category: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        by_category.setdefault(s.category, []).append(i)

    results: list = [None] * len(samples)
    for category, idxs in sorted(by_category.items()):
        mesh = model.meshes[category]
        fms = [extract(model.extractor, samples[i].image) for i in idxs]
        outs = batch_infer(fms, mesh, samples[idxs[0]].camera, inference_config, parallelism=parallelism)
        for i, out in zip(idxs, outs):
            results[i] = out

    for sample, out in zip(samples, results):
        if isinstance(out, InferenceFailure):
            labels.append(PseudoLabel(sample_id=sample.sample_id, pose=None, confidence=0.0, kept=False))
        else:
            labels.append(
                PseudoLabel(
                    sample_id=sample.sample_id,
                    pose=out.pose,
                    confidence=out.confidence,
                    kept=out.confidence >= tau,
                )
            )

    if audit_path is not None:
        audit_path = Path(audit_path)
        audit_path.parent.mkdir(parents=True, exist_ok=True)
        with open(audit_path, "w", encoding="utf-8") as fh:
            for lab in labels:
                rec = {
                    "sample_id": lab.sample_id,
                    "confidence": round(lab.confidence, 6),
                    "kept": lab.kept,
                    "pose": None
                    if lab.pose is None
                    else {k: round(getattr(lab.pose, k), 6) for k in ("azimuth", "elevation", "theta", "distance")},
                }
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return labels


def adapt_unsupervised(
    model: PoseModel,
    shifted_samples,
    config: TrainConfig,
    inference_config: InferenceConfig,
    parallelism: int = 1,
    log=None,
    audit_dir=None,
) -> PoseModel:
    """Pseudo-label / fine-tune rounds on unlabeled shifted-domain samples.

    Each round re-labels with the current model, then optimizes the joint
    objective on the kept subset; vertex features follow the moving average
    at alpha-scaled momentum, so alpha = 0 freezes the meshes.
    """
    shifted_samples = list(shifted_samples)
    model = model.copy()
    kept_fraction_history = []
    for round_idx in range(config.adapt_rounds):
        audit_path = None if audit_dir is None else Path(audit_dir) / f"pseudo_labels_round{round_idx}.jsonl"
        labels = generate_pseudo_labels(
            model, shifted_samples, config.tau, inference_config, parallelism=parallelism, audit_path=audit_path
        )
        kept_idx = [i for i, lab in enumerate(labels) if lab.kept]
        kept_fraction = len(kept_idx) / max(1, len(labels))
        kept_fraction_history.append(kept_fraction)
        if not kept_idx:
            if round_idx == 0:
                raise RuntimeError(
                    f"no pseudo-labels kept in round 1 at tau={config.tau}; threshold too high for this model/data"
                )
            logger.warning("adaptation round %d kept no labels; stopping early", round_idx)
            break
        if log is not None:
            log(
                {
                    "phase": "adapt",
                    "round": round_idx,
                    "kept": len(kept_idx),
                    "total": len(labels),
                    "kept_fraction": kept_fraction,
                    "mean_confidence": float(np.mean([lab.confidence for lab in labels])),
                }
            )
        samples = [shifted_samples[i] for i in kept_idx]
        poses = [labels[i].pose for i in kept_idx]
        model = _train_epochs(
            model,
            samples,
            poses,
            config,
            epochs=config.adapt_epochs,
            seed=config.seed + 7919 * (round_idx + 1),
            alpha=config.alpha,
            mesh_rate=min(1.0, config.alpha),
            extractor_frozen=config.extractor_frozen,
            log=log,
            phase=f"adapt_round{round_idx}",
        )
    logger.info("kept fractions per round: %s", kept_fraction_history)
    return model


def supervised_finetune(model: PoseModel, samples, poses, config: TrainConfig, log=None, phase: str = "finetune") -> PoseModel:
    """Continue training an existing model on annotated samples."""
    return _train_epochs(
        model.copy(),
        list(samples),
        list(poses),
        config,
        epochs=config.fewshot_epochs,
        seed=config.seed + 104729,
        alpha=0.0,
        mesh_rate=1.0,
        extractor_frozen=config.extractor_frozen,
        log=log,
        phase=phase,
    )


def finetune_fewshot(
    model: PoseModel,
    labeled_samples,
    unlabeled_samples,
    config: TrainConfig,
    inference_config: InferenceConfig,
    parallelism: int = 1,
    log=None,
    audit_dir=None,
) -> PoseModel:
    """Few-shot protocol: train on annotations, pseudo-label the unlabeled
    pool at tau, then train on the union.

    Duplicate labeled sample_ids are dropped; an empty labeled set falls back
    to unsupervised adaptation with a warning.
    """
    seen = set()
    labeled = []
    for s in labeled_samples:
        if s.sample_id in seen:
            continue
        seen.add(s.sample_id)
        labeled.append(s)
    unlabeled = [s for s in unlabeled_samples if s.sample_id not in seen]

    if not labeled:
        logger.warning("finetune_fewshot got no labeled samples; falling back to adapt_unsupervised")
        return adapt_unsupervised(
            model, unlabeled, config, inference_config, parallelism=parallelism, log=log, audit_dir=audit_dir
        )

    model = supervised_finetune(model, labeled, [s.pose for s in labeled], config, log=log, phase="fewshot_labeled")

    union_samples = list(labeled)
    union_poses = [s.pose for s in labeled]
    if unlabeled:
        audit_path = None if audit_dir is None else Path(audit_dir) / "pseudo_labels_fewshot.jsonl"
        labels = generate_pseudo_labels(
            model, unlabeled, config.tau, inference_config, parallelism=parallelism, audit_path=audit_path
        )
        for s, lab in zip(unlabeled, labels):
            if lab.kept:
                union_samples.append(s)
                union_poses.append(lab.pose)
        if log is not None:
            log(
                {
                    "phase": "fewshot_pseudo",
                    "kept": sum(lab.kept for lab in labels),
                    "total": len(labels),
                }
            )
    return supervised_finetune(model, union_samples, union_poses, config, log=log, phase="fewshot_union")


# --------------------------------------------------------------------------
# Diagnostics and run manifests
# --------------------------------------------------------------------------


def vertex_classification_accuracy(model: PoseModel, samples, stride: int | None = None) -> float:
    """Top-1 accuracy of assigning foreground cells to their ground-truth
    governing vertex by feature similarity (argmax_r <f_i, C_r>)."""
    stride = model.stride if stride is None else stride
    correct = 0
    total = 0
    for sample in samples:
        mesh = model.meshes[sample.category]
        fm = extract(model.extractor, sample.image)
        corr = project_correspondences(mesh, sample.pose, sample.camera, stride)
        fg = corr.foreground_mask
        if not fg.any():
            continue
        sims = np.einsum("kc,rc->kr", fm.grid[fg], mesh.vertex_features)
        pred = np.argmax(sims, axis=1)
        correct += int(np.sum(pred == corr.cell_vertex[fg]))
        total += int(fg.sum())
    return correct / total if total else 0.0


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(run_dir, config: TrainConfig, dataset_hashes: dict, extra: dict | None = None) -> None:
    """run.json: config echo, dataset hashes, seeds, checkpoint content hashes."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoints = {}
    for ckpt in sorted(run_dir.glob("**/*.ckpt")):
        checkpoints[str(ckpt.relative_to(run_dir))] = file_sha256(ckpt)
    payload = {
        "config": dataclasses.asdict(config),
        "datasets": dataset_hashes,
        "seed": config.seed,
        "checkpoints": checkpoints,
    }
    if extra:
        payload.update(extra)
    (run_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def make_log_writer(path):
    """JSON-lines training log appender."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def write(entry: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")

    return write
