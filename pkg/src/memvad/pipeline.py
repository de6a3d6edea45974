"""Training, evaluation, diagnostics and the ablation driver."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from memvad import losses
from memvad import memory as mem
from memvad import scoring
from memvad.config import ABLATION_ROWS, RunConfig
from memvad.datasets import ClipDataset, validate_layout
from memvad.models import MemoryGuidedNet, ModelConfig, flatten_features

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "memvad-checkpoint"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ["epoch", "step", "intensity", "compactness", "separateness", "uniform", "total", "max_share"]


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: MemoryGuidedNet
    bank: Optional[mem.MemoryBank]
    config: RunConfig
    epoch: int


def save_checkpoint(path, model: MemoryGuidedNet, bank, config: RunConfig, epoch: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": model.config.to_dict(),
            "run_config": config.to_dict(),
            "state_dict": model.state_dict(),
            "bank": None if bank is None else bank.items.detach().clone(),
            "epoch": epoch,
        },
        path,
    )
    return path


def load_checkpoint(path) -> Checkpoint:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a memvad checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob['version']}")
    model = MemoryGuidedNet(ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    bank = None if blob["bank"] is None else mem.MemoryBank(blob["bank"])
    return Checkpoint(model, bank, RunConfig.from_dict(blob["run_config"]), blob["epoch"])


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# training


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def memory_step(bank: mem.MemoryBank, queries: torch.Tensor, normalize_queries: bool = False):
    """One update of the bank from a batch of queries ``(B, K, C)``.

    Returns the new bank and the assignment counts of the batch.
    """
    q = queries.detach().reshape(-1, queries.shape[-1])
    if normalize_queries:
        q = F.normalize(q, dim=-1)
    scores = mem.correlate(bank, q)
    sets = mem.assign_queries(mem.match_weights(scores))
    new_bank = mem.update(bank, q, mem.update_weights(scores), sets)
    return new_bank, mem.distribution_histogram(sets)


def _uniform_part(result, bank, config: RunConfig):
    # "update" supervises v (M x K, softmax over queries); "match" supervises w
    # (K x M, softmax over items) against 1/M. The loss is the same MSE-to-uniform.
    if config.uniform_scope == "per_sample":
        target = result.update_weights if config.uniform_target == "update" else result.match_weights
        return mem.uniform_supervision_loss(target)
    q = result.queries.reshape(-1, result.queries.shape[-1])
    scores = mem.correlate(bank, q, config.normalize_queries)
    if config.uniform_target == "update":
        return mem.uniform_supervision_loss(mem.update_weights(scores))
    return mem.uniform_supervision_loss(mem.match_weights(scores))


def training_step(model, bank, batch, config: RunConfig):
    """Forward pass and loss parts for one batch (no optimizer step)."""
    x, y = batch[0], batch[1]
    result = model(x, bank.items if bank is not None else None)
    if bank is None:
        parts = {"intensity": losses.intensity_loss(result.output, y)}
    else:
        parts = losses.compute_parts(
            result.output, y, result.queries, bank.items, None,
            config.loss_weights, config.normalize_queries,
        )
        if config.uniform_supervision:
            parts["uniform"] = _uniform_part(result, bank.items, config)
    total = losses.total_loss(
        parts,
        config.loss_weights,
        use_memory=config.use_memory,
        uniform_supervision=config.uniform_supervision,
        use_compact=config.use_compact,
        use_separate=config.use_separate,
    )
    return result, parts, total


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    checkpoints: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def epoch_means(self, key: str = "total") -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.log:
            if row[key] != "":
                by_epoch.setdefault(row["epoch"], []).append(row[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(config: RunConfig, max_steps: Optional[int] = None) -> TrainResult:
    """Train on the normal frames of ``config.dataset``.

    Checkpoints are written every ``checkpoint_every`` epochs and after the
    final epoch; every step's loss terms go to ``train_log.csv``.
    """
    if config.dataset is None:
        raise ValueError("RunConfig.dataset is not set")
    validate_layout(config.dataset, ("train",))
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2))

    seed_everything(config.seed)
    model_cfg = config.model_config()
    model = MemoryGuidedNet(model_cfg).to(config.device)
    bank = (
        mem.MemoryBank.random(config.memory_size, config.feature_dim, seed=config.seed)
        if config.use_memory
        else None
    )
    dataset = ClipDataset(
        config.dataset, "train", config.task, size=config.image_size,
        noise_ratio=config.noise_ratio, seed=config.seed,
    )
    loader = DataLoader(
        dataset, batch_size=config.batch_size, shuffle=True,
        generator=torch.Generator().manual_seed(config.seed),
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    log_path = out / "train_log.csv"
    result = TrainResult(checkpoint=out / "final.pt", log_path=log_path)
    step = 0
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for epoch in range(1, config.epochs + 1):
            dataset.set_epoch(epoch)
            model.train()
            t0 = time.time()
            for batch in loader:
                fwd, parts, total = training_step(model, bank, batch, config)
                opt.zero_grad()
                total.backward()
                opt.step()
                row = {"epoch": epoch, "step": step, "total": float(total.detach()), "max_share": ""}
                for key in ("intensity", "compactness", "separateness", "uniform"):
                    row[key] = float(parts[key].detach()) if key in parts else ""
                if bank is not None:
                    bank, counts = memory_step(bank, fwd.queries, config.normalize_queries)
                    row["max_share"] = float(counts.max() / counts.sum())
                writer.writerow(row)
                result.log.append(row)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            fh.flush()
            logger.info(
                "epoch %d/%d loss %.5f (%.1fs)", epoch, config.epochs,
                result.epoch_means()[-1], time.time() - t0,
            )
            last = epoch == config.epochs or (max_steps is not None and step >= max_steps)
            if epoch % config.checkpoint_every == 0 or last:
                path = save_checkpoint(out / f"epoch_{epoch:03d}.pt", model, bank, config, epoch)
                result.checkpoints.append(path)
            if last:
                break
    save_checkpoint(result.checkpoint, model, bank, config, epoch)
    return result


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    auc: float
    series: list
    lam: float
    scores_csv: Optional[Path] = None
    summary_json: Optional[Path] = None
    bank: Optional[mem.MemoryBank] = None
    lambda_grid: dict = field(default_factory=dict)


def score_videos(
    model: MemoryGuidedNet,
    bank: Optional[mem.MemoryBank],
    dataset: ClipDataset,
    test_time_update: bool = False,
    batch_size: int = 1,
    normalize_queries: bool = False,
):
    """PSNR and query distance per test frame, grouped per video.

    Returns the score series and the (possibly updated) bank.
    """
    model.eval()
    use_memory = model.config.use_memory
    per_video: dict[str, dict] = {}
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    with torch.no_grad():
        for x, y, label, idx in loader:
            result = model(x, bank.items if use_memory else None)
            mse = torch.mean(((result.output - y) / 2.0) ** 2, dim=(1, 2, 3))
            for b in range(x.shape[0]):
                vi, t = dataset.index[int(idx[b])]
                vid = dataset.videos[vi].video_id
                rec = per_video.setdefault(vid, {"frame": [], "psnr": [], "dist": [], "label": []})
                rec["frame"].append(t)
                rec["psnr"].append(scoring.psnr_from_mse(float(mse[b])))
                rec["label"].append(int(label[b]))
                if use_memory:
                    rec["dist"].append(scoring.query_distance(result.queries[b], bank, normalize_queries))
            if use_memory and test_time_update:
                bank, _ = memory_step(bank, result.queries, normalize_queries)
    series = [
        scoring.ScoreSeries(
            vid, rec["frame"], rec["psnr"], rec["dist"] if use_memory else None, rec["label"]
        )
        for vid, rec in per_video.items()
    ]
    return series, bank


def _fused_auc(series, lam: float, per_video: bool) -> float:
    if per_video:
        return scoring.frame_auc(series, lam)
    return scoring.global_frame_auc(series, lam)


def evaluate(
    checkpoint,
    dataset_root=None,
    lam: Optional[float] = None,
    test_time_update: Optional[bool] = None,
    out_dir=None,
    lambda_grid: Sequence[float] = (),
    video_filter=None,
) -> EvalResult:
    """Score the test split with a trained checkpoint and report frame AUC.

    The checkpoint file is never written; test-time updates act on an
    in-memory copy of the bank.
    """
    ckpt = load_checkpoint(checkpoint)
    cfg = ckpt.config
    root = dataset_root or cfg.dataset
    lam = cfg.lam if lam is None else lam
    ttu = cfg.test_time_update if test_time_update is None else test_time_update
    noise = cfg.noise_ratio if (cfg.task == "denoise_reconstruction" and cfg.eval_noise) else 0.0
    dataset = ClipDataset(root, "test", cfg.task, size=cfg.image_size, noise_ratio=noise, seed=cfg.seed + 1)
    if video_filter is not None:
        _restrict(dataset, video_filter)
    bank = ckpt.bank.clone() if ckpt.bank is not None else None
    series, bank = score_videos(
        ckpt.model, bank, dataset, ttu and cfg.use_memory, cfg.eval_batch_size, cfg.normalize_queries
    )
    for s in series:
        if not np.all(np.isfinite(s.psnr)) or (s.distance is not None and not np.all(np.isfinite(s.distance))):
            raise FloatingPointError(f"non-finite score in video {s.video_id}")
    grid = {float(g): _fused_auc(series, float(g), cfg.per_video_norm) for g in lambda_grid}
    value = _fused_auc(series, lam, cfg.per_video_norm)
    for s in series:
        s.fuse(lam)
    if not math.isfinite(value):
        raise FloatingPointError("non-finite AUC")
    result = EvalResult(value, series, lam, bank=bank, lambda_grid=grid)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.scores_csv = write_scores_csv(out / "scores.csv", series)
        summary = {
            "dataset": str(root),
            "auc": value,
            "lambda": lam,
            "test_time_update": bool(ttu and cfg.use_memory),
            "config_hash": cfg.hash(),
            "checkpoint": str(checkpoint),
            "lambda_grid": {str(k): v for k, v in grid.items()},
        }
        result.summary_json = out / "summary.json"
        result.summary_json.write_text(json.dumps(summary, indent=2))
    return result


def _restrict(dataset: ClipDataset, video_filter) -> None:
    keep = [i for i, v in enumerate(dataset.videos) if video_filter(v.video_id)]
    if not keep:
        raise ValueError("video filter removed every test video")
    remap = {old: new for new, old in enumerate(keep)}
    dataset.videos = [dataset.videos[i] for i in keep]
    dataset.index = [(remap[vi], t) for vi, t in dataset.index if vi in remap]


def write_scores_csv(path, series) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "frame_index", "psnr", "distance", "score", "label"])
        for s in series:
            for i in range(len(s.psnr)):
                dist = "" if s.distance is None else repr(float(s.distance[i]))
                writer.writerow(
                    [s.video_id, int(s.frame_index[i]), repr(float(s.psnr[i])), dist,
                     repr(float(s.score[i])), int(s.label[i])]
                )
    return Path(path)


# --------------------------------------------------------------------------
# diagnostics


def collect_queries(ckpt: Checkpoint, dataset: ClipDataset, batch_size: int = 8):
    """Run the encoder over a dataset; returns ``(N, K, C)`` queries."""
    ckpt.model.eval()
    chunks = []
    with torch.no_grad():
        for x, *_ in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            feat, _ = ckpt.model.encode(x)
            chunks.append(flatten_features(feat))
    return torch.cat(chunks)


def memory_distribution(ckpt: Checkpoint, dataset: ClipDataset) -> np.ndarray:
    if ckpt.bank is None:
        raise ValueError("checkpoint has no memory bank")
    queries = collect_queries(ckpt, dataset)
    q = queries.reshape(-1, queries.shape[-1])
    if ckpt.config.normalize_queries:
        q = F.normalize(q, dim=-1)
    sets = mem.assign_queries(mem.match_weights(mem.correlate(ckpt.bank, q)))
    return mem.distribution_histogram(sets)


def _dataset_for(ckpt: Checkpoint, root, split: str) -> ClipDataset:
    cfg = ckpt.config
    return ClipDataset(root or cfg.dataset, split, cfg.task, size=cfg.image_size)


def plot_memory_distribution(checkpoint, dataset_root=None, out_dir=".", split: str = "train"):
    """Histogram of nearest-item assignments; writes counts CSV and a bar chart."""
    ckpt = load_checkpoint(checkpoint)
    if ckpt.bank is None:
        raise ValueError("checkpoint has no memory bank")
    counts = memory_distribution(ckpt, _dataset_for(ckpt, dataset_root, split))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "memory_distribution.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item", "count"])
        writer.writerows((m, int(c)) for m, c in enumerate(counts))
    png_path = out / "memory_distribution.png"
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(np.arange(len(counts)), counts)
        ax.set_xlabel("memory item")
        ax.set_ylabel("assigned queries")
        ax.set_xticks(np.arange(len(counts)))
        fig.tight_layout()
        fig.savefig(png_path, dpi=100)
        plt.close(fig)
    except Exception as exc:  # rendering is best effort; the CSV is the artifact
        logger.warning("could not render histogram: %s", exc)
        png_path = None
    return counts, csv_path, png_path


def plot_embeddings(
    checkpoint, dataset_root=None, n_samples: int = 500, out_dir=".", split: str = "train",
    method: str = "tsne", seed: int = 0,
):
    """Dump sampled query vectors and render a 2-D projection of them plus the bank."""
    ckpt = load_checkpoint(checkpoint)
    if ckpt.bank is None:
        raise ValueError("checkpoint has no memory bank")
    dataset = _dataset_for(ckpt, dataset_root, split)
    queries = collect_queries(ckpt, dataset)
    n_clips, K, C = queries.shape
    flat = queries.reshape(-1, C).numpy()
    rng = np.random.default_rng(seed)
    n = min(n_samples, flat.shape[0])
    pick = np.sort(rng.choice(flat.shape[0], size=n, replace=False))
    sampled = flat[pick]
    items = ckpt.bank.items.numpy()
    assigned = np.argmax(sampled @ items.T, axis=1)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_path = out / "queries.npz"
    np.savez(dump_path, queries=sampled, clip=pick // K, position=pick % K, item=assigned, bank=items)

    png_path = out / "embeddings.png"
    try:
        points = np.concatenate([sampled, items])
        proj = _project(points, method, seed)
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(proj[:n, 0], proj[:n, 1], c=assigned, cmap="tab10", s=6, alpha=0.7)
        ax.scatter(proj[n:, 0], proj[n:, 1], c="k", marker="*", s=120, label="memory items")
        ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(png_path, dpi=100)
        plt.close(fig)
    except Exception as exc:  # best effort
        logger.warning("could not render projection: %s", exc)
        png_path = None
    return sampled, dump_path, png_path


def _project(points: np.ndarray, method: str, seed: int) -> np.ndarray:
    if method == "pca":
        from sklearn.decomposition import PCA

        return PCA(n_components=2, random_state=seed).fit_transform(points)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = float(min(30, max(2, points.shape[0] // 4)))
        return TSNE(n_components=2, perplexity=perplexity, random_state=seed, init="pca").fit_transform(points)
    raise ValueError(f"unknown projection method {method!r}")


def plot_reconstructions(checkpoint, dataset_root=None, out_dir=".", n_frames: int = 6, split: str = "test"):
    """Save a grid of target, output and absolute error for evenly spaced test frames."""
    ckpt = load_checkpoint(checkpoint)
    dataset = _dataset_for(ckpt, dataset_root, split)
    picks = np.linspace(0, len(dataset) - 1, num=min(n_frames, len(dataset))).round().astype(int)
    model = ckpt.model.eval()

    def to_img(t):
        return ((t.permute(1, 2, 0).numpy() + 1.0) / 2.0).clip(0, 1)

    rows = []
    with torch.no_grad():
        for i in picks:
            x, y, label, _ = dataset[int(i)]
            out = model(x[None], ckpt.bank.items if ckpt.bank is not None else None).output[0]
            rows.append((to_img(y), to_img(out), np.abs(to_img(y) - to_img(out)).mean(-1), int(label)))
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    png = out_path / "reconstructions.png"
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(rows), 3, figsize=(6, 2 * len(rows)), squeeze=False)
    for r, (target, output, err, label) in enumerate(rows):
        for c, (img, title) in enumerate(((target, "target"), (output, "output"), (err, "error"))):
            axes[r, c].imshow(img, cmap="magma" if c == 2 else None)
            axes[r, c].set_axis_off()
            if r == 0:
                axes[r, c].set_title(title)
        axes[r, 0].text(2, 8, "anomalous" if label else "normal", color="w", fontsize=7)
    fig.tight_layout()
    fig.savefig(png, dpi=80)
    plt.close(fig)
    return png


def mean_pairwise_distance(bank: mem.MemoryBank) -> float:
    """Mean L2 distance over all distinct item pairs."""
    d = torch.cdist(bank.items.double(), bank.items.double())
    m = bank.M
    return float(d.sum() / (m * (m - 1)))


# --------------------------------------------------------------------------
# ablation grid

ABLATION_FIELDS = ["separateness", "compactness", "test_time_update", "lambda", "auc", "error"]


def run_ablation_suite(base: RunConfig, out_dir, rows=None) -> list[dict]:
    """Train and evaluate each on/off row of the ablation grid.

    A failing row is recorded with its error and the remaining rows still run.
    """
    rows = rows if rows is not None else ABLATION_ROWS["prediction" if base.task == "prediction" else "reconstruction"]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, (sep, compact, ttu, lam) in enumerate(rows):
        row = {"separateness": sep, "compactness": compact, "test_time_update": ttu, "lambda": lam,
               "auc": "", "error": ""}
        try:
            cfg = base.replace(
                use_separate=sep, use_compact=compact, test_time_update=ttu, lam=lam,
                out_dir=str(out / f"row{i}"),
            )
            trained = train(cfg)
            row["auc"] = evaluate(trained.checkpoint, out_dir=out / f"row{i}").auc
        except Exception as exc:
            logger.exception("ablation row %d failed", i)
            row["error"] = f"{type(exc).__name__}: {exc}"
        results.append(row)
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        for row in results:
            writer.writerow({**row, **{k: ("Y" if row[k] else "N") for k in ABLATION_FIELDS[:3]}})
    return results
