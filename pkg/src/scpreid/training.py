"""End-to-end training loop: identity-balanced sampling, the three-part loss,
Adam with a piecewise-constant schedule, CSV metrics and exactly resumable
checkpoints.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_container, save_container
from .config import LossWeights, PreprocessConfig, TrainConfig
from .data import LabeledSample, preprocess_eval, preprocess_train, sample_pk
from .losses import LossBreakdown, classification_loss, combine_losses, scp_loss, trihard_loss
from .model import Model, state_arrays, load_state_arrays

LOSS_CSV_COLUMNS = ("step", "l_class", "l_metric", "l_scp", "total", "lr")


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss appears; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant schedule: each (milestone_epoch, lr) entry takes
    effect at its epoch and holds until the next one."""
    if epoch < 0:
        raise ValueError(f"epoch={epoch} must be >= 0")
    lr = config.lr_initial
    for milestone, value in config.lr_milestones:
        if epoch >= milestone:
            lr = value
    return lr


def make_optimizer(model: Model, config: TrainConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if config.decoupled_weight_decay else torch.optim.Adam
    return cls(
        model.parameters(),
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_epsilon,
        weight_decay=config.weight_decay,
    )


def batch_losses(
    model: Model,
    images: torch.Tensor,
    labels: torch.Tensor,
    weights: LossWeights,
) -> LossBreakdown:
    """Forward pass plus the combined loss for one batch, honouring the
    model's loss-attachment setting."""
    out = model(images)
    b = images.shape[0]
    global_parts = out.global_feature.reshape(b, model.config.stripes_R, model.config.channels_C)
    l_scp = scp_loss(
        out.local_parts,
        global_parts,
        reduction=weights.scp_reduction,
        stop_gradient_local=weights.stop_gradient_local,
    )
    zero = torch.zeros((), dtype=out.global_feature.dtype)
    l_class, l_metric = zero, zero
    if model.config.loss_attachment in ("global", "both"):
        l_class = l_class + classification_loss(out.logits_global, labels)
        l_metric = l_metric + trihard_loss(
            out.global_feature, labels, margin=weights.triplet_margin, soft_margin=weights.soft_margin
        )
    if model.config.loss_attachment in ("local", "both"):
        flat = out.local_parts.reshape(b, -1)
        l_class = l_class + classification_loss(out.logits_local, labels)
        l_metric = l_metric + trihard_loss(
            flat, labels, margin=weights.triplet_margin, soft_margin=weights.soft_margin
        )
    return combine_losses(l_class, l_metric, l_scp, weights)


def _optimizer_arrays(model: Model, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if not state:
            continue
        arrays[f"opt.{name}.exp_avg"] = state["exp_avg"].detach().numpy()
        arrays[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
        step = state["step"]
        arrays[f"opt.{name}.step"] = np.asarray([float(step)], dtype=np.float64)
    return arrays


def _restore_optimizer(model: Model, optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    for name, param in model.named_parameters():
        key = f"opt.{name}.exp_avg"
        if key not in arrays:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(arrays[f"opt.{name}.step"][0])),
            "exp_avg": torch.from_numpy(arrays[key].copy()).reshape(param.shape),
            "exp_avg_sq": torch.from_numpy(arrays[f"opt.{name}.exp_avg_sq"].copy()).reshape(param.shape),
        }


def save_train_checkpoint(
    path: str | Path,
    model: Model,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    step: int,
    epoch: int,
    extra: dict | None = None,
) -> None:
    arrays = {f"model.{k}": v for k, v in state_arrays(model).items()}
    arrays.update(_optimizer_arrays(model, optimizer))
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    header_extra = dict(extra or {})
    header_extra["epoch"] = epoch
    header_extra["rng.numpy"] = _jsonable_rng_state(rng)
    save_container(path, arrays, config=asdict(model.config), step=step, extra=header_extra)


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": {k: int(v) for k, v in state["state"].items()},
        "has_uint32": int(state.get("has_uint32", 0)),
        "uinteger": int(state.get("uinteger", 0)),
    }


def _restore_rng_state(rng: np.random.Generator, blob: dict) -> None:
    state = rng.bit_generator.state
    if blob["bit_generator"] != state["bit_generator"]:
        raise ValueError(
            f"checkpoint rng is {blob['bit_generator']}, runtime uses {state['bit_generator']}"
        )
    state["state"] = {k: int(v) for k, v in blob["state"].items()}
    state["has_uint32"] = blob["has_uint32"]
    state["uinteger"] = blob["uinteger"]
    rng.bit_generator.state = state


@dataclass
class TrainResult:
    step: int
    epoch: int
    rows: list[dict] = field(repr=False)
    csv_path: Path | None
    checkpoint_paths: list[Path]
    running: dict[str, float]

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoint_paths[-1]


def _format_row(row: dict) -> str:
    return ",".join(
        (str(row[c]) if c == "step" else repr(float(row[c]))) for c in LOSS_CSV_COLUMNS
    )


def train(
    model: Model,
    dataset: list[LabeledSample],
    config: TrainConfig,
    weights: LossWeights,
    preprocess: PreprocessConfig,
    run_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Train the model on a labeled dataset.

    Labels must already live in the contiguous 0..num_identities-1 space the
    classifier was built for.  With `run_dir` set, a loss CSV and periodic
    checkpoints are written there.  `resume_from` restores weights, optimizer
    moments and both RNG streams from a training checkpoint, and the
    remaining trajectory is bit-identical to an uninterrupted run.
    """
    if config.deterministic:
        torch.set_num_threads(1)
    by_id: dict[int, int] = {}
    for s in dataset:
        by_id[s.identity] = by_id.get(s.identity, 0) + 1
    if len(by_id) < 2:
        raise ValueError("training needs at least two identities (batch-hard mining has no negatives)")
    if len(by_id) < config.batch.P:
        raise ValueError(f"dataset has {len(by_id)} identities, batch needs P={config.batch.P}")
    if max(s.identity for s in dataset) >= model.config.num_identities:
        raise ValueError(
            f"dataset labels reach {max(s.identity for s in dataset)}, classifier "
            f"width is {model.config.num_identities}; relabel to a contiguous space first"
        )

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    steps_per_epoch = config.steps_per_epoch or max(1, len(dataset) // config.batch.batch_size)

    start_epoch = 0
    global_step = 0
    if resume_from is not None:
        container = load_container(resume_from)
        load_state_arrays(
            model,
            {k[len("model.") :]: v for k, v in container.arrays.items() if k.startswith("model.")},
            where=str(resume_from),
        )
        _restore_optimizer(model, optimizer, container.arrays)
        torch.set_rng_state(torch.from_numpy(container.arrays["rng.torch"].copy()))
        _restore_rng_state(rng, container.extra["rng.numpy"])
        global_step = container.step
        start_epoch = int(container.extra["epoch"])

    run_dir = Path(run_dir) if run_dir is not None else None
    csv_path = None
    csv_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        csv_path = run_dir / ("loss.csv" if resume_from is None else "loss_resumed.csv")
        csv_fh = open(csv_path, "w")
        csv_fh.write("# schema=1\n")
        csv_fh.write(",".join(LOSS_CSV_COLUMNS) + "\n")

    rows: list[dict] = []
    checkpoint_paths: list[Path] = []
    running = {"l_class": 0.0, "l_metric": 0.0, "l_scp": 0.0, "total": 0.0}
    model.train()
    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for _ in range(steps_per_epoch):
                batch_idx = sample_pk(dataset, config.batch, rng)
                images = torch.from_numpy(
                    np.stack([preprocess_train(dataset[i].image, preprocess, rng) for i in batch_idx])
                )
                labels = torch.tensor([dataset[i].identity for i in batch_idx], dtype=torch.long)
                breakdown = batch_losses(model, images, labels, weights)
                values = breakdown.floats()
                if not all(np.isfinite(v) for v in values.values()):
                    raise TrainingDiverged(
                        f"non-finite loss at step {global_step}: {values}",
                        snapshot={
                            "step": global_step,
                            "epoch": epoch,
                            "batch_indices": list(batch_idx),
                            "batch_identities": [dataset[i].identity for i in batch_idx],
                            "losses": values,
                        },
                    )
                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()
                global_step += 1
                row = {"step": global_step, **values, "lr": lr}
                rows.append(row)
                for k in running:
                    running[k] += (values[k] - running[k]) / len(rows)
                if csv_fh is not None:
                    csv_fh.write(_format_row(row) + "\n")
            if run_dir is not None and (
                (config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0)
                or epoch + 1 == config.epochs
            ):
                ckpt = run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt"
                save_train_checkpoint(
                    ckpt, model, optimizer, rng, global_step, epoch + 1,
                    extra={"preprocess": asdict(preprocess)},
                )
                checkpoint_paths.append(ckpt)
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return TrainResult(
        step=global_step,
        epoch=config.epochs,
        rows=rows,
        csv_path=csv_path,
        checkpoint_paths=checkpoint_paths,
        running=running,
    )


@dataclass
class SmokeResult:
    passed: bool
    steps_used: int
    accuracy: float
    scp_value: float

    def __bool__(self) -> bool:
        return self.passed


def overfit_smoke(
    model: Model,
    dataset: list[LabeledSample],
    weights: LossWeights,
    preprocess: PreprocessConfig,
    max_steps: int = 500,
    lr: float = 1e-2,
    seed: int = 0,
    scp_threshold: float = 1e-2,
    check_every: int = 10,
) -> SmokeResult:
    """Can-this-learn-at-all gate: fit a tiny dataset (<= 8 identities) as one
    deterministic batch and report whether classification reaches 100% with
    the stripe/channel alignment below `scp_threshold` inside the budget."""
    ids = {s.identity for s in dataset}
    if len(ids) > 8 or any(sum(1 for s in dataset if s.identity == i) > 4 for i in ids):
        raise ValueError("overfit_smoke expects <= 8 identities with <= 4 images each")
    if len(ids) < 2:
        raise ValueError("overfit_smoke needs at least two identities")
    torch.manual_seed(seed)
    images = torch.from_numpy(np.stack([preprocess_eval(s.image, preprocess) for s in dataset]))
    labels = torch.tensor([s.identity for s in dataset], dtype=torch.long)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()

    def measure() -> tuple[float, float]:
        model.eval()
        with torch.no_grad():
            out = model(images)
            logits = out.logits_global if out.logits_global is not None else out.logits_local
            acc = float((logits.argmax(dim=1) == labels).float().mean())
            parts = out.global_feature.reshape(
                len(dataset), model.config.stripes_R, model.config.channels_C
            )
            scp = float(scp_loss(out.local_parts, parts, reduction="mean"))
        model.train()
        return acc, scp

    accuracy, scp_value = measure()
    for step in range(1, max_steps + 1):
        breakdown = batch_losses(model, images, labels, weights)
        optimizer.zero_grad()
        breakdown.total.backward()
        optimizer.step()
        if step % check_every == 0 or step == max_steps:
            accuracy, scp_value = measure()
            if accuracy == 1.0 and scp_value < scp_threshold:
                return SmokeResult(True, step, accuracy, scp_value)
    return SmokeResult(False, max_steps, accuracy, scp_value)
