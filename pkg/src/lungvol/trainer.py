"""Training harness: MSE training with patience-based early stopping, random
hyperparameter search ranked by validation MAPE, fine-tuning from a checkpoint,
and training-time image augmentation.

Epoch selection uses minimum validation MSE; cross-model selection uses minimum
validation MAPE.  Both rules are kept exactly as stated, not reconciled.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import drr
from .nnreg.checkpoint import load_checkpoint, save_checkpoint
from .nnreg.models import ModelSpec, instantiate_model, mse_loss
from .phantom import CaseRecord

OPTIMIZERS = ("sgd", "adam")
AUGMENT_KINDS = ("shift", "scale", "rotation", "intensity")

# rng stream tags per purpose, all derived from the config seed
_STREAM_SHUFFLE = 1
_STREAM_AUGMENT = 2
_STREAM_OVERSAMPLE = 3


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class SplitOverlapError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentOp:
    """One augmentation with a symmetric magnitude: shift (px), scale and
    intensity (fractions), rotation (degrees)."""

    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"augment kind must be one of {AUGMENT_KINDS}, got {self.kind!r}")
        if self.magnitude < 0:
            raise ValueError("augment magnitude must be >= 0")


DEFAULT_AUGMENT_POOL = (
    AugmentOp("shift", 6.0),
    AugmentOp("scale", 0.06),
    AugmentOp("rotation", 4.0),
    AugmentOp("intensity", 0.05),
)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "dual"
    backbone: str = "six_layer"
    input_size: int = 128
    stages: int = 6
    head: str = "pool"
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 16
    oversampling: str = "none"  # "none" | "volume-bin:K"
    augmentations: tuple[AugmentOp, ...] = ()
    max_epochs: int = 300
    patience: int = 50
    seed: int = 0
    # regression head bias start value; "label-mean" anchors it at the mean
    # training label so the net starts unbiased (ignored when fine-tuning)
    init_output_bias: float | str = "label-mean"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.max_epochs > 0 and not self.patience < self.max_epochs:
            raise ValueError("patience must be < max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        parse_oversampling(self.oversampling)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(variant=self.variant, backbone=self.backbone,
                         input_size=self.input_size, in_channels=1,
                         stages=self.stages, head=self.head)

    def to_json(self) -> str:
        d = asdict(self)
        d["augmentations"] = [asdict(op) for op in self.augmentations]
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        d["augmentations"] = tuple(AugmentOp(**op) for op in d.get("augmentations", ()))
        return cls(**d)


def parse_oversampling(spec: str) -> int:
    """Return the bin count (0 for none)."""
    if spec == "none":
        return 0
    kind, sep, k = spec.partition(":")
    if kind != "volume-bin" or not sep:
        raise ValueError(f"oversampling must be 'none' or 'volume-bin:K', got {spec!r}")
    bins = int(k)
    if bins < 1:
        raise ValueError("oversampling bin count must be >= 1")
    return bins


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """In-memory dataset: case ids, both views as (N,1,S,S) float32, labels in liters."""

    case_ids: list[str]
    frontal: np.ndarray
    lateral: np.ndarray
    labels: np.ndarray
    true_tlv: np.ndarray

    def __len__(self) -> int:
        return len(self.case_ids)

    def subset(self, indices) -> "ArrayDataset":
        idx = np.asarray(indices)
        return ArrayDataset([self.case_ids[i] for i in idx], self.frontal[idx],
                            self.lateral[idx], self.labels[idx], self.true_tlv[idx])

def load_split(manifest_path, records: list[CaseRecord], split: str | None = None) -> ArrayDataset:
    base = Path(manifest_path).parent
    rows = [r for r in records if split is None or r.split == split]
    if not rows:
        raise ValueError(f"no cases for split {split!r} in {manifest_path}")
    frontal, lateral = [], []
    for r in rows:
        frontal.append(drr.read_rimg(base / r.frontal_path).data)
        lateral.append(drr.read_rimg(base / r.lateral_path).data)
    fa = np.stack(frontal)[:, None, :, :]
    la = np.stack(lateral)[:, None, :, :]
    return ArrayDataset(
        case_ids=[r.case_id for r in rows],
        frontal=np.ascontiguousarray(fa, dtype=np.float32),
        lateral=np.ascontiguousarray(la, dtype=np.float32),
        labels=np.array([r.label_liters for r in rows], dtype=np.float64),
        true_tlv=np.array([r.true_tlv_liters for r in rows], dtype=np.float64),
    )


def check_disjoint_splits(*datasets: ArrayDataset) -> None:
    seen: set[str] = set()
    for ds in datasets:
        ids = set(ds.case_ids)
        overlap = seen & ids
        if overlap:
            raise SplitOverlapError(f"case ids shared across splits: {sorted(overlap)[:5]}")
        seen |= ids


# ---------------------------------------------------------------------------
# Augmentation (training inputs only; evaluation never augments)
# ---------------------------------------------------------------------------

def augment_image(img: np.ndarray, ops: tuple[AugmentOp, ...], rng: np.random.Generator) -> np.ndarray:
    """Apply sampled augmentations to one (S, S) image; background fills with 0."""
    if not ops:
        return img
    shift_x = shift_y = 0.0
    scale = 1.0
    theta = 0.0
    intensity = 1.0
    for op in ops:
        if op.kind == "shift":
            shift_x = rng.uniform(-op.magnitude, op.magnitude)
            shift_y = rng.uniform(-op.magnitude, op.magnitude)
        elif op.kind == "scale":
            scale = 1.0 + rng.uniform(-op.magnitude, op.magnitude)
        elif op.kind == "rotation":
            theta = math.radians(rng.uniform(-op.magnitude, op.magnitude))
        elif op.kind == "intensity":
            intensity = 1.0 + rng.uniform(-op.magnitude, op.magnitude)
    out = img
    if shift_x or shift_y or scale != 1.0 or theta:
        out = _affine_sample(out, shift_x, shift_y, scale, theta)
    if intensity != 1.0:
        out = np.clip(out * intensity, -1.0, 1.0).astype(img.dtype)
    return out


def _affine_sample(img: np.ndarray, tx: float, ty: float, scale: float, theta: float) -> np.ndarray:
    """Inverse-map bilinear resample: scale then rotate about center, then shift."""
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dx = xs - cx - tx
    dy = ys - cy - ty
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_x = (cos_t * dx + sin_t * dy) / scale + cx
    src_y = (-sin_t * dx + cos_t * dy) / scale + cy
    x0 = np.floor(src_x).astype(np.intp)
    y0 = np.floor(src_y).astype(np.intp)
    fx = src_x - x0
    fy = src_y - y0

    def sample(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(inside, vals, 0.0)

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def oversample_indices(labels: np.ndarray, bins: int, rng: np.random.Generator) -> np.ndarray:
    """Volume-bin balanced epoch indices: every case at least once, bins equalized."""
    lo, hi = float(labels.min()), float(labels.max())
    if hi <= lo:
        edges = np.array([lo - 0.5, hi + 0.5])
    else:
        edges = np.linspace(lo, hi, bins + 1)
    which = np.clip(np.digitize(labels, edges[1:-1]), 0, len(edges) - 2)
    groups = [np.flatnonzero(which == b) for b in range(len(edges) - 1)]
    groups = [g for g in groups if len(g)]
    target = max(len(g) for g in groups)
    picks = []
    for g in groups:
        picks.append(g)
        if len(g) < target:
            picks.append(rng.choice(g, size=target - len(g), replace=True))
    idx = np.concatenate(picks)
    rng.shuffle(idx)
    return idx


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class SGDMomentum:
    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> None:
        for v, (_, p) in zip(self.velocity, self.params):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for m, v, (_, p) in zip(self.m, self.v, self.params):
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def make_optimizer(config: TrainConfig, params):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate)
    return SGDMomentum(params, config.learning_rate)


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------

def early_stop_schedule(val_mses, max_epochs: int, patience: int) -> tuple[int, int]:
    """(stop_epoch, best_epoch), 1-indexed, for a hypothetical validation curve.

    Improvement means strictly lower than the running minimum; training stops
    after `patience` consecutive epochs without improvement or at max_epochs.
    """
    best = math.inf
    best_epoch = 0
    since_best = 0
    epoch = 0
    for epoch, v in enumerate(val_mses[:max_epochs], start=1):
        if v < best:
            best = v
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            return epoch, best_epoch
    return epoch, best_epoch


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: list[tuple[int, float, float]]  # (epoch, train_mse, val_mse)
    best_epoch: int
    stop_epoch: int
    best_val_mse: float
    config: TrainConfig


def _model_inputs(ds: ArrayDataset, idx, variant: str):
    if variant == "frontal":
        return ds.frontal[idx]
    if variant == "lateral":
        return ds.lateral[idx]
    return ds.frontal[idx], ds.lateral[idx]


def predict_dataset(model, ds: ArrayDataset, batch_size: int = 32) -> np.ndarray:
    """Eval-mode predictions in liters, in dataset order.  Never augments."""
    variant = model.spec.variant
    out = np.empty(len(ds), dtype=np.float64)
    # single-threaded BLAS: the two vendored OpenBLAS pools otherwise contend
    with threadpool_limits(limits=1):
        for start in range(0, len(ds), batch_size):
            idx = slice(start, min(start + batch_size, len(ds)))
            out[idx] = model.predict(_model_inputs(ds, idx, variant))
    return out


def dataset_mse(model, ds: ArrayDataset, batch_size: int = 32) -> float:
    preds = predict_dataset(model, ds, batch_size)
    return float(np.mean((preds - ds.labels) ** 2))


def _augment_batch(batch: np.ndarray, ops, rng) -> np.ndarray:
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        out[i, 0] = augment_image(batch[i, 0], ops, rng)
    return out


def train(
    config: TrainConfig,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    out_dir=None,
    initial_model=None,
    verbose: bool = False,
) -> TrainResult:
    """Run the full training protocol and return the model restored to its best epoch."""
    check_disjoint_splits(train_set, val_set)
    spec = config.model_spec()
    if initial_model is not None:
        if initial_model.spec != spec:
            raise ValueError(f"architecture mismatch: checkpoint {initial_model.spec} vs config {spec}")
        model = initial_model
    else:
        model = instantiate_model(spec, seed=config.seed)
        bias = config.init_output_bias
        if bias == "label-mean":
            model.set_output_bias(float(train_set.labels.mean()))
        elif isinstance(bias, (int, float)):
            model.set_output_bias(float(bias))
        else:
            raise ValueError(f"invalid init_output_bias {bias!r}")

    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _STREAM_SHUFFLE)))
    augment_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _STREAM_AUGMENT)))
    oversample_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _STREAM_OVERSAMPLE)))

    optimizer = make_optimizer(config, model.parameters())
    bins = parse_oversampling(config.oversampling)
    labels = train_set.labels
    targets_all = labels.astype(np.float32)

    history: list[tuple[int, float, float]] = []
    best_epoch = 0
    best_state = {name: arr.copy() for name, arr in model.state_records()}
    if initial_model is not None and config.max_epochs > 0 and len(val_set):
        # fine-tuning treats the incoming checkpoint as the epoch-0 candidate,
        # so epoch selection never returns something worse than its input
        best_val = dataset_mse(model, val_set, batch_size=max(config.batch_size, 32))
    else:
        best_val = math.inf
    since_best = 0
    stop_epoch = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        if bins:
            order = oversample_indices(labels, bins, oversample_rng)
        else:
            order = shuffle_rng.permutation(len(train_set))
        sq_sum = 0.0
        n_seen = 0
        with threadpool_limits(limits=1):
            for step, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                inputs = _model_inputs(train_set, idx, config.variant)
                if config.augmentations:
                    if config.variant == "dual":
                        inputs = (_augment_batch(inputs[0], config.augmentations, augment_rng),
                                  _augment_batch(inputs[1], config.augmentations, augment_rng))
                    else:
                        inputs = _augment_batch(inputs, config.augmentations, augment_rng)
                target = targets_all[idx][:, None]
                model.zero_grad()
                pred = model.forward(inputs, training=True)
                loss, grad = mse_loss(pred, target)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch, step, loss)
                model.backward(grad)
                optimizer.step()
                sq_sum += loss * len(idx)
                n_seen += len(idx)
        train_mse = sq_sum / n_seen
        val_mse = dataset_mse(model, val_set, batch_size=max(config.batch_size, 32))
        history.append((epoch, train_mse, val_mse))
        if verbose:
            print(f"epoch {epoch:3d}  train_mse {train_mse:.6f}  val_mse {val_mse:.6f}  "
                  f"({time.time() - t0:.1f}s)", flush=True)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = {name: arr.copy() for name, arr in model.state_records()}
            since_best = 0
        else:
            since_best += 1
        stop_epoch = epoch
        if since_best >= config.patience:
            break

    model.load_state_records(best_state)
    result = TrainResult(model=model, history=history, best_epoch=best_epoch,
                         stop_epoch=stop_epoch, best_val_mse=best_val, config=config)
    if out_dir is not None:
        _write_run_dir(Path(out_dir), result)
    return result


def _write_run_dir(out: Path, result: TrainResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(result.config.to_json() + "\n")
    with open(out / "history.csv", "w", newline="") as f:
        f.write("epoch,train_mse,val_mse\n")
        for epoch, tr, va in result.history:
            f.write(f"{epoch},{tr:.8f},{va:.8f}\n")
    save_checkpoint(out / "best.rnnckpt", result.model)


def finetune(
    checkpoint_path,
    config: TrainConfig,
    small_labeled_set: ArrayDataset,
    val_set: ArrayDataset,
    out_dir=None,
    verbose: bool = False,
) -> TrainResult:
    """Same protocol as train, initialized from a checkpoint; all layers trainable."""
    spec, records = load_checkpoint(checkpoint_path)
    if spec != config.model_spec():
        raise ValueError(f"architecture mismatch: checkpoint {spec} vs config {config.model_spec()}")
    model = instantiate_model(spec, seed=config.seed)
    model.load_state_records(records)
    return train(config, small_labeled_set, val_set, out_dir=out_dir,
                 initial_model=model, verbose=verbose)


# ---------------------------------------------------------------------------
# Random hyperparameter search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HyperDraw:
    """Search space; each draw samples every field independently."""

    n_draws: int
    seed: int
    lr_log10_range: tuple[float, float] = (-5.0, -2.0)
    optimizers: tuple[str, ...] = ("sgd", "adam")
    batch_sizes: tuple[int, ...] = (8, 16, 32)
    oversampling_options: tuple[str, ...] = ("none", "volume-bin:5")
    augment_pool: tuple[AugmentOp, ...] = DEFAULT_AUGMENT_POOL

    def __post_init__(self):
        if self.n_draws < 1:
            raise ValueError("need at least one draw")
        if not (self.optimizers and self.batch_sizes and self.oversampling_options):
            raise ValueError("search ranges must be non-empty")


def sample_config(draws: HyperDraw, draw_index: int, base: TrainConfig) -> TrainConfig:
    """Deterministic config for one draw of the master seed stream."""
    rng = np.random.default_rng(np.random.SeedSequence((draws.seed, draw_index)))
    lo, hi = draws.lr_log10_range
    lr = float(10.0 ** rng.uniform(lo, hi))
    optimizer = draws.optimizers[rng.integers(len(draws.optimizers))]
    batch = int(draws.batch_sizes[rng.integers(len(draws.batch_sizes))])
    oversampling = draws.oversampling_options[rng.integers(len(draws.oversampling_options))]
    chosen = tuple(op for op in draws.augment_pool if rng.uniform() < 0.5)
    train_seed = int(np.random.SeedSequence((draws.seed, draw_index, 1)).generate_state(1)[0])
    return replace(base, learning_rate=lr, optimizer=optimizer, batch_size=batch,
                   oversampling=oversampling, augmentations=chosen, seed=train_seed)


@dataclass
class SearchResult:
    draw_index: int
    config: TrainConfig
    val_mape: float
    val_mse: float
    status: str
    result: TrainResult | None = None


def _run_draw(i: int, draws: HyperDraw, base: TrainConfig,
              train_set: ArrayDataset, val_set: ArrayDataset,
              train_fn, verbose: bool) -> SearchResult:
    config = sample_config(draws, i, base)
    try:
        tr = train_fn(config, train_set, val_set, verbose=verbose)
        preds = predict_dataset(tr.model, val_set)
        val_mape = float(np.mean(np.abs(preds - val_set.labels) / val_set.labels) * 100.0)
        return SearchResult(i, config, val_mape, tr.best_val_mse, "ok", tr)
    except Exception as e:  # noqa: BLE001 - a failed draw must not abort the search
        return SearchResult(i, config, math.inf, math.inf, f"failed: {e}", None)


def random_search(
    draws: HyperDraw,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    base: TrainConfig,
    out_dir=None,
    train_fn=train,
    verbose: bool = False,
    jobs: int = 1,
) -> list[SearchResult]:
    """Train every draw and rank by validation MAPE, then MSE, then draw index.

    Draws use isolated RNG streams derived from (master seed, draw index), so
    results are identical for any `jobs`.  Failed draws are kept, ranked last,
    with the failure reason in `status`.
    """
    if jobs > 1:
        from multiprocessing import get_context
        with get_context("fork").Pool(processes=jobs) as pool:
            results = pool.starmap(
                _run_draw,
                [(i, draws, base, train_set, val_set, train_fn, verbose)
                 for i in range(draws.n_draws)],
                chunksize=1,
            )
    else:
        results = [_run_draw(i, draws, base, train_set, val_set, train_fn, verbose)
                   for i in range(draws.n_draws)]
    ranked = sorted(results, key=lambda r: (r.val_mape, r.val_mse, r.draw_index))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "search_ranking.csv", "w", newline="") as f:
            f.write("draw,val_mape,val_mse,status\n")
            for r in ranked:
                f.write(f"{r.draw_index},{r.val_mape:.6f},{r.val_mse:.8f},{r.status}\n")
        best = ranked[0]
        if best.result is not None:
            _write_run_dir(out / f"draw_{best.draw_index:03d}", best.result)
    return ranked
