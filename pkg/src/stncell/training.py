"""Three-stage STN training, the baseline CNN, evaluation and cross-validation.

Stage 1 fits the classifier on centred focus crops, stage 2 fits the
localizer to the known crop offsets (labels are never touched), stage 3
refines everything through the full STN with the combined loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Adam, Tensor, no_grad
from .config import TrainConfig
from .data import Sample, augment_dataset, balance_classes, kfold_split, validate_offsets
from .errors import ContractError
from .losses import combined_loss, cross_entropy, localization_loss, one_hot
from .metrics import MetricsReport, predict_labels
from .networks import (
    ModelParams,
    baseline_forward,
    build_baseline,
    build_classifier,
    build_localizer,
    classifier_forward,
    localizer_forward,
    stn_forward,
)
from .stn import CropGeometry, crop, ground_truth_thetas, random_offset_crop, spatial_transform

STN_MODEL = "CNN-STN"
BASELINE_MODEL = "CNN baseline"
BASELINE_CENTERED_MODEL = "CNN baseline (centered)"

Logger = Optional[Callable[[str], None]]


@dataclass
class StageResult:
    params: ModelParams
    trace: List[float]
    seconds: float
    extra: Dict[str, List[float]] = field(default_factory=dict)


def _say(log: Logger, message: str) -> None:
    if log is not None:
        log(message)


def patch_array(samples: Sequence[Sample], size: int, offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """Float patches ``[N, 3, size, size]`` cut around each cell with crop-origin ``offsets``.

    Reads only the geometry of each sample (context, centre, offset), never its label.
    """
    out = np.empty((len(samples), 3, size, size))
    half = size // 2
    for i, s in enumerate(samples):
        dx, dy = (s.dx, s.dy) if offsets is None else offsets[i]
        cx, cy = s.center
        out[i] = crop(s.context, cx - half + int(dx), cy - half + int(dy), size)
    return out / 255.0


def _redraw_offsets(samples: Sequence[Sample], geom: CropGeometry, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((len(samples), 2), dtype=np.int64)
    for i, s in enumerate(samples):
        # The returned patch is a view, so this only draws the offset.
        _, out[i, 0], out[i, 1] = random_offset_crop(s.context, s.center, geom, rng=rng)
    return out


def _epoch_offsets(samples, geom, rng, epoch: int, cfg: TrainConfig) -> np.ndarray:
    if epoch > 0 and cfg.reoffset_each_epoch:
        return _redraw_offsets(samples, geom, rng)
    return np.array([[s.dx, s.dy] for s in samples], dtype=np.int64)


def _fit(
    trainable: List[Tensor],
    everything: ModelParams,
    n: int,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    step_loss: Callable[[np.ndarray, int], Tensor],
    log: Logger,
    name: str,
) -> List[float]:
    """Mini-batch Adam over ``trainable``; returns the mean loss of every epoch."""
    opt = Adam(trainable, lr=lr)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            everything.zero_grad()
            loss = step_loss(idx, epoch)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.append(total / n)
        _say(log, f"{name} epoch {epoch + 1}/{epochs} loss {trace[-1]:.6f}")
        if not np.isfinite(trace[-1]):
            raise ContractError(f"{name}: loss became non-finite at epoch {epoch + 1}")
    everything.zero_grad()
    return trace


def _frozen(params: ModelParams, keep: Sequence[str]):
    """Context helper: disable gradients for every group not in ``keep``."""

    class _Freeze:
        def __enter__(self):
            self.saved = {id(t): t.requires_grad for t in params.tensors()}
            for g in params.groups:
                if g not in keep:
                    for t in params[g].values():
                        t.requires_grad = False
            return params

        def __exit__(self, *exc):
            for t in params.tensors():
                t.requires_grad = self.saved[id(t)]
            return False

    return _Freeze()


def init_stn(cfg: TrainConfig, seed: int = 0) -> ModelParams:
    """Fresh localizer + classifier for ``cfg`` with independent seeds derived from ``seed``."""
    a, b = np.random.SeedSequence(seed).spawn(2)
    arch = cfg.architecture
    geom = cfg.geometry
    loc = build_localizer(geom, int(a.generate_state(1)[0]), arch.localizer)
    cla = build_classifier(geom, int(b.generate_state(1)[0]), arch.classifier)
    return loc.merge(cla)


def init_baseline(cfg: TrainConfig, seed: int = 0) -> ModelParams:
    return build_baseline(cfg.geometry, seed, cfg.architecture.baseline)


def focus_crops(samples: Sequence[Sample], geom: CropGeometry) -> np.ndarray:
    """Centred ``d_c`` views as the STN would sample them with the ground-truth transform."""
    out = np.empty((len(samples), 3, geom.d_c, geom.d_c))
    theta = ground_truth_thetas(geom, np.zeros((1, 2)))
    with no_grad():
        for start in range(0, len(samples), 256):
            patches = patch_array(samples[start : start + 256], geom.d_i)
            batch_theta = np.repeat(theta, len(patches), axis=0)
            out[start : start + len(patches)] = spatial_transform(patches, batch_theta, geom.d_c, geom.d_c).values
    return out


def stage1_train_classifier(
    cfg: TrainConfig, params: ModelParams, samples: Sequence[Sample], seed: int = 0, log: Logger = None
) -> StageResult:
    """Fit the classifier on centred focus crops with cross-entropy; the localizer is untouched."""
    if not samples:
        raise ContractError("stage 1 needs at least one training sample")
    if not all(s.centered for s in samples):
        raise ContractError("stage 1 requires centred samples (all offsets zero)")
    geom = cfg.geometry
    start = time.perf_counter()
    crops = focus_crops(samples, geom)
    targets = one_hot([s.label for s in samples])
    rng = np.random.default_rng(seed)

    def step(idx, epoch):
        return cross_entropy(classifier_forward(params, crops[idx]), targets[idx])

    with _frozen(params, ["classifier"]):
        trace = _fit(
            params.tensors("classifier"), params, len(samples), cfg.epochs("stage1"), cfg.lr("stage1"),
            cfg.batch_size, rng, step, log, "stage1",
        )
    return StageResult(params, trace, time.perf_counter() - start)


def stage2_train_localizer(
    cfg: TrainConfig, params: ModelParams, samples: Sequence[Sample], seed: int = 0, log: Logger = None
) -> StageResult:
    """Fit the localizer to ground-truth transforms from known offsets; labels are never read."""
    if not samples:
        raise ContractError("stage 2 needs at least one training sample")
    geom = cfg.geometry
    validate_offsets(samples, geom)
    if all(s.centered for s in samples):
        raise ContractError("stage 2 requires offset samples; every offset is zero")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    state = {"epoch": -1, "offsets": None}

    def step(idx, epoch):
        if state["epoch"] != epoch:
            state["epoch"] = epoch
            state["offsets"] = _epoch_offsets(samples, geom, rng, epoch, cfg)
        batch = [samples[i] for i in idx]
        offs = state["offsets"][idx]
        theta_hat = localizer_forward(params, patch_array(batch, geom.d_i, offs))
        return localization_loss(theta_hat, ground_truth_thetas(geom, offs))

    with _frozen(params, ["localizer"]):
        trace = _fit(
            params.tensors("localizer"), params, len(samples), cfg.epochs("stage2"), cfg.lr("stage2"),
            cfg.batch_size, rng, step, log, "stage2",
        )
    return StageResult(params, trace, time.perf_counter() - start)


def stage3_joint_refine(
    cfg: TrainConfig, params: ModelParams, samples: Sequence[Sample], seed: int = 0, log: Logger = None
) -> StageResult:
    """Train every parameter end to end through the STN with the combined loss."""
    if not samples:
        raise ContractError("stage 3 needs at least one training sample")
    geom = cfg.geometry
    validate_offsets(samples, geom)
    weights = cfg.loss_weights
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    targets = one_hot([s.label for s in samples])
    state = {"epoch": -1, "offsets": None}
    parts = {"loc": [], "cla": []}
    sums = {"loc": 0.0, "cla": 0.0}

    def step(idx, epoch):
        if state["epoch"] != epoch:
            if state["epoch"] >= 0:
                parts["loc"].append(sums["loc"] / len(samples))
                parts["cla"].append(sums["cla"] / len(samples))
            sums["loc"] = sums["cla"] = 0.0
            state["epoch"] = epoch
            state["offsets"] = _epoch_offsets(samples, geom, rng, epoch, cfg)
        batch = [samples[i] for i in idx]
        offs = state["offsets"][idx]
        theta_hat, probs, _ = stn_forward(params, patch_array(batch, geom.d_i, offs), geom)
        l_loc = localization_loss(theta_hat, ground_truth_thetas(geom, offs))
        l_cla = cross_entropy(probs, targets[idx])
        sums["loc"] += l_loc.item() * len(idx)
        sums["cla"] += l_cla.item() * len(idx)
        return combined_loss(l_loc, l_cla, weights)

    trace = _fit(
        params.tensors(), params, len(samples), cfg.epochs("stage3"), cfg.lr("stage3"),
        cfg.batch_size, rng, step, log, "stage3",
    )
    parts["loc"].append(sums["loc"] / len(samples))
    parts["cla"].append(sums["cla"] / len(samples))
    return StageResult(params, trace, time.perf_counter() - start, {"l_loc": parts["loc"], "l_cla": parts["cla"]})


def train_baseline(
    cfg: TrainConfig, params: ModelParams, samples: Sequence[Sample], seed: int = 0, log: Logger = None
) -> StageResult:
    """Fit the plain CNN with cross-entropy on full ``d_i`` patches at each sample's offset."""
    if not samples:
        raise ContractError("baseline training needs at least one training sample")
    geom = cfg.geometry
    validate_offsets(samples, geom)
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    targets = one_hot([s.label for s in samples])
    moving = not all(s.centered for s in samples)
    state = {"epoch": -1, "offsets": None}

    def step(idx, epoch):
        if state["epoch"] != epoch:
            state["epoch"] = epoch
            if moving:
                state["offsets"] = _epoch_offsets(samples, geom, rng, epoch, cfg)
            else:
                state["offsets"] = np.zeros((len(samples), 2), dtype=np.int64)
        batch = [samples[i] for i in idx]
        probs = baseline_forward(params, patch_array(batch, geom.d_i, state["offsets"][idx]))
        return cross_entropy(probs, targets[idx])

    trace = _fit(
        params.tensors(), params, len(samples), cfg.epochs("baseline"), cfg.lr("baseline"),
        cfg.batch_size, rng, step, log, "baseline",
    )
    return StageResult(params, trace, time.perf_counter() - start)


# -- inference -------------------------------------------------------------------


def predict_proba(params: ModelParams, samples: Sequence[Sample], geom: CropGeometry, batch_size: int = 64) -> np.ndarray:
    """Class probabilities for each sample's patch at its own offset.

    Uses the full STN when ``params`` holds a localizer and classifier,
    otherwise the baseline.
    """
    if not samples:
        raise ContractError("cannot predict on an empty sample set")
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            x = patch_array(samples[start : start + batch_size], geom.d_i)
            if "localizer" in params:
                probs = stn_forward(params, x, geom)[1]
            else:
                probs = baseline_forward(params, x)
            out.append(probs.values)
    return np.concatenate(out)


def predict_thetas(params: ModelParams, samples: Sequence[Sample], geom: CropGeometry, batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            out.append(localizer_forward(params, patch_array(samples[start : start + batch_size], geom.d_i)).values)
    return np.concatenate(out)


def evaluate(params: ModelParams, samples: Sequence[Sample], geom: CropGeometry = CropGeometry()):
    """Arg-max predictions (ties to the lowest class) and their :class:`MetricsReport`."""
    if not samples:
        raise ContractError("cannot evaluate on an empty test set")
    pred = predict_labels(predict_proba(params, samples, geom))
    truth = np.array([s.label for s in samples])
    return MetricsReport.from_predictions(truth, pred), pred


def translation_errors(params: ModelParams, samples: Sequence[Sample], geom: CropGeometry) -> np.ndarray:
    """``|theta_hat - theta|`` of the translation column, shape ``[N, 2]``."""
    theta_hat = predict_thetas(params, samples, geom)
    gt = ground_truth_thetas(geom, np.array([[s.dx, s.dy] for s in samples], dtype=np.float64))
    return np.abs(theta_hat[:, :, 2] - gt[:, :, 2])


# -- cross-validation ----------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    train_size: int
    test_indices: np.ndarray
    reports: Dict[str, MetricsReport]
    predictions: Dict[str, np.ndarray]
    seconds: Dict[str, float]


@dataclass
class CVResult:
    ensemble: Dict[str, MetricsReport]
    folds: List[FoldResult]
    truth: np.ndarray
    predictions: Dict[str, np.ndarray]
    models: List[Dict[str, ModelParams]] = field(default_factory=list, repr=False)


def _seed_of(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def prepare_training_set(cfg: TrainConfig, samples: Sequence[Sample], rng: np.random.Generator) -> List[Sample]:
    """Balance (undersample) then augment with one rotated copy each; offsets reset to zero."""
    geom = cfg.geometry
    out = [replace(s, dx=0, dy=0) for s in samples]
    if cfg.balance:
        out = balance_classes(out, rng)
    if cfg.augment:
        out = augment_dataset(out, geom, rng)
    return out


def with_offsets(samples: Sequence[Sample], geom: CropGeometry, rng: np.random.Generator) -> List[Sample]:
    out = []
    for s in samples:
        _, dx, dy = random_offset_crop(s.context, s.center, geom, rng=rng)
        out.append(replace(s, dx=dx, dy=dy))
    return out


def train_stn(cfg: TrainConfig, train: Sequence[Sample], seed: int, log: Logger = None):
    """All three stages on a prepared (centred) training set. Returns params and stage results."""
    geom = cfg.geometry
    s_init, s1, s2, s3, s_off = np.random.SeedSequence(seed).spawn(5)
    params = init_stn(cfg, _seed_of(s_init))
    offset_rng = np.random.default_rng(s_off)
    r1 = stage1_train_classifier(cfg, params, train, _seed_of(s1), log)
    shifted = with_offsets(train, geom, offset_rng)
    r2 = stage2_train_localizer(cfg, params, shifted, _seed_of(s2), log)
    r3 = stage3_joint_refine(cfg, params, shifted, _seed_of(s3), log)
    return params, {"stage1": r1, "stage2": r2, "stage3": r3}


def train_baseline_model(cfg: TrainConfig, train: Sequence[Sample], seed: int, log: Logger = None):
    s_init, s_fit, s_off = np.random.SeedSequence(seed).spawn(3)
    params = init_baseline(cfg, _seed_of(s_init))
    shifted = with_offsets(train, cfg.geometry, np.random.default_rng(s_off))
    return params, train_baseline(cfg, params, shifted, _seed_of(s_fit), log)


def cross_validate(
    cfg: TrainConfig,
    samples: Sequence[Sample],
    log: Logger = None,
    keep_models: bool = False,
    include_baseline: bool = True,
) -> CVResult:
    """k-fold CV of the CNN-STN and the baseline; metrics on the concatenated test predictions.

    Each fold balances and augments its training part, trains every model
    from seeds derived from ``cfg.seed``, and predicts its test part at fixed
    random offsets.  The baseline is also scored on centred test patches.
    """
    if cfg.folds < 2:
        raise ContractError("cross-validation needs at least 2 folds")
    geom = cfg.geometry
    master = np.random.SeedSequence(cfg.seed)
    split_seq, *fold_seqs = master.spawn(cfg.folds + 1)
    plan = kfold_split(len(samples), cfg.folds, _seed_of(split_seq))
    truth = np.array([s.label for s in samples])
    models = [STN_MODEL] + ([BASELINE_MODEL, BASELINE_CENTERED_MODEL] if include_baseline else [])
    preds = {m: np.full(len(samples), -1) for m in models}
    folds: List[FoldResult] = []
    kept = []

    for i, seq in enumerate(fold_seqs):
        s_prep, s_stn, s_base, s_test = seq.spawn(4)
        train_idx, test_idx = plan.train_indices(i), plan.test_indices(i)
        train = prepare_training_set(cfg, [samples[j] for j in train_idx], np.random.default_rng(s_prep))
        centered_test = [replace(samples[j], dx=0, dy=0) for j in test_idx]
        test = with_offsets(centered_test, geom, np.random.default_rng(s_test))
        _say(log, f"fold {i + 1}/{cfg.folds}: {len(train)} training samples, {len(test)} test samples")

        seconds = {}
        t0 = time.perf_counter()
        stn_params, _ = train_stn(cfg, train, _seed_of(s_stn), log)
        seconds[STN_MODEL] = time.perf_counter() - t0
        fold_models = {STN_MODEL: stn_params}
        fold_preds = {STN_MODEL: evaluate(stn_params, test, geom)[1]}
        if include_baseline:
            t0 = time.perf_counter()
            base_params, _ = train_baseline_model(cfg, train, _seed_of(s_base), log)
            seconds[BASELINE_MODEL] = time.perf_counter() - t0
            fold_models[BASELINE_MODEL] = base_params
            fold_preds[BASELINE_MODEL] = evaluate(base_params, test, geom)[1]
            fold_preds[BASELINE_CENTERED_MODEL] = evaluate(base_params, centered_test, geom)[1]

        reports = {}
        for m, p in fold_preds.items():
            preds[m][test_idx] = p
            reports[m] = MetricsReport.from_predictions(truth[test_idx], p)
            _say(log, f"fold {i + 1} {m}: accuracy {reports[m].accuracy:.4f}")
        folds.append(FoldResult(i, len(train), test_idx, reports, fold_preds, seconds))
        if keep_models:
            kept.append(fold_models)

    ensemble = {m: MetricsReport.from_predictions(truth, preds[m]) for m in models}
    return CVResult(ensemble, folds, truth, preds, kept)
