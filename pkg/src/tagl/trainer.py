"""Toy per-pixel linear predictor and training loop for paired BG/SG slices.

Each pixel is described by 13 features: normalized intensity, contralateral
intensity difference (mirrored value minus the value here), a 10-channel
territory one-hot, and a constant bias. A shared F x C weight matrix maps
features to 11-class logits on both levels. Training minimizes
seg(BG) + seg(SG) + lam * gated_loss(infarct maps), averaged over the batch,
with gradients assembled analytically through the softmax and the linear
head. The best epoch is selected by validation soft Dice.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .aspects import NUM_CLASSES, TERRITORIES, AspectsResult, aspects_score
from .gated import TaglConfig, tagl_arrays
from .gridmap import (
    Image,
    LabelMap,
    LogitStack,
    ProbMap,
    ProbStack,
    ValidationError,
    softmax_channels,
)
from .losses import SegLossSpec, multiclass_dice_arrays, softmax_vjp
from .metrics import EvalReport, bg_sg_consistency, build_report, confusion
from .phantom import PairedCase, SplitDataset

NUM_FEATURES = 13
FEAT_INTENSITY = 0
FEAT_CONTRA = 1
FEAT_ONEHOT_BASE = 2  # territory id t -> channel 1 + t
FEAT_BIAS = 12

BACKGROUND_CLASS = 0


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass(frozen=True)
class LinearHead:
    """Per-pixel linear classifier; ``cd_scale`` multiplies the contralateral
    difference channel and is only updated when the trainer learns it."""

    weights: np.ndarray = field(repr=False)
    cd_scale: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (NUM_FEATURES, NUM_CLASSES):
            raise ValidationError(f"weights must have shape {(NUM_FEATURES, NUM_CLASSES)}, got {w.shape}")
        if not np.isfinite(w).all() or not np.isfinite(self.cd_scale):
            raise ValidationError("head parameters must be finite")
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls) -> "LinearHead":
        return cls(np.zeros((NUM_FEATURES, NUM_CLASSES)))


@dataclass(frozen=True)
class TrainConfig:
    seg_loss: SegLossSpec = SegLossSpec("CE")
    tagl: TaglConfig = TaglConfig()
    epochs: int = 50
    learning_rate: float = 0.05
    optimizer: str = "ADAM"
    batch: int = 8
    seed: int = 0
    detach_bg: bool = False
    learn_cd_scale: bool = False
    n_train: int = 400
    n_val: int = 100
    n_test: int = 100

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise ValidationError("learning_rate must be >= 0")
        if self.optimizer not in ("SGD", "ADAM"):
            raise ValidationError(f"optimizer must be SGD or ADAM, got {self.optimizer!r}")
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")
        if not self.seg_loss.takes_logits:
            raise ValidationError(
                f"training is multi-class; seg_loss kind must be CE or CE_DICE, got {self.seg_loss.kind}"
            )


@dataclass(frozen=True)
class CheckpointRecord:
    epoch: int
    head: LinearHead
    val_mean_dice: float
    val_consistency: float


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_total: float
    train_seg: float
    train_tagl: float
    val_soft_dice: float
    val_consistency: float


def _normalize_intensity(img: np.ndarray) -> np.ndarray:
    """Per-slice z-score; invariant to constant intensity offsets. A
    (near-)constant slice maps to zero rather than amplified roundoff."""
    sd = img.std()
    if sd < 1e-9:
        return np.zeros_like(img)
    return (img - img.mean()) / sd


_BASE_CACHE: dict[int, tuple[object, np.ndarray]] = {}


def _base_feature_rows(atlas) -> np.ndarray:
    """Constant feature channels (one-hots + bias) for one level, flattened.

    Cached per atlas instance; the cache keeps a strong reference so the id
    key stays valid.
    """
    key = id(atlas)
    hit = _BASE_CACHE.get(key)
    if hit is not None and hit[0] is atlas:
        return hit[1]
    p = atlas.shape.npixels
    base = np.zeros((NUM_FEATURES, p))
    for t in TERRITORIES:
        if t.level == atlas.level:
            base[FEAT_ONEHOT_BASE - 1 + t.id] = atlas.mask(t.id).values.reshape(p)
    base[FEAT_BIAS] = 1.0
    if len(_BASE_CACHE) >= 16:
        _BASE_CACHE.clear()
    _BASE_CACHE[key] = (atlas, base)
    return base


def _fill_features(out: np.ndarray, image: Image, atlas) -> None:
    """Write one level's features into a preallocated (F, npixels) block."""
    np.copyto(out, _base_feature_rows(atlas))
    norm = _normalize_intensity(image.values)
    out[FEAT_INTENSITY] = norm.reshape(-1)
    out[FEAT_CONTRA] = (norm[:, ::-1] - norm).reshape(-1)


def extract_features(image: Image, atlas) -> np.ndarray:
    """Deterministic 13-channel per-pixel feature field for one level:
    z-scored intensity, contralateral difference of the z-scored intensity,
    territory one-hots (zero outside masks), and a constant bias."""
    h, w = image.values.shape
    feats = np.empty((NUM_FEATURES, h * w))
    _fill_features(feats, image, atlas)
    return feats.reshape(NUM_FEATURES, h, w)


def forward(head: LinearHead, features: np.ndarray) -> LogitStack:
    """Per-pixel logits W^T x; linear in the features."""
    if features.shape[0] != NUM_FEATURES:
        raise ValidationError(f"expected {NUM_FEATURES} feature channels, got {features.shape[0]}")
    x = features.copy()
    x[FEAT_CONTRA] *= head.cd_scale
    logits = np.tensordot(head.weights, x, axes=([0], [0]))
    return LogitStack.from_array(logits)


class Optimizer:
    """SGD or Adam over the head parameters, with persistent state."""

    def __init__(self, cfg: TrainConfig):
        self.kind = cfg.optimizer
        self.lr = cfg.learning_rate
        self.learn_cd_scale = cfg.learn_cd_scale
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m_w = np.zeros((NUM_FEATURES, NUM_CLASSES))
        self.v_w = np.zeros((NUM_FEATURES, NUM_CLASSES))
        self.m_a = 0.0
        self.v_a = 0.0

    def step(self, head: LinearHead, grad_w: np.ndarray, grad_a: float) -> LinearHead:
        if self.kind == "SGD":
            w = head.weights - self.lr * grad_w
            a = head.cd_scale - self.lr * grad_a if self.learn_cd_scale else head.cd_scale
            return LinearHead(w, a)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        self.m_w = self.beta1 * self.m_w + (1.0 - self.beta1) * grad_w
        self.v_w = self.beta2 * self.v_w + (1.0 - self.beta2) * grad_w**2
        w = head.weights - self.lr * (self.m_w / c1) / (np.sqrt(self.v_w / c2) + self.eps)
        a = head.cd_scale
        if self.learn_cd_scale:
            self.m_a = self.beta1 * self.m_a + (1.0 - self.beta1) * grad_a
            self.v_a = self.beta2 * self.v_a + (1.0 - self.beta2) * grad_a**2
            a = head.cd_scale - self.lr * (self.m_a / c1) / (np.sqrt(self.v_a / c2) + self.eps)
        return LinearHead(w, a)


_SCRATCH: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _workspace(nslices: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Reusable (features, logits) buffers; avoids refaulting ~50 MB per step."""
    key = (nslices, p)
    if key not in _SCRATCH:
        if len(_SCRATCH) >= 4:
            _SCRATCH.clear()
        _SCRATCH[key] = (
            np.empty((NUM_FEATURES, nslices, p)),
            np.empty((NUM_CLASSES, nslices, p)),
        )
    return _SCRATCH[key]


def batch_objective(
    head: LinearHead, batch: list[PairedCase], cfg: TrainConfig
) -> tuple[float, float, float, np.ndarray, float, list[float]]:
    """Loss and analytic gradients of the batch objective.

    Returns (total, seg, tagl, grad_weights, grad_cd_scale, per_case_totals).
    The objective is the mean over cases of seg(BG) + seg(SG) + lam * TA.
    """
    nb = len(batch)
    if nb == 0:
        raise ValidationError("empty batch")
    shape = batch[0].bg.image.shape
    p = shape.npixels
    nslices = 2 * nb

    feats, z = _workspace(nslices, p)
    labels = np.empty((nslices, p), dtype=np.int64)
    for b, case in enumerate(batch):
        if case.bg.image.shape != shape or case.sg.image.shape != shape:
            raise ValidationError(f"case {case.case_id}: inconsistent grid shape in batch")
        for j, sl in enumerate((case.bg, case.sg)):
            _fill_features(feats[:, 2 * b + j, :], sl.image, sl.atlas)
            labels[2 * b + j] = sl.labels.values.reshape(p)

    cd_raw = feats[FEAT_CONTRA].copy() if cfg.learn_cd_scale else None
    if head.cd_scale != 1.0:
        feats[FEAT_CONTRA] *= head.cd_scale
    x = feats.reshape(NUM_FEATURES, nslices * p)
    np.matmul(head.weights.T, x, out=z.reshape(NUM_CLASSES, nslices * p))
    z = z.reshape(NUM_CLASSES, nslices, p)

    cols = np.arange(p)
    rows = np.arange(nslices)[:, None]
    z_target = z[labels, rows, cols]
    zmax = z.max(axis=0)
    np.subtract(z, zmax, out=z)
    np.exp(z, out=z)  # z now holds exp(z - zmax)
    sez = z.sum(axis=0)
    ce_per_slice = -((z_target - zmax) - np.log(sez)).mean(axis=1)

    seg_per_slice = ce_per_slice.copy()
    mix = 1.0
    dice_dz = None
    if cfg.seg_loss.kind == "CE_DICE":
        mix = cfg.seg_loss.bce_dice_mix
        seg_per_slice *= mix
        dice_dz = np.empty((NUM_CLASSES, nslices, p))
        for s in range(nslices):
            probs_s = z[:, s, :] / sez[s]
            d_l, d_gp = multiclass_dice_arrays(probs_s, labels[s], cfg.seg_loss.dice_smoothing)
            seg_per_slice[s] += (1.0 - mix) * d_l
            dice_dz[:, s, :] = (1.0 - mix) / nb * softmax_vjp(probs_s, d_gp)

    # dZ = softmax * coeff - deltas, assembled in place on the exp buffer:
    # the CE part contributes mix/(p*nb) to coeff everywhere, the gated-loss
    # bridge adds u*p0 per slice (p_inf = 1 - softmax[0]; dL/dz_k =
    # u*p0*(p_k - [k==0])); dividing coeff by sez folds the softmax
    # normalization into the same pass.
    coeff = np.full((nslices, p), mix / (p * nb))
    ta_per_case = np.zeros(nb)
    lam = cfg.tagl.lam
    row0_sub = None
    if lam != 0.0:
        p0 = z[BACKGROUND_CLASS] / sez  # background softmax row
        row0_sub = np.zeros((nslices, p))
        for b in range(nb):
            pbg, psg = 1.0 - p0[2 * b], 1.0 - p0[2 * b + 1]
            ta, g_bg, g_sg, _, _, _, _ = tagl_arrays(
                pbg, psg, cfg.tagl.tau, cfg.tagl.adaptive_weight_enabled
            )
            ta_per_case[b] = ta
            upstream = ((1, g_sg),) if cfg.detach_bg else ((0, g_bg), (1, g_sg))
            for j, up in upstream:
                s = 2 * b + j
                tmp = up * (lam / nb) * p0[s]
                coeff[s] += tmp
                row0_sub[s] += tmp

    seg_per_case = seg_per_slice.reshape(nb, 2).sum(axis=1)
    per_case_total = seg_per_case + lam * ta_per_case
    total = float(per_case_total.mean())
    seg = float(seg_per_case.mean())
    ta = float(ta_per_case.mean())

    dz = np.multiply(z, coeff / sez, out=z)
    dz[labels, rows, cols] -= mix / (p * nb)
    if row0_sub is not None:
        dz[BACKGROUND_CLASS] -= row0_sub
    if dice_dz is not None:
        dz += dice_dz

    dz_flat = dz.reshape(NUM_CLASSES, nslices * p)
    grad_w = x @ dz_flat.T
    grad_a = 0.0
    if cfg.learn_cd_scale:
        grad_a = float(head.weights[FEAT_CONTRA] @ (dz_flat @ cd_raw.reshape(nslices * p)))
    return total, seg, ta, grad_w, grad_a, per_case_total.tolist()


def train_step(
    head: LinearHead, batch: list[PairedCase], cfg: TrainConfig, optimizer: Optimizer | None = None
) -> tuple[LinearHead, dict[str, float]]:
    """One optimizer update on a batch; aborts on a non-finite loss."""
    if optimizer is None:
        optimizer = Optimizer(cfg)
    total, seg, ta, grad_w, grad_a, per_case = batch_objective(head, batch, cfg)
    if not np.isfinite(total):
        bad = [c.case_id for c, v in zip(batch, per_case) if not np.isfinite(v)]
        raise TrainingDiverged(f"non-finite loss; offending case ids: {bad}")
    new_head = optimizer.step(head, grad_w, grad_a)
    return new_head, {"total": total, "seg": seg, "ta": ta}


def _predict_arrays(head: LinearHead, case: PairedCase) -> tuple[np.ndarray, np.ndarray]:
    """Raw softmax stacks (C, H, W) for both levels, skipping typed wrappers."""
    out = []
    for sl in (case.bg, case.sg):
        h, w = sl.image.values.shape
        f = np.empty((NUM_FEATURES, h * w))
        _fill_features(f, sl.image, sl.atlas)
        if head.cd_scale != 1.0:
            f[FEAT_CONTRA] *= head.cd_scale
        z = (head.weights.T @ f).reshape(NUM_CLASSES, h, w)
        out.append(softmax_channels(z))
    return out[0], out[1]


def predict_probs(head: LinearHead, case: PairedCase) -> tuple[ProbStack, ProbStack]:
    """Class probability stacks for both levels of one case."""
    sbg, ssg = _predict_arrays(head, case)
    return ProbStack.from_array(sbg), ProbStack.from_array(ssg)


def _infarct_arrays(sbg: np.ndarray, ssg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.clip(1.0 - sbg[BACKGROUND_CLASS], 0.0, 1.0),
        np.clip(1.0 - ssg[BACKGROUND_CLASS], 0.0, 1.0),
    )


def _consistency_arrays(pbg: np.ndarray, psg: np.ndarray, tau: float) -> float:
    g = pbg > tau
    if not g.any():
        return 1.0
    return float(1.0 - np.abs(psg - pbg)[g].mean())


def validation_scores(head: LinearHead, cases, tau: float) -> tuple[float, float]:
    """Mean soft Dice of the infarct maps against the binary truth, and mean
    BG/SG consistency, over a case list."""
    dices, cons = [], []
    for case in cases:
        sbg, ssg = _predict_arrays(head, case)
        pbg, psg = _infarct_arrays(sbg, ssg)
        for pm, sl in ((pbg, case.bg), (psg, case.sg)):
            t = (sl.labels.values > 0).astype(np.float64)
            num = 2.0 * float((pm * t).sum()) + 1.0
            den = float(pm.sum()) + float(t.sum()) + 1.0
            dices.append(num / den)
        cons.append(_consistency_arrays(pbg, psg, tau))
    return float(np.mean(dices)), float(np.mean(cons))


def fit(cfg: TrainConfig, dataset: SplitDataset) -> tuple[CheckpointRecord, list[EpochStats]]:
    """Run the training loop; select the epoch with the highest validation
    soft Dice (earliest epoch on ties)."""
    train, val = list(dataset.train), list(dataset.val)
    if not train or not val:
        raise ValidationError("train and val splits must both be nonempty")
    train_ids = {c.case_id for c in train}
    if train_ids & {c.case_id for c in val}:
        raise ValidationError("train and val splits overlap")

    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(cfg.seed), spawn_key=(0xF17,)))
    head = LinearHead.zeros()
    optimizer = Optimizer(cfg)
    history: list[EpochStats] = []
    best: CheckpointRecord | None = None

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        nsteps = 0
        for start in range(0, len(train), cfg.batch):
            batch = [train[i] for i in order[start : start + cfg.batch]]
            head, parts = train_step(head, batch, cfg, optimizer)
            sums += (parts["total"], parts["seg"], parts["ta"])
            nsteps += 1
        val_dice, val_cons = validation_scores(head, val, cfg.tagl.tau)
        history.append(
            EpochStats(
                epoch=epoch,
                train_total=float(sums[0] / nsteps),
                train_seg=float(sums[1] / nsteps),
                train_tagl=float(sums[2] / nsteps),
                val_soft_dice=val_dice,
                val_consistency=val_cons,
            )
        )
        if best is None or val_dice > best.val_mean_dice:
            best = CheckpointRecord(
                epoch=epoch, head=head, val_mean_dice=val_dice, val_consistency=val_cons
            )
    return best, history


@dataclass(frozen=True)
class CaseEval:
    case_id: str
    report: EvalReport
    aspects_pred: AspectsResult
    truth_score: int

    @property
    def score_abs_err(self) -> int:
        return abs(self.aspects_pred.score - self.truth_score)


@dataclass(frozen=True)
class EvalSummary:
    n_cases: int
    mean_dice: float
    mean_iou: float
    consistency: float
    aspects_mae: float


def evaluate_cases(
    head: LinearHead,
    cases,
    tau: float,
    theta: float = 0.5,
    rule: str = "mean-prob",
    skip_absent: bool = False,
) -> tuple[list[CaseEval], EvalSummary]:
    """Hard metrics on argmax labels (confusion summed over both levels),
    BG/SG consistency, and the ASPECTS score per case, plus aggregates."""
    if not cases:
        raise ValidationError("empty case list")
    per_case: list[CaseEval] = []
    for case in cases:
        sbg, ssg = _predict_arrays(head, case)
        counts = None
        for stack, sl in ((sbg, case.bg), (ssg, case.sg)):
            pred = LabelMap(sl.labels.shape, NUM_CLASSES, np.argmax(stack, axis=0))
            c = confusion(pred, sl.labels)
            if counts is None:
                counts = c
            else:
                counts = replace(
                    c,
                    tp=counts.tp + c.tp,
                    fp=counts.fp + c.fp,
                    fn=counts.fn + c.fn,
                    tn=counts.tn + c.tn,
                    npixels=counts.npixels + c.npixels,
                )
        pbg_a, psg_a = _infarct_arrays(sbg, ssg)
        shape = case.bg.image.shape
        pbg, psg = ProbMap(shape, pbg_a), ProbMap(shape, psg_a)
        cons = bg_sg_consistency(pbg, psg, tau)
        report = build_report(counts, cons, skip_absent=skip_absent)
        pred_aspects = aspects_score((pbg, case.bg.atlas), (psg, case.sg.atlas), theta, rule)
        per_case.append(CaseEval(case.case_id, report, pred_aspects, case.truth_score))
    summary = EvalSummary(
        n_cases=len(per_case),
        mean_dice=float(np.mean([c.report.mean_dice for c in per_case])),
        mean_iou=float(np.mean([c.report.mean_iou for c in per_case])),
        consistency=float(np.mean([c.report.consistency for c in per_case])),
        aspects_mae=float(np.mean([c.score_abs_err for c in per_case])),
    )
    return per_case, summary


# named objective variants compared by the ablation harness
ABLATION_CONFIGS = ("ce", "ce_tagl", "ce_tagl_fixedq", "ce_tagl_tunecd")

# the comparison direction is stable from early epochs on; the short budget
# keeps the five-seed matrix inside a desktop-CPU time envelope
ABLATION_EPOCHS = 8


def ablation_train_config(name: str, seed: int, base: TrainConfig | None = None) -> TrainConfig:
    """TrainConfig for one named ablation variant."""
    if base is None:
        base = TrainConfig(epochs=ABLATION_EPOCHS)
    tagl = base.tagl
    if name == "ce":
        return replace(base, seed=seed, tagl=replace(tagl, lam=0.0))
    if name == "ce_tagl":
        return replace(base, seed=seed, tagl=replace(tagl, adaptive_weight_enabled=True))
    if name == "ce_tagl_fixedq":
        return replace(base, seed=seed, tagl=replace(tagl, adaptive_weight_enabled=False))
    if name == "ce_tagl_tunecd":
        return replace(base, seed=seed, learn_cd_scale=True)
    raise ValidationError(f"unknown ablation config {name!r}, expected one of {ABLATION_CONFIGS}")


def run_ablation(
    configs,
    seeds,
    phantom_cfg=None,
    base_train: TrainConfig | None = None,
    theta: float = 0.5,
) -> list[dict]:
    """Train and evaluate every (config, seed) pair on seed-matched datasets.

    Each seed generates its own phantom dataset, shared by all configs of
    that seed so the comparison is paired. Returns one row per pair with the
    test metrics; rows are emitted in (seed, config) order.
    """
    from .phantom import PhantomConfig, generate_dataset  # local to avoid import noise at startup

    if not seeds:
        raise ValidationError("run_ablation needs at least one seed")
    for name in configs:
        ablation_train_config(name, 0, base_train)  # validate names early
    if base_train is None:
        base_train = TrainConfig(epochs=ABLATION_EPOCHS)
    rows = []
    for seed in seeds:
        pcfg = phantom_cfg if phantom_cfg is not None else PhantomConfig()
        pcfg = replace(pcfg, seed=int(seed))
        dataset = generate_dataset(pcfg, base_train.n_train, base_train.n_val, base_train.n_test)
        for name in configs:
            tcfg = ablation_train_config(name, int(seed), base_train)
            best, _ = fit(tcfg, dataset)
            _, summary = evaluate_cases(best.head, dataset.test, tcfg.tagl.tau, theta)
            rows.append(
                {
                    "config": name,
                    "seed": int(seed),
                    "mean_dice": summary.mean_dice,
                    "mean_iou": summary.mean_iou,
                    "consistency": summary.consistency,
                    "aspects_mae": summary.aspects_mae,
                    "best_epoch": best.epoch,
                    "val_mean_dice": best.val_mean_dice,
                }
            )
    return rows
