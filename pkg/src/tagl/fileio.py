"""File formats: the NGRID binary grid container, dataset manifests,
checkpoints, and JSON/CSV report serialization.

NGRID layout (little-endian, 21-byte header, no padding or trailing bytes):

    offset  size  field
    0       4     magic "NGRD"
    4       4     version, uint32 = 1
    8       4     height, uint32
    12      4     width, uint32
    16      4     channels, uint32
    20      1     dtype, uint8: 0 = uint8 labels/masks, 1 = float32
    21      -     payload, row-major, channel-outermost

Parse failures raise NgridError carrying the byte offset of the problem.
Reports are written with a deterministic field order and floats rendered
with six decimal places, so identical inputs produce identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .aspects import AspectsResult, LEVEL_BG, LEVEL_SG, TerritoryAtlas, territory_ids_for_level
from .gridmap import BinaryMask, GridShape, Image, LabelMap, ValidationError
from .metrics import EvalReport
from .phantom import LevelSlice, PairedCase, PhantomConfig, SplitDataset
from .trainer import CheckpointRecord, EpochStats, LinearHead, NUM_CLASSES

MAGIC = b"NGRD"
NGRID_VERSION = 1
HEADER = struct.Struct("<4sIIIIB")
HEADER_SIZE = HEADER.size  # 21
DTYPE_U8 = 0
DTYPE_F32 = 1
MAX_ELEMENTS = 2**31

MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1


class NgridError(ValueError):
    """Structured NGRID parse/serialization failure at a known byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    pass


def write_ngrid(path, grid: np.ndarray) -> None:
    """Write a (H, W) or (C, H, W) array; floats store as float32, integer or
    boolean values as uint8."""
    a = np.asarray(grid)
    if a.ndim == 2:
        a = a[None, :, :]
    if a.ndim != 3:
        raise ValidationError(f"NGRID grids are 2-D or 3-D, got ndim={a.ndim}")
    c, h, w = a.shape
    if a.dtype.kind == "f":
        dtype_code = DTYPE_F32
        payload = np.ascontiguousarray(a, dtype="<f4")
    elif a.dtype.kind in ("u", "i", "b"):
        if a.dtype.kind != "b" and ((a < 0).any() or (a > 255).any()):
            raise ValidationError("integer NGRID payloads must fit in uint8")
        dtype_code = DTYPE_U8
        payload = np.ascontiguousarray(a, dtype=np.uint8)
    else:
        raise ValidationError(f"unsupported NGRID dtype {a.dtype}")
    header = HEADER.pack(MAGIC, NGRID_VERSION, h, w, c, dtype_code)
    Path(path).write_bytes(header + payload.tobytes())


def read_ngrid(path) -> np.ndarray:
    """Read an NGRID file; returns (H, W) for single-channel grids, else
    (C, H, W). Dtype is uint8 or float32 as stored."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise NgridError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < HEADER_SIZE:
        raise NgridError(f"truncated header: {len(data)} bytes, need {HEADER_SIZE}", len(data))
    _, version, h, w, c, dtype_code = HEADER.unpack_from(data, 0)
    if version != NGRID_VERSION:
        raise NgridError(f"unsupported version {version}, expected {NGRID_VERSION}", 4)
    if h < 1 or w < 1 or c < 1 or h * w * c > MAX_ELEMENTS:
        raise NgridError(f"implausible dimensions {c}x{h}x{w}", 8)
    if dtype_code not in (DTYPE_U8, DTYPE_F32):
        raise NgridError(f"unknown dtype code {dtype_code}", 20)
    itemsize = 1 if dtype_code == DTYPE_U8 else 4
    expected = h * w * c * itemsize
    actual = len(data) - HEADER_SIZE
    if actual != expected:
        kind = "truncated" if actual < expected else "trailing bytes in"
        raise NgridError(
            f"{kind} payload: {actual} bytes, expected {expected}",
            HEADER_SIZE + min(actual, expected),
        )
    dt = np.uint8 if dtype_code == DTYPE_U8 else np.dtype("<f4")
    a = np.frombuffer(data, dtype=dt, offset=HEADER_SIZE).reshape(c, h, w).copy()
    return a[0] if c == 1 else a


def _fmt(x) -> str:
    return f"{x:.6f}"


def _round6(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _round6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round6(v) for v in obj]
    return obj


def write_json(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_csv(rows: list[dict], columns: list[str], path) -> None:
    """Fixed column order; floats rendered with six decimals."""
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            v = row[col]
            cells.append(_fmt(v) if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_report(report, path, fmt: str = "json") -> None:
    """Serialize an EvalReport, AspectsResult or ablation row table."""
    if fmt not in ("json", "csv"):
        raise ValidationError(f"format must be json or csv, got {fmt!r}")
    if isinstance(report, EvalReport):
        payload = _round6(report.to_dict())
        if fmt == "json":
            write_json(payload, path)
        else:
            cols = ["mean_dice", "mean_iou", "consistency"] + [
                f"dice_{c}" for c in range(len(report.per_class_dice))
            ]
            row = {"mean_dice": report.mean_dice, "mean_iou": report.mean_iou,
                   "consistency": report.consistency}
            row.update({f"dice_{c}": d for c, d in enumerate(report.per_class_dice)})
            write_csv([row], cols, path)
        return
    if isinstance(report, AspectsResult):
        payload = _round6(report.to_dict())
        if fmt == "json":
            write_json(payload, path)
        else:
            cols = ["score", "involved"]
            write_csv([{"score": report.score, "involved": ";".join(map(str, sorted(report.involved)))}], cols, path)
        return
    if isinstance(report, list):
        write_ablation_csv(report, path)
        return
    raise ValidationError(f"cannot serialize report of type {type(report).__name__}")


ABLATION_COLUMNS = [
    "config", "seed", "mean_dice", "mean_iou", "consistency", "aspects_mae",
    "best_epoch", "val_mean_dice",
]


def write_ablation_csv(rows: list[dict], path) -> None:
    write_csv(rows, ABLATION_COLUMNS, path)


HISTORY_COLUMNS = ["epoch", "train_total", "train_seg", "train_tagl", "val_soft_dice", "val_consistency"]


def write_history_csv(history: list[EpochStats], path) -> None:
    write_csv([asdict(h) for h in history], HISTORY_COLUMNS, path)


EVAL_CASE_COLUMNS = [
    "case_id", "mean_dice", "mean_iou", "consistency", "aspects_score",
    "truth_score", "score_abs_err",
]


def write_eval_cases_csv(case_evals, path) -> None:
    rows = [
        {
            "case_id": ce.case_id,
            "mean_dice": ce.report.mean_dice,
            "mean_iou": ce.report.mean_iou,
            "consistency": ce.report.consistency,
            "aspects_score": ce.aspects_pred.score,
            "truth_score": ce.truth_score,
            "score_abs_err": ce.score_abs_err,
        }
        for ce in case_evals
    ]
    write_csv(rows, EVAL_CASE_COLUMNS, path)


# -- atlases ---------------------------------------------------------------


def write_atlas(path, atlas: TerritoryAtlas) -> None:
    """Masks stacked channel-outermost in ascending territory id order."""
    ids = atlas.territory_ids()
    stack = np.stack([atlas.mask(t).values for t in ids])
    write_ngrid(path, stack)


def read_atlas(path, level: str, shape: GridShape | None = None) -> TerritoryAtlas:
    a = read_ngrid(path)
    if a.ndim == 2:
        a = a[None]
    ids = territory_ids_for_level(level)
    if a.shape[0] != len(ids):
        raise ValidationError(
            f"{level} atlas needs {len(ids)} mask channels, file has {a.shape[0]}"
        )
    grid = GridShape(a.shape[1], a.shape[2])
    if shape is not None and grid != shape:
        raise ValidationError(f"atlas shape {grid.as_tuple()} != expected {shape.as_tuple()}")
    masks = {tid: BinaryMask(grid, a[i]) for i, tid in enumerate(ids)}
    return TerritoryAtlas(level=level, shape=grid, masks=masks)


# -- dataset directories ----------------------------------------------------


def _phantom_config_dict(cfg: PhantomConfig) -> dict:
    return {
        "height": int(cfg.shape.height),
        "width": int(cfg.shape.width),
        "coupling_rho": cfg.coupling_rho,
        "lesion_rate": cfg.lesion_rate,
        "noise_sigma": cfg.noise_sigma,
        "hypodensity_delta": cfg.hypodensity_delta,
        "seed": int(cfg.seed),
    }


def _phantom_config_from_dict(d: dict) -> PhantomConfig:
    return PhantomConfig(
        shape=GridShape(int(d["height"]), int(d["width"])),
        coupling_rho=float(d["coupling_rho"]),
        lesion_rate=float(d["lesion_rate"]),
        noise_sigma=float(d["noise_sigma"]),
        hypodensity_delta=float(d["hypodensity_delta"]),
        seed=int(d["seed"]),
    )


def save_dataset(dataset: SplitDataset, out_dir) -> Path:
    """Write NGRID files plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    atlas_paths = {LEVEL_BG: "atlas_bg.ngrd", LEVEL_SG: "atlas_sg.ngrd"}
    first = (dataset.all_cases())[0]
    write_atlas(out / atlas_paths[LEVEL_BG], first.bg.atlas)
    write_atlas(out / atlas_paths[LEVEL_SG], first.sg.atlas)

    cases_json = []
    for split in ("train", "val", "test"):
        for case in dataset.split(split):
            entry = {"case_id": case.case_id, "split": split,
                     "truth_involved": sorted(case.truth_involved)}
            for key, sl in (("bg", case.bg), ("sg", case.sg)):
                img_rel = f"cases/{case.case_id}_{key}_image.ngrd"
                lab_rel = f"cases/{case.case_id}_{key}_labels.ngrd"
                write_ngrid(out / img_rel, sl.image.values.astype(np.float32))
                write_ngrid(out / lab_rel, sl.labels.values.astype(np.uint8))
                entry[key] = {"image": img_rel, "labels": lab_rel,
                              "atlas": atlas_paths[LEVEL_BG if key == "bg" else LEVEL_SG]}
            cases_json.append(entry)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "phantom_config": _phantom_config_dict(dataset.config),
        "atlas": {"bg": atlas_paths[LEVEL_BG], "sg": atlas_paths[LEVEL_SG]},
        "cases": cases_json,
    }
    path = out / "manifest.json"
    write_json(manifest, path)
    return path


def load_dataset(manifest_path) -> SplitDataset:
    """Load and validate a dataset directory; raises ManifestError on dangling
    paths or duplicate case ids."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}")
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest format_version {manifest.get('format_version')!r}")
    root = manifest_path.parent
    cfg = _phantom_config_from_dict(manifest["phantom_config"])

    def _resolve(rel):
        p = root / rel
        if not p.is_file():
            raise ManifestError(f"manifest references missing file: {rel}")
        return p

    atlases = {
        "bg": read_atlas(_resolve(manifest["atlas"]["bg"]), LEVEL_BG, cfg.shape),
        "sg": read_atlas(_resolve(manifest["atlas"]["sg"]), LEVEL_SG, cfg.shape),
    }
    seen = set()
    splits: dict[str, list[PairedCase]] = {"train": [], "val": [], "test": []}
    for entry in manifest["cases"]:
        cid = entry["case_id"]
        if cid in seen:
            raise ManifestError(f"duplicate case_id {cid!r}")
        seen.add(cid)
        split = entry["split"]
        if split not in splits:
            raise ManifestError(f"case {cid!r} has unknown split {split!r}")
        slices = {}
        for key in ("bg", "sg"):
            img = read_ngrid(_resolve(entry[key]["image"]))
            lab = read_ngrid(_resolve(entry[key]["labels"]))
            atlas = atlases[key]
            if entry[key]["atlas"] != manifest["atlas"][key]:
                atlas = read_atlas(
                    _resolve(entry[key]["atlas"]), LEVEL_BG if key == "bg" else LEVEL_SG, cfg.shape
                )
            slices[key] = LevelSlice(
                image=Image(cfg.shape, img.astype(np.float64)),
                labels=LabelMap(cfg.shape, NUM_CLASSES, lab.astype(np.int64)),
                atlas=atlas,
            )
        splits[split].append(
            PairedCase(cid, slices["bg"], slices["sg"], frozenset(entry["truth_involved"]))
        )
    return SplitDataset(
        config=cfg,
        train=tuple(splits["train"]),
        val=tuple(splits["val"]),
        test=tuple(splits["test"]),
    )


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(record: CheckpointRecord, train_config_echo: dict, out_dir) -> Path:
    """Write checkpoint.json plus an NGRID copy of the weight matrix.

    The JSON carries the exact float64 weights (JSON round-trips doubles), so
    reloading reproduces recorded validation metrics exactly; the float32
    NGRID file is a compact interoperable view of the same matrix.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ngrid(out / "weights.ngrd", record.head.weights.astype(np.float32))
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": record.epoch,
        "val_mean_dice": record.val_mean_dice,
        "val_consistency": record.val_consistency,
        "cd_scale": record.head.cd_scale,
        "weights": [list(row) for row in record.head.weights],
        "weights_ngrid": "weights.ngrd",
        "train_config": train_config_echo,
    }
    path = out / "checkpoint.json"
    write_json(payload, path)
    return path


def load_checkpoint(path) -> CheckpointRecord:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.json"
    payload = json.loads(path.read_text())
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint format_version {payload.get('format_version')!r}")
    head = LinearHead(np.array(payload["weights"], dtype=np.float64), float(payload["cd_scale"]))
    return CheckpointRecord(
        epoch=int(payload["epoch"]),
        head=head,
        val_mean_dice=float(payload["val_mean_dice"]),
        val_consistency=float(payload["val_consistency"]),
    )
