"""Batch experiment runner.

Subcommands: ``register`` (synthetic pair -> flow file + metrics row),
``sweep`` (register across methods/masks/accelerations/seeds), ``dataset``
(patch-dataset export) and ``evaluate`` (score a predictions CSV against a
dataset).  Every run is reproducible from its configuration: all randomness
is seeded and the effective config is written next to the outputs.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import io as lapk_io
from .core import ifft3, warp
from .errors import LapkError
from .filter_basis import build_basis
from .lap_image import LapConfig, estimate_flow_multires
from .lap_kspace import kspace_flow_field, make_taper
from .metrics import UndefinedMetricError, eae, epe, image_metrics, interior_mask
from .sampling import gen_mask
from .synthesis import (
    build_pair_pool,
    export_patch_dataset,
    gen_phantom,
    gen_smooth_flow,
    make_pair,
    read_patch_dataset,
)

METHODS = ("image_lap", "kspace_eq13", "kspace_phase")
MASK_KINDS = ("full", "vdpd", "center")

CSV_COLUMNS = [
    "method",
    "mask_kind",
    "r_target",
    "r_actual",
    "seed",
    "epe_mean",
    "epe_std",
    "eae_mean",
    "eae_std",
    "ssim",
    "nrmse",
    "nrmse_range",
    "psnr",
    "ncc",
    "runtime_s",
]


class ConfigError(LapkError):
    pass


@dataclass
class ExperimentConfig:
    phantom_seed: int = 1
    flow_seed: int = 1001
    dims: tuple = (64, 64, 64)
    method: str = "kspace_eq13"
    mask_kind: str = "full"
    r_list: tuple = (1.0,)
    stride: int = 2
    levels: tuple = (65, 33, 17, 9, 5)
    w: int = 33
    basis_w: int = 17
    max_disp: float = 5.0
    seeds: int = 1
    n_samples: int = 100
    n_real: int = 0
    n_smooth: int = 2
    n_augmented: int = 2
    out_dir: str = "lapk_out"

    def validate(self):
        for m in self.methods():
            if m not in METHODS:
                raise ConfigError(f"unknown method '{m}' (choose from {METHODS})")
        for k in self.mask_kinds():
            if k not in MASK_KINDS:
                raise ConfigError(f"unknown mask kind '{k}' (choose from {MASK_KINDS})")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    def methods(self):
        return tuple(self.method.split(","))

    def mask_kinds(self):
        return tuple(self.mask_kind.split(","))


def _parse_value(key: str, raw: str):
    if key in ("dims", "levels"):
        return tuple(int(v) for v in raw.split(","))
    if key == "r_list":
        return tuple(float(v) for v in raw.split(","))
    if key in ("method", "mask_kind", "out_dir"):
        return raw
    if key == "max_disp":
        return float(raw)
    return int(raw)


def load_config(path) -> ExperimentConfig:
    """Parse a key=value config file; unknown keys are rejected."""
    known = {f.name for f in dc_fields(ExperimentConfig)}
    cfg = ExperimentConfig()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        setattr(cfg, key, _parse_value(key, raw))
    cfg.validate()
    return cfg


def _apply_flag_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    for f in dc_fields(ExperimentConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            setattr(cfg, f.name, _parse_value(f.name, str(val)))
    if getattr(args, "seed", None) is not None:
        cfg.phantom_seed = int(args.seed)
        cfg.flow_seed = int(args.seed) + 1000
    cfg.validate()
    return cfg


def _write_config(cfg: ExperimentConfig, path: Path):
    lines = []
    for f in dc_fields(ExperimentConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(str(v) for v in val)
        lines.append(f"{f.name}={val}")
    path.write_text("\n".join(lines) + "\n")


def run_single(cfg: ExperimentConfig, method: str, mask_kind: str, r: float, seed_offset: int = 0):
    """One registration run; returns (CSV row dict, estimated FlowField)."""
    dims = cfg.dims
    phantom = gen_phantom(dims, cfg.phantom_seed + seed_offset)
    if cfg.max_disp == 0:
        from .core import FlowField

        flow = FlowField.zeros(dims)
    else:
        flow = gen_smooth_flow(dims, cfg.max_disp, cfg.flow_seed + seed_offset)
    mask = gen_mask(mask_kind, dims, r, seed=cfg.flow_seed + seed_offset)
    v_f, v_m, u_ref = make_pair(phantom, flow, mask, mask)

    t0 = time.perf_counter()
    if method == "image_lap":
        # u_ref displaces pristine content onto the deformed state, so the
        # deformed volume is the warp target of the estimate
        deformed = np.abs(ifft3(v_m))
        pristine = np.abs(ifft3(v_f))
        lap_cfg = LapConfig(levels=cfg.levels, stride=1)
        est = estimate_flow_multires(deformed, pristine, lap_cfg)
    else:
        solver = "eq13" if method == "kspace_eq13" else "phase_slope"
        est = kspace_flow_field(
            v_m,
            v_f,
            mask=None,  # already applied in make_pair
            taper=make_taper(cfg.w),
            basis=build_basis(cfg.basis_w, 4),
            stride=cfg.stride,
            solver=solver,
        )
    runtime = time.perf_counter() - t0

    roi = interior_mask(dims, max(4, min(dims) // 8))
    epe_mean, epe_std, _ = epe(est, u_ref, roi)
    try:
        eae_res = eae(est, u_ref, roi)
        eae_mean, eae_std = eae_res.mean, eae_res.std
    except UndefinedMetricError:
        eae_mean, eae_std = float("nan"), float("nan")
    registered = warp(phantom, est)
    target = warp(phantom, u_ref)
    try:
        im = image_metrics(registered, target)
        ssim, nrmse, psnr, ncc, nrmse_range = im.ssim, im.nrmse, im.psnr, im.ncc, im.nrmse_range
    except UndefinedMetricError:
        ssim = nrmse = psnr = ncc = nrmse_range = float("nan")

    row = {
        "method": method,
        "mask_kind": mask_kind,
        "r_target": r,
        "r_actual": mask.r_actual,
        "seed": cfg.phantom_seed + seed_offset,
        "epe_mean": epe_mean,
        "epe_std": epe_std,
        "eae_mean": eae_mean,
        "eae_std": eae_std,
        "ssim": ssim,
        "nrmse": nrmse,
        "nrmse_range": nrmse_range,
        "psnr": psnr,
        "ncc": ncc,
        "runtime_s": runtime,
    }
    return row, est


def _write_rows(rows, path: Path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def cmd_register(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out / "config.txt")
    rows = []
    for method in cfg.methods():
        for kind in cfg.mask_kinds():
            for r in cfg.r_list:
                row, est = run_single(cfg, method, kind, r)
                rows.append(row)
                flow_path = out / f"flow_{method}_{kind}_R{r:g}.lapkflow"
                lapk_io.write_flow(flow_path, est)
                print(
                    f"{method} {kind} R={r:g}: epe={row['epe_mean']:.3f} "
                    f"+- {row['epe_std']:.3f} voxels ({row['runtime_s']:.1f}s)"
                )
    _write_rows(rows, out / "metrics.csv")
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out / "config.txt")
    rows = []
    for offset in range(cfg.seeds):
        for method in cfg.methods():
            for kind in cfg.mask_kinds():
                for r in cfg.r_list:
                    row, _ = run_single(cfg, method, kind, r, seed_offset=offset)
                    rows.append(row)
                    print(
                        f"seed+{offset} {method} {kind} R={r:g}: "
                        f"epe={row['epe_mean']:.3f}"
                    )
    _write_rows(rows, out / "sweep.csv")
    return 0


def cmd_dataset(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out / "config.txt")
    pool = build_pair_pool(
        cfg.dims,
        {"real": cfg.n_real, "smooth": cfg.n_smooth, "augmented": cfg.n_augmented},
        cfg.max_disp,
        cfg.phantom_seed,
    )
    masks = []
    for r in cfg.r_list:
        if r <= 1.0:
            masks.append(None)
            continue
        for kind in cfg.mask_kinds():
            if kind == "full":
                masks.append(None)
            else:
                masks.append(gen_mask(kind, cfg.dims, r, seed=cfg.flow_seed))
    if not masks:
        masks = [None]
    path = out / "patches.lapkds"
    export_patch_dataset(pool, cfg.n_samples, cfg.w, cfg.flow_seed, path, masks=masks)
    print(f"wrote {cfg.n_samples} samples to {path}")
    return 0


def cmd_evaluate(predictions_csv, dataset_file) -> int:
    ds = read_patch_dataset(dataset_file)
    preds = {}
    with open(predictions_csv, newline="") as f:
        reader = csv.DictReader(f)
        required = {"index", "ux", "uy", "uz"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise LapkError(
                f"predictions CSV must have columns {sorted(required)}, "
                f"got {reader.fieldnames}"
            )
        for row in reader:
            preds[int(row["index"])] = np.array(
                [float(row["ux"]), float(row["uy"]), float(row["uz"])]
            )
    missing = [i for i in range(len(ds)) if i not in preds]
    if missing:
        raise LapkError(f"predictions missing for {len(missing)} samples, e.g. index {missing[0]}")

    flows = ds.flows()
    per_sample = []
    skipped = 0
    for i in range(len(ds)):
        p = preds[i]
        if not np.all(np.isfinite(p)):
            skipped += 1
            continue
        per_sample.append((i, float(((flows[i] - p) ** 2).sum())))
    if not per_sample:
        raise LapkError("no finite predictions to evaluate")
    epe_vals = np.sqrt([s for _, s in per_sample])
    out_path = str(predictions_csv) + ".eval.csv"
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "sepe", "epe"])
        for (i, s), e in zip(per_sample, epe_vals):
            writer.writerow([i, s, e])
    print(
        f"epe_mean={epe_vals.mean():.4f} epe_std={epe_vals.std():.4f} "
        f"n={len(per_sample)} skipped={skipped}"
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lapk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--dims", help="grid size, e.g. 64,64,64")
        p.add_argument("--method", help=f"comma list from {METHODS}")
        p.add_argument("--mask-kind", dest="mask_kind", help=f"comma list from {MASK_KINDS}")
        p.add_argument("--r-list", dest="r_list", help="accelerations, e.g. 1,8,15,30")
        p.add_argument("--stride", type=int)
        p.add_argument("--levels", help="window sizes, e.g. 65,33,17,9,5")
        p.add_argument("--w", type=int, help="k-space patch size")
        p.add_argument("--basis-w", dest="basis_w", type=int, help="basis support")
        p.add_argument("--max-disp", dest="max_disp", type=float)
        p.add_argument("--seed", type=int, help="sets phantom and flow seeds")
        p.add_argument("--seeds", type=int, help="number of seeds to sweep")
        p.add_argument("--phantom-seed", dest="phantom_seed", type=int)
        p.add_argument("--flow-seed", dest="flow_seed", type=int)
        p.add_argument("--n-samples", dest="n_samples", type=int)
        p.add_argument("--n-real", dest="n_real", type=int)
        p.add_argument("--n-smooth", dest="n_smooth", type=int)
        p.add_argument("--n-augmented", dest="n_augmented", type=int)
        p.add_argument("--out", dest="out_dir")

    for name in ("register", "sweep", "dataset"):
        add_common(sub.add_parser(name))

    pe = sub.add_parser("evaluate")
    pe.add_argument("predictions", help="CSV with index,ux,uy,uz")
    pe.add_argument("dataset", help="LAPK-DS v1 file")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args.predictions, args.dataset)
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = _apply_flag_overrides(cfg, args)
        if args.command == "register":
            return cmd_register(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "dataset":
            return cmd_dataset(cfg)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LapkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
