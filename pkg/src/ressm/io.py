"""Datasets, chain artifacts, checkpoints and run configuration on disk.

A dataset directory holds one tensor file per segment plus a YAML manifest
listing them in (group, subject, segment) order. Fit output directories hold
the kept draws and running means as tensor files, traces and the sign audit
as delimited text, and a metadata file with versions, seed and config hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
from pathlib import Path

import numpy as np
import yaml

from .engine import ChainOutput
from .identify import SignAudit
from .model import ChainState, HierDataset, MCMCSchedule
from .tensorfile import TensorFileError, read_tensor, write_tensor

__all__ = [
    "atomic_write_text",
    "write_dataset",
    "read_dataset",
    "write_truth",
    "read_truth",
    "save_output",
    "load_output",
    "save_checkpoint",
    "load_checkpoint",
    "load_config",
    "config_hash",
    "write_run_metadata",
]

DATASET_FORMAT = "ressm-dataset/1"
OUTPUT_FORMAT = "ressm-fit/1"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _dump_yaml(path, obj) -> None:
    atomic_write_text(path, yaml.safe_dump(obj, sort_keys=False))


def write_dataset(ds: HierDataset, out_dir) -> Path:
    """Write one tensor file per segment plus the manifest; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "segments").mkdir(parents=True, exist_ok=True)
    groups = []
    for r in range(ds.n_groups):
        subjects = []
        for i, u in enumerate(ds.group_subjects[r]):
            files = []
            for j, s in enumerate(ds.subj_segments[u]):
                rel = f"segments/g{r}_s{i}_t{j}.rssm"
                write_tensor(out_dir / rel, ds.y[s])
                files.append(rel)
            subjects.append({"segments": files})
        groups.append({"subjects": subjects})
    manifest = {
        "format": DATASET_FORMAT,
        "channels": ds.n_channels,
        "timepoints": ds.n_timepoints,
        "groups": groups,
    }
    path = out_dir / "manifest.yaml"
    _dump_yaml(path, manifest)
    return path


def read_dataset(manifest_path) -> HierDataset:
    """Assemble and shape-check a dataset from its manifest."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.yaml"
    base = manifest_path.parent
    manifest = yaml.safe_load(manifest_path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{manifest_path}: unknown dataset format {manifest.get('format')!r}")
    p = int(manifest["channels"])
    k = int(manifest["timepoints"])
    nested = []
    for r, group in enumerate(manifest["groups"]):
        subjects = []
        for i, subj in enumerate(group["subjects"]):
            segs = []
            for j, rel in enumerate(subj["segments"]):
                fp = base / rel
                if not fp.exists():
                    raise FileNotFoundError(f"segment (r={r}, i={i}, j={j}): missing file {fp}")
                try:
                    arr = read_tensor(fp)
                except TensorFileError as exc:
                    raise TensorFileError(f"segment (r={r}, i={i}, j={j}): {exc}") from exc
                if arr.shape != (p, k):
                    raise ValueError(
                        f"segment (r={r}, i={i}, j={j}): shape {arr.shape} != ({p}, {k})"
                    )
                segs.append(arr)
            subjects.append(segs)
        nested.append(subjects)
    return HierDataset.from_nested(nested)


def write_truth(truth: ChainState, out_dir) -> None:
    out_dir = Path(out_dir) / "truth"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in truth.arrays().items():
        write_tensor(out_dir / f"{name}.rssm", arr)


def read_truth(base_dir) -> ChainState:
    base = Path(base_dir) / "truth"
    arrays = {name: read_tensor(base / f"{name}.rssm") for name in ChainState.field_names()}
    return ChainState(**arrays)


def _schedule_dict(sched: MCMCSchedule) -> dict:
    return {
        "n_iter": sched.n_iter, "n_burnin": sched.n_burnin, "thin": sched.thin,
        "n_init_iter": sched.n_init_iter, "sign_check_start": sched.sign_check_start,
        "sign_check_end": sched.sign_check_end, "sign_check_every": sched.sign_check_every,
        "rho0": sched.rho0, "checkpoint_every": sched.checkpoint_every,
    }


def save_output(output: ChainOutput, out_dir) -> None:
    out_dir = Path(out_dir)
    (out_dir / "draws").mkdir(parents=True, exist_ok=True)
    (out_dir / "means").mkdir(exist_ok=True)
    for name, arr in output.draws.items():
        write_tensor(out_dir / "draws" / f"{name}.rssm", arr)
    for name, arr in output.seg_means.items():
        write_tensor(out_dir / "means" / f"{name}.rssm", arr)
    write_tensor(out_dir / "kept_iters.rssm", output.kept_iters.astype(np.float64))
    lines = ["kept_iter\tcomplete\tconditional\tplugin_complete"]
    for i, it in enumerate(output.kept_iters):
        lines.append(f"{int(it)}\t{output.loglik['complete'][i]:.10f}"
                     f"\t{output.loglik['conditional'][i]:.10f}"
                     f"\t{output.loglik['plugin_complete'][i]:.10f}")
    atomic_write_text(out_dir / "loglik_trace.tsv", "\n".join(lines) + "\n")
    atomic_write_text(out_dir / "sign_audit.tsv", output.audit.to_table())
    meta = {
        "format": OUTPUT_FORMAT,
        "n_latent": output.n_latent,
        "ar_order": output.ar_order,
        "mode": output.mode,
        "seed": output.seed,
        "schedule": _schedule_dict(output.schedule),
        "shape": output.shape,
        "timings": {k: float(v) for k, v in output.timings.items()},
        "draw_names": sorted(output.draws),
        "mean_names": sorted(output.seg_means),
    }
    _dump_yaml(out_dir / "fit.yaml", meta)


def load_output(out_dir) -> ChainOutput:
    out_dir = Path(out_dir)
    meta = yaml.safe_load((out_dir / "fit.yaml").read_text())
    if meta.get("format") != OUTPUT_FORMAT:
        raise ValueError(f"{out_dir}: unknown fit format {meta.get('format')!r}")
    draws = {name: read_tensor(out_dir / "draws" / f"{name}.rssm")
             for name in meta["draw_names"]}
    means = {name: read_tensor(out_dir / "means" / f"{name}.rssm")
             for name in meta["mean_names"]}
    kept = read_tensor(out_dir / "kept_iters.rssm").astype(np.int64)
    trace_rows = (out_dir / "loglik_trace.tsv").read_text().strip().split("\n")[1:]
    loglik = {"complete": [], "conditional": [], "plugin_complete": []}
    for row in trace_rows:
        _, c, d, p = row.split("\t")
        loglik["complete"].append(float(c))
        loglik["conditional"].append(float(d))
        loglik["plugin_complete"].append(float(p))
    loglik = {k: np.asarray(v) for k, v in loglik.items()}
    audit = SignAudit()
    audit_rows = (out_dir / "sign_audit.tsv").read_text().strip().split("\n")[1:]
    for row in audit_rows:
        if not row:
            continue
        it, level, r, i, j, q, value, flipped = row.split("\t")
        audit.add(int(it), level, int(r), int(i), int(j), int(q), float(value), flipped == "1")
    return ChainOutput(
        n_latent=meta["n_latent"], ar_order=meta["ar_order"], mode=meta["mode"],
        seed=meta["seed"], kept_iters=kept, draws=draws, seg_means=means,
        loglik=loglik, audit=audit, timings=meta.get("timings", {}),
        schedule=MCMCSchedule(**meta["schedule"]), shape=meta["shape"],
    )


def save_checkpoint(snapshot: dict, out_dir) -> None:
    """Persist an engine snapshot bit-exactly (temp dir + rename)."""
    import shutil
    out_dir = Path(out_dir)
    tmp = out_dir.with_name(out_dir.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    for sub in ("state", "draws", "sums", "traces"):
        (tmp / sub).mkdir(parents=True, exist_ok=True)
        for name, arr in snapshot[sub].items():
            write_tensor(tmp / sub / f"{name}.rssm", arr)
    meta = {"iteration": snapshot["iteration"],
            "audit": [list(rec) for rec in snapshot["audit"]]}
    _dump_yaml(tmp / "checkpoint.yaml", meta)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)


def load_checkpoint(ckpt_dir) -> dict:
    ckpt_dir = Path(ckpt_dir)
    meta = yaml.safe_load((ckpt_dir / "checkpoint.yaml").read_text())
    snapshot = {"iteration": int(meta["iteration"]),
                "audit": [tuple(rec) for rec in meta["audit"]]}
    for sub in ("state", "draws", "sums", "traces"):
        snapshot[sub] = {}
        for fp in sorted((ckpt_dir / sub).glob("*.rssm")):
            snapshot[sub][fp.stem] = read_tensor(fp)
    return snapshot


def load_config(path) -> dict:
    cfg = yaml.safe_load(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def write_run_metadata(out_dir, seed: int, cfg: dict | None, extra: dict | None = None) -> None:
    import numpy
    from . import __version__
    meta = {
        "tool": "ressm",
        "version": __version__,
        "numpy": numpy.__version__,
        "python": platform.python_version(),
        "seed": int(seed),
        "config_hash": config_hash(cfg or {}),
    }
    if extra:
        meta.update(extra)
    _dump_yaml(Path(out_dir) / "run_meta.yaml", meta)
