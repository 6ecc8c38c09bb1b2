"""End-to-end experiment stages on the ColorShape toy.

Each stage reads its inputs from ``src`` and writes its outputs to ``dst``;
the full run uses one directory for both.  Artifact names are fixed so that
the individual CLI subcommands can be chained by hand.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from . import persistence, reports
from .config import ExperimentConfig
from .errors import StateError
from .models import build_embedder, build_transformation, count_macs
from .retrieval import GalleryStore, RetrievalReport, cka_linear, evaluate_pairing, leave_one_out
from .synthdata import LabeledSet, LabelMode, make_domain, sample_grid
from .training import (
    SideInfoModel,
    SideKind,
    features,
    train_embedder,
    train_sequence_step,
    train_side_info,
    train_transformation,
)
from .updates import DeploymentModel, apply_direct, apply_fct_update, apply_sequence, compare_strategies

log = logging.getLogger(__name__)

DATA = "data.npz"
PHI_OLD, PHI_NEW, PSI = "phi_old.npz", "phi_new.npz", "psi.npz"
H, H_ZERO = "h.npz", "h_zero.npz"
GALLERY_OLD, GALLERY_NEW = "gallery_v1.fctg", "gallery_v2.fctg"
SEQ_VERSION_STRIDE = 100

FCT_STAGES = ("gen-data", "train-embedder old", "train-side-info", "train-embedder new",
              "train-transform", "eval", "simulate-costs")
SEQUENCE_STAGES = ("gen-data", "train versions", "train hops", "train direct", "eval sequence",
                   "simulate-costs")


def stage_plan(cfg: ExperimentConfig) -> List[str]:
    """Human-readable description of what ``run`` will do."""
    t = cfg.train
    lines = [f"experiment {cfg.name!r} ({cfg.experiment}), run seed {cfg.seed}"]
    if cfg.experiment == "fct":
        lines += [
            f"gen-data: C={cfg.domain.colors} S={cfg.domain.shapes} D={cfg.domain.dim} "
            f"sigma={cfg.domain.sigma}; old shapes {list(cfg.data.old_shapes)}",
            f"train-embedder old: d={cfg.embedder.d_old}, {t.old_embedder.epochs} epochs",
            f"train-side-info: {cfg.side_info.kind}, d_side={cfg.side_info.d_side}, "
            f"{t.side_info.epochs} epochs",
            f"train-embedder new: d={cfg.embedder.d_new}, {t.new_embedder.epochs} epochs",
            f"train-transform: w={cfg.transformation.width_multiplier}, loss={t.transformation.loss}, "
            f"{t.transformation.epochs} epochs" + (" (+ zero side-info baseline)"
                                                  if cfg.eval.zero_side_baseline else ""),
            f"eval: pairings at ks={list(cfg.eval.ks)}",
        ]
    else:
        shapes = [list(v) for v in cfg.sequence.version_shapes]
        lines += [
            f"gen-data: versions see shapes {shapes}",
            f"train versions: {len(shapes)} embedders and side-info models",
            "train hops: (h, g) per hop, with and without side-info",
            "train direct: single long-hop h from the first to the last version",
            "eval sequence: sequential vs direct updates",
        ]
    lines.append(f"simulate-costs: {cfg.costs.device_count} devices x "
                 f"{cfg.costs.records_per_device} records")
    return lines


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _domain(cfg: ExperimentConfig):
    d = cfg.domain
    return make_domain(cfg.stage_seed(d.seed), d.colors, d.shapes, d.dim, d.sigma)


def _splits(cfg: ExperimentConfig) -> Dict[str, LabeledSet]:
    dom, data = _domain(cfg), cfg.data
    out = {"eval": sample_grid(dom, data.eval_per_cell, seed=cfg.stage_seed(data.eval_seed))}
    if cfg.experiment == "fct":
        out["old"] = sample_grid(dom, data.train_per_cell, shape_subset=data.old_shapes,
                                 label_mode=LabelMode.COLOR, seed=cfg.stage_seed(data.old_seed))
        out["new"] = sample_grid(dom, data.train_per_cell, seed=cfg.stage_seed(data.new_seed))
    else:
        for i, shapes in enumerate(cfg.sequence.version_shapes, start=1):
            out[f"v{i}"] = sample_grid(dom, data.train_per_cell, shape_subset=shapes,
                                       seed=cfg.stage_seed(data.new_seed + SEQ_VERSION_STRIDE * i))
    return out


def gen_data(cfg: ExperimentConfig, dst: Path) -> Dict[str, LabeledSet]:
    splits = _splits(cfg)
    arrays = {}
    for name, s in splits.items():
        arrays.update({f"{name}_inputs": s.inputs, f"{name}_color": s.color, f"{name}_shape": s.shape,
                       f"{name}_mode": np.array(s.label_mode.value)})
    arrays["meta"] = np.array(json.dumps({"colors": cfg.domain.colors, "shapes": cfg.domain.shapes}))
    with open(dst / DATA, "wb") as fh:
        np.savez(fh, **arrays)
    return splits


def load_data(src: Path) -> Dict[str, LabeledSet]:
    path = src / DATA
    if not path.exists():
        raise StateError(f"{path} missing; run gen-data first")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        names = sorted({k.rsplit("_", 1)[0] for k in z.files if k != "meta"})
        out = {}
        for n in names:
            color, shape = z[f"{n}_color"], z[f"{n}_shape"]
            out[n] = LabeledSet(z[f"{n}_inputs"], color, shape, color * meta["shapes"] + shape,
                                LabelMode(str(z[f"{n}_mode"])), meta["colors"], meta["shapes"])
    return out


def _write_history(dst: Path, stage: str, history: List[float]):
    (dst / f"history_{stage}.json").write_text(json.dumps({"stage": stage, "loss": history}) + "\n")


def _read_histories(src: Path) -> Dict[str, List[float]]:
    out = {}
    for p in sorted(src.glob("history_*.json")):
        rec = json.loads(p.read_text())
        out[rec["stage"]] = rec["loss"]
    return out


def _require(path: Path) -> Path:
    if not path.exists():
        raise StateError(f"{path} missing; run the stage that produces it first")
    return path


# ---------------------------------------------------------------------------
# FCT stages
# ---------------------------------------------------------------------------

def stage_train_embedder(cfg: ExperimentConfig, src: Path, dst: Path, role: str):
    data = load_data(src)
    e = cfg.embedder
    if role == "old":
        split, d, seed, stage = data["old"], e.d_old, e.old_seed, cfg.train.old_embedder
    elif role == "new":
        split, d, seed, stage = data["new"], e.d_new, e.new_seed, cfg.train.new_embedder
    else:
        raise ValueError(f"role must be 'old' or 'new', got {role!r}")
    net = build_embedder(split.inputs.shape[1], e.hidden, e.depth, d, split.num_classes,
                         seed=cfg.stage_seed(seed))
    net, hist = train_embedder(net, split, stage.to_train_config(cfg.seed))
    persistence.save_network(net, dst / (PHI_OLD if role == "old" else PHI_NEW))
    _write_history(dst, f"embedder_{role}", hist)
    return net


def stage_train_side_info(cfg: ExperimentConfig, src: Path, dst: Path):
    data = load_data(src)
    psi, hist = train_side_info(cfg.side_info.to_kind(), data["old"], cfg.side_info.d_side,
                                cfg.train.side_info.to_train_config(cfg.seed))
    persistence.save_side_info(psi, dst / PSI)
    _write_history(dst, "side_info", hist)
    return psi


def _new_h(cfg: ExperimentConfig, d_old: int, d_side: int, d_new: int, seed_offset: int = 0):
    t, st = cfg.transformation, cfg.train.transformation
    return build_transformation(d_old, d_side, d_new, t.width, st.normalize_output,
                                seed=cfg.stage_seed(t.seed + seed_offset),
                                proj_width=t.proj_width, mixer_width=t.mixer_width)


def stage_train_transform(cfg: ExperimentConfig, src: Path, dst: Path):
    data = load_data(src)
    phi_old, _ = persistence.load_network(_require(src / PHI_OLD))
    phi_new, _ = persistence.load_network(_require(src / PHI_NEW))
    psi = persistence.load_side_info(_require(src / PSI))
    tcfg = cfg.train.transformation.to_train_config(cfg.seed)
    e, d_side = cfg.embedder, cfg.side_info.d_side
    runs = [("transform", H, psi)]
    if cfg.eval.zero_side_baseline:
        runs.append(("transform_zero", H_ZERO, SideInfoModel(SideKind.ZERO, d_side)))
    out = {}
    for stage, name, side in runs:
        h = _new_h(cfg, e.d_old, d_side, e.d_new)
        h, hist = train_transformation(h, phi_old, side, phi_new, data["new"], tcfg)
        persistence.save_network(h, dst / name)
        _write_history(dst, stage, hist)
        out[stage] = h
    return out


def _store(ids, labels, emb, side=None, version=1, normalized=False) -> GalleryStore:
    side = np.zeros((len(ids), 0)) if side is None else side
    return persistence.quantize_f32(GalleryStore(ids, labels, emb, side, version, normalized))


def _pair(case, query_emb, gallery, cfg, groups, cka=None) -> RetrievalReport:
    q = leave_one_out(query_emb, gallery)
    r = evaluate_pairing(q, gallery, groups=groups, ks=cfg.eval.ks, case=case)
    return dataclasses.replace(r, cka=cka)


def _shape_groups(cfg: ExperimentConfig, seen_shapes) -> Dict[str, List[int]]:
    S, C = cfg.domain.shapes, cfg.domain.colors
    seen = set(seen_shapes)
    return {"seen_shapes": [c * S + s for c in range(C) for s in range(S) if s in seen],
            "new_shapes": [c * S + s for c in range(C) for s in range(S) if s not in seen]}


def stage_eval(cfg: ExperimentConfig, src: Path, dst: Path) -> List[RetrievalReport]:
    ev = load_data(src)["eval"]
    phi_old, _ = persistence.load_network(_require(src / PHI_OLD))
    phi_new, _ = persistence.load_network(_require(src / PHI_NEW))
    psi = persistence.load_side_info(_require(src / PSI))
    h, _ = persistence.load_network(_require(src / H))
    ids, labels = np.arange(len(ev)), ev.joint
    groups = _shape_groups(cfg, cfg.data.old_shapes)

    old_store = _store(ids, labels, features(phi_old, ev.inputs), features(psi, ev.inputs))
    persistence.save_gallery(old_store, dst / GALLERY_OLD, {"model": "phi_old", "side_info": cfg.side_info.kind})
    new_emb = _store(ids, labels, features(phi_new, ev.inputs), version=2).embeddings
    new_store = _store(ids, labels, new_emb, version=2)
    moved = persistence.quantize_f32(apply_fct_update(old_store, h))
    persistence.save_gallery(moved, dst / GALLERY_NEW, {"model": "h(phi_old, psi)"})
    side_cka = cka_linear(old_store.embeddings, old_store.side_info) if cfg.eval.cka else None

    rows = [
        _pair("old/old", old_store.embeddings, old_store, cfg, groups),
        _pair("new/new", new_emb, new_store, cfg, groups),
        _pair("new/old", new_emb, old_store, cfg, groups),
        _pair("new/h(old,psi)", new_emb, moved, cfg, groups, side_cka),
        _pair("h/h", moved.embeddings, moved, cfg, groups, side_cka),
    ]
    if cfg.eval.zero_side_baseline:
        h0, _ = persistence.load_network(_require(src / H_ZERO))
        zero_side = old_store.replace(side_info=np.zeros_like(old_store.side_info))
        moved0 = persistence.quantize_f32(apply_fct_update(zero_side, h0))
        rows.insert(4, _pair("new/h(old,0)", new_emb, moved0, cfg, groups,
                             0.0 if cfg.eval.cka else None))
    reports.emit_run_reports(rows, cfg, _read_histories(src), dst)
    return rows


def stage_simulate_costs(cfg: ExperimentConfig, dst: Path):
    c = cfg.costs
    d_old, d_side, d_new = c.transform_dims
    h = build_transformation(d_old, d_side, d_new, seed=0)
    g = build_transformation(d_old, d_side, d_side, seed=1) if cfg.experiment == "sequence" else None
    dep = DeploymentModel(c.device_count, c.records_per_device, d_new, c.backbone_macs, c.image_bytes)
    rows = compare_strategies(dep, h, g)
    reports.emit_cost_reports(rows, dep, dst, h_macs=count_macs(h))
    return rows


# ---------------------------------------------------------------------------
# chained updates
# ---------------------------------------------------------------------------

def _version_models(cfg: ExperimentConfig, data: Dict[str, LabeledSet], dst: Path):
    e, si = cfg.embedder, cfg.side_info
    models = []
    for i in range(1, len(cfg.sequence.version_shapes) + 1):
        split = data[f"v{i}"]
        net = build_embedder(split.inputs.shape[1], e.hidden, e.depth, e.d_new, split.num_classes,
                             seed=cfg.stage_seed(e.new_seed + SEQ_VERSION_STRIDE * i))
        net, hist = train_embedder(net, split, cfg.train.new_embedder.to_train_config(cfg.seed))
        _write_history(dst, f"embedder_v{i}", hist)
        scfg = cfg.train.side_info
        scfg = dataclasses.replace(scfg, seed=scfg.seed + SEQ_VERSION_STRIDE * i)
        psi, hist = train_side_info(si.to_kind(), split, si.d_side, scfg.to_train_config(cfg.seed))
        _write_history(dst, f"side_info_v{i}", hist)
        persistence.save_network(net, dst / f"phi_v{i}.npz")
        persistence.save_side_info(psi, dst / f"psi_v{i}.npz")
        models.append((net, psi))
    return models


def run_sequence(cfg: ExperimentConfig, dst: Path) -> List[RetrievalReport]:
    data = gen_data(cfg, dst)
    models = _version_models(cfg, data, dst)
    d, d_side = cfg.embedder.d_new, cfg.side_info.d_side
    tcfg = cfg.train.transformation.to_train_config(cfg.seed)
    zero = SideInfoModel(SideKind.ZERO, d_side)
    chains = {"psi": [], "zero": []}
    for hop in range(1, len(models)):
        prev, nxt = models[hop - 1], models[hop]
        split = data[f"v{hop + 1}"]
        for tag, (p_prev, p_next) in (("psi", (prev[1], nxt[1])), ("zero", (zero, zero))):
            h = _new_h(cfg, d, d_side, d, seed_offset=SEQ_VERSION_STRIDE * hop)
            g = _new_h(cfg, d, d_side, d_side, seed_offset=SEQ_VERSION_STRIDE * hop + 1)
            h, g, hist_h, hist_g = train_sequence_step(h, g, (prev[0], p_prev), (nxt[0], p_next),
                                                       split, tcfg)
            _write_history(dst, f"hop{hop}_{tag}_h", hist_h)
            _write_history(dst, f"hop{hop}_{tag}_g", hist_g)
            persistence.save_network(h, dst / f"h_{hop}_{tag}.npz")
            persistence.save_network(g, dst / f"g_{hop}_{tag}.npz")
            chains[tag].append((h, g))
    last = len(models)
    h_direct = _new_h(cfg, d, d_side, d, seed_offset=SEQ_VERSION_STRIDE * last)
    h_direct, hist = train_transformation(h_direct, models[0][0], models[0][1], models[-1][0],
                                          data[f"v{last}"], tcfg)
    _write_history(dst, "direct", hist)
    persistence.save_network(h_direct, dst / "h_direct.npz")

    ev = data["eval"]
    ids, labels = np.arange(len(ev)), ev.joint
    first, final = models[0], models[-1]
    groups = _shape_groups(cfg, cfg.sequence.version_shapes[0])
    v1 = _store(ids, labels, features(first[0], ev.inputs), features(first[1], ev.inputs))
    v1_zero = v1.replace(side_info=np.zeros_like(v1.side_info))
    final_emb = _store(ids, labels, features(final[0], ev.inputs)).embeddings
    final_store = _store(ids, labels, final_emb, version=last)

    def terminal(chain):
        # the last hop needs no side-info afterwards
        return chain[:-1] + [(chain[-1][0], None)]

    seq_psi = persistence.quantize_f32(apply_sequence(v1, terminal(chains["psi"])))
    seq_zero = persistence.quantize_f32(apply_sequence(v1_zero, terminal(chains["zero"])))
    direct = persistence.quantize_f32(apply_direct(v1, h_direct, hops=last - 1))
    persistence.save_gallery(v1, dst / GALLERY_OLD, {"model": "v1"})
    persistence.save_gallery(seq_psi, dst / f"gallery_v{last}_sequential.fctg", {"model": "sequential"})
    persistence.save_gallery(direct, dst / f"gallery_v{last}_direct.fctg", {"model": "direct"})
    n = last
    rows = [
        _pair(f"v{n}/v{n}", final_emb, final_store, cfg, groups),
        _pair(f"v{n}/v1", final_emb, v1, cfg, groups),
        _pair(f"v{n}/seq(v1,psi)", final_emb, seq_psi, cfg, groups),
        _pair(f"v{n}/seq(v1,0)", final_emb, seq_zero, cfg, groups),
        _pair(f"v{n}/direct(v1,psi)", final_emb, direct, cfg, groups),
    ]
    reports.emit_run_reports(rows, cfg, _read_histories(dst), dst)
    stage_simulate_costs(cfg, dst)
    return rows


def run_fct(cfg: ExperimentConfig, dst: Path) -> List[RetrievalReport]:
    gen_data(cfg, dst)
    stage_train_embedder(cfg, dst, dst, "old")
    stage_train_side_info(cfg, dst, dst)
    stage_train_embedder(cfg, dst, dst, "new")
    stage_train_transform(cfg, dst, dst)
    rows = stage_eval(cfg, dst, dst)
    stage_simulate_costs(cfg, dst)
    return rows


def run(cfg: ExperimentConfig, dst: Path) -> List[RetrievalReport]:
    return run_fct(cfg, dst) if cfg.experiment == "fct" else run_sequence(cfg, dst)
