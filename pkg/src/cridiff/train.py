"""Training, prediction, evaluation, and ablation pipelines behind the CLI."""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from . import __version__, checkpoint, data, diffusion, labels, metrics
from .conditioners import ConditionerNet
from .config import ConfigError, RunConfig
from .denoiser import Denoiser, InjectionPlan, build_injection_plan, init_weights


def _sched(cfg: RunConfig, T: Optional[int] = None):
    return diffusion.make_schedule(T or cfg.T, cfg.beta_start, cfg.beta_end)


def load_arrays(pairs) -> Tuple[torch.Tensor, ...]:
    """Load (images, masks, g_b, g_c) tensors of shape (N,1,H,W) from pairs."""
    imgs, msks, gbs, gcs = [], [], [], []
    for ip, mp in pairs:
        img = data.load_image01(ip)
        mask = data.load_mask(mp)
        dec = labels.decouple_labels(mask)
        imgs.append(img)
        msks.append(dec.g_p)
        gbs.append(dec.g_b)
        gcs.append(dec.g_c)
    to = lambda arrs: torch.from_numpy(np.stack(arrs)[:, None]).float()
    return to(imgs), to(msks), to(gbs), to(gcs)


def write_manifest(cfg: RunConfig, out_dir: Path, extra: Optional[dict] = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "code_version": __version__,
    }
    manifest.update(extra or {})
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def write_loss_csv(path, losses: List[float]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, l in enumerate(losses):
            w.writerow([i, f"{l:.8f}"])


def _require_data(cfg: RunConfig) -> data.DatasetManifest:
    if not cfg.data_root:
        raise ConfigError("data_root is required")
    manifest = data.load_dataset(cfg.data_root)
    return data.split_manifest(manifest, cfg.split_fractions, cfg.seed)


def build_models(cfg: RunConfig, gp_weights=None):
    torch.manual_seed(cfg.seed)
    cond_net = ConditionerNet(variant=cfg.variant)
    den = Denoiser(widths=cfg.widths, small=cfg.small)
    init_weights(den, cfg.init, checkpoint_weights=gp_weights)
    plan = build_injection_plan(cfg.strategy, cfg.ratio, cfg.variant)
    return cond_net, den, plan


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def run_pretrain(cfg: RunConfig) -> Path:
    """Generative pretraining of the denoiser backbone on raw images."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _require_data(cfg)
    pairs = manifest.subset("train") or manifest.pairs
    images, _, _, _ = load_arrays(pairs)
    sched = _sched(cfg)
    torch.manual_seed(cfg.seed)
    model = Denoiser(widths=cfg.widths, small=cfg.small)
    gen = torch.Generator().manual_seed(cfg.seed)
    losses = diffusion.pretrain_generative(
        diffusion.encode_pm1(images),
        model,
        sched,
        steps=cfg.pretrain_steps,
        lr=cfg.pretrain_lr,
        batch_size=cfg.batch_size,
        generator=gen,
    )
    ckpt_path = out / "pretrain.ckpt"
    checkpoint.save_checkpoint(
        ckpt_path,
        weights={"denoiser_backbone": model.backbone_state_dict()},
        schedule={"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        meta={"kind": "pretrain", "config_hash": cfg.hash()},
    )
    write_loss_csv(out / "pretrain_loss.csv", losses)
    write_manifest(cfg, out, {"kind": "pretrain", "checkpoint": str(ckpt_path)})
    return ckpt_path


# ---------------------------------------------------------------------------
# joint segmentation training
# ---------------------------------------------------------------------------


def run_train(cfg: RunConfig, resume: Optional[str] = None) -> Path:
    """Joint optimization of conditioner supervision + denoising MSE."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _require_data(cfg)
    pairs = manifest.subset("train") or manifest.pairs
    images, masks, g_b, g_c = load_arrays(pairs)
    sched = _sched(cfg)

    gp_weights = None
    if cfg.init == "gp":
        payload = checkpoint.load_checkpoint(cfg.gp_checkpoint)
        gp_weights = payload["weights"]["denoiser_backbone"]
    cond_net, den, plan = build_models(cfg, gp_weights)
    # the zero-initialized injectors start from a dead gradient path, so they
    # get their own (typically faster) learning rate
    inj_params = [p for n, p in den.named_parameters() if n.startswith("injectors.")]
    rest = [p for n, p in den.named_parameters() if not n.startswith("injectors.")]
    opt = torch.optim.AdamW(
        [
            {"params": list(cond_net.parameters()) + rest, "lr": cfg.lr},
            {"params": inj_params, "lr": cfg.lr * cfg.injector_lr_mult},
        ]
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    start_step = 0
    if resume:
        payload = checkpoint.load_checkpoint(resume)
        cond_net.load_state_dict(payload["weights"]["conditioner"])
        den.load_state_dict(payload["weights"]["denoiser"])
        opt.load_state_dict(payload["meta"]["optimizer"])
        gen.set_state(payload["meta"]["rng_state"])
        start_step = payload["meta"]["step"]

    n = images.shape[0]
    losses = []
    cond_net.train()
    den.train()
    t0 = time.time()
    for step in range(start_step, cfg.iterations):
        idx = torch.randint(0, n, (min(cfg.batch_size, n),), generator=gen)
        img, mask = images[idx], masks[idx]
        nodes = cond_net(img)
        closs = cond_net.loss(nodes, mask, g_b[idx], g_c[idx])
        t = torch.randint(1, sched.T + 1, (img.shape[0],), generator=gen)
        eps = torch.empty_like(mask).normal_(generator=gen)
        x_t = diffusion.forward_noise_batch(diffusion.encode_pm1(mask), t, eps, sched)
        dloss = diffusion.simple_loss(den(x_t, t, nodes, plan), eps)
        loss = closs + dloss
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    ckpt_path = out / "train.ckpt"
    checkpoint.save_checkpoint(
        ckpt_path,
        weights={
            "conditioner": cond_net.state_dict(),
            "denoiser": den.state_dict(),
        },
        schedule={"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        meta={
            "kind": "train",
            "config": cfg.to_dict(),
            "plan": plan.serialize(),
            "optimizer": opt.state_dict(),
            "rng_state": gen.get_state(),
            "step": cfg.iterations,
        },
    )
    write_loss_csv(out / "train_loss.csv", losses)
    write_manifest(
        cfg,
        out,
        {
            "kind": "train",
            "checkpoint": str(ckpt_path),
            "plan": plan.serialize(),
            "train_seconds": round(time.time() - t0, 1),
        },
    )
    return ckpt_path


def load_trained(ckpt_path) -> Tuple[ConditionerNet, Denoiser, InjectionPlan, object, RunConfig]:
    """Rebuild conditioner/denoiser/plan/schedule from a training checkpoint."""
    payload = checkpoint.load_checkpoint(ckpt_path)
    cfg = RunConfig(**payload["meta"]["config"]).validate()
    cond_net = ConditionerNet(variant=cfg.variant)
    den = Denoiser(widths=cfg.widths, small=cfg.small)
    cond_net.load_state_dict(payload["weights"]["conditioner"])
    den.load_state_dict(payload["weights"]["denoiser"])
    plan = build_injection_plan(cfg.strategy, cfg.ratio, cfg.variant)
    s = payload["schedule"]
    sched = diffusion.make_schedule(s["T"], s["beta_start"], s["beta_end"])
    return cond_net, den, plan, sched, cfg


# ---------------------------------------------------------------------------
# prediction / evaluation
# ---------------------------------------------------------------------------


def predict_image(
    cond_net, den, plan, sched, image: torch.Tensor, K: int, seed: int, threshold: float
):
    """Ensemble prediction for one (1,1,H,W) image tensor."""
    cond_net.eval()
    den.eval()
    with torch.no_grad():
        nodes = cond_net(image)
        model_fn = lambda x, t, cond: den(x, t, nodes, plan)
        return diffusion.ensemble_predict(
            model_fn, None, sched, image.shape, K, seed, threshold
        )


def run_predict(cfg: RunConfig, ckpt_path, input_dir, out_dir) -> List[str]:
    cond_net, den, plan, sched, tc = load_trained(ckpt_path)
    if cfg.sample_T:
        sched = diffusion.make_schedule(cfg.sample_T, tc.beta_start, tc.beta_end)
    out = Path(out_dir)
    for sub in ("masks", "mean", "variance"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    paths = sorted(Path(input_dir).glob("*.png"))
    if not paths:
        raise ConfigError(f"no PNG inputs under {input_dir}")
    stems = []
    for p in paths:
        img = torch.from_numpy(data.load_image01(p)).float()[None, None]
        mean, binary, var = predict_image(
            cond_net, den, plan, sched, img, cfg.ensemble_k, cfg.seed, cfg.threshold
        )
        data.save_png(out / "masks" / p.name, binary[0, 0].numpy())
        data.save_png(out / "mean" / p.name, mean[0, 0].numpy())
        data.save_png16(out / "variance" / p.name, var[0, 0].numpy())
        stems.append(p.stem)
    write_manifest(cfg, out, {"kind": "predict", "inputs": len(stems)})
    return stems


def run_evaluate(pred_dir, gt_dir, out_csv, percentile: float = 100.0):
    preds = {p.stem: p for p in sorted(Path(pred_dir).glob("*.png"))}
    gts = {p.stem: p for p in sorted(Path(gt_dir).glob("*.png"))}
    unpaired = sorted(set(preds) ^ set(gts))
    if unpaired:
        raise ConfigError(f"unpaired stems: {unpaired[:5]}")
    ids, reports = [], []
    for stem in sorted(preds):
        r = metrics.evaluate_pair(
            data.load_mask(preds[stem]), data.load_mask(gts[stem]), percentile
        )
        ids.append(stem)
        reports.append(r)
    metrics.write_metrics_csv(out_csv, ids, reports)
    return ids, reports


def val_dice(
    cond_net, den, plan, sched, images, masks, seed: int, threshold: float = 0.5,
    chunk: int = 24, K: int = 1,
) -> float:
    """Mean Dice of K-run ensemble sampling over a validation tensor batch.

    Images in a chunk share each reverse run (batched), so this is much
    faster than per-image ensemble_predict at identical semantics.
    """
    cond_net.eval()
    den.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            img = images[start : start + chunk]
            msk = masks[start : start + chunk]
            nodes = cond_net(img)
            mean = torch.zeros_like(img)
            for k in range(K):
                gen = torch.Generator().manual_seed(
                    diffusion._stream_seed(seed + start, k)
                )
                x = diffusion.sample(
                    lambda x, t, c: den(x, t, nodes, plan), None, sched, img.shape,
                    gen, clip_x0=True,
                )
                mean += diffusion.decode01(x)
            pred = (mean / K >= threshold).numpy()
            for k in range(img.shape[0]):
                scores.append(metrics.dsc(pred[k, 0], msk[k, 0].numpy() > 0.5))
    cond_net.train()
    den.train()
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "conditioner": [("variant", v) for v in ("p", "pstar", "pc", "pb", "full")],
    "strategy": [
        ("strategy_ratio", ("sbs", "2:2")),
        ("strategy_ratio", ("crisscross", "2:2")),
        ("strategy_ratio", ("crisscross", "1:3")),
        ("strategy_ratio", ("crisscross", "3:1")),
    ],
    "init": [("init", m) for m in ("random", "kaiming", "gp")],
}


def run_ablate(cfg: RunConfig, axis: str) -> Path:
    """Train each variant along one axis with shared seed/data; compare val Dice."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {sorted(ABLATION_AXES)}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _require_data(cfg)
    val_pairs = manifest.subset("val") or manifest.pairs[:8]
    vimages, vmasks, _, _ = load_arrays(val_pairs)

    gp_ckpt = cfg.gp_checkpoint
    if axis == "init" and not gp_ckpt:
        pcfg = _replace(cfg, out_dir=str(out / "gp_pretrain"))
        gp_ckpt = str(run_pretrain(pcfg))

    rows = []
    for field, value in ABLATION_AXES[axis]:
        if field == "variant":
            sub = _replace(cfg, variant=value, out_dir=str(out / f"variant_{value}"))
            label = value
        elif field == "strategy_ratio":
            strat, ratio = value
            sub = _replace(
                cfg, strategy=strat, ratio=ratio,
                out_dir=str(out / f"strategy_{strat}_{ratio.replace(':', 'to')}"),
            )
            label = f"{strat} {ratio}"
        else:
            sub = _replace(
                cfg, init=value, gp_checkpoint=gp_ckpt if value == "gp" else None,
                out_dir=str(out / f"init_{value}"),
            )
            label = value
        ckpt = run_train(sub)
        cond_net, den, plan, sched, _ = load_trained(ckpt)
        d = val_dice(cond_net, den, plan, sched, vimages, vmasks, cfg.seed)
        rows.append((label, d))

    table_path = out / f"ablation_{axis}.csv"
    with open(table_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([axis, "val_dice"])
        for label, d in rows:
            w.writerow([label, f"{d:.3f}"])
    write_manifest(cfg, out, {"kind": "ablate", "axis": axis, "rows": rows})
    return table_path


def _replace(cfg: RunConfig, **kw) -> RunConfig:
    d = cfg.to_dict()
    d.update(kw)
    return RunConfig(**d).validate()


# ---------------------------------------------------------------------------
# label decoupling + plotting commands
# ---------------------------------------------------------------------------


def run_decouple(mask_dir, out_dir) -> int:
    paths = sorted(Path(mask_dir).glob("*.png"))
    if not paths:
        raise ConfigError(f"no mask PNGs under {mask_dir}")
    out = Path(out_dir)
    for sub in ("i_prime", "g_b", "g_c"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for p in paths:
        dec = labels.decouple_labels(data.load_mask(p))
        data.save_png16(out / "i_prime" / p.name, dec.i_prime)
        data.save_png16(out / "g_b" / p.name, dec.g_b)
        data.save_png16(out / "g_c" / p.name, dec.g_c)
    return len(paths)


def run_plot(run_dir, out_dir=None) -> List[Path]:
    """Loss-curve and metric-bar figures for every CSV found in a run dir."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run
    out.mkdir(parents=True, exist_ok=True)
    made = []
    for csv_path in sorted(run.glob("*loss*.csv")):
        steps, vals = [], []
        with open(csv_path) as fh:
            for row in csv.DictReader(fh):
                steps.append(int(row["step"]))
                vals.append(float(row["loss"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(steps, vals, lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(csv_path.stem)
        fig_path = out / f"{csv_path.stem}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        made.append(fig_path)
    for csv_path in sorted(run.glob("ablation_*.csv")) + sorted(run.glob("metrics*.csv")):
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        labels_, values = [], []
        for r in body:
            try:
                values.append(float(r[1]))
                labels_.append(r[0])
            except (ValueError, IndexError):
                continue
        if not values:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(values)), values)
        ax.set_xticks(range(len(values)), labels_, rotation=30, ha="right")
        ax.set_ylabel(header[1])
        ax.set_title(csv_path.stem)
        fig.tight_layout()
        fig_path = out / f"{csv_path.stem}.png"
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        made.append(fig_path)
    return made


def dump_grids(cond_net: ConditionerNet, image: torch.Tensor, out_dir) -> Path:
    """Write every conditioner node as a normalized PNG plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cond_net.eval()
    with torch.no_grad():
        nodes = cond_net(image)
    entries = []
    for key, tensor in sorted(nodes.items()):
        fmap = tensor[0].mean(0).numpy()
        lo, hi = fmap.min(), fmap.max()
        norm = (fmap - lo) / (hi - lo) if hi > lo else np.zeros_like(fmap)
        fname = key.replace(":", "_") + ".png"
        data.save_png(out / fname, norm)
        entries.append({"node": key, "file": fname, "shape": list(tensor.shape)})
    with open(out / "grid_manifest.json", "w") as fh:
        json.dump(entries, fh, indent=2)
    return out
