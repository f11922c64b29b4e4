"""Component and input-feature ablations on the synthetic benchmark.

Each variant is trained from scratch for every seed and scored on the
validation scenes with its final weights. The full model (E) doubles as the
``xyvs`` feature row, so the feature matrix only adds three new variants.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from grt.backbone import GRTConfig, build
from grt.training import AugmentConfig, LossConfig, OptimConfig, evaluate, train

COMPONENTS = {
    "A": {"attention": "softmax", "downsample": "maxpool", "upsample": "trilinear"},
    "B": {"attention": "softmax", "downsample": "attentive", "upsample": "trilinear"},
    "C": {"attention": "softmax", "downsample": "maxpool", "upsample": "attentive"},
    "D": {"attention": "softmax", "downsample": "attentive", "upsample": "attentive"},
    "E": {"attention": "gaussian", "downsample": "attentive", "upsample": "attentive"},
}
FEATURES = ("xy", "xys", "xyv", "xyvs")


def variant_configs(base: GRTConfig) -> dict[str, GRTConfig]:
    """Component rows A-E, then feature rows on top of the full model."""
    out = {name: dataclasses.replace(base, **flags) for name, flags in COMPONENTS.items()}
    for feats in FEATURES:
        out[feats] = dataclasses.replace(out["E"], features=feats)
    return out


def config_hash(cfg: GRTConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class VariantResult:
    name: str
    config: GRTConfig
    mious: list[float]
    f1s: list[float]
    seconds: float = 0.0

    @property
    def miou(self) -> float:
        return float(np.mean(self.mious))

    @property
    def f1(self) -> float:
        return float(np.mean(self.f1s))

    @property
    def miou_spread(self) -> float:
        """Sample standard deviation over seeds (0 for a single seed)."""
        return float(np.std(self.mious, ddof=1)) if len(self.mious) > 1 else 0.0

    @property
    def f1_spread(self) -> float:
        return float(np.std(self.f1s, ddof=1)) if len(self.f1s) > 1 else 0.0


def run_variant(name, cfg, train_clouds, val_clouds, optim, loss_cfg, aug, seeds,
                log: Callable[[str], None] | None = None) -> VariantResult:
    result = VariantResult(name, cfg, [], [])
    start = time.perf_counter()
    for seed in seeds:
        model = build(cfg, seed=seed)
        train(model, train_clouds, None, optim, loss_cfg, aug, seed=seed)
        cm = evaluate(model, val_clouds)
        result.mious.append(cm.iou()[1])
        result.f1s.append(cm.f1()[1])
        if log:
            log(f"{name} seed {seed}: mIoU {result.mious[-1]:.4f} F1 {result.f1s[-1]:.4f}")
    result.seconds = time.perf_counter() - start
    return result


@dataclass
class AblationReport:
    components: list[VariantResult]
    features: list[VariantResult]

    def row(self, name: str) -> VariantResult:
        for r in self.components + self.features:
            if r.name == name:
                return r
        raise KeyError(name)

    def component_direction(self) -> tuple[bool, str]:
        """E beats A on mean mIoU and is not below any intermediate beyond the seed spread."""
        e, a = self.row("E"), self.row("A")
        ok = e.miou > a.miou
        notes = [f"E - A = {e.miou - a.miou:+.4f}"]
        for name in ("B", "C", "D"):
            r = self.row(name)
            slack = max(e.miou_spread, r.miou_spread)
            ok &= e.miou >= r.miou - slack
            notes.append(f"E - {name} = {e.miou - r.miou:+.4f} (spread {slack:.4f})")
        return ok, "; ".join(notes)

    def feature_direction(self) -> tuple[bool, str]:
        """Adding v strictly helps and adding sigma on top does not hurt."""
        xy, xyv, xyvs = self.row("xy"), self.row("xyv"), self.row("xyvs")
        ok = xyv.miou > xy.miou and xyvs.miou >= xyv.miou
        return ok, f"xyv - xy = {xyv.miou - xy.miou:+.4f}; xyvs - xyv = {xyvs.miou - xyv.miou:+.4f}"

    def to_text(self) -> str:
        lines = [f"{'variant':8} {'attention':9} {'down':9} {'up':9} {'feat':5} "
                 f"{'mIoU':>15} {'macro-F1':>15}  hash"]
        for title, rows in (("components", self.components), ("features", self.features)):
            lines.append(f"# {title}")
            for r in rows:
                c = r.config
                lines.append(f"{r.name:8} {c.attention:9} {c.downsample:9} {c.upsample:9} {c.features:5} "
                             f"{r.miou:.4f} ± {r.miou_spread:.4f} {r.f1:.4f} ± {r.f1_spread:.4f}  "
                             f"{config_hash(c)}")
        for label, (ok, note) in (("component direction", self.component_direction()),
                                  ("feature direction", self.feature_direction())):
            lines.append(f"{label}: {'PASS' if ok else 'FAIL'} ({note})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        def rows(rs):
            return [{"name": r.name, "config": r.config.to_dict(), "hash": config_hash(r.config),
                     "miou": r.mious, "f1": r.f1s, "miou_mean": r.miou, "miou_spread": r.miou_spread,
                     "f1_mean": r.f1, "f1_spread": r.f1_spread, "seconds": r.seconds} for r in rs]
        return {"components": rows(self.components), "features": rows(self.features),
                "component_direction": self.component_direction()[0],
                "feature_direction": self.feature_direction()[0]}


def run_ablation(base: GRTConfig, train_clouds, val_clouds, optim: OptimConfig, loss_cfg: LossConfig,
                 aug: AugmentConfig, seeds=(0, 1, 2), log=None,
                 include_features: bool = True) -> AblationReport:
    configs = variant_configs(base)
    components = [run_variant(n, configs[n], train_clouds, val_clouds, optim, loss_cfg, aug, seeds, log)
                  for n in COMPONENTS]
    features = []
    if include_features:
        for feats in FEATURES:
            if configs[feats] == configs["E"]:
                e = components[-1]
                features.append(dataclasses.replace(e, name=feats, config=configs[feats]))
                continue
            features.append(run_variant(feats, configs[feats], train_clouds, val_clouds, optim,
                                        loss_cfg, aug, seeds, log))
    return AblationReport(components, features)
