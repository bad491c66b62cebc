"""Experiment orchestration: configs, training runs, the ablation ladder, the
prompt-count sweep and plot export."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bench.detector import DetectorConfig, ToyDetector, forward
from .bench.evaluation import evaluate_ap
from .bench.protocols import scene_prompts, visual_g_prompts, visual_i_prompts
from .bench.scenes import CorpusSpec, SceneParams
from .bench.training import TrainConfig, batches, make_optimizer, train_step
from .errors import ConfigError, DegenerateInterSimilarityError, NumericAbort
from .fusion import FusionMode
from .losses import FocalParams, LossWeights, Temperatures
from .metrics import LabeledEmbeddings, iisr

SEED_ENV = "VIPLAB_SEED"
TRAIN_SEED_BASE, SUPPORT_SEED_BASE, TEST_SEED_BASE = 1000, 5000, 9000


@dataclass
class RunSection:
    seed: int = 0
    epochs: int = 4
    steps_per_epoch: int = 400
    batch_size: int = 8
    threads: int = 1


@dataclass
class CorpusSection:
    K: int = 12
    D: int = 32
    groups: int = 4
    space_seed: int = 0
    train_scenes: int = 400
    support_scenes: int = 200
    test_scenes: int = 100
    n_per_class: int = 8
    max_instances: int = 5
    sigma_inst: float = 0.1
    sigma_scene: float = 0.6
    sigma_bg: float = 0.35


@dataclass
class ModelSection:
    enc_layers: int = 2
    dec_layers: int = 2
    prompt_layers: int = 3
    n_heads: int = 2
    n_points: int = 4
    top_k: int = 20
    score_threshold: float = 0.05
    nms_iou: float = 0.5  # 0 disables suppression


@dataclass
class LossSection:
    align: bool = False
    global_integration: bool = False
    distill: bool = False
    scl_instead_of_distill: bool = False
    prompt_subsets: bool = True
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_align: float = 1.0
    lambda_distill: float = 10.0
    alpha: float = 0.25
    gamma: float = 2.0
    tau_t: float = 0.07
    tau_v: float = 0.1
    align_tau: float = 0.07


@dataclass
class FusionSection:
    encoder: str = "none"
    decoder: str = "none"
    threshold: float = 0.1


@dataclass
class OptimSection:
    lr: float = 2e-3
    backbone_lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    lr_drop: float = 0.8  # fraction of all steps after which the rate is scaled; >= 1 disables
    drop_factor: float = 0.1


SECTIONS = {
    "run": RunSection,
    "corpus": CorpusSection,
    "model": ModelSection,
    "losses": LossSection,
    "fusion": FusionSection,
    "optim": OptimSection,
}


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    losses: LossSection = field(default_factory=LossSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def validate(self) -> "ExperimentConfig":
        if self.losses.distill and self.losses.scl_instead_of_distill:
            raise ConfigError("losses.distill and losses.scl_instead_of_distill are mutually exclusive")
        for place in ("encoder", "decoder"):
            value = getattr(self.fusion, place)
            try:
                FusionMode(value)
            except ValueError:
                raise ConfigError(f"fusion.{place} must be none, full or selective, got {value!r}") from None
        selective = FusionMode.SELECTIVE.value in (self.fusion.encoder, self.fusion.decoder)
        if selective and not 0.0 < self.fusion.threshold < 1.0:
            raise ConfigError("selective fusion needs fusion.threshold in (0, 1)")
        if self.run.epochs < 0 or self.run.steps_per_epoch < 1 or self.run.batch_size < 1:
            raise ConfigError("run.epochs must be >= 0, steps_per_epoch and batch_size >= 1")
        c = self.corpus
        if min(c.train_scenes, c.support_scenes, c.test_scenes, c.n_per_class) < 1:
            raise ConfigError("corpus sizes must be positive")
        if c.K < c.groups:
            raise ConfigError(f"corpus.K={c.K} is smaller than corpus.groups={c.groups}")
        try:
            self.weights(), self.focal(), self.temperatures()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    # typed views used by the library layers

    def weights(self) -> LossWeights:
        s = self.losses
        return LossWeights(s.lambda_cls, s.lambda_l1, s.lambda_giou, s.lambda_align, s.lambda_distill)

    def focal(self) -> FocalParams:
        return FocalParams(self.losses.alpha, self.losses.gamma)

    def temperatures(self) -> Temperatures:
        return Temperatures(self.losses.tau_t, self.losses.tau_v)

    def total_steps(self) -> int:
        return self.run.epochs * self.run.steps_per_epoch

    def train_config(self) -> TrainConfig:
        s, o = self.losses, self.optim
        return TrainConfig(
            batch_size=self.run.batch_size, steps=self.total_steps(), lr=o.lr, backbone_lr=o.backbone_lr,
            weight_decay=o.weight_decay, grad_clip=o.grad_clip, align=s.align,
            global_integration=s.global_integration, distill=s.distill,
            scl_instead_of_distill=s.scl_instead_of_distill, align_tau=s.align_tau,
            prompt_subsets=s.prompt_subsets, weights=self.weights(), focal=self.focal(),
            temps=self.temperatures(),
        )

    def detector_config(self) -> DetectorConfig:
        m = self.model
        return DetectorConfig(
            dim=self.corpus.D, enc_layers=m.enc_layers, dec_layers=m.dec_layers,
            prompt_layers=m.prompt_layers, n_heads=m.n_heads, n_points=m.n_points, top_k=m.top_k,
            score_threshold=m.score_threshold, nms_iou=m.nms_iou or None,
            encoder_fusion=self.fusion.encoder, decoder_fusion=self.fusion.decoder,
            fusion_threshold=self.fusion.threshold,
        )

    def corpus_split(self, split: str) -> CorpusSpec:
        c = self.corpus
        base, n = {
            "train": (TRAIN_SEED_BASE, c.train_scenes),
            "support": (SUPPORT_SEED_BASE, c.support_scenes),
            "test": (TEST_SEED_BASE, c.test_scenes),
        }[split]
        scene = SceneParams(max_instances=c.max_instances, sigma_inst=c.sigma_inst,
                            sigma_scene=c.sigma_scene, sigma_bg=c.sigma_bg)
        return CorpusSpec(K=c.K, D=c.D, groups=c.groups, space_seed=c.space_seed,
                          scene_seeds=list(range(base, base + n)), scene=scene)

    # persistence

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        cfg = cls()
        for name, values in data.items():
            for key, value in values.items():
                cfg.set(f"{name}.{key}", value)
        return cfg.validate()

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def set(self, dotted: str, value) -> None:
        """Assign ``section.key``; strings are parsed against the field type."""
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}")
        target = getattr(self, section)
        if key not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        default = getattr(SECTIONS[section](), key)
        if isinstance(value, str):
            value = _parse_value(value, default, dotted)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif type(value) is not type(default):
            raise ConfigError(f"{dotted}: expected {type(default).__name__}, got {type(value).__name__}")
        setattr(target, key, value)

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides."""
        out = ExperimentConfig.from_dict(self.to_dict())
        for k, v in dotted.items():
            out.set(k.replace("__", ".", 1), v)
        return out.validate()

    def write(self, path) -> None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for name, values in self.to_dict().items():
            parser[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
        with open(path, "w") as fh:
            parser.write(fh)


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Read an INI-style config, apply ``section.key=value`` overrides, then the seed env var."""
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser[section].items():
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not section.key=value")
        cfg.set(key.strip(), value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.set("run.seed", env[SEED_ENV])
    return cfg.validate()


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> set:
    """Dotted keys whose values differ."""
    da, db = a.to_dict(), b.to_dict()
    return {f"{s}.{k}" for s in da for k in da[s] if da[s][k] != db[s][k]}


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    epochs: list = field(default_factory=list)  # one metrics dict per evaluation, epoch 0 = init
    wall_clock: float = 0.0
    checkpoint: str | None = None
    status: str = "ok"
    error: str | None = None

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "RunRecord":
        return cls(**data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(json.loads(Path(path).read_text()))


class Workspace:
    """Scenes and text embeddings of one corpus configuration, built once."""

    def __init__(self, cfg: ExperimentConfig):
        train = cfg.corpus_split("train")
        self.space = train.build_space()
        self.train = train.build_scenes(self.space)
        self.support = cfg.corpus_split("support").build_scenes(self.space)
        self.test = cfg.corpus_split("test").build_scenes(self.space)
        self.text = torch.tensor(self.space.text_embeds, dtype=torch.float32)
        self.n_per_class = cfg.corpus.n_per_class


def safe_iisr(data: LabeledEmbeddings) -> float:
    """IISR over the categories with at least two members; NaN when undefined."""
    groups = data.groups()
    keep = sorted(i for rows in groups.values() if len(rows) >= 2 for i in rows)
    if sum(len(rows) >= 2 for rows in groups.values()) < 2:
        return float("nan")
    try:
        return iisr(LabeledEmbeddings(data.embeddings[keep], [data.labels[i] for i in keep]))
    except DegenerateInterSimilarityError:
        return float("nan")


@torch.no_grad()
def evaluate_model(model: ToyDetector, ws: Workspace, seed: int = 0) -> dict:
    """Visual-G and Visual-I mAP on the test split, and IISR of per-instance test prompts."""
    gts = [s.instances for s in ws.test]
    bank = visual_g_prompts(model, ws.support, ws.n_per_class, seed=seed)
    map_g = evaluate_ap(forward(model, ws.test, bank), gts).mAP
    ibanks = [visual_i_prompts(model, s, seed=seed + k) for k, s in enumerate(ws.test)]
    map_i = evaluate_ap(forward(model, ws.test, ibanks), gts).mAP
    prompts, labels = scene_prompts(model, ws.test, by_instance=True)
    value = safe_iisr(LabeledEmbeddings(prompts.double().numpy(), labels))
    return {"map_g": map_g, "map_i": map_i, "iisr": value}


def save_checkpoint(path, cfg: ExperimentConfig, model: ToyDetector) -> None:
    torch.save({"config": cfg.to_dict(), "state": model.state_dict()}, path)


def load_checkpoint(path) -> tuple[ExperimentConfig, ToyDetector]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise FileNotFoundError(f"no checkpoint at {path}") from None
    cfg = ExperimentConfig.from_dict(blob["config"])
    model = ToyDetector(cfg.detector_config())
    model.load_state_dict(blob["state"])
    model.eval()
    return cfg, model


def run_training(cfg: ExperimentConfig, out_dir=None, workspace: Workspace | None = None) -> RunRecord:
    """Train one model; evaluates at initialization and after every epoch.

    Deterministic given the config (single-threaded CPU kernels). Non-finite
    losses raise ``NumericAbort`` carrying the global step index.
    """
    cfg.validate()
    torch.set_num_threads(cfg.run.threads)
    torch.manual_seed(cfg.run.seed)
    ws = workspace or Workspace(cfg)
    model = ToyDetector(cfg.detector_config())
    tcfg = cfg.train_config()
    opt = make_optimizer(model, tcfg)
    total = cfg.total_steps()
    milestones = [int(total * cfg.optim.lr_drop)] if cfg.optim.lr_drop < 1 else []
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, cfg.optim.drop_factor)
    record = RunRecord(cfg.config_hash(), cfg.to_dict())
    start = time.perf_counter()
    record.epochs.append({"epoch": 0, "losses": {}, **evaluate_model(model, ws, cfg.run.seed)})
    stream = batches(ws.train, tcfg.batch_size, total, cfg.run.seed)
    step = 0
    for epoch in range(1, cfg.run.epochs + 1):
        sums: dict = {}
        for _ in range(cfg.run.steps_per_epoch):
            parts = train_step(model, opt, next(stream), ws.text, tcfg, step)
            sched.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            step += 1
        losses = {k: v / cfg.run.steps_per_epoch for k, v in sums.items()}
        record.epochs.append({"epoch": epoch, "losses": losses, **evaluate_model(model, ws, cfg.run.seed)})
    record.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / f"{record.config_hash[:16]}.pt"
        save_checkpoint(ckpt, cfg, model)
        record.checkpoint = str(ckpt)
        record.save(out / f"{record.config_hash[:16]}.json")
    return record


# ablation ladder

LADDER = [
    # (name, flags); fusion rows 5 and 7 are standalone and do not feed the rows after them
    ("baseline", dict(align=False, global_integration=False, distill=False, encoder="none", decoder="none")),
    ("+align", dict(align=True, global_integration=False, distill=False, encoder="none", decoder="none")),
    ("+global", dict(align=True, global_integration=True, distill=False, encoder="none", decoder="none")),
    ("+distill", dict(align=True, global_integration=True, distill=True, encoder="none", decoder="none")),
    ("+encoder_fusion", dict(align=True, global_integration=True, distill=True, encoder="full", decoder="none")),
    ("+encoder_selective", dict(align=True, global_integration=True, distill=True, encoder="selective",
                                decoder="none")),
    ("+decoder_fusion", dict(align=True, global_integration=True, distill=True, encoder="selective",
                             decoder="full")),
    ("+decoder_selective", dict(align=True, global_integration=True, distill=True, encoder="selective",
                                decoder="selective")),
]
LADDER_NAMES = [name for name, _ in LADDER]
SCL_VARIANT = ("scl", dict(align=True, global_integration=True, distill=False, encoder="none", decoder="none"))
LADDER_KEYS = {"losses.align", "losses.global_integration", "losses.distill",
               "losses.scl_instead_of_distill", "fusion.encoder", "fusion.decoder", "run.seed"}


def variant_config(base: ExperimentConfig, flags: dict, scl: bool = False, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(base.to_dict())
    cfg.losses.align = flags["align"]
    cfg.losses.global_integration = flags["global_integration"]
    cfg.losses.distill = flags["distill"]
    cfg.losses.scl_instead_of_distill = scl
    cfg.fusion.encoder = flags["encoder"]
    cfg.fusion.decoder = flags["decoder"]
    if seed is not None:
        cfg.run.seed = seed
    cfg.validate()
    extra = config_diff(base, cfg) - LADDER_KEYS
    if extra:
        raise AssertionError(f"ladder variant changes undocumented keys: {sorted(extra)}")
    return cfg


def _train_or_fail(cfg: ExperimentConfig, out_dir) -> RunRecord:
    try:
        return run_training(cfg, out_dir)
    except NumericAbort as exc:
        return RunRecord(cfg.config_hash(), cfg.to_dict(), status="failed", error=str(exc))


@dataclass
class LadderReport:
    runs: dict  # variant -> list of RunRecord, one per seed
    order: list

    def summary(self) -> list:
        rows = []
        for name in self.order:
            recs = self.runs[name]
            ok = [r for r in recs if r.status == "ok" and _finite_final(r)]
            row = {"variant": name, "n_seeds": len(recs), "n_ok": len(ok),
                   "status": "ok" if len(ok) == len(recs) else "failed"}
            for metric in ("map_g", "map_i", "iisr"):
                vals = np.array([r.final[metric] for r in ok], dtype=np.float64)
                row[f"{metric}_mean"] = float(vals.mean()) if len(vals) else float("nan")
                row[f"{metric}_std"] = float(vals.std()) if len(vals) else float("nan")
            rows.append(row)
        return rows

    def mean(self, variant: str, metric: str) -> float:
        return next(r for r in self.summary() if r["variant"] == variant)[f"{metric}_mean"]

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = self.summary()
        paths = {"ladder": out / "ladder.csv", "runs": out / "ladder_runs.csv",
                 "trend": out / "iisr_vs_map.csv"}
        _write_csv(paths["ladder"], summary)
        _write_csv(paths["runs"], [
            {"variant": name, "seed": r.config["run"]["seed"], "config_hash": r.config_hash,
             "status": r.status, **{m: r.final.get(m, float("nan")) for m in ("map_g", "map_i", "iisr")}}
            for name in self.order for r in self.runs[name]
        ])
        _write_csv(paths["trend"], [
            {"variant": row["variant"], "iisr": row["iisr_mean"], "map": row["map_g_mean"]}
            for row in summary if row["variant"] in LADDER_NAMES
        ])
        json_path = out / "ladder.json"
        json_path.write_text(json.dumps(
            {"order": self.order, "runs": {k: [r.to_json() for r in v] for k, v in self.runs.items()}},
            indent=2, sort_keys=True))
        paths["json"] = json_path
        return paths

    @classmethod
    def load(cls, path) -> "LadderReport":
        data = json.loads(Path(path).read_text())
        return cls({k: [RunRecord.from_json(r) for r in v] for k, v in data["runs"].items()}, data["order"])


def _finite_final(r: RunRecord) -> bool:
    return all(math.isfinite(r.final.get(m, float("nan"))) for m in ("map_g", "map_i", "iisr"))


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _write_csv(path, rows: list) -> None:
    if not rows:
        raise ValueError(f"nothing to write to {path}")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def run_ablation_ladder(base: ExperimentConfig, n_seeds: int = 5, variants=None, include_scl: bool = True,
                        out_dir=None, workers: int = 1) -> LadderReport:
    """Train every ladder variant (and the SCL substitute) for seeds ``base.run.seed + i``.

    ``variants`` restricts the run to a subset of names, kept in ladder order.
    A variant whose run aborts numerically is reported as failed.
    """
    known = dict(LADDER)
    wanted = LADDER_NAMES if variants is None else [n for n in LADDER_NAMES if n in set(variants)]
    unknown = set(variants or ()) - set(LADDER_NAMES) - {"scl"}
    if unknown:
        raise ConfigError(f"unknown ladder variants: {sorted(unknown)}")
    if include_scl or (variants is not None and "scl" in variants):
        wanted = wanted + ["scl"]
    jobs = []
    for name in wanted:
        flags = SCL_VARIANT[1] if name == "scl" else known[name]
        for i in range(n_seeds):
            jobs.append((name, variant_config(base, flags, scl=name == "scl", seed=base.run.seed + i)))
    ckpt_dir = None if out_dir is None else Path(out_dir) / "checkpoints"
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_train_or_fail, [c for _, c in jobs], [ckpt_dir] * len(jobs)))
    else:
        records = [_train_or_fail(c, ckpt_dir) for _, c in jobs]
    runs: dict = {name: [] for name in wanted}
    for (name, _), rec in zip(jobs, records):
        runs[name].append(rec)
    report = LadderReport(runs, wanted)
    if out_dir is not None:
        report.write(out_dir)
    return report


# prompt-count sweep

DEFAULT_COUNTS = (1, 2, 4, 8)


@dataclass
class SweepReport:
    rows: list  # dicts: mode, n, category, map
    counts: list

    def spread(self, mode: str) -> float:
        """max - min mAP across counts, averaged over categories."""
        per_cat: dict = {}
        for r in self.rows:
            if r["mode"] == mode:
                per_cat.setdefault(r["category"], []).append(r["map"])
        return float(np.mean([max(v) - min(v) for v in per_cat.values()]))

    def mean_map(self, mode: str, n: int) -> float:
        return float(np.mean([r["map"] for r in self.rows if r["mode"] == mode and r["n"] == n]))

    def modes(self) -> list:
        return sorted({r["mode"] for r in self.rows})

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"sweep": out / "sweep.csv", "summary": out / "sweep_summary.csv"}
        _write_csv(paths["sweep"], self.rows)
        _write_csv(paths["summary"], [
            {"mode": m, "n": n, "map": self.mean_map(m, n), "spread": self.spread(m)}
            for m in self.modes() for n in self.counts
        ])
        return paths

    @classmethod
    def read(cls, path) -> "SweepReport":
        with open(path, newline="") as fh:
            rows = [{"mode": r["mode"], "n": int(r["n"]), "category": int(r["category"]), "map": float(r["map"])}
                    for r in csv.DictReader(fh)]
        if not rows:
            raise ValueError(f"empty sweep file {path}")
        return cls(rows, sorted({r["n"] for r in rows}))


def distractor_order(K: int, category: int, seed: int) -> list:
    """Fixed seeded order of the other categories, used to pick distractors."""
    rng = np.random.default_rng([seed, category])
    others = [c for c in range(K) if c != category]
    return [others[i] for i in rng.permutation(len(others))]


@torch.no_grad()
def sweep_model(model: ToyDetector, ws: Workspace, counts, mode: str | None = None, seed: int = 0,
                label: str | None = None) -> list:
    """Per-category mAP with the bank cut to the target plus ``n - 1`` distractor prototypes."""
    K = ws.space.K
    bad = [n for n in counts if not 1 <= n <= K]
    if bad:
        raise ValueError(f"prompt counts {bad} outside 1..K={K}")
    bank = visual_g_prompts(model, ws.support, ws.n_per_class, seed=seed)
    gts = [s.instances for s in ws.test]
    present = {c for g in gts for _, c in g}
    label = label or mode or "native"
    rows = []
    for cat in bank.labels:
        if cat not in present:
            continue
        order = distractor_order(K, cat, seed)
        for n in counts:
            sub = bank.subset(sorted([cat] + order[: n - 1]))
            dets = forward(model, ws.test, sub, fusion_mode=mode)
            rows.append({"mode": label, "n": n, "category": cat,
                         "map": evaluate_ap(dets, gts, categories=[cat]).mAP})
    return rows


def run_prompt_count_sweep(checkpoints, counts=None, seed: int = 0, out_dir=None) -> SweepReport:
    """Sweep the prompt count for each fusion mode.

    ``checkpoints`` maps a mode name to one checkpoint path or a list of them
    (one per training seed; per-category values are then averaged). A single
    path sweeps that checkpoint under both modes by overriding its fusion mode.
    ``counts`` defaults to 1, 2, 4, 8 and K.
    """
    if isinstance(checkpoints, (str, Path)):
        checkpoints = {m: [checkpoints] for m in ("full", "selective")}
    rows: list = []
    used_counts = None
    for mode, paths in checkpoints.items():
        paths = [paths] if isinstance(paths, (str, Path)) else list(paths)
        acc: dict = {}
        for path in paths:
            cfg, model = load_checkpoint(path)
            if not cfg.losses.global_integration:
                raise ConfigError(f"{path}: the sweep needs a model trained with global integration")
            K = cfg.corpus.K
            used = sorted(set(counts or [c for c in DEFAULT_COUNTS if c < K] + [K]))
            used_counts = used
            native = {cfg.fusion.encoder, cfg.fusion.decoder} - {"none"}
            override = None if native == {mode} else mode
            ws = Workspace(cfg)
            for r in sweep_model(model, ws, used, override, seed, label=mode):
                acc.setdefault((r["n"], r["category"]), []).append(r["map"])
        rows.extend({"mode": mode, "n": n, "category": c, "map": float(np.mean(v))}
                    for (n, c), v in sorted(acc.items()))
    report = SweepReport(rows, used_counts or [])
    if out_dir is not None:
        report.write(out_dir)
    return report


# embedding analysis and plots

@torch.no_grad()
def embeddings_of_test_split(model: ToyDetector, ws: Workspace) -> LabeledEmbeddings:
    prompts, labels = scene_prompts(model, ws.test, by_instance=True)
    return LabeledEmbeddings(prompts.double().numpy(), labels)


def export_plots(out_dir, ladder=None, sweep=None, dump=None, render: bool = True) -> list:
    """Write plot CSVs (always) and PNG renderings (when matplotlib is importable).

    ``ladder`` is a ladder JSON path or report, ``sweep`` a sweep CSV path or
    report, ``dump`` an embedding dump path. Returns the written paths.
    """
    from .metrics import project_2d, read_dump, similarity_distributions

    if ladder is None and sweep is None and dump is None:
        raise ValueError("export_plots needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    plt = _pyplot() if render else None

    if ladder is not None:
        if not isinstance(ladder, LadderReport):
            _require(ladder)
            ladder = LadderReport.load(ladder)
        rows = [r for r in ladder.summary() if r["variant"] in LADDER_NAMES]
        trend = out / "iisr_vs_map.csv"
        _write_csv(trend, [{"variant": r["variant"], "iisr": r["iisr_mean"], "map": r["map_g_mean"]} for r in rows])
        written.append(trend)
        if plt is not None:
            fig, ax1 = plt.subplots(figsize=(7, 3.5))
            x = np.arange(len(rows))
            ax1.plot(x, [r["map_g_mean"] for r in rows], "o-", color="tab:blue", label="Visual-G mAP")
            ax1.set_ylabel("mAP")
            ax2 = ax1.twinx()
            ax2.plot(x, [r["iisr_mean"] for r in rows], "s--", color="tab:red", label="IISR")
            ax2.set_ylabel("IISR")
            ax1.set_xticks(x, [r["variant"] for r in rows], rotation=30, ha="right")
            fig.legend(loc="upper left")
            fig.tight_layout()
            written.append(_save(fig, out / "iisr_vs_map.png", plt))

    if sweep is not None:
        if not isinstance(sweep, SweepReport):
            _require(sweep)
            sweep = SweepReport.read(sweep)
        path = out / "sweep.csv"
        _write_csv(path, sweep.rows)
        written.append(path)
        if plt is not None:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for mode in sweep.modes():
                ax.plot(sweep.counts, [sweep.mean_map(mode, n) for n in sweep.counts], "o-", label=mode)
            ax.set_xscale("log", base=2)
            ax.set_xlabel("prompts in bank")
            ax.set_ylabel("mAP")
            ax.legend()
            fig.tight_layout()
            written.append(_save(fig, out / "sweep.png", plt))

    if dump is not None:
        _require(dump)
        data = read_dump(dump)
        proj = project_2d(data)
        path = out / "projection.csv"
        _write_csv(path, [{"label": lbl, "x": float(x), "y": float(y)}
                          for lbl, (x, y) in zip(data.labels, proj.coords)])
        written.append(path)
        report = similarity_distributions(data)
        hist = out / "similarity.csv"
        report.write_csv(hist)
        written.append(hist)
        if plt is not None:
            fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
            labels = sorted(set(data.labels), key=str)
            for lbl in labels:
                idx = [i for i, l in enumerate(data.labels) if l == lbl]
                a.scatter(proj.coords[idx, 0], proj.coords[idx, 1], s=6, label=str(lbl))
            a.set_title("PCA projection")
            centres = (report.bins[:-1] + report.bins[1:]) / 2
            width = report.bins[1] - report.bins[0]
            b.bar(centres, report.intra_hist / max(1, report.intra_hist.sum()), width, alpha=0.6, label="intra")
            b.bar(centres, report.inter_hist / max(1, report.inter_hist.sum()), width, alpha=0.6, label="inter")
            b.set_xlabel("cosine similarity")
            b.legend()
            fig.tight_layout()
            written.append(_save(fig, out / "embeddings.png", plt))
    return written


def _require(path) -> None:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing record {path}")


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    return plt


def _save(fig, path, plt) -> Path:
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
