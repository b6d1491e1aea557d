"""Training, evaluation and the experiment protocol.

Stage 1 trains an AVS model on binary sounding masks. Stage 2 trains an AVSS
model that receives the ground-truth sounding mask as a prior during training;
at evaluation the prior comes from a ``PriorProvider`` (ground truth, a corrupted
copy at a chosen IoU, or a stage-1 model). The end-to-end baseline trains an AVSS
model with no prior at all. All runs are deterministic given the config seed.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .decoder import Mode
from .heads import LossWeights, semantic_targets, set_criterion
from .inference import binarize_avs, finalize, postprocess
from .metrics import EvalReport, SegmentationAccumulator
from .model import AAVSModel, ModelConfig
from .synthdata import SceneSample, corrupt_mask, generate_split, load_dataset, preset_config
from .tensorio import load_bundle, save_bundle

log = logging.getLogger(__name__)

TASKS = ("s4", "ms3", "avss")
STRATEGIES = ("E2E", "STONES")


@dataclass
class DataConfig:
    preset: str | None = None  # None: the preset named like the task
    train_clips: int = 400
    eval_clips: int = 100
    seed: int = 0
    overrides: dict = field(default_factory=dict)

    def generator(self, task: str = "avss"):
        return preset_config(self.preset or task, **self.overrides)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    steps: int = 2000
    warmup: int = 0
    grad_clip: float = 1.0
    dtype: str = "float32"
    log_every: int = 100


@dataclass
class ExperimentConfig:
    task: str = "avss"
    strategy: str = "STONES"
    stones_source: str = "oracle"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        parse_stones_source(self.stones_source)

    def generator(self):
        return self.data.generator(self.task)

    @property
    def mode(self) -> Mode:
        if self.task != "avss":
            return Mode.AVS
        return Mode.AVSS_STONES if self.strategy == "STONES" else Mode.AVSS_E2E

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in kw.items():
            target = d
            parts = key.split(".")
            for p in parts[:-1]:
                target = target[p]
            target[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        d = yaml.safe_load(text) or {}
    else:
        d = json.loads(text)
    return ExperimentConfig.from_dict(d)


def parse_stones_source(src: str):
    """``oracle`` | ``corrupted:<iou>`` | ``stage1:<checkpoint dir>``."""
    if src == "oracle":
        return ("oracle", None)
    kind, _, arg = src.partition(":")
    if kind == "corrupted":
        iou = float(arg)
        if not 0 < iou <= 1:
            raise ValueError(f"corrupted IoU must be in (0,1], got {iou}")
        return ("corrupted", iou)
    if kind == "stage1" and arg:
        return ("stage1", arg)
    raise ValueError(f"bad stones_source {src!r}")


# ---------------------------------------------------------------------------
# data

def make_split(cfg: ExperimentConfig, split: str):
    n = cfg.data.train_clips if split == "train" else cfg.data.eval_clips
    return generate_split(cfg.generator(), n, cfg.data.seed, split)


def _dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


class ClipCache:
    """Tensors and matching targets per clip, built lazily."""

    def __init__(self, samples: list[SceneSample], mode: Mode, dtype: torch.dtype):
        self.samples = samples
        self.mode = Mode(mode)
        self.dtype = dtype
        self._cache: dict[int, tuple] = {}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i: int):
        if i not in self._cache:
            s = self.samples[i]
            H, W = s.binary_mask.shape[-2:]
            size = (H // 4, W // 4)
            if self.mode is Mode.AVS:
                targets = semantic_targets(s.binary_mask, size, binary=True)
            else:
                targets = semantic_targets(s.sounding_semantic, size)
            for tg in targets:
                tg.masks = tg.masks.to(self.dtype)
            self._cache[i] = (
                torch.from_numpy(s.frames).to(self.dtype),
                torch.from_numpy(s.audio).to(self.dtype),
                torch.from_numpy(s.binary_mask).to(self.dtype),
                targets,
            )
        return self._cache[i]


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: dict
    mode: str
    num_classes: int
    audio_dim: int
    step: int
    model_state: dict[str, torch.Tensor]
    optim_state: dict | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return ExperimentConfig.from_dict(self.config).hash()

    def save(self, directory) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in self.model_state.items()}
        optim_meta = None
        if self.optim_state is not None:
            optim_meta = {"param_groups": self.optim_state["param_groups"], "state": {}}
            for idx, st in self.optim_state["state"].items():
                optim_meta["state"][str(idx)] = sorted(st)
                for key, val in st.items():
                    tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        digest = save_bundle(root / "state.bin", tensors)
        meta = {
            "config": self.config, "config_hash": self.config_hash, "mode": self.mode,
            "num_classes": self.num_classes, "audio_dim": self.audio_dim, "step": self.step,
            "losses": self.losses, "optimizer": optim_meta, "state_sha256": digest,
            "model_keys": list(self.model_state),
        }
        (root / "checkpoint.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        root = Path(directory)
        meta = json.loads((root / "checkpoint.json").read_text())
        tensors = load_bundle(root / "state.bin", meta["state_sha256"])
        model_state = {k: torch.from_numpy(tensors[f"model/{k}"]) for k in meta["model_keys"]}
        optim_state = None
        if meta["optimizer"] is not None:
            state = {}
            for idx, keys in meta["optimizer"]["state"].items():
                state[int(idx)] = {k: torch.from_numpy(tensors[f"optim/{idx}/{k}"]) for k in keys}
            optim_state = {"state": state, "param_groups": meta["optimizer"]["param_groups"]}
        return cls(meta["config"], meta["mode"], meta["num_classes"], meta["audio_dim"], meta["step"],
                   model_state, optim_state, meta["losses"])

    def build_model(self) -> AAVSModel:
        cfg = ExperimentConfig.from_dict(self.config)
        model = AAVSModel(cfg.model, Mode(self.mode), self.num_classes, self.audio_dim)
        model.to(_dtype(cfg.train.dtype))
        model.load_state_dict(self.model_state)
        model.eval()
        return model


# ---------------------------------------------------------------------------
# training

class Trainer:
    """AdamW with decoupled weight decay and cosine learning-rate decay, batch = one clip."""

    def __init__(self, cfg: ExperimentConfig, samples: list[SceneSample], mode: Mode | None = None,
                 num_classes: int | None = None, audio_dim: int | None = None):
        self.cfg = cfg
        self.mode = Mode(mode) if mode is not None else cfg.mode
        gen = cfg.generator()
        self.num_classes = num_classes if num_classes is not None else gen.num_classes
        self.audio_dim = audio_dim if audio_dim is not None else gen.audio_dim
        self.dtype = _dtype(cfg.train.dtype)
        self.data = ClipCache(samples, self.mode, self.dtype)
        torch.manual_seed(cfg.seed)
        self.model = AAVSModel(cfg.model, self.mode, self.num_classes, self.audio_dim).to(self.dtype)
        self.num_classes = self.model.num_classes
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.train.lr,
                                           weight_decay=cfg.train.weight_decay)
        self.step_count = 0
        self.losses: list[float] = []

    def lr_at(self, step: int) -> float:
        tc = self.cfg.train
        if tc.warmup and step < tc.warmup:
            return tc.lr * (step + 1) / tc.warmup
        progress = min(step / max(tc.steps, 1), 1.0)
        return tc.lr * 0.5 * (1 + math.cos(math.pi * progress))

    def clip_index(self, step: int) -> int:
        n = len(self.data)
        epoch, pos = divmod(step, n)
        perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
        return int(perm[pos])

    def step(self) -> float:
        self.model.train()
        frames, audio, binary, targets = self.data[self.clip_index(self.step_count)]
        # stage 2 always trains on the ground-truth sounding mask
        prior = binary if self.model.uses_prior else None
        for g in self.optimizer.param_groups:
            g["lr"] = self.lr_at(self.step_count)
        main, aux = self.model(frames, audio, prior)
        loss = set_criterion(main, aux, targets, self.cfg.loss)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.train.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        value = float(loss.detach())
        self.losses.append(value)
        if self.cfg.train.log_every and self.step_count % self.cfg.train.log_every == 0:
            recent = self.losses[-self.cfg.train.log_every:]
            log.info("%s step %d loss %.4f", self.mode.value, self.step_count, sum(recent) / len(recent))
        return value

    def train(self, steps: int | None = None) -> list[float]:
        target = self.cfg.train.steps if steps is None else self.step_count + steps
        while self.step_count < target:
            self.step()
        return list(self.losses)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.cfg.to_dict(), mode=self.mode.value, num_classes=self.num_classes,
            audio_dim=self.audio_dim, step=self.step_count,
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            optim_state=copy.deepcopy(self.optimizer.state_dict()), losses=list(self.losses),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, samples) -> "Trainer":
        cfg = ExperimentConfig.from_dict(ckpt.config)
        tr = cls(cfg, samples, Mode(ckpt.mode), ckpt.num_classes, ckpt.audio_dim)
        tr.model.load_state_dict(ckpt.model_state)
        if ckpt.optim_state is not None:
            tr.optimizer.load_state_dict(ckpt.optim_state)
        tr.step_count = ckpt.step
        tr.losses = list(ckpt.losses)
        return tr


def _train(cfg, samples, mode, manifest=None) -> Checkpoint:
    kw = {}
    if manifest is not None:
        kw = dict(num_classes=manifest.C, audio_dim=manifest.D_a)
    tr = Trainer(cfg, samples, mode, **kw)
    tr.train()
    return tr.checkpoint()


def train_stage1(cfg: ExperimentConfig, samples, manifest=None) -> Checkpoint:
    """AVS model supervised by binary sounding masks."""
    return _train(cfg, samples, Mode.AVS, manifest)


def train_stage2(cfg: ExperimentConfig, samples, manifest=None) -> Checkpoint:
    """AVSS model with the ground-truth sounding mask as prior (the prior source only matters at evaluation)."""
    return _train(cfg, samples, Mode.AVSS_STONES, manifest)


def train_end2end(cfg: ExperimentConfig, samples, manifest=None) -> Checkpoint:
    """AVSS model with semantic supervision and no prior."""
    return _train(cfg, samples, Mode.AVSS_E2E, manifest)


# ---------------------------------------------------------------------------
# priors and evaluation

PriorProvider = Callable[[int, SceneSample], np.ndarray]


class OraclePrior:
    name = "oracle"

    def __call__(self, index: int, sample: SceneSample) -> np.ndarray:
        return sample.binary_mask.astype(np.float32)


class CorruptedPrior:
    """Ground-truth sounding mask degraded to a target IoU; frames with no sounding pixel stay empty."""

    def __init__(self, target_iou: float, seed: int = 0):
        self.target_iou = target_iou
        self.seed = seed
        self.name = f"corrupted:{target_iou:g}"

    def __call__(self, index: int, sample: SceneSample) -> np.ndarray:
        m = sample.binary_mask
        out = np.zeros(m.shape, np.float32)
        keep = m.reshape(len(m), -1).any(axis=1)
        if keep.any():
            seed = int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])
            out[keep] = corrupt_mask(m[keep], self.target_iou, seed)
        return out


class Stage1Prior:
    """Soft sounding map predicted by a trained AVS model."""

    def __init__(self, ckpt: Checkpoint):
        self.model = ckpt.build_model()
        self.dtype = next(self.model.parameters()).dtype
        self.name = "stage1"

    @torch.no_grad()
    def __call__(self, index: int, sample: SceneSample) -> np.ndarray:
        main, _ = self.model(torch.from_numpy(sample.frames).to(self.dtype),
                             torch.from_numpy(sample.audio).to(self.dtype))
        H, W = sample.binary_mask.shape[-2:]
        return binarize_avs(main, H, W).float().numpy()


def prior_provider(source: str, seed: int = 0) -> PriorProvider:
    kind, arg = parse_stones_source(source)
    if kind == "oracle":
        return OraclePrior()
    if kind == "corrupted":
        return CorruptedPrior(arg, seed)
    return Stage1Prior(Checkpoint.load(arg))


@torch.no_grad()
def predict(model: AAVSModel, sample: SceneSample, prior: np.ndarray | None = None):
    """``(o_pred, label map [T,H,W])`` for one clip."""
    model.eval()
    dtype = next(model.parameters()).dtype
    p = torch.from_numpy(np.asarray(prior, np.float32)).to(dtype) if prior is not None else None
    main, _ = model(torch.from_numpy(sample.frames).to(dtype), torch.from_numpy(sample.audio).to(dtype), p)
    H, W = sample.binary_mask.shape[-2:]
    o_pred = postprocess(main)
    return o_pred, finalize(o_pred, H, W).numpy()


def evaluate(model: AAVSModel, samples, prior: PriorProvider | None = None, beta2: float = 0.3,
             return_predictions: bool = False):
    """Dataset-level report. AVS models are scored against binary masks, AVSS models
    against the semantic labels of sounding pixels."""
    acc = SegmentationAccumulator(model.num_classes, beta2)
    preds = []
    for i, s in enumerate(samples):
        p = prior(i, s) if (prior is not None and model.uses_prior) else None
        _, label = predict(model, s, p)
        gt = s.binary_mask if model.mode is Mode.AVS else s.sounding_semantic
        acc.update(label, gt)
        if return_predictions:
            preds.append(label.astype(np.uint8))
    report = acc.report()
    return (report, preds) if return_predictions else report


def run_sensitivity(ckpt: Checkpoint, samples, levels, seed: int = 0) -> list[dict]:
    """Evaluate one stage-2 checkpoint under priors of varying quality.

    ``levels`` items: ``"oracle"``, a float target IoU, or a ``stones_source`` string.
    """
    model = ckpt.build_model()
    rows = []
    for level in levels:
        src = f"corrupted:{level}" if isinstance(level, (int, float)) else str(level)
        provider = prior_provider(src, seed)
        rep = evaluate(model, samples, provider)
        rows.append({"level": src, "miou": rep.miou, "fscore": rep.fscore})
    return rows


ABLATION_STONES_VARIANTS = {
    "final": dict(robust_keys=True, mask_fusion=True),
    "w/o mask fusion": dict(robust_keys=True, mask_fusion=False),
    "w/o robust key": dict(robust_keys=False, mask_fusion=True),
    "w/o robust key+mask fusion": dict(robust_keys=False, mask_fusion=False),
}


def run_ablation(cfg: ExperimentConfig, seeds=(0,), parts=("queries", "stones"),
                 actual_source: str = "corrupted:0.85", data=None) -> dict:
    """Matched-budget variants differing only in the ablated component.

    ``queries``: adaptive vs repeated audio queries on ``cfg.task``, median over ``seeds``.
    ``stones``: the four prior-guided rows (robust keys x mask fusion), each
    evaluated with oracle priors and with ``actual_source`` priors.
    """
    if data is None:
        train, man = make_split(cfg, "train")
        test, _ = make_split(cfg, "test")
    else:
        (train, man), (test, _) = data
    report = {"kind": "ablation", "config_hash": cfg.hash(), "task": cfg.task,
              "steps": cfg.train.steps, "seeds": list(seeds)}
    if "queries" in parts:
        rows = []
        for variant, adaptive in (("repeat", False), ("adaptive", True)):
            scores = []
            for seed in seeds:
                c = cfg.replace(**{"model.adaptive_queries": adaptive, "seed": seed})
                ck = _train(c, train, c.mode, man)
                scores.append(evaluate(ck.build_model(), test, OraclePrior()).to_dict())
            rows.append({
                "variant": variant,
                "miou": [r["miou"] for r in scores],
                "fscore": [r["fscore"] for r in scores],
                "median_miou": float(np.median([r["miou"] for r in scores])),
                "median_fscore": float(np.median([r["fscore"] for r in scores])),
            })
        report["queries"] = {
            "rows": rows,
            "delta_median_miou": rows[1]["median_miou"] - rows[0]["median_miou"],
        }
    if "stones" in parts:
        if cfg.task != "avss":
            raise ValueError("prior-guided ablation needs the avss task")
        rows = []
        for variant, flags in ABLATION_STONES_VARIANTS.items():
            c = cfg.replace(**{f"model.{k}": v for k, v in flags.items()}, strategy="STONES")
            model = _train(c, train, Mode.AVSS_STONES, man).build_model()
            oracle = evaluate(model, test, OraclePrior())
            actual = evaluate(model, test, prior_provider(actual_source, c.seed))
            rows.append({"variant": variant, **flags,
                         "oracle": {"miou": oracle.miou, "fscore": oracle.fscore},
                         "actual": {"miou": actual.miou, "fscore": actual.fscore}})
        base = rows[-1]
        for r in rows:
            r["delta_oracle_miou"] = r["oracle"]["miou"] - base["oracle"]["miou"]
            r["delta_actual_miou"] = r["actual"]["miou"] - base["actual"]["miou"]
        report["stones"] = {"actual_source": actual_source, "rows": rows}
    return report


def ablation_schema() -> dict:
    return json.loads((Path(__file__).parent / "schemas" / "ablation_report.schema.json").read_text())


def save_predictions(path, predictions: list[np.ndarray], clip_ids: list[str]) -> None:
    """Prediction archive: one bundle of ``[T,H,W]`` uint8 label maps keyed by clip id."""
    save_bundle(path, dict(zip(clip_ids, predictions)))


def load_split_dir(root, split: str):
    path = Path(root) / split
    if not path.exists() and (Path(root) / "manifest.json").exists():
        path = Path(root)
    return load_dataset(path)
