"""Desk-scale training on synthetic scenes.

The toy model summarises every ``s x s`` image patch by a few fixed moments
(one grid cell each), embeds them with a 1x1 convolution, mixes neighbouring
cells with two residual 3x3 convolutions and then branches into

* a 1x1 grid head producing ``N_a * (5 + 2K)`` raw channels, and
* a shallow visibility head (3x3 conv, ReLU, 1x1 conv, sigmoid) producing
  ``N_a * K`` maps. The logits of this head are multiplied by a fixed gain
  so that the weak visibility gradients can move them at the shared
  learning rate.

Each stride owns an independent tower.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, NonFiniteLossError
from .evalkit import OksConfig, evaluate, visibility_stats
from .grid_head import Anchor, check_scales, default_anchors, num_outputs
from .losses import TERMS, LossReport, LossWeights, hybrid_loss
from .postprocess import ScaleOutput, decode_predictions
from .synthetic import SyntheticScene, gen_scene
from .targets import DEFAULT_RATIO_THRESHOLD, build_targets, stack_targets

log = logging.getLogger(__name__)

HELDOUT_BASE = 1_000_000_000
TRAIN_SEED_STRIDE = 10_000_000
CHECKPOINT_MAGIC = b"HPCK"
CHECKPOINT_VERSION = 1
# narrower than the library default: wide target peaks also cover the cells of
# nearby occluded keypoints, which then cannot be filtered
TRAIN_SIGMA = 1.0


@dataclass
class TrainConfig:
    image_height: int = 64
    image_width: int = 64
    num_keypoints: int = 5
    n_persons: int = 2
    occlusion_rate: float = 0.3
    scales: tuple[int, ...] = (8,)
    hidden: int = 32
    vis_hidden: int = 16
    vis_gain: float = 32.0
    lr: float = 0.05
    momentum: float = 0.9
    steps: int = 3000
    batch_size: int = 8
    seed: int = 0
    alpha: float = 1.0
    beta: float = 0.05
    gamma: float = 0.025
    zeta: float = 5.0
    lam: float = 0.1
    eps: float = 1e-8
    sigma_g: float = TRAIN_SIGMA
    ratio_threshold: float = DEFAULT_RATIO_THRESHOLD
    conf_threshold: float = 0.25
    nms_iou: float = 0.65
    vis_threshold: float = 0.5
    eval_every: int = 500
    eval_scenes: int = 100

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if self.lr < 0:
            raise ContractViolation("learning rate must be non-negative")
        if self.steps < 0:
            raise ContractViolation("steps must be non-negative")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be positive")
        check_scales(self.scales, self.image_height, self.image_width)
        self.weights  # validates the loss weights

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image_height, self.image_width

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.zeta, self.lam, self.eps)

    @property
    def anchors(self) -> dict[int, list[Anchor]]:
        return {s: default_anchors(s) for s in self.scales}

    @property
    def in_channels(self) -> int:
        return self.num_keypoints + 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "scales" in d:
            s = d["scales"]
            d["scales"] = tuple(s) if isinstance(s, (list, tuple)) else (int(s),)
        return cls(**d)

    def model_hash(self) -> str:
        """Hash of the fields that fix the meaning of the parameters."""
        keys = ("image_height", "image_width", "num_keypoints", "scales", "hidden", "vis_hidden", "vis_gain")
        blob = json.dumps({k: self.to_dict()[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------- model


@dataclass
class ToyModel:
    config: TrainConfig
    params: dict[str, ad.Tensor] = field(default_factory=dict)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def _layer_shapes(cfg: TrainConfig, s: int) -> list[tuple[str, tuple[int, ...]]]:
    k, na = cfg.num_keypoints, len(cfg.anchors[s])
    c_in = cfg.in_channels * N_MOMENTS
    hd, vh = cfg.hidden, cfg.vis_hidden
    return [
        (f"s{s}.embed", (hd, c_in, 1, 1)),
        (f"s{s}.mix1", (hd, hd, 3, 3)),
        (f"s{s}.mix2", (hd, hd, 3, 3)),
        (f"s{s}.grid", (na * num_outputs(k), hd, 1, 1)),
        (f"s{s}.vis1", (vh, hd, 3, 3)),
        (f"s{s}.vis2", (na * k, vh, 1, 1)),
    ]


OBJ_PRIOR = 0.01


def init_model(cfg: TrainConfig, zero_heads: bool = False) -> ToyModel:
    """Uniform(+-1/sqrt(fan_in)) init; objectness biases start at logit(0.01)."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, ad.Tensor] = {}
    no = num_outputs(cfg.num_keypoints)
    for s in cfg.scales:
        for name, shape in _layer_shapes(cfg, s):
            bound = 1.0 / math.sqrt(shape[1] * shape[2] * shape[3])
            w = rng.uniform(-bound, bound, shape)
            b = rng.uniform(-bound, bound, shape[0])
            head = name.endswith(".grid") or name.endswith(".vis2")
            if zero_heads and head:
                w[:] = 0.0
                b[:] = 0.0
            elif name.endswith(".grid"):
                b[0::no] = math.log(OBJ_PRIOR / (1 - OBJ_PRIOR))
            params[name + ".w"] = ad.Tensor(w, requires_grad=True)
            params[name + ".b"] = ad.Tensor(b, requires_grad=True)
    return ToyModel(cfg, params)


N_MOMENTS = 4


def cell_moments(images: np.ndarray, s: int) -> np.ndarray:
    """(B, C, H, W) -> (B, 4C, H/s, W/s): per patch max, mean and the two first moments.

    The first moments weight pixels by their position in [-1, 1] across the
    patch, which tells the head where inside the cell a blob sits.
    """
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // s, s, w // s, s)
    u = (np.arange(s) + 0.5) / s * 2 - 1
    mx = x.max(axis=(3, 5))
    m = x.mean(axis=(3, 5)) * 4
    mu = (x * u[None, None, None, None, None, :]).mean(axis=(3, 5)) * 4
    mv = (x * u[None, None, None, :, None, None]).mean(axis=(3, 5)) * 4
    return np.concatenate([mx, m, mu, mv], axis=1)


def forward(model: ToyModel, images) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Raw grids (B, H/s, W/s, N_a, 5+2K) and sigmoid visibility maps (B, H/s, W/s, N_a, K) per stride."""
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.in_channels, cfg.image_height, cfg.image_width)
    if images.shape[1:] != expected:
        raise ContractViolation(f"image shape {images.shape[1:]} does not match config {expected}")
    p = model.params
    k = cfg.num_keypoints
    out = []
    for s in cfg.scales:
        na = len(cfg.anchors[s])
        x = ad.Tensor(cell_moments(images, s))
        nb, _, h, w = x.shape
        f = ad.relu(ad.conv2d_small(x, p[f"s{s}.embed.w"], p[f"s{s}.embed.b"]))
        f = f + ad.relu(ad.conv2d_small(f, p[f"s{s}.mix1.w"], p[f"s{s}.mix1.b"]))
        f = f + ad.relu(ad.conv2d_small(f, p[f"s{s}.mix2.w"], p[f"s{s}.mix2.b"]))
        g = ad.conv2d_small(f, p[f"s{s}.grid.w"], p[f"s{s}.grid.b"])
        g = g.reshape(nb, na, num_outputs(k), h, w).transpose(0, 3, 4, 1, 2)
        v = ad.relu(ad.conv2d_small(f, p[f"s{s}.vis1.w"], p[f"s{s}.vis1.b"]))
        v = ad.conv2d_small(v, p[f"s{s}.vis2.w"], p[f"s{s}.vis2.b"]) * cfg.vis_gain
        v = ad.sigmoid(v.reshape(nb, na, k, h, w).transpose(0, 3, 4, 1, 2))
        out.append((g, v))
    return out


# ------------------------------------------------------------------- training


def train_scene_seed(cfg: TrainConfig, index: int) -> int:
    return cfg.seed * TRAIN_SEED_STRIDE + index


def make_scene(cfg: TrainConfig, seed: int) -> SyntheticScene:
    return gen_scene(seed, cfg.n_persons, cfg.image_size, cfg.occlusion_rate, cfg.num_keypoints)


def batch_targets(cfg: TrainConfig, scenes: Sequence[SyntheticScene]):
    sets = [build_targets(sc.persons, cfg.image_size, cfg.anchors, cfg.num_keypoints,
                          cfg.sigma_g, cfg.ratio_threshold) for sc in scenes]
    return stack_targets(sets)


def compute_loss(model: ToyModel, scenes: Sequence[SyntheticScene], supports=None) -> LossReport:
    cfg = model.config
    images = np.stack([sc.image for sc in scenes])
    with np.errstate(over="ignore", invalid="ignore"):
        outs = forward(model, images)
    for s, (g, v) in zip(cfg.scales, outs):
        if not (np.all(np.isfinite(g.data)) and np.all(np.isfinite(v.data))):
            raise NonFiniteLossError(f"network output at stride {s}")
    targets = batch_targets(cfg, scenes)
    return hybrid_loss([g for g, _ in outs], [v for _, v in outs], targets, cfg.anchors,
                       cfg.weights, cfg.sigma_g, supports)


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def train_step(model: ToyModel, scenes: Sequence[SyntheticScene], state: SGDState | None = None,
               step: int | None = None) -> LossReport:
    """One SGD-with-momentum update; returns the pre-update loss report."""
    cfg = model.config
    state = SGDState() if state is None else state
    for name, p in model.params.items():
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteLossError(f"parameter {name}", step)
    model.zero_grad()
    report = compute_loss(model, scenes)
    for term in (*TERMS, "total"):
        if not math.isfinite(getattr(report, term)):
            raise NonFiniteLossError(term, step)
    ad.backward(report.tensor)
    for name, p in model.params.items():
        g = np.zeros(p.shape) if p.grad is None else p.grad
        v = state.velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        state.velocity[name] = v
        p.data = p.data - cfg.lr * v
    model.zero_grad()
    return report


def predict(model: ToyModel, image: np.ndarray):
    """Final instances for one image plus the per-stride raw outputs."""
    cfg = model.config
    with ad.no_grad():
        outs = forward(model, image[None])
    scale_outs = [ScaleOutput(s, g.data[0], v.data[0]) for s, (g, v) in zip(cfg.scales, outs)]
    inst = decode_predictions(scale_outs, cfg.anchors, cfg.conf_threshold, cfg.nms_iou, cfg.vis_threshold)
    return inst, scale_outs


def heldout_scenes(cfg: TrainConfig, n: int | None = None) -> list[SyntheticScene]:
    n = cfg.eval_scenes if n is None else n
    return [make_scene(cfg, HELDOUT_BASE + i) for i in range(n)]


@dataclass
class EvalResult:
    ap50: float
    ap: float
    auc: float
    occluded_removed: float
    visible_removed: float
    alignment: float
    n_keypoints: int


def alignment_rate(model: ToyModel, scenes: Sequence[SyntheticScene], iou_threshold: float = 0.5) -> tuple[float, int]:
    """Share of matched visible keypoints whose visibility peak sits within one cell of the regression.

    For keypoint class ``k`` the peak is searched among the cells nearer to
    this detection's regressed keypoint than to any other detection's
    regressed keypoint of the same class.
    """
    from .evalkit import match_by_box

    hits, total = 0, 0
    for sc in scenes:
        inst, outs = predict(model, sc.image)
        by_stride = {o.stride: o for o in outs}
        for g, d in match_by_box(inst, sc.persons, iou_threshold).items():
            det = inst[d]
            vmap = by_stride[det.stride].vis
            h, w = vmap.shape[:2]
            s = det.stride
            rows, cols = np.mgrid[0:h, 0:w]
            cx, cy = cols + 0.5, rows + 0.5
            for k in np.nonzero(sc.persons[g].delta)[0]:
                px, py = det.keypoints[k] / s
                own = (cx - px) ** 2 + (cy - py) ** 2
                region = np.ones((h, w), dtype=bool)
                for other in inst:
                    if other is det or other.stride != s:
                        continue
                    ox, oy = other.keypoints[k] / s
                    region &= own <= (cx - ox) ** 2 + (cy - oy) ** 2
                m = np.where(region, vmap[:, :, det.anchor, k], -np.inf)
                r, c = np.unravel_index(np.argmax(m), m.shape)
                kr = min(max(math.floor(py), 0), h - 1)
                kc = min(max(math.floor(px), 0), w - 1)
                hits += int(max(abs(r - kr), abs(c - kc)) <= 1)
                total += 1
    return (hits / total if total else float("nan")), total


def evaluate_model(model: ToyModel, scenes: Sequence[SyntheticScene] | None = None) -> EvalResult:
    cfg = model.config
    scenes = heldout_scenes(cfg) if scenes is None else scenes
    preds = {i: predict(model, sc.image)[0] for i, sc in enumerate(scenes)}
    gts = {i: sc.persons for i, sc in enumerate(scenes)}
    report = evaluate(preds, gts, OksConfig.for_keypoints(cfg.num_keypoints))
    vs = visibility_stats(preds, gts)
    occ, vis = vs.removal_rates(cfg.vis_threshold)
    align, n = alignment_rate(model, scenes)
    return EvalResult(report.ap50, report.ap, vs.auc, occ, vis, align, n)


LOG_FIELDS = ["step", *TERMS, "total", "ap50", "auc"]


@dataclass
class TrainResult:
    model: ToyModel
    rows: list[dict]
    final_eval: EvalResult | None = None


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def log_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in LOG_FIELDS})
    return buf.getvalue()


def train(cfg: TrainConfig, out_dir: str | Path | None = None, progress: bool = False,
          eval_scenes: Sequence[SyntheticScene] | None = None) -> TrainResult:
    """Run ``cfg.steps`` updates on fresh scenes, evaluating every ``cfg.eval_every`` steps."""
    model = init_model(cfg)
    state = SGDState()
    rows: list[dict] = []
    scenes_eval = None
    last_eval = None
    for step in range(cfg.steps):
        base = step * cfg.batch_size
        batch = [make_scene(cfg, train_scene_seed(cfg, base + b)) for b in range(cfg.batch_size)]
        report = train_step(model, batch, state, step)
        row = {"step": step, **report.terms(), "total": report.total}
        done = step + 1
        if cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.steps):
            if scenes_eval is None:
                scenes_eval = list(eval_scenes) if eval_scenes is not None else heldout_scenes(cfg)
            last_eval = evaluate_model(model, scenes_eval)
            row["ap50"], row["auc"] = last_eval.ap50, last_eval.auc
            if progress:
                log.info("step %d total %.4f ap50 %.3f auc %.3f align %.3f", done, report.total,
                         last_eval.ap50, last_eval.auc, last_eval.alignment)
        rows.append(row)
    result = TrainResult(model, rows, last_eval)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out / "checkpoint.bin")
        (out / "log.csv").write_text(log_csv(rows))
    return result


# ----------------------------------------------------------------- checkpoint


def save_checkpoint(model: ToyModel, path: str | Path) -> None:
    """Versioned little-endian binary: header, config JSON, then named float64 tensors."""
    cfg_blob = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    hash_blob = model.config.model_hash().encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack("<I", len(hash_blob)), hash_blob,
             struct.pack("<I", len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(model.params))]
    for name, t in model.params.items():
        nb = name.encode()
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", t.ndim),
                  struct.pack(f"<{t.ndim}I", *t.shape), t.data.astype("<f8").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> ToyModel:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path} is not a checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_bytes(n):
        nonlocal pos
        out = bytes(buf[pos:pos + n])
        pos += n
        return out

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {version}")
    stored_hash = take_bytes(take("<I")[0]).decode()
    cfg = TrainConfig.from_dict(json.loads(take_bytes(take("<I")[0])))
    if cfg.model_hash() != stored_hash:
        raise ContractViolation("checkpoint config hash mismatch")
    (n,) = take("<I")
    params = {}
    for _ in range(n):
        name = take_bytes(take("<I")[0]).decode()
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape))
        data = np.frombuffer(take_bytes(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = ad.Tensor(data, requires_grad=True)
    return ToyModel(cfg, params)
