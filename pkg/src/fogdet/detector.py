"""Desk-scale query-based detector: conv backbone, encoder variant,
cross-attention decoder, Hungarian matching, and the set-prediction loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import attention as attn
from . import autodiff as ad
from . import fogsim
from . import rng as rng_mod
from .autodiff import ContractError, Tensor

VARIANTS = ("baseline", "PL", "WAA", "WFE")


class ConfigError(ValueError):
    pass


@dataclass
class DetectorConfig:
    variant: str = "baseline"
    image_size: int = 32
    token_dim: int = 32
    heads: int = 2
    num_queries: int = 10
    num_categories: int = fogsim.NUM_CATEGORIES
    encoder_layers: int = 1
    backbone_channels: tuple = (8, 16)     # stages 1 and 2; stage 3 = token_dim
    w_cls: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    eos_coef: float = 0.2
    waa_squash: bool = True                # sigmoid the weather scalar
    waa_axis: str = "key"                  # logit broadcast axis for V_w
    fog_stream: str = "density"            # "density" (1-e^{-beta d}) or "foggy"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; pick from {VARIANTS}")
        if self.image_size % 8 != 0:
            raise ConfigError(f"image size must be divisible by 8, got {self.image_size}")
        if self.token_dim % 2 != 0:
            raise ConfigError("token dim must be even for the positional table")

    @property
    def needs_fog_stream(self) -> bool:
        return self.variant in ("WAA", "WFE")

    @property
    def num_tokens(self) -> int:
        s = self.image_size // 8
        return s * s


@dataclass
class MatchResult:
    """One-to-one query/ground-truth pairing; unmatched queries are no-object."""
    pairs: list                # (query index, gt index)

    @property
    def query_idx(self):
        return [q for q, _ in self.pairs]

    @property
    def gt_idx(self):
        return [g for _, g in self.pairs]


@dataclass
class DetectionOutput:
    class_logits: Tensor       # (m, C+1), last column = no-object
    boxes: Tensor              # (m, 4) as (cx, cy, w, h) in (0,1)

    def class_probs(self) -> np.ndarray:
        z = self.class_logits.data
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


# -- backbone --------------------------------------------------------------

@dataclass
class BackboneParams:
    weights: list              # per stage: conv kernel (C_out, C_in, 3, 3)
    biases: list               # per stage: (C_out,)

    def tensors(self):
        return [*self.weights, *self.biases]


def init_backbone(rng: np.random.Generator, in_channels: int,
                  channels) -> BackboneParams:
    ws, bs = [], []
    cin = in_channels
    for cout in channels:
        s = 1.0 / math.sqrt(cin * 9)
        ws.append(Tensor(rng.normal(0.0, s, (cout, cin, 3, 3)), requires_grad=True))
        bs.append(Tensor(np.zeros(cout), requires_grad=True))
        cin = cout
    return BackboneParams(weights=ws, biases=bs)


def backbone_forward(image: np.ndarray | Tensor, params: BackboneParams) -> list:
    """Three stride-2 conv+relu stages; returns the per-stage feature maps.

    Accepts an (H, W, C) array or a (C, H, W) tensor.
    """
    if isinstance(image, Tensor):
        x = image
    else:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        elif arr.ndim == 3:
            arr = arr.transpose(2, 0, 1)
        x = Tensor(arr)
    if x.data.shape[1] % 8 != 0 or x.data.shape[2] % 8 != 0:
        raise ConfigError(
            f"backbone input dims must be divisible by 8, got {x.data.shape[1:]}")
    feats = []
    for w, b in zip(params.weights, params.biases):
        x = ad.relu(ad.conv2d(x, w, b, stride=2))
        feats.append(x)
    return feats


def tokens_from_features(f3: Tensor, ln_gain: Tensor | None = None,
                         ln_bias: Tensor | None = None) -> Tensor:
    """Flatten the last (C, h, w) map into (h*w, C) tokens plus positions.

    The optional layer norm rescales the content to unit variance so the
    backbone signal is not drowned out by the positional table.
    """
    c, h, w = f3.data.shape
    tokens = ad.transpose(ad.reshape(f3, (c, h * w)))
    if ln_gain is not None:
        tokens = ad.layer_norm(tokens, ln_gain, ln_bias)
    return ad.add(tokens, attn.sinusoidal_positions(h * w, c))


# -- full detector ---------------------------------------------------------

class Detector:
    """Bundles config plus every parameter tensor, keyed by name."""

    def __init__(self, cfg: DetectorConfig, params: dict):
        self.cfg = cfg
        self.params = params   # name -> Tensor

    # construction --------------------------------------------------------
    @classmethod
    def init(cls, cfg: DetectorConfig, seed: int | None = None) -> "Detector":
        seed = cfg.seed if seed is None else seed
        d = cfg.token_dim
        channels = (*cfg.backbone_channels, d)
        p: dict[str, Tensor] = {}

        def reg(prefix, obj):
            if isinstance(obj, Tensor):
                p[prefix] = obj
            elif isinstance(obj, BackboneParams):
                for i, t in enumerate(obj.weights):
                    p[f"{prefix}.w{i}"] = t
                for i, t in enumerate(obj.biases):
                    p[f"{prefix}.b{i}"] = t
            elif isinstance(obj, attn.AttentionParams):
                for i in range(obj.heads):
                    p[f"{prefix}.wq{i}"] = obj.w_q[i]
                    p[f"{prefix}.wk{i}"] = obj.w_k[i]
                    p[f"{prefix}.wv{i}"] = obj.w_v[i]
                p[f"{prefix}.wo"] = obj.w_o
            else:
                raise TypeError(type(obj))

        rng = rng_mod.derive(seed, "init", cfg.variant)
        reg("backbone", init_backbone(rng_mod.derive(seed, "init", "backbone"),
                                      3, channels))
        p["tok_ln_gain"] = Tensor(np.ones(d), requires_grad=True)
        p["tok_ln_bias"] = Tensor(np.zeros(d), requires_grad=True)
        if cfg.needs_fog_stream:
            fog_in = 1 if cfg.fog_stream == "density" else 3
            reg("fog_backbone",
                init_backbone(rng_mod.derive(seed, "init", "fog_backbone"),
                              fog_in, channels))
            p["fog_tok_ln_gain"] = Tensor(np.ones(d), requires_grad=True)
            p["fog_tok_ln_bias"] = Tensor(np.zeros(d), requires_grad=True)
        for layer in range(cfg.encoder_layers):
            er = rng_mod.derive(seed, "init", f"enc{layer}")
            if cfg.variant == "WFE":
                fus = attn.init_fusion_params(er, d, cfg.heads)
                reg(f"enc{layer}.img", fus.p_img)
                reg(f"enc{layer}.fog", fus.p_fog)
                reg(f"enc{layer}.cross", fus.p_cross)
                p[f"enc{layer}.ln_gain"] = fus.ln_gain
                p[f"enc{layer}.ln_bias"] = fus.ln_bias
            else:
                heads = 1 if cfg.variant == "WAA" else cfg.heads
                reg(f"enc{layer}.sa", attn.init_attention_params(er, d, heads))
                p[f"enc{layer}.ln_gain"] = Tensor(np.ones(d), requires_grad=True)
                p[f"enc{layer}.ln_bias"] = Tensor(np.zeros(d), requires_grad=True)
        if cfg.variant == "WAA":
            wr = rng_mod.derive(seed, "init", "weather")
            p["weather.wt"] = Tensor(wr.normal(0.0, 1.0 / math.sqrt(d), (d, 1)),
                                     requires_grad=True)
        dr = rng_mod.derive(seed, "init", "decoder")
        p["dec.queries"] = Tensor(dr.normal(0.0, 1.0, (cfg.num_queries, d)),
                                  requires_grad=True)
        reg("dec.cross", attn.init_attention_params(dr, d, cfg.heads))
        s = 1.0 / math.sqrt(d)
        ncls = cfg.num_categories + 1
        p["dec.cls_w"] = Tensor(dr.normal(0.0, s, (d, ncls)), requires_grad=True)
        p["dec.cls_b"] = Tensor(np.zeros(ncls), requires_grad=True)
        p["dec.box_w1"] = Tensor(dr.normal(0.0, s, (d, d)), requires_grad=True)
        p["dec.box_b1"] = Tensor(np.zeros(d), requires_grad=True)
        p["dec.box_w2"] = Tensor(dr.normal(0.0, s, (d, 4)), requires_grad=True)
        p["dec.box_b2"] = Tensor(np.zeros(4), requires_grad=True)
        return cls(cfg, p)

    # parameter access -----------------------------------------------------
    def named_parameters(self) -> dict:
        return dict(self.params)

    def parameters(self) -> list:
        return list(self.params.values())

    def _attn(self, prefix: str) -> attn.AttentionParams:
        heads = 0
        while f"{prefix}.wq{heads}" in self.params:
            heads += 1
        wq = [self.params[f"{prefix}.wq{i}"] for i in range(heads)]
        return attn.AttentionParams(
            w_q=wq,
            w_k=[self.params[f"{prefix}.wk{i}"] for i in range(heads)],
            w_v=[self.params[f"{prefix}.wv{i}"] for i in range(heads)],
            w_o=self.params[f"{prefix}.wo"],
            heads=heads, d_k=wq[0].shape[1])

    def _backbone(self, prefix: str) -> BackboneParams:
        n = 0
        while f"{prefix}.w{n}" in self.params:
            n += 1
        return BackboneParams(
            weights=[self.params[f"{prefix}.w{i}"] for i in range(n)],
            biases=[self.params[f"{prefix}.b{i}"] for i in range(n)])

    # forward --------------------------------------------------------------
    def image_features(self, image) -> list:
        return backbone_forward(image, self._backbone("backbone"))

    def fog_input(self, sample: fogsim.Sample) -> np.ndarray:
        if self.cfg.fog_stream == "density":
            return fogsim.fog_density(sample.depth, sample.fog)
        return sample.foggy

    def encode(self, clear_tokens: Tensor, fog_tokens: Tensor | None) -> Tensor:
        """Dispatch the configured encoder variant over the token streams."""
        cfg = self.cfg
        if cfg.needs_fog_stream and fog_tokens is None:
            raise ConfigError(f"variant {cfg.variant} requires the fog stream")
        x = clear_tokens
        for layer in range(cfg.encoder_layers):
            if cfg.variant in ("baseline", "PL"):
                sa = attn.multi_head_attention(x, x, x, self._attn(f"enc{layer}.sa"))
                x = ad.layer_norm(ad.add(x, sa),
                                  self.params[f"enc{layer}.ln_gain"],
                                  self.params[f"enc{layer}.ln_bias"])
            elif cfg.variant == "WAA":
                wsp = attn.WeatherScalarParams(self.params["weather.wt"],
                                               squash=cfg.waa_squash)
                v_w = attn.weather_scalar(fog_tokens, wsp)
                sa = attn.multi_head_attention(
                    x, x, x, self._attn(f"enc{layer}.sa"),
                    v_w=v_w, broadcast_axis=cfg.waa_axis)
                x = ad.layer_norm(ad.add(x, sa),
                                  self.params[f"enc{layer}.ln_gain"],
                                  self.params[f"enc{layer}.ln_bias"])
            else:  # WFE
                fus = attn.FusionParams(
                    p_img=self._attn(f"enc{layer}.img"),
                    p_fog=self._attn(f"enc{layer}.fog"),
                    p_cross=self._attn(f"enc{layer}.cross"),
                    ln_gain=self.params[f"enc{layer}.ln_gain"],
                    ln_bias=self.params[f"enc{layer}.ln_bias"])
                x = attn.fusion_encoder_layer(x, fog_tokens, fus)
        return x

    def decode(self, memory: Tensor) -> DetectionOutput:
        """Queries attend to the encoder memory, then class and box heads."""
        q = self.params["dec.queries"]
        t = ad.add(attn.multi_head_attention(q, memory, memory,
                                             self._attn("dec.cross")), q)
        logits = ad.add(ad.matmul(t, self.params["dec.cls_w"]),
                        self.params["dec.cls_b"])
        hidden = ad.relu(ad.add(ad.matmul(t, self.params["dec.box_w1"]),
                                self.params["dec.box_b1"]))
        boxes = ad.sigmoid(ad.add(ad.matmul(hidden, self.params["dec.box_w2"]),
                                  self.params["dec.box_b2"]))
        return DetectionOutput(class_logits=logits, boxes=boxes)

    def forward(self, image: np.ndarray,
                fog_map: np.ndarray | None = None) -> DetectionOutput:
        feats = self.image_features(image)
        clear_tokens = tokens_from_features(feats[-1],
                                            self.params["tok_ln_gain"],
                                            self.params["tok_ln_bias"])
        fog_tokens = None
        if self.cfg.needs_fog_stream:
            if fog_map is None:
                raise ConfigError(f"variant {self.cfg.variant} requires a fog map")
            ffeats = backbone_forward(fog_map, self._backbone("fog_backbone"))
            fog_tokens = tokens_from_features(ffeats[-1],
                                              self.params["fog_tok_ln_gain"],
                                              self.params["fog_tok_ln_bias"])
        memory = self.encode(clear_tokens, fog_tokens)
        return self.decode(memory)

    # checkpointing --------------------------------------------------------
    def save(self, ckpt_dir):
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        names = sorted(self.params)
        for name in names:
            ad.save_tensor(ckpt_dir / f"{name}.bin", self.params[name])
        manifest = {"config": asdict(self.cfg),
                    "tensors": {n: f"{n}.bin" for n in names}}
        with open(ckpt_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)

    @classmethod
    def load(cls, ckpt_dir) -> "Detector":
        ckpt_dir = Path(ckpt_dir)
        with open(ckpt_dir / "manifest.json") as fh:
            manifest = json.load(fh)
        cfg_dict = dict(manifest["config"])
        cfg_dict["backbone_channels"] = tuple(cfg_dict["backbone_channels"])
        cfg = DetectorConfig(**cfg_dict)
        params = {name: ad.load_tensor(ckpt_dir / fname, requires_grad=True)
                  for name, fname in manifest["tensors"].items()}
        return cls(cfg, params)


# -- boxes / matching / loss ----------------------------------------------

def _corners(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes.T
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def giou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU between (m,4) and (g,4) center-format boxes."""
    a, b = _corners(pred)[:, None, :], _corners(gt)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclose = ew * eh
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    return iou - np.where(enclose > 0, (enclose - union) / np.maximum(enclose, 1e-12), 0.0)


def match_cost_matrix(pred: DetectionOutput, gt: fogsim.Annotation,
                      w_cls: float, w_l1: float, w_giou: float) -> np.ndarray:
    probs = pred.class_probs()
    gt_boxes = np.asarray(gt.boxes, dtype=np.float64)
    labels = np.asarray(gt.labels, dtype=np.intp)
    cost_cls = 1.0 - probs[:, labels]
    cost_l1 = np.abs(pred.boxes.data[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    cost_giou = 1.0 - giou_matrix(pred.boxes.data, gt_boxes)
    return w_cls * cost_cls + w_l1 * cost_l1 + w_giou * cost_giou


def hungarian_match(pred: DetectionOutput, gt: fogsim.Annotation,
                    w_cls: float = 1.0, w_l1: float = 5.0,
                    w_giou: float = 2.0) -> MatchResult:
    """Exact minimum-cost one-to-one assignment of queries to ground truth.

    Costs are computed on detached values; gradients flow only through the
    loss evaluated at the returned matching.
    """
    m = pred.boxes.data.shape[0]
    g = len(gt.labels)
    if g > m:
        raise ContractError(f"{g} ground-truth objects exceed {m} queries")
    cost = match_cost_matrix(pred, gt, w_cls, w_l1, w_giou)
    rows, cols = linear_sum_assignment(cost)
    return MatchResult(pairs=sorted(zip(rows.tolist(), cols.tolist()),
                                    key=lambda p: p[1]))


def _giou_pairs(pred: Tensor, gt: Tensor) -> Tensor:
    """Differentiable elementwise GIoU between matched (k,4) box tensors."""
    half = 0.5

    def corners(b):
        cx, cy = ad.slice_cols(b, 0, 1), ad.slice_cols(b, 1, 2)
        w, h = ad.slice_cols(b, 2, 3), ad.slice_cols(b, 3, 4)
        return (ad.sub(cx, ad.scale(w, half)), ad.sub(cy, ad.scale(h, half)),
                ad.add(cx, ad.scale(w, half)), ad.add(cy, ad.scale(h, half)),
                ad.mul(w, h))

    ax1, ay1, ax2, ay2, area_a = corners(pred)
    bx1, by1, bx2, by2, area_b = corners(gt)
    iw = ad.relu(ad.sub(ad.minimum(ax2, bx2), ad.maximum(ax1, bx1)))
    ih = ad.relu(ad.sub(ad.minimum(ay2, by2), ad.maximum(ay1, by1)))
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(area_a, area_b), inter)
    safe_union = ad.add(union, Tensor(np.full(union.shape, 1e-12)))
    iou = ad.div(inter, safe_union)
    ew = ad.sub(ad.maximum(ax2, bx2), ad.minimum(ax1, bx1))
    eh = ad.sub(ad.maximum(ay2, by2), ad.minimum(ay1, by1))
    enclose = ad.add(ad.mul(ew, eh), Tensor(np.full(union.shape, 1e-12)))
    return ad.sub(iou, ad.div(ad.sub(enclose, union), enclose))


def detection_loss(pred: DetectionOutput, gt: fogsim.Annotation,
                   match: MatchResult, w_cls: float = 1.0, w_l1: float = 5.0,
                   w_giou: float = 2.0, eos_coef: float = 0.2) -> Tensor:
    """Cross-entropy over all queries plus L1 and GIoU over matched pairs.

    Unmatched queries target the no-object class with weight eos_coef to
    offset the class imbalance from the fixed query budget.
    """
    m, ncls = pred.class_logits.shape
    no_object = ncls - 1
    targets = np.full(m, no_object, dtype=np.intp)
    weights = np.full(m, eos_coef)
    q_idx = np.asarray(match.query_idx, dtype=np.intp)
    g_idx = np.asarray(match.gt_idx, dtype=np.intp)
    labels = np.asarray(gt.labels, dtype=np.intp)
    targets[q_idx] = labels[g_idx]
    weights[q_idx] = 1.0

    logp = ad.log_softmax_rows(pred.class_logits)
    nll = ad.scale(ad.select(logp, np.arange(m), targets), -1.0)
    cls_loss = ad.scale(ad.tsum(ad.mul(nll, Tensor(weights))),
                        1.0 / weights.sum())

    loss = ad.scale(cls_loss, w_cls)
    k = len(match.pairs)
    if k:
        pred_boxes = ad.take_rows(pred.boxes, q_idx)
        gt_boxes = Tensor(np.asarray(gt.boxes, dtype=np.float64)[g_idx])
        l1 = ad.scale(ad.tsum(ad.absolute(ad.sub(pred_boxes, gt_boxes))), 1.0 / k)
        giou = _giou_pairs(pred_boxes, gt_boxes)
        giou_loss = ad.scale(ad.tsum(ad.sub(Tensor(np.ones(giou.shape)), giou)),
                             1.0 / k)
        loss = ad.add(loss, ad.add(ad.scale(l1, w_l1), ad.scale(giou_loss, w_giou)))
    return loss
