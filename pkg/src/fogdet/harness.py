"""Run orchestration: dataset generation, variant training, evaluation
across fog splits, and the invariant verification suites."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import distill
from . import evalkit
from . import figures
from . import fogsim
from . import oracles
from . import rng as rng_mod
from .autodiff import Tensor
from .config import RunConfig
from .detector import (ConfigError, Detector, detection_loss, hungarian_match)


def checkpoint_hash(ckpt_dir) -> str:
    """Content hash over every file in a checkpoint directory."""
    h = hashlib.sha256()
    for path in sorted(Path(ckpt_dir).rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def _fog_levels(cfg: RunConfig) -> list:
    return [fogsim.FogParams(beta, cfg.atmospheric_light)
            for beta in cfg.fog_presets.values()]


# -- generate --------------------------------------------------------------

def generate(cfg: RunConfig) -> dict:
    """Write the train split (mixed fog presets) and one eval split per
    fog level, plus a clear (beta=0) eval split."""
    root = Path(cfg.data_root)
    manifests = {"train": fogsim.make_dataset(
        root / "train", cfg.n_train, _fog_levels(cfg), cfg.seed,
        cfg.image_size, cfg.image_size, cfg.max_objects, split="train")}
    split_beta = {"clear": 0.0, **cfg.fog_presets}
    for split in cfg.eval_splits:
        if split not in split_beta:
            raise ConfigError(f"unknown eval split {split!r}")
        params = fogsim.FogParams(split_beta[split], cfg.atmospheric_light)
        manifests[split] = fogsim.make_dataset(
            root / split, cfg.n_eval, [params], cfg.seed,
            cfg.image_size, cfg.image_size, cfg.max_objects, split=split)
    top = {"splits": {name: str(root / name) for name in manifests},
           "config": cfg.to_dict()}
    with open(root / "manifest.json", "w") as fh:
        json.dump(top, fh, indent=2)
    return top


# -- training --------------------------------------------------------------

def _step_sample(cfg: RunConfig, samples: list, gen: np.random.Generator,
                 mix: str) -> fogsim.Sample:
    """Pick a sample and (optionally) re-fog it with a per-step severity."""
    sample = samples[int(gen.integers(len(samples)))]
    if not cfg.fog_on_the_fly:
        return sample
    betas = list(cfg.fog_presets.values())
    if mix == "mixed" and gen.random() < 0.5:
        beta = 0.0
    else:
        beta = betas[int(gen.integers(len(betas)))]
    fog = fogsim.FogParams(beta, cfg.atmospheric_light)
    foggy = fogsim.apply_fog(sample.clear, sample.depth, fog)
    return fogsim.Sample(sample.sample_id, sample.clear, foggy,
                         sample.depth, sample.annotation, fog)


def _detector_step(model: Detector, batch: list,
                   optimizer: distill.SGD) -> dict:
    cfg = model.cfg
    optimizer.zero_grad()
    terms = []
    for sample in batch:
        fog_map = model.fog_input(sample) if cfg.needs_fog_stream else None
        pred = model.forward(sample.foggy, fog_map)
        distill.check_finite(pred)
        match = hungarian_match(pred, sample.annotation,
                                cfg.w_cls, cfg.w_l1, cfg.w_giou)
        terms.append(detection_loss(pred, sample.annotation, match,
                                    cfg.w_cls, cfg.w_l1, cfg.w_giou,
                                    cfg.eos_coef))
    loss = ad.scale(terms[0] if len(terms) == 1 else _tsum(terms),
                    1.0 / len(terms))
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite loss {float(loss.data)}")
    ad.backward(loss)
    optimizer.step()
    val = float(loss.data)
    return {"l_obj": val, "l_perc": 0.0, "l_total": val}


def _tsum(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


def train_model(cfg: RunConfig, variant: str, samples: list, steps: int,
                out_dir, seed_tag: str, mix: str,
                teacher: Detector | None = None) -> dict:
    """Train one model; returns the run record with metrics and status.

    A non-finite loss aborts the loop, keeps the last periodic checkpoint,
    and records divergence diagnostics instead of raising.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = Detector.init(cfg.detector_config(variant), cfg.seed)
    optimizer = distill.SGD(model.named_parameters(), cfg.lr, cfg.momentum,
                            cfg.max_grad_norm)
    pair = None
    if variant == "PL":
        if teacher is None:
            raise ConfigError("PL training needs a teacher")
        pair = distill.TeacherStudentPair(
            teacher=teacher, student=model,
            perceptual=distill.PerceptualConfig(
                layers=cfg.perc_layers, weights=cfg.perc_weights,
                global_weight=cfg.perc_weight))

    ckpt = out / "checkpoint"
    model.save(ckpt)
    metrics: list[dict] = []
    status = {"status": "ok"}
    with open(out / "metrics.jsonl", "w") as mfh:
        for step in range(1, steps + 1):
            gen = rng_mod.derive(cfg.seed, seed_tag, f"step{step}")
            batch = [_step_sample(cfg, samples, gen, mix)
                     for _ in range(cfg.batch_size)]
            try:
                if pair is not None:
                    row = distill.distill_step(batch, pair, optimizer)
                else:
                    row = _detector_step(model, batch, optimizer)
            except FloatingPointError as exc:
                status = {"status": "diverged", "diverged_at": step,
                          "diagnostics": str(exc)}
                break
            row = {"step": step, **row}
            metrics.append(row)
            mfh.write(json.dumps(row) + "\n")
            if step % cfg.checkpoint_every == 0:
                model.save(ckpt)
    if status["status"] == "ok":
        model.save(ckpt)
    if metrics:
        figures.loss_curve(metrics, out / "loss_curve.png")
    record = {"variant": variant, "steps_run": len(metrics),
              "checkpoint": str(ckpt),
              "checkpoint_hash": checkpoint_hash(ckpt),
              "final_loss": metrics[-1]["l_total"] if metrics else None,
              **status}
    return record


def train(cfg: RunConfig, out_dir) -> dict:
    """The `train` command: teacher bootstrap for PL, then the main run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_root = Path(cfg.data_root)
    with open(data_root / "train" / "manifest.json") as fh:
        manifest = json.load(fh)
    det_cfg = cfg.detector_config()
    if det_cfg.needs_fog_stream and not manifest.get("has_fog_stream"):
        raise ConfigError(
            f"variant {cfg.variant} needs the fog stream, but the dataset "
            "manifest does not provide one")
    samples = fogsim.load_dataset(data_root / "train")

    started = time.time()
    teacher = None
    report = {"config": cfg.to_dict()}
    if cfg.variant == "PL":
        if cfg.teacher_checkpoint:
            teacher = Detector.load(cfg.teacher_checkpoint)
            report["teacher"] = {"checkpoint": cfg.teacher_checkpoint}
        else:
            report["teacher"] = train_model(
                cfg, "baseline", samples, cfg.teacher_steps,
                out / "teacher", "teacher", mix="mixed")
            teacher = Detector.load(report["teacher"]["checkpoint"])
    report["run"] = train_model(cfg, cfg.variant, samples, cfg.steps, out,
                                "train", mix=cfg.train_mix, teacher=teacher)
    report["wall_clock_s"] = round(time.time() - started, 3)
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(out / "report.txt", "w") as fh:
        run = report["run"]
        fh.write(f"variant={run['variant']} status={run['status']} "
                 f"steps={run['steps_run']} final_loss={run['final_loss']}\n")
    return report


# -- evaluation ------------------------------------------------------------

def evaluate_split(model: Detector, samples: list,
                   min_confidence: float = 0.05) -> dict:
    preds, gts = [], {}
    for sample in samples:
        fog_map = (model.fog_input(sample)
                   if model.cfg.needs_fog_stream else None)
        with ad.no_grad():
            output = model.forward(sample.foggy, fog_map)
        preds.extend(evalkit.predictions_from_output(
            output, sample.sample_id, min_confidence))
        gts[sample.sample_id] = (sample.annotation.boxes,
                                 sample.annotation.labels)
    return evalkit.map50(preds, gts)


def evaluate(cfg: RunConfig, out_dir, checkpoint=None) -> dict:
    """The `eval` command: per-split AP tables, delimited output, figures."""
    ckpt = checkpoint or cfg.checkpoint
    if not ckpt:
        raise ConfigError("eval needs a checkpoint (config key or --checkpoint)")
    model = Detector.load(ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    rows = []
    for split in cfg.eval_splits:
        samples = fogsim.load_dataset(Path(cfg.data_root) / split)
        result = evaluate_split(model, samples, cfg.min_confidence)
        rows.append({"model": model.cfg.variant, "split": split, **result})
    report = {"config": cfg.to_dict(), "checkpoint": str(ckpt),
              "splits": rows, "wall_clock_s": round(time.time() - started, 3)}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(out / "report.txt", "w") as fh:
        fh.write(evalkit.format_table(rows))
    with open(out / "report.csv", "w") as fh:
        fh.write("model,split," + ",".join(fogsim.CATEGORIES) + ",map50\n")
        for row in rows:
            aps = [row["per_category"].get(c) for c in fogsim.CATEGORIES]
            cells = [row["model"], row["split"],
                     *["" if a is None else f"{a:.6f}" for a in aps],
                     f"{row['map50']:.6f}"]
            fh.write(",".join(cells) + "\n")
    figures.map_bars(rows, out / "map_by_split.png")
    return report


# -- verification suites ---------------------------------------------------

def _suite_gradients():
    gen = rng_mod.derive(7, "verify", "grad")
    for _ in range(10):
        w = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
        x = Tensor(gen.normal(size=(4, 2)), requires_grad=True)
        err = ad.gradient_check(lambda: ad.tsum(ad.sigmoid(ad.matmul(w, x))),
                                [w, x])
        assert err < 1e-4, f"matmul/sigmoid gradient error {err}"
    g = Tensor(np.ones(4), requires_grad=True)
    b = Tensor(gen.normal(size=4), requires_grad=True)
    x = Tensor(gen.normal(size=(3, 4)), requires_grad=True)
    err = ad.gradient_check(lambda: ad.sum_sq(ad.layer_norm(x, g, b)), [x, g, b])
    assert err < 1e-4, f"layer_norm gradient error {err}"


def _suite_softmax():
    gen = rng_mod.derive(7, "verify", "softmax")
    x = gen.normal(size=(6, 5))
    y = ad.softmax_rows(Tensor(x)).data
    assert np.abs(y.sum(axis=1) - 1).max() <= 1e-12, "rows must sum to 1"
    shifted = ad.softmax_rows(Tensor(x + 3.0)).data
    assert np.abs(y - shifted).max() <= 1e-12, "shift invariance violated"


def _suite_fog_identities():
    gen = rng_mod.derive(7, "verify", "fog")
    img = gen.uniform(size=(8, 8, 3))
    depth = gen.uniform(1, 10, size=(8, 8))
    same = fogsim.apply_fog(img, depth, fogsim.FogParams(0.0))
    assert np.array_equal(same, img), "beta=0 must be the identity"
    t1 = fogsim.transmission(depth, 0.3)
    t2 = fogsim.transmission(depth, 0.5)
    t12 = fogsim.transmission(depth, 0.8)
    assert np.abs(t1 * t2 - t12).max() <= 1e-12, "transmission multiplicativity"
    far = fogsim.apply_fog(img, np.full((8, 8), 1e4), fogsim.FogParams(1.0, 0.9))
    assert np.abs(far - 0.9).max() <= 1e-6, "far-depth limit must approach A"


def _suite_attention():
    gen = rng_mod.derive(7, "verify", "attention")
    d = 6
    p = attn.init_attention_params(gen, d, heads=1)
    x = Tensor(gen.normal(size=(5, d)))
    base = attn.self_attention(x, p).data
    ones = Tensor(np.ones((5, 1)))
    faa = attn.fog_aware_attention(x, ones, p).data
    assert np.abs(base - faa).max() <= 1e-12, "V_w=1 must reduce to self-attention"
    p_id = attn.AttentionParams(w_q=p.w_q, w_k=p.w_k, w_v=p.w_v,
                                w_o=Tensor(np.eye(p.d_k)), heads=1, d_k=p.d_k)
    mha = attn.multi_head_attention(x, x, x, p_id).data
    sa_dk = attn.self_attention(x, p).data
    assert np.array_equal(mha, sa_dk), "h=1 with identity W_O must equal SA"
    perm = gen.permutation(5)
    permuted = attn.self_attention(Tensor(x.data[perm]), p).data
    assert np.abs(base[perm] - permuted).max() <= 1e-12, "permutation equivariance"


def _suite_fusion():
    gen = rng_mod.derive(7, "verify", "fusion")
    d = 6
    shared = attn.init_attention_params(gen, d, heads=1)
    fus = attn.FusionParams(p_img=shared, p_fog=shared, p_cross=shared,
                            ln_gain=Tensor(np.ones(d)), ln_bias=Tensor(np.zeros(d)))
    x = Tensor(gen.normal(size=(4, d)))
    out = attn.fusion_encoder_layer(x, x, fus).data
    e = attn.multi_head_attention(x, x, x, shared)
    expect = ad.layer_norm(ad.add(e, attn.multi_head_attention(e, e, e, shared)),
                           fus.ln_gain, fus.ln_bias).data
    assert np.abs(out - expect).max() <= 1e-12, "stream-collapse reduction"


def _suite_hungarian():
    from scipy.optimize import linear_sum_assignment
    gen = rng_mod.derive(7, "verify", "hungarian")
    for _ in range(100):
        g = int(gen.integers(1, 7))
        m = int(gen.integers(g, 7))
        cost = gen.uniform(size=(m, g))
        rows, cols = linear_sum_assignment(cost)
        got = cost[rows, cols].sum()
        _, want = oracles.brute_force_assignment(cost)
        assert abs(got - want) <= 1e-12, "assignment not optimal"


def _suite_map50():
    gen = rng_mod.derive(7, "verify", "map")
    for _ in range(50):
        preds, gts = _random_eval_instance(gen)
        got = evalkit.map50(preds, gts)["map50"]
        _, want = oracles.map50_ref([(p.image_id, p.box, p.category, p.confidence)
                                     for p in preds], gts, fogsim.NUM_CATEGORIES)
        assert abs(got - want) <= 1e-9, f"mAP mismatch: {got} vs {want}"


def _suite_perceptual():
    gen = rng_mod.derive(7, "verify", "perc")
    from .detector import DetectorConfig
    dcfg = DetectorConfig(variant="baseline", image_size=16, token_dim=8)
    teacher = Detector.init(dcfg, seed=3)
    student = Detector.init(dcfg, seed=3)
    pair = distill.TeacherStudentPair(teacher=teacher, student=student)
    img = gen.uniform(size=(16, 16, 3))
    loss = distill.perceptual_loss(img, img, pair)
    assert float(loss.data) == 0.0, "tied params on identical inputs must give 0"
    other = gen.uniform(size=(16, 16, 3))
    loss2 = distill.perceptual_loss(img, other, pair)
    assert float(loss2.data) >= 0.0, "perceptual loss must be non-negative"


def _suite_annotations():
    gen = rng_mod.derive(7, "verify", "scenes")
    for _ in range(20):
        spec = fogsim.random_scene(gen, 32, 32)
        image, depth, ann = fogsim.render_scene(spec)
        assert len(ann.boxes) >= 1


def _random_eval_instance(gen: np.random.Generator):
    """Small random predictions/GT for the mAP oracle comparison."""
    gts, preds = {}, []
    for img in range(int(gen.integers(1, 4))):
        image_id = f"im{img}"
        n_gt = int(gen.integers(1, 5))
        boxes, labels = [], []
        for _ in range(n_gt):
            cx, cy = gen.uniform(0.2, 0.8, 2)
            w, h = gen.uniform(0.05, 0.3, 2)
            boxes.append((cx, cy, w, h))
            labels.append(int(gen.integers(fogsim.NUM_CATEGORIES)))
        gts[image_id] = (boxes, labels)
        for _ in range(int(gen.integers(0, 5))):
            if gen.random() < 0.6:
                j = int(gen.integers(n_gt))
                bx = np.array(boxes[j]) + gen.normal(0, 0.03, 4)
                cat = labels[j]
            else:
                bx = np.array([*gen.uniform(0.2, 0.8, 2), *gen.uniform(0.05, 0.3, 2)])
                cat = int(gen.integers(fogsim.NUM_CATEGORIES))
            preds.append(evalkit.EvalPrediction(
                image_id=image_id, box=tuple(np.abs(bx)), category=cat,
                confidence=float(gen.uniform())))
    return preds, gts


SUITES = [
    ("gradient-checks", _suite_gradients),
    ("softmax-row-stochastic", _suite_softmax),
    ("fog-model-identities", _suite_fog_identities),
    ("attention-invariants", _suite_attention),
    ("fusion-reduction", _suite_fusion),
    ("hungarian-vs-brute-force", _suite_hungarian),
    ("map50-vs-reference", _suite_map50),
    ("perceptual-loss-contracts", _suite_perceptual),
    ("scene-annotations", _suite_annotations),
]


def verify(out_dir=None) -> tuple[bool, list]:
    """Run every invariant suite; returns overall pass plus per-suite lines."""
    results = []
    ok = True
    for name, fn in SUITES:
        try:
            fn()
            results.append((name, True, ""))
        except AssertionError as exc:
            ok = False
            results.append((name, False, str(exc)))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump({"pass": ok,
                       "suites": [{"name": n, "pass": p, "detail": d}
                                  for n, p, d in results]}, fh, indent=2)
        with open(out / "report.txt", "w") as fh:
            for n, p, d in results:
                fh.write(f"{'PASS' if p else 'FAIL'} {n} {d}\n")
    return ok, results
