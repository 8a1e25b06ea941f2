"""Reversible adversarial examples end to end: attack, camouflage, restore, measure."""

from __future__ import annotations

import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attacks import AdvResult, run_attack
from .bitstream import BitWriter, encode_ints, signed_width
from .image import check_image, psnr
from .rdh import DEFAULT_PASSES, CapacityError, rdh_capacity, rdh_embed
from .rit import IntegrityError, restore, serialize_aux, transform_details

__all__ = [
    "REPORT_VERSION",
    "RaeResult",
    "EvalReport",
    "rde_required_bits",
    "payload_comparison",
    "make_rae",
    "evaluate",
]

REPORT_VERSION = 1
WIDTH_FIELD_BITS = 4
FAILURE_POLICIES = ("count", "skip")


def rde_required_bits(orig, ae):
    """Bits of the losslessly coded residual ``orig - ae``.

    Layout: a 4-bit sign-magnitude width, then the flagged raw-or-run-length
    integer list used for class index tables.
    """
    orig, ae = check_image(orig, "orig"), check_image(ae, "ae")
    if orig.shape != ae.shape:
        raise ValueError(f"shape mismatch: {orig.shape} vs {ae.shape}")
    residual = orig.astype(np.int64).ravel() - ae.astype(np.int64).ravel()
    width = signed_width(residual)
    w = BitWriter()
    w.write_uint(width, WIDTH_FIELD_BITS)
    encode_ints(w, residual, width, signed=True)
    return len(w)


def payload_comparison(orig, ae, block_size=4, n_classes=16, n_passes=DEFAULT_PASSES):
    """Payload each reversible scheme must hide, next to what the covers can hold.

    ``rdh_capacity_bits`` is the capacity of the adversarial image itself (the
    cover a residual-embedding scheme would use); ``rit_capacity_bits`` is the
    capacity of the block-transformed image that carries the RIT payload.
    """
    transformed, aux = transform_details(orig, ae, block_size, n_classes)
    return {
        "rde_required_bits": rde_required_bits(orig, ae),
        "rit_aux_bits": len(serialize_aux(aux)),
        "rdh_capacity_bits": rdh_capacity(ae, n_passes),
        "rit_capacity_bits": rdh_capacity(transformed, n_passes),
    }


@dataclass
class RaeResult:
    rae: np.ndarray | None       # None when the aux payload did not fit
    attack: AdvResult
    aux_bits: int
    capacity_bits: int

    @property
    def ae(self):
        return self.attack.adversarial


def make_rae(orig, label, model, cfg, block_size=4, n_classes=16, n_passes=DEFAULT_PASSES):
    """Attack ``orig`` and disguise the original as the adversarial image.

    Raises :class:`CapacityError` (carrying the partial result as ``.result``)
    when the aux payload does not fit.
    """
    orig = check_image(orig)
    if int(model.predict_index(orig[None])[0]) != label:
        raise ValueError("original is already misclassified; attacking it is meaningless")
    adv = run_attack(model, orig, label, cfg)
    transformed, aux = transform_details(orig, adv.adversarial, block_size, n_classes)
    payload = serialize_aux(aux)
    capacity = rdh_capacity(transformed, n_passes)
    result = RaeResult(None, adv, len(payload), capacity)
    if len(payload) > capacity:
        err = CapacityError(len(payload), capacity)
        err.result = result
        raise err
    result.rae = rdh_embed(transformed, payload, n_passes)
    return result


def _finite(x):
    return None if x is None or not math.isfinite(x) else round(float(x), 6)


# -- evaluation --------------------------------------------------------------

_STATE = {}


def _init_worker(state):
    _STATE.clear()
    _STATE.update(state)


def _process(job):
    i, k = job
    s = _STATE
    img, label, image_id = s["images"][i], int(s["labels"][i]), s["ids"][i]
    cfg = s["configs"][k]
    with threadpool_limits(1):
        rec = {"id": image_id, "method": cfg.name, "label": label, "status": "ok"}
        try:
            res = make_rae(img, label, s["model"], cfg, s["block_size"], s["n_classes"], s["n_passes"])
        except CapacityError as exc:
            res = exc.result
            rec["status"] = "capacity"
        adv = res.attack
        rec.update(
            ae_success=adv.success,
            ae_success_real=adv.success_real,
            ae_pred=int(np.argmax(s["model"].logits(adv.adversarial[None])[0])),
            l2=_finite(adv.l2),
            linf=_finite(adv.linf),
            iterations=adv.iterations,
            aux_bits=res.aux_bits,
            rit_capacity_bits=res.capacity_bits,
            rde_bits=rde_required_bits(img, adv.adversarial),
            psnr_orig_ae=_finite(psnr(img, adv.adversarial)),
        )
        if res.rae is not None:
            rae_pred = int(s["model"].predict_index(res.rae[None])[0])
            rec.update(
                rae_pred=rae_pred,
                rae_misclassified=rae_pred != label,
                restore_exact=bool(np.array_equal(restore(res.rae), img)),
                psnr_rae_orig=_finite(psnr(res.rae, img)),
                psnr_rae_ae=_finite(psnr(res.rae, adv.adversarial)),
            )
        else:
            rec.update(rae_pred=None, rae_misclassified=False, restore_exact=None,
                       psnr_rae_orig=None, psnr_rae_ae=None)
        return rec


def _mean(values):
    vals = [v for v in values if v is not None]
    return round(float(np.mean(vals)), 6) if vals else None


def _row(cfg, recs, policy):
    counted = recs if policy == "count" else [r for r in recs if r["ae_success"]]
    built = [r for r in recs if r["status"] == "ok"]
    n = len(counted)
    return {
        "method": cfg.name,
        "params": cfg.to_dict(),
        "n_images": len(recs),
        "n_counted": n,
        "ae_success_rate": _mean([float(r["ae_success"]) for r in counted]),
        "ae_success_rate_real": _mean([float(r["ae_success_real"]) for r in counted]),
        "rae_success_rate": _mean([float(r["ae_success"] and r["rae_misclassified"]) for r in counted]),
        "restore_exact_rate": _mean([float(r["restore_exact"]) for r in built]),
        "capacity_failures": len(recs) - len(built),
        "psnr_rae_vs_orig": _mean([r["psnr_rae_orig"] for r in built]),
        "psnr_rae_vs_ae": _mean([r["psnr_rae_ae"] for r in built]),
        "psnr_orig_vs_ae": _mean([r["psnr_orig_ae"] for r in recs]),
        "mean_aux_bits": _mean([r["aux_bits"] for r in recs]),
        "mean_rdh_capacity_bits": _mean([r["rit_capacity_bits"] for r in recs]),
        "mean_rde_bits": _mean([r["rde_bits"] for r in recs]),
        "median_l2": round(float(np.median([r["l2"] for r in recs])), 6) if recs else None,
    }


@dataclass
class EvalReport:
    """Per-method summary rows, per-(image, method) records and the run settings.

    ``to_jsonl`` emits one ``header`` line, the ``record`` lines sorted by
    (method, image id) and one ``summary`` line holding the rows.
    """

    rows: list
    records: list
    meta: dict = field(default_factory=dict)

    def row(self, method):
        return next(r for r in self.rows if r["method"] == method)

    def to_jsonl(self):
        lines = [json.dumps({"type": "header", "version": REPORT_VERSION, **self.meta}, sort_keys=True)]
        lines += [json.dumps({"type": "record", **r}, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"type": "summary", "rows": self.rows}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def table(self):
        cols = [("method", "method", "{}"), ("n", "n_counted", "{}"),
                ("AE succ", "ae_success_rate", "{:.3f}"), ("RAE succ", "rae_success_rate", "{:.3f}"),
                ("restore", "restore_exact_rate", "{:.3f}"), ("cap.fail", "capacity_failures", "{}"),
                ("RAE/OI dB", "psnr_rae_vs_orig", "{:.2f}"), ("RAE/AE dB", "psnr_rae_vs_ae", "{:.2f}"),
                ("OI/AE dB", "psnr_orig_vs_ae", "{:.2f}"), ("aux bits", "mean_aux_bits", "{:.0f}"),
                ("capacity", "mean_rdh_capacity_bits", "{:.0f}"), ("RDE bits", "mean_rde_bits", "{:.0f}")]
        body = [[h for h, _, _ in cols]]
        for row in self.rows:
            body.append([("-" if row[k] is None else f.format(row[k])) for _, k, f in cols])
        widths = [max(len(line[i]) for line in body) for i in range(len(cols))]
        out = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(line, widths)))
               for line in body]
        out.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(out) + "\n"

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text(self.to_jsonl(), encoding="utf-8")
        (out / "report.txt").write_text(self.table(), encoding="utf-8")
        return out / "report.jsonl", out / "report.txt"


def evaluate(corpus, model, configs, block_size=4, n_classes=16, n_passes=DEFAULT_PASSES, seed=0,
             limit=None, jobs=1, failure_policy="count", corpus_name=""):
    """Run every attack config over the correctly classified images of ``corpus``.

    ``corpus`` is a :class:`~ritrae.data.LabeledImages`.  With ``limit`` a
    seeded random subset of that size is used.  The result does not depend
    on ``jobs``.  Raises :class:`IntegrityError` if any restore is inexact.
    """
    if failure_policy not in FAILURE_POLICIES:
        raise ValueError(f"failure_policy must be one of {FAILURE_POLICIES}")
    configs = list(configs)
    if not configs:
        raise ValueError("no attack configs given")
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError(f"attack config names must be unique, got {names}")
    with threadpool_limits(1):
        pred = np.concatenate([model.predict_index(corpus.images[i:i + 64])
                               for i in range(0, len(corpus), 64)]) if len(corpus) else np.zeros(0, int)
    label_idx = np.searchsorted(model.classes_, corpus.labels)
    correct = np.flatnonzero(pred == label_idx)
    if limit is not None and limit < correct.size:
        correct = np.sort(np.random.default_rng(seed).choice(correct, size=limit, replace=False))
    if correct.size == 0:
        raise ValueError("no correctly classified images left to attack")

    state = {
        "images": corpus.images[correct], "labels": label_idx[correct],
        "ids": [corpus.ids[i] for i in correct], "configs": configs, "model": model,
        "block_size": block_size, "n_classes": n_classes, "n_passes": n_passes,
    }
    work = [(i, k) for k in range(len(configs)) for i in range(correct.size)]
    if jobs <= 1:
        _init_worker(state)
        records = [_process(job) for job in work]
    else:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=_init_worker,
                                 initargs=(state,)) as pool:
            records = list(pool.map(_process, work, chunksize=4))
    records.sort(key=lambda r: (r["method"], r["id"]))

    bad = [r for r in records if r["restore_exact"] is False]
    if bad:
        raise IntegrityError(f"restore was not bit-exact for {len(bad)} RAEs, e.g. {bad[0]['id']}")
    rows = [_row(cfg, [r for r in records if r["method"] == cfg.name], failure_policy) for cfg in configs]
    meta = {
        "corpus": corpus_name,
        "n_corpus": len(corpus),
        "n_correct": int((pred == label_idx).sum()),
        "n_evaluated": int(correct.size),
        "seed": seed,
        "limit": limit,
        "block_size": block_size,
        "n_classes": n_classes,
        "n_passes": n_passes,
        "failure_policy": failure_policy,
        "configs": [c.to_dict() for c in configs],
    }
    return EvalReport(rows, records, meta)
