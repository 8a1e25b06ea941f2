"""White-box untargeted attacks: IFGSM, DeepFool and C&W-L2.

Attacks work on one image at a time in the [0, 1] domain and return the
adversarial image rounded to 8 bits.  ``success`` is always judged on the
rounded image; ``success_real`` records the verdict before rounding.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields, replace
from fractions import Fraction

import numpy as np

from .image import check_image

__all__ = [
    "AttackConfig",
    "AdvResult",
    "ifgsm",
    "deepfool",
    "cw_l2",
    "run_attack",
    "parse_number",
    "read_attack_configs",
]

METHODS = ("ifgsm", "deepfool", "cw_l2")
DEFAULT_ITERATIONS = {"ifgsm": 10, "deepfool": 50, "cw_l2": 200}


def parse_number(text):
    """Parse ``"0.03"``, ``"8/255"`` or ``"8 / 225"`` into a float."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).replace(" ", "")
    try:
        return float(Fraction(s))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number or fraction: {text!r}") from None


@dataclass(frozen=True)
class AttackConfig:
    """One attack setting.

    ``alpha=None`` selects ``min(epsilon, 2.5 * epsilon / iterations)``;
    ``iterations=None`` selects the per-method default (10, 50, 200).
    """

    method: str = "ifgsm"
    name: str = ""
    epsilon: float = 8 / 255
    alpha: float | None = None
    iterations: int | None = None
    kappa: float = 0.0
    c: float = 1.0
    learning_rate: float = 0.005
    overshoot: float = 0.02
    early_stop: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.c <= 0 or self.learning_rate <= 0:
            raise ValueError("c and learning_rate must be > 0")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self):
        if self.method == "ifgsm":
            return f"ifgsm-eps{self.epsilon * 255:g}"
        if self.method == "cw_l2":
            return f"cw_l2-k{self.kappa:g}"
        return self.method

    @property
    def n_iterations(self):
        return self.iterations or DEFAULT_ITERATIONS[self.method]

    @property
    def step(self):
        if self.alpha is not None:
            return self.alpha
        return min(self.epsilon, 2.5 * self.epsilon / self.n_iterations)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping, **overrides):
        """Build from string key/values (config-file section); ``overrides`` win."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in {**dict(mapping), **{k: v for k, v in overrides.items() if v is not None}}.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown attack option {key!r}")
            if key in ("method", "name"):
                kwargs[key] = str(raw)
            elif key in ("iterations", "seed"):
                kwargs[key] = int(raw)
            elif key == "early_stop":
                kwargs[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            else:
                kwargs[key] = parse_number(raw)
        return cls(**kwargs)


def read_attack_configs(path, **overrides):
    """Attack configs from an INI-style file, one section per config.

    The section name becomes the config name unless ``name`` is given.
    """
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    configs = []
    for section in parser.sections():
        values = dict(parser[section])
        values.setdefault("name", section)
        configs.append(AttackConfig.from_mapping(values, **overrides))
    if not configs:
        raise ValueError(f"{path}: no attack sections")
    return configs


@dataclass
class AdvResult:
    adversarial: np.ndarray          # (h, w, c) uint8
    adversarial_real: np.ndarray     # (h, w, c) float in [0, 1], before rounding
    success: bool                    # judged on the rounded image
    success_real: bool
    iterations: int
    l2: float                        # of the rounded perturbation, [0, 1] units
    linf: float
    margin: float = math.nan         # best other logit minus true logit, rounded image
    message: str = ""


def _pred(model, x):
    return int(model.predict_index(x[None])[0])


def _round(x):
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _finish(model, orig, x_real, label, iterations, message="", adv=None):
    adv = _round(x_real) if adv is None else adv
    z = model.logits(adv[None])[0]
    others = np.delete(z, label)
    diff = (adv.astype(np.float64) - orig.astype(np.float64)) / 255.0
    return AdvResult(
        adversarial=adv,
        adversarial_real=x_real,
        success=bool(int(np.argmax(z)) != label),
        success_real=bool(_pred(model, x_real) != label),
        iterations=iterations,
        l2=float(np.sqrt((diff * diff).sum())),
        linf=float(np.abs(diff).max()),
        margin=float(others.max() - z[label]),
        message=message,
    )


def ifgsm(model, image, label, cfg=AttackConfig()):
    """Iterated sign-gradient ascent on cross-entropy, projected on the epsilon ball."""
    orig = check_image(image)
    x0 = orig.astype(np.float64) / 255.0
    eps, alpha = cfg.epsilon, cfg.step
    lo, hi = np.clip(x0 - eps, 0, 1), np.clip(x0 + eps, 0, 1)
    x = x0.copy()
    done = 0
    if eps > 0:
        for done in range(cfg.n_iterations):
            if cfg.early_stop and _pred(model, _round(x) / 255.0) != label:
                break
            g = model.input_gradient(x[None], label, loss="ce")[0]
            x = np.clip(x + alpha * np.sign(g), lo, hi)
        else:
            done = cfg.n_iterations
    # round, then pull back into the integer epsilon ball
    k = math.floor(eps * 255 + 1e-9)
    o = orig.astype(np.int64)
    adv = np.clip(np.rint(x * 255), np.maximum(o - k, 0), np.minimum(o + k, 255)).astype(np.uint8)
    return _finish(model, orig, x, label, done, adv=adv)


def deepfool(model, image, label, cfg=AttackConfig(method="deepfool")):
    """Nearest-boundary steps on the linearized model, with final overshoot.

    Iteration stops once the rounded 8-bit image changes label.
    """
    orig = check_image(image)
    x0 = orig.astype(np.float64) / 255.0
    if _pred(model, x0) != label:
        return _finish(model, orig, x0, label, 0, "already misclassified")
    r_tot = np.zeros_like(x0)
    x = x0
    for it in range(cfg.n_iterations):
        z, jac = model.jacobian(x[None])
        z, jac = z[0], jac[0]
        best, best_r = math.inf, None
        for k in range(len(z)):
            if k == label:
                continue
            w = jac[k] - jac[label]
            norm2 = float((w * w).sum())
            if norm2 == 0:
                continue
            f = float(z[k] - z[label])
            dist = abs(f) / math.sqrt(norm2)
            if dist < best:
                best, best_r = dist, (abs(f) + 1e-4) / norm2 * w
        if best_r is None:
            return _finish(model, orig, x, label, it, "degenerate gradient: all class gradients vanish")
        r_tot = r_tot + best_r
        x = np.clip(x0 + (1 + cfg.overshoot) * r_tot, 0, 1)
        probe = _round(x) / 255.0 if cfg.early_stop else x
        if _pred(model, probe) != label:
            return _finish(model, orig, x, label, it + 1)
    return _finish(model, orig, x, label, cfg.n_iterations, "iteration cap reached")


def cw_l2(model, image, label, cfg=AttackConfig(method="cw_l2")):
    """Carlini-Wagner L2 (untargeted, fixed ``c``) with a tanh box and Adam.

    Among iterates whose real-valued margin reaches ``kappa`` and whose
    rounded image is misclassified, the one with the smallest L2 is returned.
    Without such an iterate the final one is returned with ``success=False``.
    """
    orig = check_image(image)
    x0 = orig.astype(np.float64) / 255.0
    w = np.arctanh(np.clip(2 * x0 - 1, -1 + 1e-6, 1 - 1e-6))
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    b1, b2, tiny = 0.9, 0.999, 1e-8
    best = None
    x = (np.tanh(w) + 1) / 2
    for t in range(1, cfg.n_iterations + 1):
        z = model.logits(x[None])[0]
        others = np.delete(np.arange(len(z)), label)
        j = int(others[np.argmax(z[others])])
        margin = float(z[j] - z[label])
        l2sq = float(((x - x0) ** 2).sum())
        if margin >= cfg.kappa:
            adv = _round(x)
            if _pred(model, adv / 255.0) != label and (best is None or l2sq < best[0]):
                best = (l2sq, x.copy(), adv, t - 1)
        grad_x = 2 * (x - x0)
        if z[label] - z[j] > -cfg.kappa:
            grad_x = grad_x + cfg.c * model.input_gradient(x[None], label, loss="diff", other=j)[0]
        g = grad_x * (1 - np.tanh(w) ** 2) / 2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - cfg.learning_rate * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + tiny)
        x = (np.tanh(w) + 1) / 2
    if best is None:
        z = model.logits(x[None])[0]
        margin = float(np.delete(z, label).max() - z[label])
        res = _finish(model, orig, x, label, cfg.n_iterations, f"no success; final margin {margin:.4g}")
        # a label change short of the kappa margin does not count
        res.success = False
        res.success_real = margin >= cfg.kappa
        return res
    _, xb, adv, it = best
    return _finish(model, orig, xb, label, it, adv=adv)


def run_attack(model, image, label, cfg):
    fn = {"ifgsm": ifgsm, "deepfool": deepfool, "cw_l2": cw_l2}[cfg.method]
    return fn(model, image, label, cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
