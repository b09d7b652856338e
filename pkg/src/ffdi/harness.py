"""Training, leave-one-domain-out evaluation, and analysis drivers.

One training batch concatenates a fixed number of samples from every source
domain; the pipeline per batch is standard augmentation, then frequency-domain
augmentation, then the forward/backward pass and an SGD step with per-group
learning rates and step-decay milestones.  The held-out domain never
contributes a sample to any gradient step; the ids of consumed samples are
hashed into the run report so that can be audited.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DomainDataset, augment_standard, build_dataset
from .fdag import NoiseConfig, perturb, pixel_noise
from .model import FfdiConfig, FfdiModel
from .spectral import decompose_batch


class ConfigError(ValueError):
    """Bad config file contents or unknown key (a usage error, not a data error)."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_per_domain: int = 16
    lr_classifier: float = 0.05
    lr_features: float = 0.01
    weight_decay: float = 5e-4
    milestones: tuple = (800, 1400)
    lr_decay: float = 0.1
    lam: float = 1.0
    r: int = 8
    interaction: str = "iim"
    use_h: bool = True
    use_l: bool = True
    use_interaction: bool = True
    standard_augment: bool = True
    time_domain_noise: bool = False
    cae_per_pixel: bool = False
    detach_cae: bool = False
    precision: str = "single"
    seed: int = 0
    held_out: str = "sketch"
    data_seed: int = 0
    per_class: int = 120
    num_domains: int = 4
    classes: int = 5
    out_dir: str = ""
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.batch_per_domain < 1:
            raise ConfigError("batch_per_domain must be at least 1")

    def model_config(self, num_classes: int) -> FfdiConfig:
        return FfdiConfig(
            num_classes=num_classes, r=self.r, lam=self.lam,
            interaction=self.interaction, use_h=self.use_h, use_l=self.use_l,
            use_interaction=self.use_interaction, cae_per_pixel=self.cae_per_pixel,
            detach_cae=self.detach_cae, precision=self.precision,
        )

    def to_flat_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "noise":
                for nf in dataclasses.fields(NoiseConfig):
                    out[f"noise_{nf.name}"] = getattr(v, nf.name)
            elif f.name == "milestones":
                out[f.name] = ",".join(str(m) for m in v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat_dict(cls, flat: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        noise_fields = {f.name: f for f in dataclasses.fields(NoiseConfig)}
        kwargs: dict = {}
        noise_kwargs: dict = {}
        for key, raw in flat.items():
            if key.startswith("noise_") and key[6:] in noise_fields:
                name = key[6:]
                noise_kwargs[name] = _coerce(raw, noise_fields[name].type, key)
            elif key in fields and key != "noise":
                kwargs[key] = _coerce(raw, fields[key].type, key)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            if noise_kwargs:
                kwargs["noise"] = NoiseConfig(**noise_kwargs)
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce(raw, annotation, key: str):
    """Parse a config-file string into the annotated field type."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = str(annotation)
    try:
        if ann == "bool":
            if text.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL_WORDS[text.lower()]
        if ann == "int":
            return int(text)
        if ann == "float":
            return float(text)
        if ann == "tuple":
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
        if "float | None" in ann or "Optional[float]" in ann:
            return None if text.lower() in ("", "none", "null") else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_train_config(path=None, overrides: dict | None = None) -> TrainConfig:
    flat: dict = {}
    if path is not None:
        with open(path) as f:
            flat.update(parse_config_text(f.read()))
    if overrides:
        flat.update(overrides)
    return TrainConfig.from_flat_dict(flat)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

LOSS_KEYS = ("ci", "ca_h", "ca_l", "cae_h", "cae_l", "total")


@dataclass
class RunReport:
    config: dict
    config_hash: str
    held_out: str
    seed: int
    iterations: int
    loss_curve: list
    source_accuracy: dict
    held_out_accuracy: float
    wall_clock: float
    consumed_domains: list
    sample_hash: str

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, default=str)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def _fmt(x) -> str:
    return format(float(x), ".6g")


def atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (int, float, np.floating)) else str(v) for v in row))
    atomic_write(path, "\n".join(lines) + "\n")


def write_run_outputs(report: RunReport, model: FfdiModel, out_dir) -> None:
    """report.json, losses.csv, accuracy.csv, checkpoint.bin under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, "report.json"), report.to_json())
    header = ["iteration", *LOSS_KEYS, "lr_classifier", "lr_features"]
    rows = [[e["iteration"], *(e[k] for k in LOSS_KEYS), e["lr_classifier"], e["lr_features"]]
            for e in report.loss_curve]
    write_csv(os.path.join(out_dir, "losses.csv"), header, rows)
    acc_rows = [[d, "source_test", a] for d, a in report.source_accuracy.items()]
    acc_rows.append([report.held_out, "held_out", report.held_out_accuracy])
    write_csv(os.path.join(out_dir, "accuracy.csv"), ["domain", "role", "accuracy"], acc_rows)
    tmp = os.path.join(out_dir, "checkpoint.bin.tmp")
    model.save(tmp)
    os.replace(tmp, os.path.join(out_dir, "checkpoint.bin"))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def evaluate(model: FfdiModel, images, labels) -> float:
    """Top-1 accuracy of the fused-feature classifier."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("evaluate: empty sample set")
    return float(np.mean(model.predict(np.asarray(images)) == labels))


def train_lodo(dataset: DomainDataset, held_out_domain: str, cfg: TrainConfig) -> tuple[FfdiModel, RunReport]:
    """Train on every domain except ``held_out_domain``; evaluate both sides.

    Source domains contribute ``batch_per_domain`` training-split samples per
    iteration; the held-out domain is evaluated on its full sample set, the
    sources on their test splits.
    """
    if held_out_domain not in dataset.domains:
        raise ValueError(f"unknown held-out domain {held_out_domain!r}; have {list(dataset.domains)}")
    sources = [d for d in dataset.domains if d != held_out_domain]
    if len(sources) < 2:
        raise ValueError("leave-one-domain-out needs at least two source domains")
    start = time.perf_counter()
    model = FfdiModel(cfg.model_config(dataset.num_classes), seed=cfg.seed)
    groups = model.param_groups()
    opt = T.Sgd(
        [{"params": groups["classifier"], "lr": cfg.lr_classifier},
         {"params": groups["features"], "lr": cfg.lr_features}],
        weight_decay=cfg.weight_decay, milestones=cfg.milestones, decay=cfg.lr_decay,
    )
    rng_batch = np.random.default_rng([cfg.seed, 11])
    rng_aug = np.random.default_rng([cfg.seed, 13])
    rng_noise = np.random.default_rng([cfg.seed, 17])
    sample_hash = hashlib.sha256()
    curve = []
    for it in range(1, cfg.iterations + 1):
        images, labels = [], []
        for dname in sources:
            dom = dataset.domains[dname]
            take = min(cfg.batch_per_domain, len(dom.train_idx))
            idx = rng_batch.choice(dom.train_idx, size=take, replace=False)
            sample_hash.update(dname.encode())
            sample_hash.update(np.sort(idx).tobytes())
            for i in idx:
                img = dom.images[i]
                if cfg.standard_augment:
                    img = augment_standard(img, rng_aug)
                if cfg.time_domain_noise:
                    img = pixel_noise(img, cfg.noise, rng_noise)
                else:
                    img = perturb(img, cfg.noise, rng_noise)
                images.append(img)
                labels.append(dom.labels[i])
        batch = np.stack(images)
        lr_cls, lr_feat = opt.learning_rates()
        losses = model.losses(batch, np.asarray(labels))
        T.backward(losses["total"])
        opt.step()
        opt.apply_schedule(it)
        entry = {"iteration": it, "lr_classifier": lr_cls, "lr_features": lr_feat}
        entry.update({k: losses[k].item() for k in LOSS_KEYS})
        curve.append(entry)
    held = dataset.domains[held_out_domain]
    held_acc = evaluate(model, held.images, held.labels)
    source_acc = {}
    for dname in sources:
        dom = dataset.domains[dname]
        source_acc[dname] = evaluate(model, dom.images[dom.test_idx], dom.labels[dom.test_idx])
    report = RunReport(
        config=cfg.to_flat_dict(),
        config_hash=cfg.config_hash(),
        held_out=held_out_domain,
        seed=cfg.seed,
        iterations=cfg.iterations,
        loss_curve=curve,
        source_accuracy=source_acc,
        held_out_accuracy=held_acc,
        wall_clock=time.perf_counter() - start,
        consumed_domains=sources,
        sample_hash=sample_hash.hexdigest(),
    )
    return model, report


def run_lodo_job(job: dict) -> dict:
    """Process-pool worker: rebuild the dataset from its seed and train once."""
    dataset = build_dataset(**job["dataset"])
    cfg = TrainConfig.from_flat_dict(job["config"])
    _, report = train_lodo(dataset, job["held_out"], cfg)
    return {
        "name": job.get("name", ""),
        "seed": cfg.seed,
        "held_out": job["held_out"],
        "held_out_accuracy": report.held_out_accuracy,
        "source_accuracy": report.source_accuracy,
        "config_hash": report.config_hash,
    }


# ---------------------------------------------------------------------------
# A-distance
# ---------------------------------------------------------------------------


def a_distance(features_a, features_b, seed: int = 0) -> float:
    """Proxy A-distance 2(1 - 2 eps) of a linear domain discriminator.

    Each side is shuffled and split 50/50; a logistic probe is fit on the
    train halves with 200 epochs of full-batch gradient descent at lr 0.1, and
    eps is its held-out error.  The result is clamped to [0, 2].
    """
    xa = np.asarray(features_a, dtype=np.float64)
    xb = np.asarray(features_b, dtype=np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or len(xa) == 0 or len(xb) == 0:
        raise ValueError("a_distance: both feature sets must be non-empty 2-D arrays")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"a_distance: feature dims differ, {xa.shape[1]} vs {xb.shape[1]}")
    rng = np.random.default_rng([seed, 97])
    xa = xa[rng.permutation(len(xa))]
    xb = xb[rng.permutation(len(xb))]
    ha, hb = len(xa) // 2, len(xb) // 2
    x_train = np.vstack([xa[:ha], xb[:hb]])
    y_train = np.concatenate([np.zeros(ha), np.ones(hb)])
    x_test = np.vstack([xa[ha:], xb[hb:]])
    y_test = np.concatenate([np.zeros(len(xa) - ha), np.ones(len(xb) - hb)])
    w = np.zeros(x_train.shape[1])
    b = 0.0
    n = len(x_train)
    for _ in range(200):
        p = 1.0 / (1.0 + np.exp(-(x_train @ w + b)))
        err = p - y_train
        w -= 0.1 * (x_train.T @ err) / n
        b -= 0.1 * float(err.mean())
    pred = (x_test @ w + b) > 0
    eps = float(np.mean(pred != y_test))
    return float(np.clip(2.0 * (1.0 - 2.0 * eps), 0.0, 2.0))


def frequency_probe_features(images: np.ndarray, r: int, kind: str, factor: int = 8) -> np.ndarray:
    """Flattened ``factor``x-downsampled low- or high-pass images for probing."""
    if kind not in ("lfi", "hfi"):
        raise ValueError("kind must be 'lfi' or 'hfi'")
    lfi, hfi = decompose_batch(np.asarray(images, dtype=np.float64), r)
    sel = lfi if kind == "lfi" else hfi
    n, c, h, w = sel.shape
    pooled = sel.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return pooled.reshape(n, -1)


def adist_frequency_summary(dataset: DomainDataset, r: int = 8, seeds=(0, 1, 2)) -> dict:
    """Average pairwise A-distance over domains, separately for LFI and HFI."""
    names = list(dataset.domains)
    feats = {kind: {d: frequency_probe_features(dataset.domains[d].images, r, kind) for d in names}
             for kind in ("lfi", "hfi")}
    rows = []
    means = {}
    for kind in ("lfi", "hfi"):
        vals = []
        for i, da in enumerate(names):
            for db in names[i + 1:]:
                per_seed = [a_distance(feats[kind][da], feats[kind][db], seed=s) for s in seeds]
                rows.append({"kind": kind, "pair": f"{da}|{db}", "a_distance": float(np.mean(per_seed))})
                vals.extend(per_seed)
        means[kind] = float(np.mean(vals))
    return {"r": r, "mean": means, "pairs": rows}


# ---------------------------------------------------------------------------
# Sweeps and ablations
# ---------------------------------------------------------------------------


def sweep_r(dataset: DomainDataset, cfg: TrainConfig, r_values, held_out_domains=None) -> list[dict]:
    """One LODO run per (r, held-out domain); rows keep the requested r order."""
    r_values = list(r_values)
    if not r_values:
        raise ValueError("sweep_r: r_values must be non-empty")
    domains = list(held_out_domains) if held_out_domains else list(dataset.domains)
    rows = []
    for r in r_values:
        row = {"r": r}
        for dom in domains:
            _, report = train_lodo(dataset, dom, replace(cfg, r=int(r)))
            row[dom] = report.held_out_accuracy
        row["average"] = float(np.mean([row[d] for d in domains]))
        rows.append(row)
    return rows


ABLATION_ORDER = ("deepall", "l_only", "h_only", "deepall_fdag", "h_l_iim", "ffdi")


def ablation_configs(cfg: TrainConfig) -> dict[str, TrainConfig]:
    """The six component-ablation configurations, all sharing cfg's seed."""
    off = cfg.noise.disabled()
    return {
        "deepall": replace(cfg, use_h=False, use_l=False, use_interaction=False, noise=off),
        "l_only": replace(cfg, use_h=False, use_l=True, use_interaction=False, noise=off),
        "h_only": replace(cfg, use_h=True, use_l=False, use_interaction=False, noise=off),
        "deepall_fdag": replace(cfg, use_h=False, use_l=False, use_interaction=False, noise=cfg.noise),
        "h_l_iim": replace(cfg, use_h=True, use_l=True, use_interaction=True, noise=off),
        "ffdi": replace(cfg, use_h=True, use_l=True, use_interaction=True, noise=cfg.noise),
    }


def ablation_suite(dataset: DomainDataset, cfg: TrainConfig, held_out_domains=None) -> list[dict]:
    """Tab-style component ablation: six rows, shared seeds, per-domain columns."""
    domains = list(held_out_domains) if held_out_domains else list(dataset.domains)
    configs = ablation_configs(cfg)
    rows = []
    for name in ABLATION_ORDER:
        row = {"config": name}
        for dom in domains:
            _, report = train_lodo(dataset, dom, configs[name])
            row[dom] = report.held_out_accuracy
        row["average"] = float(np.mean([row[d] for d in domains]))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Feature export
# ---------------------------------------------------------------------------

_TAPS = ("f_e", "f_h", "f_l", "f_z")


def export_features(model: FfdiModel, images, labels, domains, tap: str = "f_z") -> tuple[list, list]:
    """Pooled feature vectors per sample as (header, rows) for CSV emission."""
    tap = tap.lower()
    if tap not in _TAPS:
        raise ValueError(f"tap must be one of {_TAPS}")
    cfg = model.cfg
    if tap == "f_z" and not (cfg.use_h and cfg.use_l and cfg.use_interaction):
        raise ValueError("f_z tap is unavailable: this model was built with use_interaction=False")
    if tap == "f_h" and not cfg.use_h:
        raise ValueError("f_h tap is unavailable: this model was built with use_h=False")
    if tap == "f_l" and not cfg.use_l:
        raise ValueError("f_l tap is unavailable: this model was built with use_l=False")
    images = np.asarray(images)
    labels = np.asarray(labels)
    domains = list(domains)
    vecs = []
    with T.no_grad():
        for start in range(0, len(images), 256):
            feats = model.features(images[start : start + 256])
            f = feats[tap]
            vec = f if f.ndim == 2 else T.global_avg_pool(f)
            vecs.append(vec.data)
    mat = np.vstack(vecs) if vecs else np.zeros((0, 0))
    header = ["domain", "label", *(f"f{i}" for i in range(mat.shape[1]))]
    rows = [[domains[i], int(labels[i]), *mat[i]] for i in range(len(mat))]
    return header, rows
