"""The FFDI network and its losses.

Pipeline: a small strided conv encoder produces an embedding; two parallel
conv branches disentangle it into high- and low-frequency features; two
transposed-conv reconstructors regress the input's high/low-pass split; a
sigmoid spatial mask derived from the low branch gates the high branch (the
interaction step); linear classifiers sit on globally pooled features.  Only
encoder, disentangler, interaction, and the fused-feature classifier run at
inference time.

Total objective: fused-classifier cross-entropy plus ``lam`` times the two
auxiliary cross-entropies and the two reconstruction losses, with terms
dropped according to the ablation switches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import DataError
from .spectral import decompose_batch

_INTERACTIONS = ("iim", "addition", "concatenation", "bilinear")
_CHECKPOINT_MAGIC = b"FFDICKP1"
_DTYPE_CODES = {0: np.float32, 1: np.float64}


@dataclass(frozen=True)
class FfdiConfig:
    num_classes: int = 5
    image_hw: tuple = (32, 32)
    in_channels: int = 3
    encoder_widths: tuple = (16, 32, 64, 64)
    r: int = 8
    lam: float = 1.0
    interaction: str = "iim"
    use_h: bool = True
    use_l: bool = True
    use_interaction: bool = True
    iim_kernel: int = 7
    cae_per_pixel: bool = False
    detach_cae: bool = False
    precision: str = "single"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.r < 0:
            raise ValueError("r must be non-negative")
        if self.interaction not in _INTERACTIONS:
            raise ValueError(f"interaction must be one of {_INTERACTIONS}")
        if self.use_interaction and not (self.use_h and self.use_l):
            raise ValueError("use_interaction requires both use_h and use_l")
        if len(self.encoder_widths) != 4:
            raise ValueError("encoder_widths must list four stage widths")
        h, w = self.image_hw
        if h % 8 or w % 8:
            raise ValueError("image sides must be divisible by 8 (three 2x down/up stages)")
        if self.iim_kernel % 2 == 0:
            raise ValueError("iim_kernel must be odd")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def feature_hw(self) -> tuple:
        return (self.image_hw[0] // 8, self.image_hw[1] // 8)

    @property
    def feature_channels(self) -> int:
        return self.encoder_widths[-1]

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def classifier_in(self) -> int:
        """Input width of the fused-feature classifier for this config."""
        c = self.feature_channels
        if not (self.use_h and self.use_l and self.use_interaction):
            return c
        if self.interaction == "concatenation":
            return 2 * c
        if self.interaction == "bilinear":
            return c * c
        return c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FfdiConfig":
        d = dict(d)
        d["image_hw"] = tuple(d["image_hw"])
        d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


_ENCODER_STRIDES = (2, 2, 2, 1)


class FfdiModel:
    """All learnable parameters plus the forward graphs that use them."""

    def __init__(self, cfg: FfdiConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = cfg.dtype
        self._params: dict[str, T.Tensor] = {}
        rng = np.random.default_rng([seed, 0xFFD1])
        c = cfg.in_channels
        for i, width in enumerate(cfg.encoder_widths):
            self._conv_param(rng, f"enc{i}", width, c, 3)
            c = width
        cf = cfg.feature_channels
        self._conv_param(rng, "dis_h", cf, cf, 3)
        self._conv_param(rng, "dis_l", cf, cf, 3)
        for branch in ("rec_h", "rec_l"):
            self._tconv_param(rng, f"{branch}0", cf, cf // 2, 4)
            self._tconv_param(rng, f"{branch}1", cf // 2, cf // 4, 4)
            self._tconv_param(rng, f"{branch}2", cf // 4, cfg.in_channels, 4)
        self._conv_param(rng, "iim", 1, 2, cfg.iim_kernel)
        self._linear_param(rng, "cls_i", cfg.num_classes, cfg.classifier_in())
        self._linear_param(rng, "cls_ah", cfg.num_classes, cf)
        self._linear_param(rng, "cls_al", cfg.num_classes, cf)

    # -- parameter plumbing --------------------------------------------------

    def _new_param(self, name: str, data: np.ndarray) -> T.Tensor:
        p = T.Tensor(data, requires_grad=True, dtype=self.dtype)
        self._params[name] = p
        return p

    def _conv_param(self, rng, name, cout, cin, k):
        bound = 1.0 / np.sqrt(cin * k * k)
        self._new_param(f"{name}_w", rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        self._new_param(f"{name}_b", np.zeros(cout))

    def _tconv_param(self, rng, name, cin, cout, k):
        bound = 1.0 / np.sqrt(cin * k * k)
        self._new_param(f"{name}_w", rng.uniform(-bound, bound, size=(cin, cout, k, k)))
        self._new_param(f"{name}_b", np.zeros(cout))

    def _linear_param(self, rng, name, out_features, in_features):
        bound = 1.0 / np.sqrt(in_features)
        self._new_param(f"{name}_w", rng.uniform(-bound, bound, size=(out_features, in_features)))
        self._new_param(f"{name}_b", np.zeros(out_features))

    def parameters(self) -> dict[str, T.Tensor]:
        return dict(self._params)

    def param_groups(self) -> dict[str, list[T.Tensor]]:
        """Fused-classifier parameters vs. everything else (two LR groups)."""
        classifier = [self._params["cls_i_w"], self._params["cls_i_b"]]
        ids = {id(p) for p in classifier}
        features = [p for p in self._params.values() if id(p) not in ids]
        return {"classifier": classifier, "features": features}

    def group_of(self, name: str) -> str:
        prefix = name.rsplit("_", 1)[0]
        return {"enc0": "E", "enc1": "E", "enc2": "E", "enc3": "E",
                "dis_h": "D", "dis_l": "D",
                "rec_h0": "R_H", "rec_h1": "R_H", "rec_h2": "R_H",
                "rec_l0": "R_L", "rec_l1": "R_L", "rec_l2": "R_L",
                "iim": "IIM", "cls_i": "C_I", "cls_ah": "C_AH", "cls_al": "C_AL"}[prefix]

    # -- forward pieces -------------------------------------------------------

    def _as_input(self, images) -> T.Tensor:
        if isinstance(images, T.Tensor):
            x = images
        else:
            x = T.Tensor(np.asarray(images), dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (self.cfg.in_channels, *self.cfg.image_hw):
            raise ValueError(
                f"expected N x {self.cfg.in_channels} x {self.cfg.image_hw[0]} x "
                f"{self.cfg.image_hw[1]} input, got {tuple(x.shape)}"
            )
        return x

    def encode(self, images) -> T.Tensor:
        x = self._as_input(images)
        for i, stride in enumerate(_ENCODER_STRIDES):
            x = T.conv2d(x, self._params[f"enc{i}_w"], self._params[f"enc{i}_b"],
                         stride=stride, padding=1)
            x = T.relu(x)
        return x

    def disentangle(self, f_e: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        f_h = T.relu(T.conv2d(f_e, self._params["dis_h_w"], self._params["dis_h_b"], 1, 1))
        f_l = T.relu(T.conv2d(f_e, self._params["dis_l_w"], self._params["dis_l_b"], 1, 1))
        return f_h, f_l

    def reconstruct(self, f: T.Tensor, which: str) -> T.Tensor:
        if which not in ("h", "l"):
            raise ValueError("which must be 'h' or 'l'")
        name = f"rec_{which}"
        x = T.relu(T.transposed_conv2d(f, self._params[f"{name}0_w"], self._params[f"{name}0_b"], 2, 1))
        x = T.relu(T.transposed_conv2d(x, self._params[f"{name}1_w"], self._params[f"{name}1_b"], 2, 1))
        return T.transposed_conv2d(x, self._params[f"{name}2_w"], self._params[f"{name}2_b"], 2, 1)

    def spatial_mask(self, f_l: T.Tensor) -> T.Tensor:
        pooled = T.channel_pool(f_l)
        pad = (self.cfg.iim_kernel - 1) // 2
        return T.sigmoid(T.conv2d(pooled, self._params["iim_w"], self._params["iim_b"], 1, pad))

    def iim(self, f_l: T.Tensor, f_h: T.Tensor) -> T.Tensor:
        if f_l.shape != f_h.shape:
            raise ValueError(f"iim: branch shapes differ, {f_l.shape} vs {f_h.shape}")
        return T.mul(self.spatial_mask(f_l), f_h)

    def interact_baseline(self, f_l: T.Tensor, f_h: T.Tensor, mode: str) -> T.Tensor:
        if mode == "addition":
            return T.add(f_h, f_l)
        if mode == "concatenation":
            return T.concat([f_h, f_l], axis=1)
        if mode == "bilinear":
            u = T.global_avg_pool(f_h)
            v = T.global_avg_pool(f_l)
            n, c = u.shape
            outer = T.mul(T.reshape(u, (n, c, 1)), T.reshape(v, (n, 1, c)))
            return T.l2_normalize(T.sign_sqrt(T.reshape(outer, (n, c * c))))
        raise ValueError(f"unknown interaction mode {mode!r}")

    def _fused(self, f_e, f_h, f_l) -> tuple[T.Tensor, T.Tensor]:
        """Fused feature map and the pooled vector the C_I classifier sees."""
        cfg = self.cfg
        if cfg.use_h and cfg.use_l and cfg.use_interaction:
            if cfg.interaction == "iim":
                f_z = self.iim(f_l, f_h)
            else:
                f_z = self.interact_baseline(f_l, f_h, cfg.interaction)
                if cfg.interaction == "bilinear":
                    return f_z, f_z  # already a pooled vector
        elif cfg.use_h:
            f_z = f_h
        elif cfg.use_l:
            f_z = f_l
        else:
            f_z = f_e
        return f_z, T.global_avg_pool(f_z)

    def features(self, images) -> dict[str, T.Tensor]:
        """Forward through the inference path; taps keyed f_e / f_h / f_l / f_z."""
        cfg = self.cfg
        out: dict[str, T.Tensor] = {}
        f_e = self.encode(images)
        out["f_e"] = f_e
        f_h = f_l = None
        if cfg.use_h or cfg.use_l:
            f_h, f_l = self.disentangle(f_e)
            out["f_h"], out["f_l"] = f_h, f_l
        f_z, pooled = self._fused(f_e, f_h, f_l)
        out["f_z"], out["pooled"] = f_z, pooled
        return out

    def class_logits(self, images) -> T.Tensor:
        pooled = self.features(images)["pooled"]
        return T.linear(pooled, self._params["cls_i_w"], self._params["cls_i_b"])

    def predict(self, images) -> np.ndarray:
        """Argmax class per image; evaluates only E, D, interaction, and C_I."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = []
        with T.no_grad():
            for start in range(0, len(images), 256):
                logits = self.class_logits(images[start : start + 256])
                out.append(np.argmax(logits.data, axis=1))
        pred = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
        return int(pred[0]) if single else pred

    # -- losses ---------------------------------------------------------------

    def losses(self, images, labels) -> dict[str, T.Tensor]:
        """All loss terms on one batch; images must already be augmented.

        Reconstruction targets are the low/high-pass split of the (augmented)
        input at the configured threshold.  Absent terms (per the ablation
        switches) come back as detached zero scalars so logging stays uniform.
        """
        cfg = self.cfg
        images = np.asarray(images)
        x = self._as_input(images)
        f_e = self.encode(x)
        f_h = f_l = None
        if cfg.use_h or cfg.use_l:
            f_h, f_l = self.disentangle(f_e)
        f_z, pooled = self._fused(f_e, f_h, f_l)
        logits_i = T.linear(pooled, self._params["cls_i_w"], self._params["cls_i_b"])
        zero = T.Tensor(np.float64(0.0))
        terms = {"ci": T.cross_entropy(logits_i, labels),
                 "ca_h": zero, "ca_l": zero, "cae_h": zero, "cae_l": zero}
        if cfg.use_h or cfg.use_l:
            lfi, hfi = decompose_batch(images.astype(self.dtype, copy=False), cfg.r)
        if cfg.use_h:
            logits_ah = T.linear(T.global_avg_pool(f_h), self._params["cls_ah_w"], self._params["cls_ah_b"])
            terms["ca_h"] = T.cross_entropy(logits_ah, labels)
            rec_in = f_h.detach() if cfg.detach_cae else f_h
            terms["cae_h"] = T.mse(self.reconstruct(rec_in, "h"), T.Tensor(hfi), per_element=cfg.cae_per_pixel)
        if cfg.use_l:
            logits_al = T.linear(T.global_avg_pool(f_l), self._params["cls_al_w"], self._params["cls_al_b"])
            terms["ca_l"] = T.cross_entropy(logits_al, labels)
            rec_in = f_l.detach() if cfg.detach_cae else f_l
            terms["cae_l"] = T.mse(self.reconstruct(rec_in, "l"), T.Tensor(lfi), per_element=cfg.cae_per_pixel)
        aux = None
        for key in ("ca_l", "ca_h", "cae_l", "cae_h"):
            if terms[key] is not zero:
                aux = terms[key] if aux is None else T.add(aux, terms[key])
        terms["total"] = terms["ci"] if aux is None else T.add(terms["ci"], T.mul(aux, cfg.lam))
        return terms

    # -- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        """Versioned binary checkpoint: config JSON plus named raw tensors."""
        cfg_json = json.dumps(self.cfg.to_dict(), sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", 1, len(cfg_json)))
            f.write(cfg_json)
            f.write(struct.pack("<I", len(self._params)))
            for name, p in self._params.items():
                nb = name.encode("utf-8")
                code = 0 if p.data.dtype == np.float32 else 1
                f.write(struct.pack("<H", len(nb)))
                f.write(nb)
                f.write(struct.pack("<BB", p.data.ndim, code))
                f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
                f.write(np.ascontiguousarray(p.data, dtype=f"<f{4 * (code + 1)}").tobytes())

    @classmethod
    def load(cls, path) -> "FfdiModel":
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:8] != _CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not an FFDI checkpoint (bad magic)")
        pos = 8
        version, cfg_len = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != 1:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        try:
            cfg = FfdiConfig.from_dict(json.loads(buf[pos : pos + cfg_len]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: bad embedded config: {exc}") from exc
        pos += cfg_len
        model = cls(cfg, seed=0)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + name_len].decode("utf-8")
            pos += name_len
            ndim, code = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            if name not in model._params:
                raise DataError(f"{path}: unknown parameter {name!r}")
            param = model._params[name]
            if shape != param.data.shape:
                raise DataError(f"{path}: parameter {name!r} has shape {shape}, expected {param.data.shape}")
            dtype = np.dtype(f"<f{4 * (code + 1)}")
            n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + n_bytes > len(buf):
                raise DataError(f"{path}: truncated tensor data for {name!r} at byte {pos}")
            arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=pos)
            pos += n_bytes
            param.data[...] = arr.reshape(shape).astype(param.data.dtype)
            seen.add(name)
        missing = set(model._params) - seen
        if missing:
            raise DataError(f"{path}: checkpoint is missing parameters {sorted(missing)}")
        return model


def ffdi_losses(model: FfdiModel, images, labels) -> dict[str, T.Tensor]:
    return model.losses(images, labels)
