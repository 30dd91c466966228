"""Flat ``key = value`` run configuration with per-field provenance.

Precedence is flags > config file > defaults. Every key has a ``--key-name``
flag twin. The resolved configuration is written as ``run_config.txt`` into
each output directory.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .adversary import DiscSpec
from .coarse import CpnSpec
from .data import SplitSpec
from .fine import FpnSpec
from .objectives import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _strs(text) -> tuple[str, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_int(text) -> int | None:
    if text is None or str(text).strip().lower() in ("", "none", "0"):
        return None
    return int(text)


_PARSERS = {"ints": _ints, "strs": _strs, "bool": _bool, "opt_int": _opt_int}


def _f(default, kind=None, help=""):
    return field(default=default, metadata={"kind": kind, "help": help})


@dataclass
class RunConfig:
    seed: int = _f(0, help="global seed")
    deterministic: bool = _f(True, "bool", "single-threaded bit-reproducible mode")

    image_size: int = _f(128, help="working image side in pixels")
    mask_size: int = _f(64, help="center hole side in pixels")
    fill: str = _f("mean", help="hole fill: 'mean' (training-set channel mean) or 'zero'")
    train_parts: tuple = _f(tuple(f"part{i}" for i in range(2, 9)), "strs", "training partitions")
    val_parts: tuple = _f(("part9",), "strs", "validation partitions")
    test_parts: tuple = _f(("part1", "part10"), "strs", "test partitions")
    workers: int = _f(0, help="decoding threads")

    cpn_encoder_depths: tuple = _f((64, 128, 256, 512, 512), "ints", "coarse encoder widths")
    cpn_bottleneck: int = _f(2048, help="coarse bottleneck size")
    cpn_decoder_depths: tuple = _f((512, 256, 128, 64), "ints", "coarse decoder widths")
    lrelu_slope: float = _f(0.2, help="leaky ReLU slope")
    disc_depths: tuple = _f((64, 128, 256, 512), "ints", "discriminator widths")
    fpn_layers: int = _f(6, help="fine painter depth")
    fpn_width: int = _f(64, help="fine painter width")
    fpn_kernel: int = _f(3, help="fine painter kernel")
    fpn_batch_norm: bool = _f(True, "bool", "batch norm in the fine painter")
    fpn_activation: str = _f("relu", help="relu | lrelu | elu")

    epochs: int = _f(200, help="epoch budget")
    batch_size: int = _f(64, help="batch size")
    lr_g: float = _f(2e-4, help="painter learning rate")
    lr_d: float = _f(2e-4, help="discriminator learning rate")
    beta1: float = _f(0.5, help="Adam beta1")
    beta2: float = _f(0.999, help="Adam beta2")
    adam_eps: float = _f(1e-8, help="Adam epsilon")
    lambda_ed: float = _f(0.5, help="Euclidean loss weight")
    lambda_adv: float = _f(0.001, help="adversarial loss weight")
    lambda_feat: float = _f(0.0001, help="feature loss weight")
    weight_decay: float = _f(1e-5, help="L2 penalty weight on coarse painter weights")
    elementwise: bool = _f(False, "bool", "use mean-absolute distance instead of the L2 norm")
    feature_extractor: str = _f("random", help="random | vgg16")
    vgg_weights: str = _f("", help="VGG16 state-dict path (vgg16 extractor)")
    eval_every: int = _f(100, help="steps between PSNR evaluations")
    plateau_patience: object = _f(10, "opt_int", "epochs without improvement before stopping; 0 disables")
    plateau_min_delta: float = _f(0.0, help="minimum PSNR gain counted as improvement")
    checkpoint_every: int = _f(1, help="epochs between checkpoints")
    keep_checkpoints: object = _f(None, "opt_int", "retain only this many epoch checkpoints")

    provenance: dict = field(default_factory=dict, repr=False, compare=False)

    # ----------------------------------------------------------------- resolution

    @classmethod
    def keys(cls) -> list:
        return [f for f in fields(cls) if f.name != "provenance"]

    @classmethod
    def _coerce(cls, f, value):
        kind = f.metadata.get("kind")
        try:
            if kind:
                return _PARSERS[kind](value)
            if isinstance(f.default, float):
                return float(value)
            if isinstance(f.default, int):
                return int(value)
            return str(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {f.name}: {value!r} ({e})") from e

    @classmethod
    def resolve(cls, file_values: dict | None = None, flag_values: dict | None = None):
        cfg = cls()
        known = {f.name: f for f in cls.keys()}
        cfg.provenance = {name: "default" for name in known}
        for source, values in (("config-file", file_values or {}), ("flag", flag_values or {})):
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown configuration key {key!r}")
                if value is None:
                    continue
                setattr(cfg, key, cls._coerce(known[key], value))
                cfg.provenance[key] = source
        return cfg

    @staticmethod
    def read_file(path) -> dict:
        values = {}
        for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{n}: expected 'key = value'")
            values[key.strip()] = value.strip()
        return values

    # ----------------------------------------------------------------- output

    def _format(self, name) -> str:
        v = getattr(self, name)
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        if isinstance(v, bool):
            return "true" if v else "false"
        if v is None:
            return "none"
        return str(v)

    def dumps(self) -> str:
        return "".join(
            f"{f.name} = {self._format(f.name)}  # {self.provenance.get(f.name, 'default')}\n"
            for f in self.keys()
        )

    def digest(self) -> str:
        body = "".join(f"{f.name}={self._format(f.name)}\n" for f in self.keys())
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "run_config.txt"
        path.write_text(self.dumps())
        return path

    # ----------------------------------------------------------------- views

    def split_spec(self) -> SplitSpec:
        return SplitSpec(list(self.train_parts), list(self.val_parts), list(self.test_parts))

    def cpn_spec(self) -> CpnSpec:
        return CpnSpec(
            self.image_size, self.mask_size, self.cpn_encoder_depths, self.cpn_bottleneck,
            self.cpn_decoder_depths, self.lrelu_slope,
        )

    def disc_spec(self) -> DiscSpec:
        return DiscSpec(self.mask_size, self.disc_depths, self.lrelu_slope)

    def fpn_spec(self) -> FpnSpec:
        return FpnSpec(
            self.mask_size, self.fpn_layers, self.fpn_width, self.fpn_kernel,
            self.fpn_batch_norm, self.fpn_activation,
        )

    def train_config(self, phase: str, checkpoint_dir) -> TrainConfig:
        return TrainConfig(
            phase=phase,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_g=self.lr_g,
            lr_d=self.lr_d,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            weights=LossWeights(self.lambda_ed, self.lambda_adv, self.lambda_feat, self.weight_decay),
            elementwise=self.elementwise,
            mask_size=self.mask_size,
            fill=self.fill,
            seed=self.seed,
            eval_every=self.eval_every,
            plateau_patience=self.plateau_patience,
            plateau_min_delta=self.plateau_min_delta,
            checkpoint_dir=str(checkpoint_dir),
            checkpoint_every=self.checkpoint_every,
            keep_checkpoints=self.keep_checkpoints,
            deterministic=self.deterministic,
        )
