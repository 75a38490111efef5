"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from dermhybrid.hybridnet import ConvBlock
from dermhybrid.imgproc import AugmentParams

WORKDIR_ENV = "DERM_HYBRID_WORKDIR"


def parse_blocks(text: str) -> tuple[ConvBlock, ...]:
    """``"16,32,64"`` or ``"16:2:0,32"`` -> conv blocks (out[:stride[:pool]])."""
    blocks = []
    for tok in text.split(","):
        parts = [p.strip() for p in tok.strip().split(":")]
        out = int(parts[0])
        stride = int(parts[1]) if len(parts) > 1 else 1
        pool = bool(int(parts[2])) if len(parts) > 2 else True
        blocks.append(ConvBlock(out, stride, pool))
    return tuple(blocks)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class PipelineConfig:
    data_root: Path = Path(".")
    labels_file: Path = Path("labels.csv")
    probmap_dirs: tuple[Path, ...] = ()
    work_dir: Path = Path("work")
    seed: int = 0
    split_seed: int | None = None
    train_frac: float = 0.7
    val_frac: float = 0.1
    sog_p: float = 6.0
    input_size: int = 64
    mask_source: str = "auto"  # auto | probmaps | ground_truth
    mask_threshold: float = 0.5
    augment: bool = False
    aug_crop_lo: float = 0.8
    aug_crop_hi: float = 1.0
    aug_rot_lo: float = 0.0
    aug_rot_hi: float = 180.0
    aug_shear_lo: float = 0.0
    aug_shear_hi: float = 30.0
    aug_hflip: bool = True
    aug_vflip: bool = True
    aug_seed: int | None = None
    model_a_blocks: str = "16,32,64"
    model_a_fc: int = 64
    model_a_seed: int | None = None
    model_b_blocks: str = "8,16,32"
    model_b_fc: int = 48
    model_b_seed: int | None = None
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    train_seed: int | None = None
    use_injection: bool = True
    svm_reg_c: float = 1.0
    svm_grid: bool = False
    svm_seed: int | None = None
    svm_input: str = "penultimate"  # penultimate | logits
    svm_include_handcrafted: bool = False
    metrics_average: str = "macro"
    tta_rounds: int = 0
    roc_points: bool = False
    figures: bool = False

    def __post_init__(self):
        # unset seeds derive from the master seed
        base = self.seed
        for name, offset in (("split_seed", 0), ("aug_seed", 11), ("model_a_seed", 1),
                             ("model_b_seed", 2), ("train_seed", 3), ("svm_seed", 4)):
            if getattr(self, name) is None:
                setattr(self, name, base + offset)
        if self.mask_source not in ("auto", "probmaps", "ground_truth"):
            raise ValueError(f"mask_source must be auto, probmaps or ground_truth, got {self.mask_source!r}")
        if self.svm_input not in ("penultimate", "logits"):
            raise ValueError(f"svm_input must be penultimate or logits, got {self.svm_input!r}")
        if self.metrics_average not in ("macro", "micro"):
            raise ValueError(f"metrics_average must be macro or micro, got {self.metrics_average!r}")

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.train_frac, round(1.0 - self.train_frac, 12), self.val_frac)

    def augment_params(self, seed: int) -> AugmentParams:
        return AugmentParams(
            crop_fraction_range=(self.aug_crop_lo, self.aug_crop_hi),
            rotation_range_deg=(self.aug_rot_lo, self.aug_rot_hi),
            shear_range_deg=(self.aug_shear_lo, self.aug_shear_hi),
            allow_hflip=self.aug_hflip,
            allow_vflip=self.aug_vflip,
            seed=seed,
        )

    def with_overrides(self, **kw) -> "PipelineConfig":
        return replace(self, **kw)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _convert(key: str, raw: str, base_dir: Path):
    kind = _TYPES[key]
    if key == "probmap_dirs":
        return tuple(_path(p, base_dir) for p in raw.split(",") if p.strip())
    if kind == "Path":
        return _path(raw, base_dir)
    if kind == "bool":
        return _bool(raw)
    if kind in ("int", "int | None"):
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _path(raw: str, base_dir: Path) -> Path:
    p = Path(raw.strip()).expanduser()
    return p if p.is_absolute() else base_dir / p


def parse_config_text(text: str, base_dir: Path = Path(".")) -> PipelineConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw, base_dir)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: bad value for {key}: {exc}") from None
    return PipelineConfig(**values)


def load_config(path: str | os.PathLike) -> PipelineConfig:
    """Read a config file; relative paths resolve against the file's directory.

    ``$DERM_HYBRID_WORKDIR`` overrides ``work_dir``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = parse_config_text(path.read_text(encoding="utf-8"), path.parent)
    env = os.environ.get(WORKDIR_ENV)
    if env:
        cfg.work_dir = Path(env)
    return cfg


def config_text(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(p) for p in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
