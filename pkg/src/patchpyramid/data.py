"""Dataset loading, window sampling, per-window normalization, synthesis.

Variables are treated channel-independently: every (window position,
variable) pair is one training sample, and each sample is normalized with
its own input-window statistics so the model sees stationarized inputs and
predictions are mapped back to the original scale afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

REVIN_EPS = 1e-5
OUTLIER_PATCH_LEN = 6


@dataclass
class Dataset:
    values: np.ndarray               # [T, V] float64, no missing values
    names: list[str]
    frequency: str = ""
    periodicity: int | None = None   # m, used by MASE / seasonal naive
    outlier_patches: list[tuple[int, int]] = field(default_factory=list)  # (var, start)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


def load_csv(path, periodicity: int | None = None) -> Dataset:
    """Load a header-ed numeric CSV; a leading ``date`` column is ignored."""
    path = str(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    lines = [ln for ln in lines if ln != ""]
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split(",")
    skip_first = bool(header) and header[0].strip().lower() == "date"
    names = [h.strip() for h in (header[1:] if skip_first else header)]
    if not names:
        raise DataError(f"{path}: no value columns")
    rows = []
    for r, ln in enumerate(lines[1:], start=2):
        cells = ln.split(",")
        if len(cells) != len(header):
            raise DataError(f"{path}: row {r} has {len(cells)} cells, expected {len(header)}")
        vals = []
        for c, cell in enumerate(cells[1:] if skip_first else cells):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {names[c]!r}: cannot parse {cell!r}") from None
            if not np.isfinite(v):
                raise DataError(f"{path}: row {r}, column {names[c]!r}: missing or non-finite value")
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(values=np.asarray(rows, dtype=np.float64), names=names, periodicity=periodicity)


def write_csv(ds: Dataset, path) -> None:
    from .attention import format_float

    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ds.names) + "\n")
        for row in ds.values:
            fh.write(",".join(format_float(v) for v in row) + "\n")


def write_outlier_sidecar(ds: Dataset, path) -> None:
    """One ``variable,start,length`` line per injected outlier patch."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variable,start,length\n")
        for var, start in ds.outlier_patches:
            fh.write(f"{ds.names[var]},{start},{OUTLIER_PATCH_LEN}\n")


def revin_normalize(window: np.ndarray):
    """(x - mean) / max(std, eps) with population std; stats are returned."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] < 2:
        raise DataError(f"revin_normalize needs windows of length >= 2, got {window.shape}")
    mean = window.mean(axis=-1, keepdims=True)
    std = np.maximum(window.std(axis=-1, keepdims=True), REVIN_EPS)
    return (window - mean) / std, mean, std


def revin_denormalize(pred: np.ndarray, mean, std) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) * np.maximum(std, REVIN_EPS) + mean


@dataclass
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2

    def validate(self) -> None:
        if min(self.train, self.val, self.test) <= 0:
            raise ConfigError("split fractions must be positive")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ConfigError(
                f"split fractions must sum to 1, got {self.train}+{self.val}+{self.test}"
            )


@dataclass
class WindowSample:
    input: np.ndarray
    target: np.ndarray
    revin_mean: float
    revin_std: float
    start: int        # t1: first input index
    variable: int


class WindowSet:
    """All (window position, variable) samples of one chronological split.

    Samples are enumerated start-major then variable-major; batches carry
    raw windows plus their input-window statistics.
    """

    def __init__(self, values: np.ndarray, starts: np.ndarray, input_len: int, pred_len: int):
        self.values = values
        self.starts = np.asarray(starts, dtype=np.int64)
        self.input_len = input_len
        self.pred_len = pred_len
        self.n_vars = values.shape[1]

    def __len__(self) -> int:
        return len(self.starts) * self.n_vars

    def sample(self, index: int) -> WindowSample:
        t1 = int(self.starts[index // self.n_vars])
        v = index % self.n_vars
        x = self.values[t1:t1 + self.input_len, v].copy()
        y = self.values[t1 + self.input_len:t1 + self.input_len + self.pred_len, v].copy()
        _, mean, std = revin_normalize(x)
        return WindowSample(input=x, target=y,
                            revin_mean=float(mean.reshape(())),
                            revin_std=float(std.reshape(())),
                            start=t1, variable=v)

    def samples(self):
        for i in range(len(self)):
            yield self.sample(i)

    def gather(self, indices: np.ndarray):
        """Raw (inputs [n, L], targets [n, H], means [n, 1], stds [n, 1])."""
        idx = np.asarray(indices, dtype=np.int64)
        t1 = self.starts[idx // self.n_vars]
        v = idx % self.n_vars
        rows_in = t1[:, None] + np.arange(self.input_len)[None, :]
        rows_out = t1[:, None] + self.input_len + np.arange(self.pred_len)[None, :]
        inputs = self.values[rows_in, v[:, None]]
        targets = self.values[rows_out, v[:, None]]
        mean = inputs.mean(axis=1, keepdims=True)
        std = np.maximum(inputs.std(axis=1, keepdims=True), REVIN_EPS)
        return inputs, targets, mean, std

    def batches(self, batch_size: int, order: np.ndarray | None = None):
        n = len(self)
        if order is None:
            order = np.arange(n)
        for i in range(0, n, batch_size):
            yield self.gather(order[i:i + batch_size])


def sliding_windows(ds: Dataset, input_len: int, pred_len: int,
                    split: SplitSpec | None = None, stride: int = 1) -> dict[str, WindowSet]:
    """Chronological train/val/test window sets; no window crosses a boundary."""
    split = split or SplitSpec()
    split.validate()
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    t = ds.length
    need = input_len + pred_len
    # Per-fraction truncation: summing fractions first loses rows to
    # floating-point (0.7 + 0.1 < 0.8 exactly).
    n_train = int(t * split.train)
    n_val = int(t * split.val)
    bounds = {
        "train": (0, n_train),
        "val": (n_train, n_train + n_val),
        "test": (n_train + n_val, t),
    }
    out = {}
    for name, (lo, hi) in bounds.items():
        if hi - lo < need:
            raise DataError(
                f"split segment {name!r} has {hi - lo} rows, needs at least {need} (L+H)"
            )
        starts = np.arange(lo, hi - need + 1, stride)
        out[name] = WindowSet(ds.values, starts, input_len, pred_len)
    return out


@dataclass
class SynthSpec:
    """Seeded sinusoids + trend + noise, with optional outlier patches."""

    length: int = 1000
    n_vars: int = 1
    components: list[tuple[float, float, float]] = field(
        default_factory=lambda: [(1.0, 24.0, 0.0)])   # (amplitude, period, phase)
    trend: float = 0.0
    noise_std: float = 0.1
    outlier_rate: float = 0.0
    outlier_magnitude: float = 0.0
    seed: int = 0


def synth_generate(spec: SynthSpec) -> Dataset:
    """x_t = sum_i a_i sin(2 pi t / p_i + phi_i) + trend * t + noise.

    Outlier patches of length 6 are placed on non-overlapping slots; the
    count is round(rate * length / 6) per variable and the magnitude is
    added to the clean series.  Everything is a pure function of the seed.
    """
    if spec.length <= 0:
        raise ConfigError(f"synth length must be positive, got {spec.length}")
    if spec.n_vars <= 0:
        raise ConfigError(f"synth n_vars must be positive, got {spec.n_vars}")
    for amp, period, phase in spec.components:
        if period <= 0:
            raise ConfigError(f"sinusoid period must be positive, got {period}")
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length, dtype=np.float64)
    base = np.zeros(spec.length)
    for amp, period, phase in spec.components:
        base += amp * np.sin(2.0 * np.pi * t / period + phase)
    base += spec.trend * t
    values = np.empty((spec.length, spec.n_vars))
    patches: list[tuple[int, int]] = []
    n_patches = int(round(spec.outlier_rate * spec.length / OUTLIER_PATCH_LEN))
    n_slots = spec.length // OUTLIER_PATCH_LEN
    for v in range(spec.n_vars):
        series = base + rng.normal(0.0, spec.noise_std, size=spec.length) \
            if spec.noise_std > 0 else base.copy()
        if n_patches > 0:
            if n_patches > n_slots:
                raise ConfigError(
                    f"outlier_rate {spec.outlier_rate} asks for {n_patches} patches "
                    f"but only {n_slots} slots exist"
                )
            slots = rng.choice(n_slots, size=n_patches, replace=False)
            for slot in sorted(int(s) for s in slots):
                start = slot * OUTLIER_PATCH_LEN
                series[start:start + OUTLIER_PATCH_LEN] += spec.outlier_magnitude
                patches.append((v, start))
        values[:, v] = series
    names = [f"var{v + 1}" for v in range(spec.n_vars)]
    return Dataset(values=values, names=names, frequency="synthetic",
                   outlier_patches=patches)
