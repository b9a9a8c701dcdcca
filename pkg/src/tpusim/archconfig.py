"""Parametric hardware descriptions: the accelerator itself and generic
roofline devices (accelerator, host CPU, GPU) with shipped measured presets.

All configs are immutable after construction and safe to share across
concurrent simulations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from enum import Enum

GIB = 1024**3
MIB = 1024**2


class ConfigError(ValueError):
    """Raised for malformed or invariant-violating configurations."""


class OpsConvention(Enum):
    """How a multiply-accumulate is counted: as one op or as two."""

    MACS = "macs"
    OPS2X = "ops2x"


# Exact conversion factor between the two counting conventions.
OPS_PER_MAC = {OpsConvention.MACS: 1.0, OpsConvention.OPS2X: 2.0}


def convert_ops(value: float, src: OpsConvention, dst: OpsConvention) -> float:
    """Convert an ops/s (or ops/byte) figure between counting conventions."""
    return value * OPS_PER_MAC[dst] / OPS_PER_MAC[src]


@dataclass(frozen=True)
class TpuConfig:
    """Parametric description of the accelerator die.

    Defaults describe the shipped part: a 256x256 8-bit MAC matrix unit at
    700 MHz, 8 GiB weight DRAM at 34 GB/s, a 24 MiB software-managed
    unified buffer, 4096 rows of 32-bit accumulators and a 4-tile weight
    FIFO feeding the matrix unit.
    """

    matrix_dim: int = 256
    clock_hz: float = 700e6
    weight_bw: float = 34e9
    weight_mem_bytes: int = 8 * GIB
    ub_bytes: int = 24 * MIB
    acc_entries: int = 4096
    acc_width_bits: int = 32
    fifo_depth_tiles: int = 4
    # Effective host-link bandwidth. Only the link generation is public
    # (PCIe Gen3 x16); 10 GB/s is a conservative effective rate.
    pcie_bw: float = 10e9
    idle_watts: float = 28.0
    busy_watts: float = 40.0

    def __post_init__(self):
        if self.matrix_dim <= 0:
            raise ConfigError("matrix_dim must be positive")
        if self.acc_entries < 2 * self.matrix_dim:
            # Two tiles' worth of output rows: required for double-buffered
            # accumulator use by the compiler.
            raise ConfigError(
                f"acc_entries ({self.acc_entries}) must be >= 2 * matrix_dim "
                f"({2 * self.matrix_dim})"
            )
        if self.fifo_depth_tiles < 0:
            raise ConfigError("fifo_depth_tiles must be >= 0")
        for name in ("clock_hz", "weight_bw", "weight_mem_bytes", "ub_bytes",
                     "pcie_bw", "idle_watts", "busy_watts"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.acc_width_bits != 32:
            raise ConfigError("acc_width_bits must be 32")
        if self.ub_bytes < self.matrix_dim:
            raise ConfigError("ub_bytes must hold at least one row")

    @property
    def row_bytes(self) -> int:
        """Unified Buffer row size: one 8-bit activation per lane."""
        return self.matrix_dim

    @property
    def ub_rows(self) -> int:
        return self.ub_bytes // self.row_bytes

    def tile_bytes(self, weight_width_bits: int = 8) -> int:
        """Byte size of one weight tile (matrix_dim x matrix_dim)."""
        if weight_width_bits not in (8, 16):
            raise ConfigError("weight width must be 8 or 16 bits")
        return self.matrix_dim * self.matrix_dim * weight_width_bits // 8

    @property
    def peak_macs_per_s(self) -> float:
        return float(self.matrix_dim * self.matrix_dim) * self.clock_hz

    def peak_ops(self, convention: OpsConvention = OpsConvention.MACS) -> float:
        return self.peak_macs_per_s * OPS_PER_MAC[convention]

    def ridge_point(self, convention: OpsConvention = OpsConvention.MACS) -> float:
        """Operational intensity (ops per weight byte) at the roofline knee."""
        return self.peak_ops(convention) / self.weight_bw

    def scaled(self, **overrides) -> "TpuConfig":
        """Copy with selected fields replaced (used by design sweeps)."""
        return replace(self, **overrides)


@dataclass(frozen=True)
class RooflineDevice:
    """A device as seen by the roofline model plus its power behaviour.

    ``peak_ops`` is stored under ``ops_convention``; use :meth:`peak` /
    :meth:`ridge_point` to read it under either convention.

    ``proportionality_curve`` holds the fraction of busy power drawn at
    0%, 10%, ..., 100% load (11 entries, nondecreasing, last entry 1.0).

    ``quoted_ridge`` carries a published ridge point for the device as
    reference data where the peak/bandwidth ratio does not reproduce the
    published figure; both values are reported side by side.
    """

    name: str
    peak_ops: float
    mem_bw: float
    ops_convention: OpsConvention = OpsConvention.MACS
    dies_per_server: int = 1
    server_idle_watts: float = 1.0
    server_busy_watts: float = 1.0
    die_idle_watts: float = 1.0
    die_busy_watts: float = 1.0
    proportionality_curve: tuple = field(
        default=(1.0,) * 11)
    quoted_ridge: float | None = None

    def __post_init__(self):
        if self.peak_ops <= 0 or self.mem_bw <= 0:
            raise ConfigError(f"{self.name}: peak_ops and mem_bw must be positive")
        if self.dies_per_server <= 0:
            raise ConfigError(f"{self.name}: dies_per_server must be positive")
        curve = tuple(float(x) for x in self.proportionality_curve)
        if len(curve) != 11:
            raise ConfigError(f"{self.name}: proportionality_curve needs 11 entries")
        if any(b < a for a, b in zip(curve, curve[1:])):
            raise ConfigError(f"{self.name}: proportionality_curve must be nondecreasing")
        if curve[10] != 1.0:
            raise ConfigError(f"{self.name}: proportionality_curve[10] must be 1.0")
        object.__setattr__(self, "proportionality_curve", curve)

    def peak(self, convention: OpsConvention | None = None) -> float:
        convention = convention or self.ops_convention
        return convert_ops(self.peak_ops, self.ops_convention, convention)

    def ridge(self, convention: OpsConvention | None = None) -> float:
        return self.peak(convention) / self.mem_bw


def ridge_point(dev: RooflineDevice,
                convention: OpsConvention | None = None) -> float:
    """Ops-per-weight-byte intensity where the device leaves the slanted roof."""
    return dev.ridge(convention)


def build_proportionality_curve(idle_frac: float, frac_at_10: float) -> tuple:
    """11-bucket power curve: measured idle and 10%-load points, then a
    linear ramp from the 10% bucket to full power."""
    if not (0.0 <= idle_frac <= frac_at_10 <= 1.0):
        raise ConfigError("need 0 <= idle_frac <= frac_at_10 <= 1")
    ramp = [frac_at_10 + (1.0 - frac_at_10) * i / 9.0 for i in range(10)]
    ramp[-1] = 1.0
    return (idle_frac, *ramp)


# Measured power fraction at 10% load per device, by probe workload.
PROPORTIONALITY_AT_10PCT = {
    "cnn0": {"haswell": 0.56, "k80": 0.66, "tpu": 0.88},
    "lstm1": {"haswell": 0.47, "k80": 0.78, "tpu": 0.94},
}


def tpu_device(cfg: TpuConfig | None = None, curve_workload: str = "cnn0") -> RooflineDevice:
    """Roofline device row for an accelerator die described by ``cfg``."""
    cfg = cfg or TpuConfig()
    at10 = PROPORTIONALITY_AT_10PCT[curve_workload]["tpu"]
    return RooflineDevice(
        name="tpu",
        peak_ops=cfg.peak_macs_per_s,
        mem_bw=cfg.weight_bw,
        ops_convention=OpsConvention.MACS,
        dies_per_server=4,
        server_idle_watts=290.0,
        server_busy_watts=384.0,
        die_idle_watts=cfg.idle_watts,
        die_busy_watts=cfg.busy_watts,
        proportionality_curve=build_proportionality_curve(
            cfg.idle_watts / cfg.busy_watts, at10),
        quoted_ridge=1350.0,
    )


def haswell_device(curve_workload: str = "cnn0") -> RooflineDevice:
    """18-core server CPU die. Peak is the published 1.3 FP TOPS figure,
    which counts multiply and add separately (OPS2X)."""
    at10 = PROPORTIONALITY_AT_10PCT[curve_workload]["haswell"]
    return RooflineDevice(
        name="haswell",
        peak_ops=1.3e12,
        mem_bw=51e9,
        ops_convention=OpsConvention.OPS2X,
        dies_per_server=2,
        server_idle_watts=159.0,
        server_busy_watts=455.0,
        die_idle_watts=41.0,
        die_busy_watts=145.0,
        proportionality_curve=build_proportionality_curve(41.0 / 145.0, at10),
        quoted_ridge=13.0,
    )


def k80_device(curve_workload: str = "cnn0") -> RooflineDevice:
    """GPU die (2 dies per card, 4 cards per server, boost disabled)."""
    at10 = PROPORTIONALITY_AT_10PCT[curve_workload]["k80"]
    return RooflineDevice(
        name="k80",
        peak_ops=2.8e12,
        mem_bw=160e9,
        ops_convention=OpsConvention.OPS2X,
        dies_per_server=8,
        server_idle_watts=357.0,
        server_busy_watts=991.0,
        die_idle_watts=25.0,
        die_busy_watts=98.0,
        proportionality_curve=build_proportionality_curve(25.0 / 98.0, at10),
        quoted_ridge=9.0,
    )


def shipped_devices(curve_workload: str = "cnn0") -> dict[str, RooflineDevice]:
    return {
        "tpu": tpu_device(curve_workload=curve_workload),
        "haswell": haswell_device(curve_workload),
        "k80": k80_device(curve_workload),
    }


# --------------------------------------------------------------------------
# JSON persistence. Unknown fields are rejected so typos fail loudly.
# --------------------------------------------------------------------------

_TPU_FIELDS = {
    "matrix_dim", "clock_hz", "weight_bw", "weight_mem_bytes", "ub_bytes",
    "acc_entries", "acc_width_bits", "fifo_depth_tiles", "pcie_bw",
    "idle_watts", "busy_watts",
}

_DEVICE_FIELDS = {
    "name", "peak_ops", "mem_bw", "ops_convention", "dies_per_server",
    "server_idle_watts", "server_busy_watts", "die_idle_watts",
    "die_busy_watts", "proportionality_curve", "quoted_ridge",
}


def tpu_config_from_dict(data: dict) -> TpuConfig:
    unknown = set(data) - _TPU_FIELDS
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return TpuConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def device_from_dict(data: dict) -> RooflineDevice:
    unknown = set(data) - _DEVICE_FIELDS
    if unknown:
        raise ConfigError(f"unknown device fields: {sorted(unknown)}")
    data = dict(data)
    if "ops_convention" in data:
        data["ops_convention"] = OpsConvention(data["ops_convention"])
    if "proportionality_curve" in data:
        data["proportionality_curve"] = tuple(data["proportionality_curve"])
    try:
        return RooflineDevice(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: TpuConfig | RooflineDevice) -> dict:
    data = asdict(cfg)
    if isinstance(cfg, RooflineDevice):
        data["ops_convention"] = cfg.ops_convention.value
        data["proportionality_curve"] = list(cfg.proportionality_curve)
    return data


def load_config(path) -> TpuConfig | list[RooflineDevice]:
    """Load either a single accelerator config or a device set.

    An object with a ``devices`` key loads as a list of RooflineDevice;
    anything else loads as a TpuConfig with defaults filled in (so an
    empty object yields the shipped accelerator).
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    if "devices" in data:
        extra = set(data) - {"devices"}
        if extra:
            raise ConfigError(f"unknown fields alongside devices: {sorted(extra)}")
        return [device_from_dict(d) for d in data["devices"]]
    return tpu_config_from_dict(data)


def save_config(cfg: TpuConfig | list[RooflineDevice], path) -> None:
    if isinstance(cfg, TpuConfig):
        payload = config_to_dict(cfg)
    else:
        payload = {"devices": [config_to_dict(d) for d in cfg]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
