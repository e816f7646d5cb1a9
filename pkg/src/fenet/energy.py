"""
Charge budget of a wrist-worn device running a duty-cycled pulse sensor.

All devices are assumed to run at the same voltage, so charge (mAh) stands in
for energy. Over ``T`` hours a sensor drawing ``I_ppg`` at duty cycle ``DC`` on
a device idling at ``I_bg`` consumes ``(DC * I_ppg + I_bg) * T``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

from fenet.errors import FormatError, InvalidInputError

DUTY_CYCLES = tuple(Fraction(1, k) for k in (1, 3, 5, 7, 9))


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    capacity_mah: float
    standby_hours: float

    def __post_init__(self):
        if self.capacity_mah <= 0 or self.standby_hours <= 0:
            raise InvalidInputError(f"{self.name}: capacity and standby time must be positive")


@dataclass(frozen=True)
class SensorProfile:
    name: str
    current_ma: float

    def __post_init__(self):
        if self.current_ma <= 0:
            raise InvalidInputError(f"{self.name}: working current must be positive")


@dataclass(frozen=True)
class EnergyScenario:
    device: DeviceProfile
    sensor: SensorProfile
    hours: float
    duty_cycle: float

    def __post_init__(self):
        if self.hours <= 0:
            raise InvalidInputError("monitoring duration must be positive")
        if not 0.0 < self.duty_cycle <= 1.0:
            raise InvalidInputError("duty cycle must lie in (0, 1]")


DEVICES = (
    DeviceProfile("Apple Watch Series 6", 304.0, 18.0),
    DeviceProfile("Microsoft Band 2", 200.0, 48.0),
    DeviceProfile("Huawei Band 4", 91.0, 216.0),
    DeviceProfile("Mi Smart Band 5", 125.0, 336.0),
)

SENSORS = (
    SensorProfile("Green", 1.6),  # BH1790GLC, two green LEDs
    SensorProfile("IR", 30.0),  # OB1203
)


def background_current(device: DeviceProfile) -> float:
    """Idle draw in mA: battery capacity spread over the rated standby time."""
    return device.capacity_mah / device.standby_hours


def consumption(scenario: EnergyScenario, sensor_current: float | None = None) -> float:
    """Charge in mAh drawn over the scenario; unrounded."""
    i_ppg = scenario.sensor.current_ma if sensor_current is None else sensor_current
    return (scenario.duty_cycle * i_ppg + background_current(scenario.device)) * scenario.hours


def savings_fraction(scenario: EnergyScenario, background_ma: float | None = None) -> float:
    """Share of the full-duty-cycle charge saved by running at ``scenario.duty_cycle``.

    Evaluated in exact rational arithmetic and rounded once, so a
    ``Fraction`` duty cycle with no background draw gives ``1 - DC`` to the
    last bit. ``background_ma`` overrides the device's idle current.
    """
    i_ppg = Fraction(scenario.sensor.current_ma)
    i_bg = Fraction(background_current(scenario.device) if background_ma is None else background_ma)
    dc = Fraction(scenario.duty_cycle)
    full = i_ppg + i_bg
    return float((full - (dc * i_ppg + i_bg)) / full)


@dataclass(frozen=True)
class ReportRow:
    device: str
    sensor: str
    duty_cycle: float
    hours: float
    background_ma: float
    consumption_mah: float
    capacity_mah: float
    feasible: bool
    savings: float


def feasibility_report(devices, sensors, hours: float, duty_cycles) -> list[ReportRow]:
    devices, sensors, duty_cycles = list(devices), list(sensors), list(duty_cycles)
    if not devices or not sensors or not duty_cycles:
        raise InvalidInputError("need at least one device, sensor and duty cycle")
    rows = []
    for dev in devices:
        for sen in sensors:
            for dc in duty_cycles:
                sc = EnergyScenario(dev, sen, hours, dc)
                c = consumption(sc)
                rows.append(ReportRow(
                    dev.name, sen.name, dc, hours, background_current(dev), c,
                    dev.capacity_mah, c <= dev.capacity_mah, savings_fraction(sc),
                ))
    return rows


def _dc_label(dc: float) -> str:
    frac = Fraction(dc).limit_denominator(64)
    return str(frac) if abs(float(frac) - dc) < 1e-12 else f"{dc:.4g}"


REPORT_FIELDS = ["device", "sensor", "duty_cycle", "hours", "background_ma",
                 "consumption_mah", "capacity_mah", "feasible", "savings"]


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_FIELDS)
    for r in rows:
        writer.writerow([
            r.device, r.sensor, _dc_label(r.duty_cycle), f"{r.hours:g}",
            f"{r.background_ma:.2f}", f"{r.consumption_mah:.1f}", f"{r.capacity_mah:g}",
            "yes" if r.feasible else "no", f"{r.savings:.4f}",
        ])
    return buf.getvalue()


def report_table(rows) -> str:
    """Aligned plain-text rendering of :func:`report_csv`."""
    parsed = list(csv.reader(io.StringIO(report_csv(rows))))
    widths = [max(len(row[i]) for row in parsed) for i in range(len(parsed[0]))]
    lines = []
    for k, row in enumerate(parsed):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def read_profiles(path):
    """Profile file rows: ``device,name,capacity_mah,standby_hours`` or ``sensor,name,current_ma``."""
    devices, sensors = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not row[0].strip() or row[0].lstrip().startswith("#"):
                continue
            kind = row[0].strip().lower()
            try:
                if kind == "device" and len(row) == 4:
                    devices.append(DeviceProfile(row[1].strip(), float(row[2]), float(row[3])))
                elif kind == "sensor" and len(row) == 3:
                    sensors.append(SensorProfile(row[1].strip(), float(row[2])))
                else:
                    raise FormatError(f"unrecognised profile row {row!r}", lineno)
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(str(exc), lineno) from None
    return devices, sensors


def write_profiles(devices, sensors, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for d in devices:
            writer.writerow(["device", d.name, repr(d.capacity_mah), repr(d.standby_hours)])
        for s in sensors:
            writer.writerow(["sensor", s.name, repr(s.current_ma)])
