"""Dollar accounting for staged training on mixed hardware.

Measured wall-times go in; costs, totals, savings and cumulative-cost curves
come out.  Nothing here predicts throughput.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

from .errors import DomainError, InputError


@dataclass(frozen=True)
class DeviceRate:
    name: str
    dollars_per_hour: float

    def __post_init__(self):
        if not self.dollars_per_hour > 0:
            raise DomainError(f"rate for {self.name} must be positive")


RTX4090 = DeviceRate("RTX 4090", 0.35)
A100_80GB = DeviceRate("A100", 2.28)
DEFAULT_RATES = {"low": RTX4090, "high": A100_80GB}


@dataclass(frozen=True)
class PhaseRecord:
    phase: str           # "S", "F" or "FULL"
    time_h: float
    devices: int
    rate: DeviceRate

    def __post_init__(self):
        if self.phase not in ("S", "F", "FULL"):
            raise DomainError(f"unknown phase {self.phase!r}")
        if self.time_h < 0:
            raise DomainError("phase time must be non-negative")
        if self.devices < 1:
            raise DomainError("a phase needs at least one device")

    @property
    def cost(self) -> float:
        return phase_cost(self.time_h, self.rate.dollars_per_hour, self.devices)

    @property
    def slope(self) -> float:
        return self.rate.dollars_per_hour * self.devices


def phase_cost(time_h: float, rate: float, devices: int = 1) -> float:
    if time_h < 0 or rate < 0:
        raise DomainError("time and rate must be non-negative")
    if devices < 1:
        raise DomainError("devices must be at least 1")
    return time_h * rate * devices


def disco_total(s_max_time_h, num_experts, s_rate, f_time_h, f_devices, f_rate):
    """(s_cost, f_cost, total_cost, total_time) with the S phase billed as E devices x longest worker."""
    if num_experts < 1:
        raise DomainError("need at least one submodel worker")
    s_cost = phase_cost(s_max_time_h, s_rate, num_experts)
    f_cost = phase_cost(f_time_h, f_rate, f_devices)
    return s_cost, f_cost, s_cost + f_cost, s_max_time_h + f_time_h


def savings(full_cost: float, disco_cost: float) -> float:
    if not full_cost > 0:
        raise DomainError("baseline cost must be positive")
    return (full_cost - disco_cost) / full_cost


def emit_cost_curve(phases, resolution_h: float):
    """Sampled (time_h, cumulative dollars) along consecutive phases.

    Every phase boundary is included as a sample so the piecewise-linear
    shape is exact; the endpoint equals the summed phase costs.
    """
    if resolution_h <= 0:
        raise DomainError("resolution must be positive")
    phases = list(phases)
    if not phases:
        return [(0.0, 0.0)]
    for a, b in zip(phases, phases[1:]):
        order = {"S": 0, "F": 1, "FULL": 0}
        if order[a.phase] > order[b.phase]:
            raise InputError(f"phase {b.phase} cannot follow phase {a.phase}")
    points = [(0.0, 0.0)]
    t0, c0 = 0.0, 0.0
    for ph in phases:
        n = max(1, int(round(ph.time_h / resolution_h)))
        for i in range(1, n + 1):
            dt = ph.time_h * i / n
            points.append((t0 + dt, c0 + ph.slope * dt))
        t0 += ph.time_h
        c0 += ph.cost
        points[-1] = (t0, c0)
    return points


def round4(x: float) -> Decimal:
    """Half-even rounding to four decimals, applied only when emitting reports."""
    return Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN)


def percent(x: float) -> str:
    return str(Decimal(repr(float(x) * 100)).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN)) + "%"


@dataclass
class CostReport:
    model: str
    dataset: str
    full: PhaseRecord | None
    s_phase: PhaseRecord | None
    f_phase: PhaseRecord | None
    s_worker_times_h: list = field(default_factory=list)

    @property
    def full_cost(self):
        return self.full.cost if self.full else None

    @property
    def disco(self):
        if self.s_phase is None or self.f_phase is None:
            return None
        return disco_total(self.s_phase.time_h, self.s_phase.devices, self.s_phase.rate.dollars_per_hour,
                           self.f_phase.time_h, self.f_phase.devices, self.f_phase.rate.dollars_per_hour)

    @property
    def total_cost(self):
        d = self.disco
        return d[2] if d else None

    @property
    def total_time(self):
        d = self.disco
        return d[3] if d else None

    @property
    def savings(self):
        if self.full is None or self.disco is None:
            return None
        return savings(self.full_cost, self.total_cost)

    @property
    def s_cost_per_worker(self):
        """Alternative S-phase bill: each worker charged only for its own time."""
        if not self.s_worker_times_h or self.s_phase is None:
            return None
        return sum(phase_cost(t, self.s_phase.rate.dollars_per_hour, 1) for t in self.s_worker_times_h)

    def curve(self, resolution_h=0.01):
        if self.disco is not None:
            return emit_cost_curve([self.s_phase, self.f_phase], resolution_h)
        return emit_cost_curve([self.full], resolution_h)

    def row(self) -> dict:
        def fmt(x):
            return "" if x is None else str(round4(x))

        def plat(p):
            return "" if p is None else f"{p.rate.name}*{p.devices}"

        d = self.disco
        return {
            "Model": self.model, "Dataset": self.dataset,
            "Cost($)": fmt(self.full_cost), "Time(h)": fmt(self.full.time_h if self.full else None),
            "Platform": plat(self.full),
            "S-Cost($)": fmt(d[0] if d else None), "S-Time(h)": fmt(self.s_phase.time_h if self.s_phase else None),
            "S-Platform": plat(self.s_phase),
            "F-Cost($)": fmt(d[1] if d else None), "F-Time(h)": fmt(self.f_phase.time_h if self.f_phase else None),
            "F-Platform": plat(self.f_phase),
            "Total Cost($)": fmt(d[2] if d else None), "Total Time(h)": fmt(d[3] if d else None),
            "Savings": "" if self.savings is None else percent(self.savings),
            "S-Cost per-worker($)": fmt(self.s_cost_per_worker),
        }


COLUMNS = ["Model", "Dataset", "Cost($)", "Time(h)", "Platform", "S-Cost($)", "S-Time(h)", "S-Platform",
           "F-Cost($)", "F-Time(h)", "F-Platform", "Total Cost($)", "Total Time(h)", "Savings",
           "S-Cost per-worker($)"]


def write_report(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def write_curve(path, points):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_h", "cumulative_dollars"])
        for t, c in points:
            w.writerow([repr(t), repr(c)])


def read_rates(path) -> dict:
    """Rates file: ``name,dollars_per_hour`` per line; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"rates file {path} does not exist")
    rates = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            name, value = [x.strip() for x in line.rsplit(",", 1)]
            rates[name] = DeviceRate(name, float(value))
        except ValueError:
            raise InputError(f"malformed rates line {line!r}") from None
    return rates


# published inputs: (model, dataset, full hours, S max hours, F hours)
TABLE4_INPUTS = [
    ("Qwen", "C4", 9.87, 2.09, 1.73),
    ("Qwen", "Wiki", 3.04, 1.28, 0.68),
    ("Qwen", "OpenWebText", 13.12, 3.12, 2.87),
    ("Llama", "C4", 5.64, 1.54, 2.01),
    ("Llama", "Wiki", 7.45, 1.46, 2.67),
    ("Llama", "OpenWebText", 14.09, 3.01, 4.79),
]

# published outputs: full cost, S cost, F cost, total cost, total time
TABLE4_PUBLISHED = {
    ("Qwen", "C4"): (22.5036, 2.9260, 3.9444, 6.8704, 3.82),
    ("Qwen", "Wiki"): (6.9312, 1.7920, 1.5504, 3.3424, 1.96),
    ("Qwen", "OpenWebText"): (29.9136, 4.3680, 6.5436, 10.9116, 5.99),
    ("Llama", "C4"): (12.8592, 2.1560, 4.5828, 6.7388, 3.55),
    ("Llama", "Wiki"): (16.9860, 2.0440, 6.0876, 8.1316, 4.13),
    ("Llama", "OpenWebText"): (32.1252, 4.2140, 10.9212, 15.1352, 7.80),
}

# savings percentages as printed in the text
TABLE4_SAVINGS_TEXT = {
    ("Qwen", "C4"): "69.5%", ("Qwen", "Wiki"): "51.8%", ("Qwen", "OpenWebText"): "63.5%",
    ("Llama", "C4"): "47.6%", ("Llama", "Wiki"): "52.2%", ("Llama", "OpenWebText"): "52.9%",
}


def table4_reports(low=RTX4090, high=A100_80GB, num_experts=4) -> list[CostReport]:
    out = []
    for model, data, full_h, s_h, f_h in TABLE4_INPUTS:
        out.append(CostReport(model, data, PhaseRecord("FULL", full_h, 1, high),
                              PhaseRecord("S", s_h, num_experts, low), PhaseRecord("F", f_h, 1, high)))
    return out
