"""Hardware build planning: bill-of-materials costs and capacity rules.

Rules checked against a build:

* PCIe lanes: every GPU and M.2 drive needs its lanes (16 per GPU, 4 per
  M.2 drive) and the CPUs together must provide at least that many.
* Power: GPU peak draw + CPU peak draw + a fixed 100 W for everything else
  must not exceed the PSU rating.
* Memory: at least 32 GB of system RAM per GPU.

Build files are CSV with a header row::

    category,description,unit_price,quantity,attrs

``attrs`` is ``key=value;key=value``.  Lines starting with ``#`` carry
build metadata: ``#name=``, ``#base_price=`` (for configurations priced as a
base system plus per-line increases) and ``#stated_total=`` (a quoted
vendor total to reconcile against).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from importlib import resources
from typing import Dict, List, Optional, Tuple

from gridling.errors import InvalidBuild, MissingAttribute

CATEGORIES = (
    "motherboard", "psu", "cpu", "cooling", "ram",
    "primary_drive", "data_drive", "gpu", "case",
)
INT_ATTRS = ("pci_lanes_provided", "pci_lanes_required", "watts_peak", "ram_gb", "psu_watts")

GPU_LANES = 16
M2_LANES = 4
GPU_PEAK_WATTS = 300
OVERHEAD_WATTS = 100
RAM_GB_PER_GPU = 32

CENT = Decimal("0.01")
HEADER = ["category", "description", "unit_price", "quantity", "attrs"]


def money(value) -> Decimal:
    """Parse a price with at most two decimal places."""
    try:
        d = Decimal(str(value).replace(",", ""))
    except InvalidOperation:
        raise InvalidBuild(f"bad price {value!r}") from None
    if not d.is_finite() or d != d.quantize(CENT) or d < 0:
        raise InvalidBuild(f"price must be a non-negative amount in cents, got {value!r}")
    return d.quantize(CENT)


@dataclass(frozen=True)
class ComponentSpec:
    category: str
    description: str
    unit_price: Decimal
    quantity: int = 1
    attrs: Tuple[Tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise InvalidBuild(f"unknown category {self.category!r}")
        object.__setattr__(self, "unit_price", money(self.unit_price))
        if isinstance(self.attrs, dict):
            object.__setattr__(self, "attrs", tuple(self.attrs.items()))
        if not isinstance(self.quantity, int) or self.quantity < 1:
            raise InvalidBuild(f"quantity must be a positive integer, got {self.quantity!r}")
        if self.category == "gpu":
            for key in ("pci_lanes_required", "watts_peak"):
                if self.attr(key) is None:
                    raise InvalidBuild(f"gpu component {self.description!r} lacks {key}")

    def attr(self, key: str) -> Optional[int]:
        for k, v in self.attrs:
            if k == key:
                return v
        return None

    def need(self, key: str) -> int:
        value = self.attr(key)
        if value is None:
            raise MissingAttribute(f"{self.category} {self.description!r} lacks {key}")
        return value

    @property
    def line_total(self) -> Decimal:
        return self.unit_price * self.quantity


@dataclass
class BuildConfig:
    name: str
    components: List[ComponentSpec]
    base_price: Decimal = Decimal("0.00")
    stated_total: Optional[Decimal] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.base_price = money(self.base_price)
        if self.stated_total is not None:
            self.stated_total = money(self.stated_total)

    def validate(self) -> None:
        counts = {c: sum(1 for x in self.components if x.category == c) for c in ("motherboard", "cpu", "psu")}
        if counts["motherboard"] != 1:
            raise InvalidBuild(f"build {self.name!r} needs exactly one motherboard entry")
        if counts["cpu"] < 1 or counts["psu"] < 1:
            raise InvalidBuild(f"build {self.name!r} needs at least one cpu and one psu entry")

    def count(self, category: str) -> int:
        return sum(c.quantity for c in self.components if c.category == category)

    def of(self, category: str) -> List[ComponentSpec]:
        return [c for c in self.components if c.category == category]

    def scaled(self, k: int) -> "BuildConfig":
        return replace(
            self,
            name=f"{self.name}x{k}",
            components=[replace(c, quantity=c.quantity * k) for c in self.components],
            base_price=self.base_price * k,
            stated_total=None,
        )

    def with_component(self, component: ComponentSpec) -> "BuildConfig":
        return replace(self, components=[*self.components, component], stated_total=None)


# -- costs ------------------------------------------------------------------------

def total_cost(build: BuildConfig) -> Decimal:
    return build.base_price + sum((c.line_total for c in build.components), Decimal("0.00"))


@dataclass(frozen=True)
class CostReport:
    name: str
    computed: Decimal
    stated: Optional[Decimal]

    @property
    def discrepancy(self) -> Optional[Decimal]:
        return None if self.stated is None else self.computed - self.stated

    @property
    def flagged(self) -> bool:
        return bool(self.discrepancy)

    def __str__(self):
        text = f"{self.name}: computed total ${self.computed:,}"
        if self.stated is not None:
            text += f", stated total ${self.stated:,}"
            if self.flagged:
                text += f" (DISCREPANCY ${abs(self.discrepancy):,})"
        return text


def cost_report(build: BuildConfig) -> CostReport:
    return CostReport(build.name, total_cost(build), build.stated_total)


@dataclass(frozen=True)
class Comparison:
    ratio: Decimal
    more_expensive: Optional[str]
    totals: Tuple[Tuple[str, Decimal], ...]

    def __str__(self):
        if self.more_expensive is None:
            return f"equal cost (ratio {self.ratio})"
        return f"{self.more_expensive} costs {self.ratio}x as much"


def compare(a: BuildConfig, b: BuildConfig, basis: str = "computed") -> Comparison:
    """Cost ratio of the dearer build to the cheaper one, rounded to cents.

    ``basis="stated"`` uses each build's stated total where it has one.
    """
    def total(build):
        if basis == "stated" and build.stated_total is not None:
            return build.stated_total
        if basis not in ("computed", "stated"):
            raise ValueError(f"unknown basis {basis!r}")
        return total_cost(build)

    ta, tb = total(a), total(b)
    if ta <= 0 or tb <= 0:
        raise InvalidBuild("both builds must have a positive total")
    hi, lo = max(ta, tb), min(ta, tb)
    ratio = (hi / lo).quantize(CENT, rounding=ROUND_HALF_UP)
    dearer = None if ta == tb else (a.name if ta > tb else b.name)
    return Comparison(ratio, dearer, tuple(sorted(((a.name, ta), (b.name, tb)))))


# -- capacity rules ---------------------------------------------------------------

@dataclass(frozen=True)
class LaneCheck:
    ok: bool
    needed: int
    provided: int


@dataclass(frozen=True)
class PowerCheck:
    ok: bool
    peak_watts: int
    psu_watts: int


@dataclass(frozen=True)
class RamCheck:
    ok: bool
    have_gb: int
    need_gb: int


def check_pci_lanes(build: BuildConfig) -> LaneCheck:
    needed = sum(
        c.need("pci_lanes_required") * c.quantity for c in build.of("gpu")
    ) + sum(
        (c.attr("pci_lanes_required") or 0) * c.quantity for c in build.of("primary_drive")
    )
    provided = sum(c.need("pci_lanes_provided") * c.quantity for c in build.of("cpu"))
    return LaneCheck(needed <= provided, needed, provided)


def check_psu(build: BuildConfig) -> PowerCheck:
    peak = sum(c.need("watts_peak") * c.quantity for c in build.of("gpu"))
    peak += sum(c.need("watts_peak") * c.quantity for c in build.of("cpu"))
    peak += OVERHEAD_WATTS
    capacity = sum(c.need("psu_watts") * c.quantity for c in build.of("psu"))
    return PowerCheck(peak <= capacity, peak, capacity)


def check_ram(build: BuildConfig) -> RamCheck:
    have = sum(c.need("ram_gb") * c.quantity for c in build.of("ram"))
    need = RAM_GB_PER_GPU * build.count("gpu")
    return RamCheck(have >= need, have, need)


def check_all(build: BuildConfig) -> Dict[str, object]:
    return {"pci_lanes": check_pci_lanes(build), "psu": check_psu(build), "ram": check_ram(build)}


# -- build files ------------------------------------------------------------------

def _parse_attrs(text: str, lineno: int) -> Tuple[Tuple[str, int], ...]:
    out = []
    for item in filter(None, (p.strip() for p in text.split(";"))):
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidBuild(f"line {lineno}: bad attribute {item!r}")
        try:
            out.append((key.strip(), int(value)))
        except ValueError:
            raise InvalidBuild(f"line {lineno}: attribute {key!r} must be an integer") from None
    return tuple(out)


def parse_build(text: str, name: str = "build") -> BuildConfig:
    meta = {}
    body = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.reader(io.StringIO("\n".join(body)))
    rows = list(reader)
    if not rows or [h.strip() for h in rows[0]] != HEADER:
        raise InvalidBuild(f"build file header must be {','.join(HEADER)}")
    components = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) == 4:
            row.append("")
        if len(row) != 5:
            raise InvalidBuild(f"row {lineno}: expected 5 columns, got {len(row)}")
        category, description, price, qty, attrs = row
        try:
            quantity = int(qty)
        except ValueError:
            raise InvalidBuild(f"row {lineno}: quantity must be an integer") from None
        components.append(
            ComponentSpec(category.strip(), description.strip(), money(price), quantity, _parse_attrs(attrs, lineno))
        )
    build = BuildConfig(
        meta.pop("name", name),
        components,
        base_price=money(meta.pop("base_price", "0")),
        stated_total=money(meta.pop("stated_total")) if "stated_total" in meta else None,
        metadata=meta,
    )
    build.validate()
    return build


def render_build(build: BuildConfig) -> str:
    buf = io.StringIO()
    buf.write(f"#name={build.name}\n")
    if build.base_price:
        buf.write(f"#base_price={build.base_price}\n")
    if build.stated_total is not None:
        buf.write(f"#stated_total={build.stated_total}\n")
    for k, v in build.metadata.items():
        buf.write(f"#{k}={v}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for c in build.components:
        writer.writerow([
            c.category, c.description, str(c.unit_price), c.quantity,
            ";".join(f"{k}={v}" for k, v in c.attrs),
        ])
    return buf.getvalue()


def load_build(path: str) -> BuildConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_build(fh.read())


def bundled(name: str) -> BuildConfig:
    """One of the shipped fixtures: ``"commodity"`` or ``"server"``."""
    text = resources.files("gridling.data").joinpath(f"{name}.csv").read_text(encoding="utf-8")
    return parse_build(text, name)


def report(build: BuildConfig) -> str:
    lines = [str(cost_report(build))]
    lanes, power, ram = check_pci_lanes(build), check_psu(build), check_ram(build)
    lines.append(f"  PCIe lanes: need {lanes.needed}, CPUs provide {lanes.provided}: {'ok' if lanes.ok else 'VIOLATION'}")
    lines.append(f"  power: peak {power.peak_watts} W vs PSU {power.psu_watts} W: {'ok' if power.ok else 'VIOLATION'}")
    lines.append(f"  RAM: have {ram.have_gb} GB, need {ram.need_gb} GB: {'ok' if ram.ok else 'VIOLATION'}")
    return "\n".join(lines) + "\n"
