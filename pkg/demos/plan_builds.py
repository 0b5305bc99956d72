"""Price and check the two bundled hardware builds, then try a few variants.

    python demos/plan_builds.py
"""

from gridling import planner
from gridling.planner import ComponentSpec

commodity, server = planner.bundled("commodity"), planner.bundled("server")
for build in (commodity, server):
    print(planner.report(build))
for basis in ("computed", "stated"):
    print(f"{basis} totals: {planner.compare(server, commodity, basis)}")

# the same box with a 64-lane CPU cannot feed four GPUs and an M.2 drive
cpu = commodity.of("cpu")[0]
weak = planner.BuildConfig("64-lane variant", [
    c if c is not cpu else ComponentSpec("cpu", "64-lane CPU", cpu.unit_price, 1, (("pci_lanes_provided", 64), ("watts_peak", 155)))
    for c in commodity.components
])
print()
print(planner.report(weak))

# two more cards overload the 1600 W supply and the 128 GB of RAM
gpu = commodity.of("gpu")[0]
six = commodity.with_component(ComponentSpec("gpu", gpu.description, gpu.unit_price, 2, gpu.attrs))
six.name = "six-GPU variant"
print(planner.report(six))
