"""From a COBOL program to fidelity probes.

Parses the bundled CALCDISC fixture, builds its control-flow, data-flow and
dependence graphs, reads behavioural facts off each graph, drops anything
that talks about platform internals and phrases the rest as questions.

    python3 gallery/01_graphs_and_probes.py
"""
from importlib import resources
from pathlib import Path

from specprobe.cobol import parse_file
from specprobe.graphs import extract
from specprobe.probes import ObservabilityFilter, emit_probes, enumerate_facts
from specprobe.providers.template import TemplateBackend

FIX = Path(str(resources.files("specprobe").joinpath("data").joinpath("fixtures")))

prog = parse_file(FIX / "calcdisc.cbl", [FIX])
bundle = extract(prog)
print(f"{prog.program_id}: {len(prog.paragraphs)} paragraphs, "
      f"{len(bundle.acfg.nodes)} flow nodes, {len(bundle.dfg.edges)} def-use edges, "
      f"{len(bundle.sdg.edges)} dependence edges")

for e in bundle.acfg.out_edges("P1.S0"):
    print(f"  EVALUATE arm {e.label:12s} -> {e.dst}")

filt = ObservabilityFilter.for_program(prog)
for channel in ("cfg", "dfg", "sdg"):
    probes, rejected = emit_probes(enumerate_facts(bundle, channel), filt, TemplateBackend())
    print(f"\n[{channel}] {len(probes)} probes, {len(rejected)} rejected")
    for p in probes[:3]:
        print(f"  Q: {p.question}\n  A: {p.truth}")

# the filter in isolation
for text in ("sets file status 35 on OPEN", "The discount is 20.",
             "Control reaches 2000-APPLY-PREMIUM."):
    v = filt.check_text(text)
    print(f"\n{text!r}: {'accepted' if v.accepted else 'rejected ' + str(v.rejected_terms)}")
