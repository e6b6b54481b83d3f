"""
A complete HARA run against a scripted model
============================================

The pipeline only needs an item definition. Here the "model" is a scripted
provider built from a seed, so the run is fast and repeatable.
"""

import tempfile
from pathlib import Path

from llmhara import RunConfig, run
from llmhara.fixtures import build_fixtures, load_item

item = load_item("caem")
print(item.function_name)

# %%
# The fixture builder authors every reply the run will ask for and keeps a
# copy of what the outcome should be.

provider, truth = build_fixtures(item, seed=7)
print(len(truth.malfunction_ids), "malfunctions x", len(truth.geometry_ids), "geometries =", truth.pairs, "pairs")
print(len(truth.events), "hazardous events in total")

# %%
# Run all six stages. Every exchange goes into the ledger before the
# pipeline looks at it.

workdir = Path(tempfile.mkdtemp())
table, pipe = run(item, RunConfig(), provider, workdir / "run.jsonl")

print(pipe.stats.provider_calls)
print(len(table), "rows selected out of", table.events_total)

# %%
# Four quadrants, at most five representatives each.

for row in table.rows[:6]:
    ev = row.event
    print(row.quadrant, ev.id, ev.assessment.severity.value, ev.goal.id if ev.goal else "-")

# %%
# The review table. S0 rows carry no safety goal.

csv_text = table.to_csv()
print(csv_text.splitlines()[0])
print(csv_text.splitlines()[1][:160], "...")
