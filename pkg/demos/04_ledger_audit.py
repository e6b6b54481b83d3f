"""
Auditing a run from its ledger
==============================

The ledger is one JSON object per line, chained by SHA-256. Anyone holding
it can check that nothing was edited and can rebuild the exported table.
"""

import tempfile
from pathlib import Path

from llmhara import RunConfig, replay_table, run
from llmhara.fixtures import ELK_MALFUNCTIONS, build_fixtures, load_item
from llmhara.ledger import read_ledger, verify

item = load_item("elk")

provider, _ = build_fixtures(item, ELK_MALFUNCTIONS, seed=2, geometries=4)
path = Path(tempfile.mkdtemp()) / "run.jsonl"
table, _ = run(item, RunConfig(geometries_requested=4), provider, path)

# %%

header, entries = read_ledger(path)
print(header["format"], header["bundle_version"], header["model_id"])
print(len(entries), "entries")
for e in entries[:4]:
    print(e.sequence, e.kind, e.stage, e.logical_key or "-", e.entry_hash[:12], "<-", e.prev_hash[:12])

# %%
# The table can be re-derived without any provider.

print("export matches:", replay_table(path).to_csv() == table.to_csv())
print(verify(path))

# %%
# Change one character of one recorded response and the chain breaks at
# exactly that entry.

data = path.read_bytes()
i = data.index(b"Lanes")
path.write_bytes(data[:i] + b"l" + data[i + 1:])
print(verify(path))
