"""
The same run from the command line
==================================

``llmhara`` reads one TOML file. This script writes a scripted-provider
fixture directory and a config next to it, then drives the CLI the way a
shell would.
"""

import tempfile
from importlib import resources
from pathlib import Path

from llmhara.cli import main
from llmhara.fixtures import build_fixtures, load_item

work = Path(tempfile.mkdtemp())
item = load_item("caem")
provider, _ = build_fixtures(item, seed=7)
provider.save(work / "fixtures")
(work / "caem.md").write_text((resources.files("llmhara") / "data" / "items" / "caem.md").read_text())

(work / "hara.toml").write_text("""\
item_definition = "caem.md"
ledger = "out/run.jsonl"
output = "out/hara.csv"

[provider]
kind = "scripted"
fixtures = "fixtures"

[run]
concurrency_limit = 4
""")
print((work / "hara.toml").read_text())

# %%
# llmhara probe -c hara.toml && llmhara run -c hara.toml

print("probe ->", main(["probe", "-c", str(work / "hara.toml")]))
print("run ->", main(["run", "-c", str(work / "hara.toml")]))

# %%
# llmhara verify-ledger / export / validate

print("verify ->", main(["verify-ledger", str(work / "out" / "run.jsonl")]))
print("export ->", main(["export", str(work / "out" / "run.jsonl"), str(work / "again.csv")]))
print("same bytes:", (work / "again.csv").read_bytes() == (work / "out" / "hara.csv").read_bytes())
print("validate ->", main(["validate", str(work / "again.csv")]))
