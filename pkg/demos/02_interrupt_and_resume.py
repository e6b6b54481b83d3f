"""
Interrupting a run and picking it up again
==========================================

A run that dies half way leaves a ledger behind. Resuming replays what the
ledger already holds and only asks the provider for the rest.
"""

import tempfile
from pathlib import Path

from llmhara import RunConfig, resume, run
from llmhara.domain import Stage
from llmhara.fixtures import build_fixtures, load_item
from llmhara.provider import Provider

item = load_item("caem")
provider, _ = build_fixtures(item, seed=7)
workdir = Path(tempfile.mkdtemp())


# %%
# A provider that gives out once severity assessment starts, standing in
# for a lost connection or a killed process.

class Unplugged(Exception):
    pass


class DiesAtSeverity(Provider):
    def __init__(self, inner):
        super().__init__(max_in_flight=inner.max_in_flight)
        self.inner = inner

    def complete(self, request, on_response=None):
        if request.stage is Stage.SEVERITY:
            raise Unplugged()
        return self.inner.complete(request, on_response)


try:
    run(item, RunConfig(), DiesAtSeverity(provider), workdir / "run.jsonl")
except Unplugged:
    print("run interrupted at", Stage.SEVERITY.value)

# %%
# Resume from the ledger with the healthy provider.

table, pipe = resume(workdir / "run.jsonl", provider)
print("replayed:", pipe.stats.replayed)
print("new calls:", pipe.stats.provider_calls)

# %%
# The result is the same table an uninterrupted run would have produced.

fresh, _ = run(item, RunConfig(), build_fixtures(item, seed=7)[0], workdir / "fresh.jsonl")
print("identical:", fresh.to_csv() == table.to_csv())
