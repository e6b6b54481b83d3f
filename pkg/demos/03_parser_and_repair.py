"""
What the parser accepts, and what it sends back when it cannot
===============================================================
"""

from llmhara.domain import Stage
from llmhara.parsing import SEVERITY_SCHEMA, build_repair_prompt, extract_table
from llmhara.templates import load_template_set, render

# %%
# Chat models wrap tables in prose, code fences or markdown. All of these
# parse to the same row.

replies = [
    "Severity,Rationale\nS2,severe injuries likely\n",
    "Here you go:\n\n```csv\nSeverity,Rationale\nS2,severe injuries likely\n```\nHope this helps.",
    "| Severity | Rationale |\n|---|---|\n| S2 | severe injuries likely |",
    "  severity , RATIONALE\r\nS2,severe injuries likely\r\n",
]
for text in replies:
    print(extract_table(text, SEVERITY_SCHEMA).rows)

# %%
# Failures are values, never exceptions.

for text in ["Severity,Rationale\nS4,off the scale\n", "I would rate this as severe.", "Sev,Why\nS1,x\n"]:
    out = extract_table(text, SEVERITY_SCHEMA)
    print(out.failure.code, "|", out.failure.detail)

# %%
# A failure turns into a repair prompt: the original prompt, the problem,
# the question "Why did you make this mistake?" and the rules for the
# offending column.

template = load_template_set()[Stage.SEVERITY]
prompt = render(template, {"item_definition": "An evasive steering function.", "hazardous_event": "E001: ..."})
failure = extract_table("Severity,Rationale\nS4,off the scale\n", SEVERITY_SCHEMA).failure
repair = build_repair_prompt(prompt, failure, SEVERITY_SCHEMA)
print(repair.text[len(prompt.text):])
