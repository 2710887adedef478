"""End-to-end run on a synthetic benchmark, fully offline.

Builds 30 labelled clips, runs the staged dialogue with an answer-key backend
and with a backend that always says "no accident", then scores both runs.
"""

# %% Setup
import tempfile
from dataclasses import replace
from pathlib import Path

from tara_forge.llm_client import HashEmbedder, ScriptedBackend, read_jsonl
from tara_forge.mcot import run_batch
from tara_forge.metrics import evaluate, render_table
from tara_forge.rag import build_index, sample_clauses
from tara_forge.synthetic import OracleBackend, make_dataset

work = Path(tempfile.mkdtemp(prefix="tara-demo-"))
samples = make_dataset(work / "data", n_samples=30, accident_fraction=0.6)
samples = [replace(s, frames_dir=str(work / "data" / s.frames_dir)) for s in samples]
print(f"{len(samples)} clips written under {work / 'data'}")

# %% A clause index for the allocation turn
embedder = HashEmbedder(64)
index = build_index(sample_clauses(), embedder)

# %% The answer-key backend reproduces every label, so every score is 1.0
run_batch(samples, OracleBackend(samples), work / "oracle", index, embedder=embedder)
oracle = evaluate(read_jsonl(work / "oracle" / "predictions.jsonl"), samples)
print(render_table(oracle, column="oracle"))

# %% Look at one dialogue: eight turns, the last one carries the regulations
turns = [t for t in read_jsonl(work / "oracle" / "transcripts.jsonl") if t["sample_id"] == "syn000"]
for t in turns:
    print(f"{t['stage']:<16} images={len(t['images_refs']):<3} answer={t['raw_answer'][:60]!r}")
print(turns[-1]["prompt"])

# %% A backend that never sees an accident scores exactly the non-accident share
run_batch(samples, ScriptedBackend(default="C. No accident."), work / "always_c")
always_c = evaluate(read_jsonl(work / "always_c" / "predictions.jsonl"), samples)
share = sum(not s.has_accident for s in samples) / len(samples)
print(f"always-C accuracy {always_c.tara['micro_average']:.4f}, non-accident share {share:.4f}")
