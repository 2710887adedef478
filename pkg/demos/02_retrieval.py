"""Clause retrieval: ranking, temperature and the context block."""

# %%
import numpy as np

from tara_forge.llm_client import HashEmbedder
from tara_forge.rag import assemble_context, build_index, retrieve, retrieve_vector, sample_clauses

embedder = HashEmbedder(64)
index = build_index(sample_clauses(), embedder)
print(index.embeddings.shape, index.fingerprint)

# %% Top three clauses for a description of a crash
query = "A pedestrian crossed the road away from the crossing and was hit by a car."
clauses, scores = retrieve(query, index, embedder, k=3)
for c, s in zip(clauses, scores):
    print(f"{s:+.3f}  {c.article_label}")

# %% The temperature rescales scores but never reorders them
for tau in (0.1, 1.0, 10.0):
    clauses, scores = retrieve(query, index, embedder, k=3, tau=tau)
    print(tau, [c.clause_id for c in clauses], np.round(scores, 3))

# %% A stored row retrieves itself with score 1 / tau
clauses, scores = retrieve_vector(index.embeddings[4], index, k=1, tau=0.5)
print(clauses[0].clause_id, scores[0])

# %% What the allocation prompt receives
print(assemble_context(retrieve(query, index, embedder, k=2)[0]))
