"""End-to-end text pipeline on a tiny synthetic corpus: vocabulary,
distance-weighted counting, the log(count+1) transform, per-row moments,
dispersion fitting, training, and nearest-neighbor queries.

Run: python demos/demo_text_pipeline.py
"""

import os
import tempfile

import numpy as np

from tweedievec import (ConvergenceConfig, TrainConfig, apply_log1p,
                        build_vocab, compute_row_stats, count_cooccurrences,
                        fit_table, assign, init_params, train)
from tweedievec.cli import neighbors_of

# a small corpus with planted structure: "cat"/"dog" share contexts
rng = np.random.default_rng(3)
animals = ["cat", "dog"]
verbs = ["sat", "ran", "slept"]
places = ["mat", "rug", "yard"]
sentences = []
for _ in range(400):
    a = animals[rng.integers(2)]
    v = verbs[rng.integers(3)]
    p = places[rng.integers(3)]
    sentences.append(["the", a, v, "on", "the", p])

workdir = tempfile.mkdtemp(prefix="tweedievec-demo-")
vocab = build_vocab(sentences)
print(f"vocabulary ({len(vocab)}):", vocab.tokens)

raw = count_cooccurrences(sentences, vocab, window=4,
                          out_path=os.path.join(workdir, "raw.cooc"))
store = apply_log1p(raw, os.path.join(workdir, "log.cooc"))
print(f"counted {store.n_records} nonzero cells "
      f"({store.n_records / store.n ** 2:.0%} dense)")

stats = compute_row_stats(store)
table = fit_table(stats)
for k, iv in enumerate(table.intervals):
    flag = " (flagged)" if iv.flagged else ""
    print(f"interval {k}: log-mean [{iv.lo:.2f}, {iv.hi:.2f}) "
          f"p_hat={iv.p_hat:.3f} delta_hat={iv.delta_hat:.3f} "
          f"n={iv.n_points}{flag}")
disp = assign(table, stats)

params = init_params(store.n, d=4, seed=1)
cfg = TrainConfig(n_epoch=5, optimizer="fisher_lr",
                  convergence=ConvergenceConfig(epsilon=1e-5, maxit=40))
params, history = train(store, params, disp, cfg,
                        progress=lambda r: print(
                            f"  iter {r.iteration}: loss {r.loss:.3f} "
                            f"rel {r.rel_change:.2e}"))
print(f"{'converged' if history.converged else 'stopped'} "
      f"after {history.records[-1].iteration} iterations")

vectors = 0.5 * (params.W + params.Wt)
for query in ("mat", "sat"):  # the planted place and verb clusters
    hits = neighbors_of(vocab.tokens, vectors, query, 2)
    print(f"nearest to {query!r}:",
          ", ".join(f"{t} ({s:.3f})" for t, s in hits))
