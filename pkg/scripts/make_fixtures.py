"""Regenerate the synthetic files in fixtures/ from their seeds."""

from pathlib import Path

from sdsat.data import code_corpus, markov_corpus, periodic_corpus, prompts_from

out = Path(__file__).resolve().parent.parent / "fixtures"
out.mkdir(exist_ok=True)

periodic = periodic_corpus(n_docs=12, doc_len=96, seed=0)
(out / "periodic.txt").write_text("\n".join(periodic) + "\n")
(out / "prompts_periodic.txt").write_text("\n".join(d[:16] for d in periodic) + "\n")

code = code_corpus(n_docs=400, seed=0)
(out / "code.txt").write_text("\n".join(code) + "\n")
(out / "prompts_code.txt").write_text("\n".join(prompts_from(code_corpus(60, seed=1), 24, 50, seed=2)) + "\n")

seqs = markov_corpus(7, n_seqs=300, length=24, seed=4)
(out / "markov8.txt").write_text("\n".join(" ".join(map(str, s)) for s in seqs) + "\n")
(out / "prompts_markov8.txt").write_text("0 3\n1 5\n2 6\n")
