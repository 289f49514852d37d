"""Expert utilisation of the MoE duration predictor with and without the balance term.

Trains the duration predictor alone on toy-corpus alignments for ``alpha`` in
{0, 0.01} and prints the mean argmax-assignment entropy of the final steps next
to ``ln N``. Usage: ``python3 demos/load_balance.py [steps]``.
"""

import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from moetts import data, moe, training
from moetts.textgrid import parse_textgrid


def alignment_items(root: Path):
    records, errors, _ = data.scan_corpus(root)
    if errors:
        raise SystemExit("\n".join(errors))
    items = []
    for path, spk, ids, _, _ in records:
        iv = parse_textgrid(path.with_suffix(".TextGrid"), keep_silence=True)
        items.append((ids, spk, [max(1, round(d * data.SAMPLE_RATE / data.HOP)) for d in iv.durations()]))
    return items


def main(steps: int) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        data.make_toy_corpus(tmp, n_train=50, n_heldout=0, seed=0)
        items = alignment_items(Path(tmp))
    for alpha in (0.0, 0.01):
        _, records = training.train_duration_model(items, len(data.TOY_PHONES), 3, alpha, steps, seed=0)
        tail = records[-min(100, len(records)):]
        ent = np.mean([moe.assignment_entropy(c) for r in tail for c in r["counts"]])
        counts = np.sum([r["counts"][0] for r in tail], axis=0)
        print(f"alpha={alpha:<5} entropy={ent:.3f} (ln 8 = {math.log(8):.3f}) "
              f"block-0 counts={counts.tolist()} L_dur={np.mean([r['mas'] for r in tail]):.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 300)
