"""Prosody accuracy and duration JS divergence between alignment sets.

Builds a "system" whose durations are the ground truth stretched for one
speaker, runs ``eval-prosody`` against the toy TextGrids and renders the
per-speaker duration overlays. Usage: ``python3 demos/prosody_js.py [workdir]``.
"""

import json
import shutil
import sys
from pathlib import Path

from moetts import cli, data, evaluation
from moetts.textgrid import parse_textgrid


def main(work: Path) -> None:
    corpus = work / "toy"
    data.make_toy_corpus(corpus, n_train=30, n_heldout=0, seed=1)
    gt, system = work / "gt", work / "stretched"
    for tg in sorted(corpus.glob("spk*/*.TextGrid")):
        spk = tg.parent.name
        (gt / spk).mkdir(parents=True, exist_ok=True)
        (system / spk).mkdir(parents=True, exist_ok=True)
        shutil.copy(tg, gt / spk / tg.name)
        iv = parse_textgrid(tg, keep_silence=True)
        stretch = 1.5 if spk == "spk2" else 1.0
        frames = [max(1, round(stretch * d * data.SAMPLE_RATE / data.HOP)) for d in iv.durations()]
        evaluation.write_sidecar(system / spk / f"{tg.stem}.dur.tsv", iv.labels(), frames)

    out = work / "prosody"
    cli.main(["eval-prosody", "--gt", str(gt), "--system", f"stretched={system}", "--out-dir", str(out)])
    print(json.dumps(json.loads((out / "prosody_report.json").read_text())["systems"], indent=2))
    for spk in ("spk0", "spk2"):
        cli.main(["plot", "--exports", str(out / f"dist_gt_{spk}.tsv"), str(out / f"dist_stretched_{spk}.tsv"),
                  "--out", str(work / "plots" / f"durations_{spk}.png")])


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_work"))
